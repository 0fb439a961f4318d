use serde::{Deserialize, Serialize};

/// One named layer of real-valued parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub params: Vec<f64>,
}

/// Ordered list of named layers; the unit every protocol step operates on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelVector {
    pub layers: Vec<Layer>,
}

/// Layer names and lengths shared by every participant in a session.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSchema {
    pub layers: Vec<(String, usize)>,
}

impl ModelVector {
    pub fn new(layers: Vec<(String, Vec<f64>)>) -> Self {
        ModelVector { layers: layers.into_iter().map(|(name, params)| Layer { name, params }).collect() }
    }

    pub fn zeros(schema: &ModelSchema) -> Self {
        ModelVector {
            layers: schema
                .layers
                .iter()
                .map(|(name, len)| Layer { name: name.clone(), params: vec![0.0; *len] })
                .collect(),
        }
    }

    pub fn schema(&self) -> ModelSchema {
        ModelSchema { layers: self.layers.iter().map(|l| (l.name.clone(), l.params.len())).collect() }
    }

    pub fn layer(&self, name: &str) -> Option<&[f64]> {
        self.layers.iter().find(|l| l.name == name).map(|l| l.params.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.params.len()).sum()
    }

    /// Bit-level equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &ModelVector) -> bool {
        self.schema() == other.schema() && self.params().zip(other.params()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute per-coordinate difference; `None` if schemas differ.
    pub fn max_abs_diff(&self, other: &ModelVector) -> Option<f64> {
        if self.schema() != other.schema() {
            return None;
        }
        Some(self.params().zip(other.params()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }
}

impl ModelSchema {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(_, n)| n).sum()
    }
}
