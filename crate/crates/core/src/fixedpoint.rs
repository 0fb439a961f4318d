//! Fixed-point encoding of model parameters.
//!
//! Every parameter is carried as a signed 64-bit word scaled by 2^24. Words
//! add modulo 2^64, which is what lets pairwise masks cancel exactly when the
//! coordinator sums the clients' payloads.

use std::fmt;

use thiserror::Error;

use crate::model::ModelVector;

/// Number of fractional bits in a [`FixedWord`].
pub const FRACTIONAL_BITS: u32 = 24;

/// The protocol's fixed scale, 2^24.
pub const SCALE: f64 = (1u64 << FRACTIONAL_BITS) as f64;

/// Exclusive bound on the magnitude of an encodable real, 2^39.
pub const MAX_MAGNITUDE: f64 = (1u64 << 39) as f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FixedPointError {
    #[error("value {value} is outside the encodable range (|x| < 2^39)")]
    Range { value: f64 },
    #[error("value {value} is not finite")]
    Domain { value: f64 },
    #[error("parameter {index} of layer `{layer}`: {source}")]
    Parameter {
        layer: String,
        index: usize,
        #[source]
        source: Box<FixedPointError>,
    },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
}

/// A two's-complement 64-bit word holding `real * 2^24`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FixedWord(pub i64);

impl FixedWord {
    pub const ZERO: FixedWord = FixedWord(0);

    #[inline]
    pub fn wrapping_add(self, other: FixedWord) -> FixedWord {
        FixedWord(self.0.wrapping_add(other.0))
    }

    #[inline]
    pub fn wrapping_sub(self, other: FixedWord) -> FixedWord {
        FixedWord(self.0.wrapping_sub(other.0))
    }

    #[inline]
    pub fn wrapping_neg(self) -> FixedWord {
        FixedWord(self.0.wrapping_neg())
    }

    #[inline]
    pub fn to_le_bytes(self) -> [u8; 8] {
        self.0.to_le_bytes()
    }

    #[inline]
    pub fn from_le_bytes(bytes: [u8; 8]) -> FixedWord {
        FixedWord(i64::from_le_bytes(bytes))
    }
}

impl From<u64> for FixedWord {
    fn from(raw: u64) -> Self {
        FixedWord(raw as i64)
    }
}

impl fmt::Display for FixedWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Encode a real as the nearest multiple of 2^-24, ties to even.
pub fn encode(x: f64) -> Result<FixedWord, FixedPointError> {
    if !x.is_finite() {
        return Err(FixedPointError::Domain { value: x });
    }
    if x.abs() >= MAX_MAGNITUDE {
        return Err(FixedPointError::Range { value: x });
    }
    // Scaling by a power of two is exact, so the only rounding is here.
    let scaled = (x * SCALE).round_ties_even();
    Ok(FixedWord(scaled as i64))
}

/// Decode a word back to a real.
///
/// Exact for every word produced by [`encode`]. Words with more than 53
/// significant bits (e.g. masked payloads) round to the nearest binary64.
#[inline]
pub fn decode(w: FixedWord) -> f64 {
    w.0 as f64 / SCALE
}

/// Layer-structured fixed-point model; the only representation on the wire.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FixedModel {
    pub layers: Vec<FixedLayer>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FixedLayer {
    pub name: String,
    pub words: Vec<FixedWord>,
}

impl FixedModel {
    pub fn new(layers: Vec<FixedLayer>) -> Self {
        FixedModel { layers }
    }

    /// A zero model with the same schema as `self`.
    pub fn zeros_like(&self) -> FixedModel {
        FixedModel {
            layers: self
                .layers
                .iter()
                .map(|l| FixedLayer { name: l.name.clone(), words: vec![FixedWord::ZERO; l.words.len()] })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.words.len()).sum()
    }

    pub fn words(&self) -> impl Iterator<Item = &FixedWord> {
        self.layers.iter().flat_map(|l| l.words.iter())
    }

    pub fn words_mut(&mut self) -> impl Iterator<Item = &mut FixedWord> {
        self.layers.iter_mut().flat_map(|l| l.words.iter_mut())
    }

    /// Checks layer names, order, and lengths against `other`.
    pub fn check_schema(&self, other: &FixedModel) -> Result<(), FixedPointError> {
        if self.layers.len() != other.layers.len() {
            return Err(FixedPointError::SchemaMismatch(format!(
                "{} layers vs {}",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.name != b.name || a.words.len() != b.words.len() {
                return Err(FixedPointError::SchemaMismatch(format!(
                    "layer `{}`[{}] vs `{}`[{}]",
                    a.name,
                    a.words.len(),
                    b.name,
                    b.words.len()
                )));
            }
        }
        Ok(())
    }

    /// Element-wise two's-complement negation.
    pub fn wrapping_neg(&self) -> FixedModel {
        let mut out = self.clone();
        out.words_mut().for_each(|w| *w = w.wrapping_neg());
        out
    }

    /// In-place element-wise addition modulo 2^64.
    pub fn wrapping_add_assign(&mut self, other: &FixedModel) -> Result<(), FixedPointError> {
        self.check_schema(other)?;
        for (a, b) in self.words_mut().zip(other.words()) {
            *a = a.wrapping_add(*b);
        }
        Ok(())
    }
}

/// Element-wise addition modulo 2^64.
pub fn wrapping_add(a: &FixedModel, b: &FixedModel) -> Result<FixedModel, FixedPointError> {
    let mut out = a.clone();
    out.wrapping_add_assign(b)?;
    Ok(out)
}

/// Encode every parameter of `m`, preserving layer order.
pub fn encode_model(m: &ModelVector) -> Result<FixedModel, FixedPointError> {
    let layers = m
        .layers
        .iter()
        .map(|layer| {
            let words = layer
                .params
                .iter()
                .enumerate()
                .map(|(index, &x)| {
                    encode(x).map_err(|e| FixedPointError::Parameter {
                        layer: layer.name.clone(),
                        index,
                        source: Box::new(e),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(FixedLayer { name: layer.name.clone(), words })
        })
        .collect::<Result<Vec<_>, FixedPointError>>()?;
    Ok(FixedModel { layers })
}

pub fn decode_model(m: &FixedModel) -> ModelVector {
    ModelVector::new(m.layers.iter().map(|l| (l.name.clone(), l.words.iter().map(|&w| decode(w)).collect())).collect())
}
