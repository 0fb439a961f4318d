//! Local training.
//!
//! [`Trainer`] is the plug-in point for client-side learners. The reference
//! [`LogisticTrainer`] runs mini-batch SGD on the binary cross-entropy of a
//! logistic model with one `weights` layer of `d` entries and one `bias`
//! layer of a single entry.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::fixedpoint::MAX_MAGNITUDE;
use crate::masking::keystream::WordStream;
use crate::model::{ModelSchema, ModelVector};

pub const WEIGHTS: &str = "weights";
pub const BIAS: &str = "bias";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainerError {
    #[error("no training rows")]
    EmptyDataset,
    #[error("parameter left the encodable range after epoch {epoch}")]
    Divergence { epoch: u64 },
    #[error("model schema does not match a {dim}-feature logistic model")]
    SchemaMismatch { dim: usize },
    #[error("invalid trainer config: {0}")]
    Config(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub local_epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig { learning_rate: 0.01, local_epochs: 1, batch_size: 32, seed: 0 }
    }
}

impl TrainerConfig {
    /// Learning rate must be positive; zero is accepted as the identity
    /// trainer used by protocol tests.
    pub fn validate(&self) -> Result<(), TrainerError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainerError::Config("learning_rate must be finite and >= 0"));
        }
        if self.local_epochs == 0 {
            return Err(TrainerError::Config("local_epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(TrainerError::Config("batch_size must be positive"));
        }
        Ok(())
    }
}

pub trait Trainer {
    /// Schema of the model this trainer learns on `dim`-feature data.
    fn schema(&self, dim: usize) -> ModelSchema;

    /// Run `cfg.local_epochs` passes over `rows` of `data`, starting from
    /// `model`. Pass `k` is numbered `first_epoch + k` for shuffle seeding.
    fn train(
        &self,
        model: &ModelVector,
        data: &Dataset,
        rows: &[usize],
        cfg: &TrainerConfig,
        first_epoch: u64,
    ) -> Result<ModelVector, TrainerError>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LogisticTrainer;

impl Trainer for LogisticTrainer {
    fn schema(&self, dim: usize) -> ModelSchema {
        logistic_schema(dim)
    }

    fn train(
        &self,
        model: &ModelVector,
        data: &Dataset,
        rows: &[usize],
        cfg: &TrainerConfig,
        first_epoch: u64,
    ) -> Result<ModelVector, TrainerError> {
        cfg.validate()?;
        let (mut w, mut b) = split_params(model, data.dim)?;
        if rows.is_empty() {
            return Err(TrainerError::EmptyDataset);
        }
        let mut grad_w = vec![0.0; data.dim];
        for k in 0..cfg.local_epochs as u64 {
            let epoch = first_epoch + k;
            let mut order = rows.to_vec();
            WordStream::from_seed(cfg.seed ^ epoch).shuffle(&mut order);
            for batch in order.chunks(cfg.batch_size) {
                let grad_b = accumulate_gradient(&w, b, data, batch, &mut grad_w);
                for (wi, gi) in w.iter_mut().zip(&grad_w) {
                    *wi -= cfg.learning_rate * gi;
                }
                b -= cfg.learning_rate * grad_b;
            }
            let in_range = |x: &f64| x.is_finite() && x.abs() < MAX_MAGNITUDE;
            if !(w.iter().all(in_range) && in_range(&b)) {
                return Err(TrainerError::Divergence { epoch });
            }
        }
        Ok(logistic_model(w, b))
    }
}

pub fn logistic_schema(dim: usize) -> ModelSchema {
    ModelSchema { layers: vec![(WEIGHTS.into(), dim), (BIAS.into(), 1)] }
}

pub fn logistic_model(weights: Vec<f64>, bias: f64) -> ModelVector {
    ModelVector::new(vec![(WEIGHTS.into(), weights), (BIAS.into(), vec![bias])])
}

fn split_params(m: &ModelVector, dim: usize) -> Result<(Vec<f64>, f64), TrainerError> {
    if m.schema() != logistic_schema(dim) {
        return Err(TrainerError::SchemaMismatch { dim });
    }
    Ok((m.layers[0].params.clone(), m.layers[1].params[0]))
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logit(w: &[f64], b: f64, x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b
}

/// Mean gradient over `batch`; weights part written to `grad_w`, bias
/// part returned.
fn accumulate_gradient(w: &[f64], b: f64, data: &Dataset, batch: &[usize], grad_w: &mut [f64]) -> f64 {
    grad_w.iter_mut().for_each(|g| *g = 0.0);
    let mut grad_b = 0.0;
    for &i in batch {
        let row = &data.rows[i];
        let residual = sigmoid(logit(w, b, &row.features)) - row.label as f64;
        for (g, x) in grad_w.iter_mut().zip(&row.features) {
            *g += residual * x;
        }
        grad_b += residual;
    }
    let n = batch.len() as f64;
    grad_w.iter_mut().for_each(|g| *g /= n);
    grad_b / n
}

/// σ(w·x + b) for a logistic model.
pub fn predict(m: &ModelVector, features: &[f64]) -> Result<f64, TrainerError> {
    let (w, b) = split_params(m, features.len())?;
    Ok(sigmoid(logit(&w, b, features)))
}

/// Mean binary cross-entropy gradient over `batch`, shaped like `m`.
pub fn logistic_loss_gradient(m: &ModelVector, data: &Dataset, batch: &[usize]) -> Result<ModelVector, TrainerError> {
    let (w, b) = split_params(m, data.dim)?;
    if batch.is_empty() {
        return Err(TrainerError::EmptyDataset);
    }
    let mut grad_w = vec![0.0; data.dim];
    let grad_b = accumulate_gradient(&w, b, data, batch, &mut grad_w);
    Ok(logistic_model(grad_w, grad_b))
}

/// Mean binary cross-entropy over `rows`.
pub fn logistic_loss(m: &ModelVector, data: &Dataset, rows: &[usize]) -> Result<f64, TrainerError> {
    let (w, b) = split_params(m, data.dim)?;
    if rows.is_empty() {
        return Err(TrainerError::EmptyDataset);
    }
    let total: f64 = rows
        .iter()
        .map(|&i| {
            let row = &data.rows[i];
            let z = logit(&w, b, &row.features);
            // log(1 + e^z) - y z
            let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
            softplus - row.label as f64 * z
        })
        .sum();
    Ok(total / rows.len() as f64)
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;
    use crate::dataset::Row;
    use proptest::prelude::*;

    fn dataset(points: &[(&[f64], u8)]) -> Dataset {
        Dataset::new(
            points[0].0.len(),
            points
                .iter()
                .map(|(x, y)| Row { features: x.to_vec(), label: *y, attributes: Default::default() })
                .collect(),
        )
        .unwrap()
    }

    fn random_dataset(seed: u64, rows: usize, dim: usize) -> Dataset {
        let mut s = WordStream::from_seed(seed);
        Dataset::new(
            dim,
            (0..rows)
                .map(|_| {
                    let label = s.below(2) as u8;
                    let shift = if label == 1 { 0.7 } else { -0.7 };
                    Row {
                        features: (0..dim).map(|_| s.next_gaussian() + shift).collect(),
                        label,
                        attributes: Default::default(),
                    }
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn predict_examples() {
        let zero = ModelVector::zeros(&logistic_schema(3));
        assert_eq!(predict(&zero, &[4.0, -1.0, 2.0]).unwrap(), 0.5);
        assert_eq!(predict(&logistic_model(vec![1.0], 0.0), &[0.0]).unwrap(), 0.5);
        let p = predict(&logistic_model(vec![2.0, -1.0], 0.5), &[1.0, 1.0]).unwrap();
        // σ(1.5) = 1 / (1 + e^-1.5)
        assert!((p - 0.817_574_476_193_643_7).abs() < 1e-15);
        assert!(predict(&zero, &[1.0]).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(-30.0) - 9.357_622_968_839_299e-14).abs() < 1e-27);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let data = random_dataset(1, 50, 3);
        let m = logistic_model(vec![0.25, -1.5, 3.0], 0.125);
        let cfg = TrainerConfig { learning_rate: 0.0, local_epochs: 3, ..Default::default() };
        let rows: Vec<usize> = (0..50).collect();
        let out = LogisticTrainer.train(&m, &data, &rows, &cfg, 0).unwrap();
        assert!(out.bit_eq(&m));
    }

    #[test]
    fn zero_features_move_only_bias() {
        let data = dataset(&[(&[0.0, 0.0], 0)]);
        let b = 0.3;
        let m = logistic_model(vec![0.7, -0.2], b);
        let cfg = TrainerConfig { learning_rate: 0.1, local_epochs: 1, batch_size: 1, seed: 0 };
        let out = LogisticTrainer.train(&m, &data, &[0], &cfg, 0).unwrap();
        assert_eq!(out.layer(WEIGHTS).unwrap(), &[0.7, -0.2]);
        assert_eq!(out.layer(BIAS).unwrap()[0], b - 0.1 * sigmoid(b));
    }

    #[test]
    fn four_point_gradient_oracle() {
        // Frozen from a 40-digit mpmath evaluation.
        let data = dataset(&[(&[1.0, 2.0], 1), (&[-1.0, 0.5], 0), (&[0.3, -0.7], 1), (&[2.0, 1.0], 0)]);
        let m = logistic_model(vec![0.5, -0.25], 0.1);
        let g = logistic_loss_gradient(&m, &data, &[0, 1, 2, 3]).unwrap();
        let gw = g.layer(WEIGHTS).unwrap();
        assert!((gw[0] - 0.108_958_346_534_113_733_2).abs() < 1e-15);
        assert!((gw[1] - 0.053_273_015_996_090_810_66).abs() < 1e-15);
        assert!((g.layer(BIAS).unwrap()[0] - 0.050_477_306_592_889_019_38).abs() < 1e-15);
        let loss = logistic_loss(&m, &data, &[0, 1, 2, 3]).unwrap();
        assert!((loss - 0.704_507_720_840_390_161_2).abs() < 1e-15);
    }

    #[test]
    fn gradient_vanishes_when_prediction_equals_label_probability() {
        // A single point whose soft label equals the prediction has zero
        // residual; emulate with two copies of x carrying labels 0 and 1 at
        // the model where σ(z) = 1/2.
        let data = dataset(&[(&[1.5, -2.0], 0), (&[1.5, -2.0], 1)]);
        let m = logistic_model(vec![2.0, 1.5], 0.0);
        let g = logistic_loss_gradient(&m, &data, &[0, 1]).unwrap();
        assert!(g.params().all(|x| x.abs() < 1e-15));
    }

    /// Straightforward SGD written independently of the trainer.
    fn oracle_sgd(w0: &[f64], b0: f64, data: &Dataset, order: &[usize], lr: f64, bs: usize) -> (Vec<f64>, f64) {
        let mut w = w0.to_vec();
        let mut b = b0;
        let mut start = 0;
        while start < order.len() {
            let end = (start + bs).min(order.len());
            let mut gw = vec![0.0; w.len()];
            let mut gb = 0.0;
            for &i in &order[start..end] {
                let x = &data.rows[i].features;
                let mut z = b;
                for j in 0..w.len() {
                    z += w[j] * x[j];
                }
                let r = 1.0 / (1.0 + (-z).exp()) - data.rows[i].label as f64;
                for j in 0..w.len() {
                    gw[j] += r * x[j];
                }
                gb += r;
            }
            let n = (end - start) as f64;
            for j in 0..w.len() {
                w[j] -= lr * gw[j] / n;
            }
            b -= lr * gb / n;
            start = end;
        }
        (w, b)
    }

    #[test]
    fn one_epoch_matches_oracle_sgd() {
        let data = random_dataset(11, 200, 4);
        let rows: Vec<usize> = (0..200).collect();
        let cfg = TrainerConfig { learning_rate: 0.05, local_epochs: 1, batch_size: 32, seed: 99 };
        let w0 = vec![0.1, -0.1, 0.2, 0.0];
        let out = LogisticTrainer.train(&logistic_model(w0.clone(), 0.05), &data, &rows, &cfg, 0).unwrap();
        let mut order = rows.clone();
        WordStream::from_seed(99).shuffle(&mut order);
        let (w, b) = oracle_sgd(&w0, 0.05, &data, &order, 0.05, 32);
        let expected = logistic_model(w, b);
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_and_seed_sensitive() {
        let data = random_dataset(12, 100, 3);
        let rows: Vec<usize> = (0..100).collect();
        let m = ModelVector::zeros(&logistic_schema(3));
        let cfg = TrainerConfig { local_epochs: 2, batch_size: 8, ..Default::default() };
        let a = LogisticTrainer.train(&m, &data, &rows, &cfg, 4).unwrap();
        let b = LogisticTrainer.train(&m, &data, &rows, &cfg, 4).unwrap();
        assert!(a.bit_eq(&b));
        let c = LogisticTrainer.train(&m, &data, &rows, &cfg, 5).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn error_paths() {
        let data = random_dataset(13, 10, 2);
        let m = ModelVector::zeros(&logistic_schema(2));
        let cfg = TrainerConfig::default();
        assert_eq!(LogisticTrainer.train(&m, &data, &[], &cfg, 0), Err(TrainerError::EmptyDataset));
        let wrong = ModelVector::zeros(&logistic_schema(3));
        assert_eq!(LogisticTrainer.train(&wrong, &data, &[0], &cfg, 0), Err(TrainerError::SchemaMismatch { dim: 2 }));
        let huge = logistic_model(vec![1e300, 1e300], 0.0);
        let hot = TrainerConfig { learning_rate: 1e300, ..Default::default() };
        assert!(matches!(
            LogisticTrainer.train(&huge, &data, &[0, 1, 2], &hot, 0),
            Err(TrainerError::Divergence { epoch: 0 })
        ));
        let neg = TrainerConfig { learning_rate: -1.0, ..Default::default() };
        assert!(matches!(LogisticTrainer.train(&m, &data, &[0], &neg, 0), Err(TrainerError::Config(_))));
    }

    #[test]
    fn full_batch_loss_is_non_increasing() {
        let data = crate::datadist::generate_synthetic(&crate::datadist::SyntheticSpec {
            rows: 2000,
            dim: 10,
            separation: 2.0,
            age_label_correlation: 0.3,
            seed: 42,
        })
        .unwrap();
        let rows: Vec<usize> = (0..data.len()).collect();
        let cfg = TrainerConfig { batch_size: rows.len(), ..Default::default() };
        let mut m = ModelVector::zeros(&logistic_schema(10));
        let mut prev = logistic_loss(&m, &data, &rows).unwrap();
        for epoch in 0..30 {
            m = LogisticTrainer.train(&m, &data, &rows, &cfg, epoch).unwrap();
            let loss = logistic_loss(&m, &data, &rows).unwrap();
            assert!(loss <= prev, "epoch {epoch}: {loss} > {prev}");
            prev = loss;
        }
    }

    /// Relative error with an absolute floor for near-zero coordinates.
    pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn gradient_matches_central_differences(seed in any::<u64>(), size in 1usize..20) {
            let data = random_dataset(seed, size, 3);
            let mut s = WordStream::from_seed(seed ^ 0xABCD);
            let m = logistic_model((0..3).map(|_| s.next_gaussian()).collect(), s.next_gaussian());
            let rows: Vec<usize> = (0..size).collect();
            let g = logistic_loss_gradient(&m, &data, &rows).unwrap();
            let h = 1e-6;
            for (k, analytic) in g.params().enumerate() {
                let mut plus = m.clone();
                let mut minus = m.clone();
                bump(&mut plus, k, h);
                bump(&mut minus, k, -h);
                let numeric = (logistic_loss(&plus, &data, &rows).unwrap()
                    - logistic_loss(&minus, &data, &rows).unwrap()) / (2.0 * h);
                prop_assert!(rel_err(*analytic, numeric) < 1e-5, "{} vs {}", analytic, numeric);
            }
        }
    }

    pub(crate) fn bump(m: &mut ModelVector, k: usize, h: f64) {
        let mut idx = k;
        for layer in &mut m.layers {
            if idx < layer.params.len() {
                layer.params[idx] += h;
                return;
            }
            idx -= layer.params.len();
        }
    }
}
