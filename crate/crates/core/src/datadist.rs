//! Client data-distribution regimes and the synthetic stand-in dataset.
//!
//! All randomness comes from [`WordStream::from_seed`], so a plan depends
//! only on the dataset, the parameters and the seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Dataset, Row};
use crate::masking::keystream::WordStream;
use crate::masking::ClientId;

pub const AGE: &str = "age";

/// Age bands (inclusive) for the non-IID regime. Bands past the last
/// client are merged into it.
pub const DEFAULT_AGE_BANDS: [(f64, f64); 6] =
    [(0.0, 30.0), (31.0, 44.0), (45.0, 58.0), (59.0, 72.0), (73.0, 86.0), (87.0, 90.0)];

pub const DEFAULT_SHIFT_BOUNDARY: f64 = 60.0;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplitError {
    #[error("{rows} rows cannot be split across {clients} clients")]
    TooFewRows { rows: usize, clients: usize },
    #[error("client count must be at least 1")]
    NoClients,
    #[error("test fraction {0} outside [0, 1)")]
    TestFraction(f64),
    #[error("row {0} has no attribute `{1}`")]
    MissingAttribute(usize, String),
    #[error("attribute value {0} is not covered by any band")]
    UncoveredValue(f64),
    #[error("{bands} bands for {clients} clients; need at least one band per client")]
    TooFewBands { bands: usize, clients: usize },
    #[error("client {0} received no rows")]
    EmptyClientPartition(ClientId),
    #[error("the {0} pool is empty")]
    EmptyPool(Side),
    #[error("invalid synthetic spec: {0}")]
    Synthetic(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Train,
    Test,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Train => "train",
            Side::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Iid,
    NonIidByAttribute,
    IidShiftedTrainTest,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Iid => "iid",
            Regime::NonIidByAttribute => "non_iid_by_attribute",
            Regime::IidShiftedTrainTest => "iid_shifted_train_test",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientRows {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub regime: Regime,
    pub clients: Vec<ClientRows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bands: Vec<(f64, f64)>,
    /// Client receiving each band, parallel to `bands`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub band_clients: Vec<ClientId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift_boundary: Option<f64>,
}

impl SplitPlan {
    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    pub fn all_train(&self) -> Vec<usize> {
        self.clients.iter().flat_map(|c| c.train.iter().copied()).collect()
    }

    pub fn all_test(&self) -> Vec<usize> {
        self.clients.iter().flat_map(|c| c.test.iter().copied()).collect()
    }

    /// Export shape: `{"0": {"train": [...], "test": [...]}, ...}`.
    pub fn export_json(&self) -> serde_json::Value {
        let map: BTreeMap<String, &ClientRows> =
            self.clients.iter().enumerate().map(|(i, c)| (i.to_string(), c)).collect();
        serde_json::to_value(map).expect("plain data serializes")
    }

    /// SHA-256 over the canonical export.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.export_json().to_string().as_bytes()))
    }

    /// Checks pairwise disjointness and that every index is a valid row.
    pub fn check_invariants(&self, rows: usize) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for (id, c) in self.clients.iter().enumerate() {
            for &r in c.train.iter().chain(&c.test) {
                if r >= rows {
                    return Err(format!("client {id}: row {r} out of range"));
                }
                if !seen.insert(r) {
                    return Err(format!("client {id}: row {r} assigned twice"));
                }
            }
        }
        Ok(())
    }
}

fn check_fraction(test_fraction: f64) -> Result<(), SplitError> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(SplitError::TestFraction(test_fraction));
    }
    Ok(())
}

/// `n` contiguous chunks whose sizes differ by at most one; larger first.
fn chunk(rows: &[usize], n: usize) -> Vec<Vec<usize>> {
    let base = rows.len() / n;
    let extra = rows.len() % n;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let size = base + usize::from(i < extra);
        out.push(rows[start..start + size].to_vec());
        start += size;
    }
    out
}

/// The last ⌈fraction · len⌉ rows become test rows.
fn train_test(rows: Vec<usize>, test_fraction: f64) -> ClientRows {
    let n_test = (test_fraction * rows.len() as f64).ceil() as usize;
    let cut = rows.len() - n_test.min(rows.len());
    let mut train = rows;
    let test = train.split_off(cut);
    ClientRows { train, test }
}

pub fn split_iid(data: &Dataset, n: usize, seed: u64, test_fraction: f64) -> Result<SplitPlan, SplitError> {
    if n == 0 {
        return Err(SplitError::NoClients);
    }
    check_fraction(test_fraction)?;
    if data.len() < n {
        return Err(SplitError::TooFewRows { rows: data.len(), clients: n });
    }
    let mut rows: Vec<usize> = (0..data.len()).collect();
    WordStream::from_seed(seed).shuffle(&mut rows);
    let clients = chunk(&rows, n).into_iter().map(|c| train_test(c, test_fraction)).collect();
    Ok(SplitPlan {
        regime: Regime::Iid,
        clients,
        attribute: None,
        bands: Vec::new(),
        band_clients: Vec::new(),
        shift_boundary: None,
    })
}

fn attribute_of(data: &Dataset, row: usize, attribute: &str) -> Result<f64, SplitError> {
    data.attribute(row, attribute).ok_or_else(|| SplitError::MissingAttribute(row, attribute.to_owned()))
}

/// Band `b` goes to client `min(b, n - 1)`.
pub fn band_clients(bands: usize, n: usize) -> Vec<ClientId> {
    (0..bands).map(|b| b.min(n - 1) as ClientId).collect()
}

pub fn split_non_iid_by_attribute(
    data: &Dataset,
    n: usize,
    attribute: &str,
    bands: &[(f64, f64)],
    seed: u64,
    test_fraction: f64,
) -> Result<SplitPlan, SplitError> {
    if n == 0 {
        return Err(SplitError::NoClients);
    }
    check_fraction(test_fraction)?;
    if bands.len() < n {
        return Err(SplitError::TooFewBands { bands: bands.len(), clients: n });
    }
    let owners = band_clients(bands.len(), n);
    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); n];
    for row in 0..data.len() {
        let v = attribute_of(data, row, attribute)?;
        let band = bands.iter().position(|&(lo, hi)| lo <= v && v <= hi).ok_or(SplitError::UncoveredValue(v))?;
        per_client[owners[band] as usize].push(row);
    }
    if let Some(empty) = per_client.iter().position(Vec::is_empty) {
        return Err(SplitError::EmptyClientPartition(empty as ClientId));
    }
    let mut stream = WordStream::from_seed(seed);
    let clients = per_client
        .into_iter()
        .map(|mut rows| {
            stream.shuffle(&mut rows);
            train_test(rows, test_fraction)
        })
        .collect();
    Ok(SplitPlan {
        regime: Regime::NonIidByAttribute,
        clients,
        attribute: Some(attribute.to_owned()),
        bands: bands.to_vec(),
        band_clients: owners,
        shift_boundary: None,
    })
}

pub fn split_iid_shifted(
    data: &Dataset,
    n: usize,
    attribute: &str,
    boundary: f64,
    seed: u64,
) -> Result<SplitPlan, SplitError> {
    if n == 0 {
        return Err(SplitError::NoClients);
    }
    let mut train_pool = Vec::new();
    let mut test_pool = Vec::new();
    for row in 0..data.len() {
        if attribute_of(data, row, attribute)? >= boundary {
            train_pool.push(row);
        } else {
            test_pool.push(row);
        }
    }
    for (pool, side) in [(&train_pool, Side::Train), (&test_pool, Side::Test)] {
        if pool.is_empty() {
            return Err(SplitError::EmptyPool(side));
        }
        if pool.len() < n {
            return Err(SplitError::TooFewRows { rows: pool.len(), clients: n });
        }
    }
    let mut stream = WordStream::from_seed(seed);
    stream.shuffle(&mut train_pool);
    stream.shuffle(&mut test_pool);
    let clients = chunk(&train_pool, n)
        .into_iter()
        .zip(chunk(&test_pool, n))
        .map(|(train, test)| ClientRows { train, test })
        .collect();
    Ok(SplitPlan {
        regime: Regime::IidShiftedTrainTest,
        clients,
        attribute: Some(attribute.to_owned()),
        bands: Vec::new(),
        band_clients: Vec::new(),
        shift_boundary: Some(boundary),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub dim: usize,
    pub separation: f64,
    pub age_label_correlation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { rows: 2000, dim: 10, separation: 2.0, age_label_correlation: 0.3, seed: 42 }
    }
}

/// Largest achievable correlation between a balanced label and an age
/// drawn entirely from the label's half of the range.
pub const MAX_AGE_LABEL_CORRELATION: f64 = 0.866_025_403_784_438_6;

/// Two unit-variance Gaussian clusters at ±separation/2 per coordinate,
/// balanced labels, and an integer `age` in 0..=90.
///
/// With probability `q = ρ / (√3/2)` a row's age is drawn from the half of
/// the range matching its label (upper half for label 1), otherwise from
/// the whole range. The marginal stays uniform and the correlation between
/// age and label is approximately ρ.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, SplitError> {
    if spec.rows < 2 {
        return Err(SplitError::Synthetic("rows must be at least 2"));
    }
    if spec.dim == 0 {
        return Err(SplitError::Synthetic("dim must be at least 1"));
    }
    if !(0.0..=MAX_AGE_LABEL_CORRELATION).contains(&spec.age_label_correlation) {
        return Err(SplitError::Synthetic("age-label correlation outside [0, √3/2]"));
    }
    if !spec.separation.is_finite() || spec.separation < 0.0 {
        return Err(SplitError::Synthetic("separation must be finite and >= 0"));
    }
    let q = spec.age_label_correlation / MAX_AGE_LABEL_CORRELATION;
    let half = spec.separation / 2.0;
    let mut s = WordStream::from_seed(spec.seed);
    let rows = (0..spec.rows)
        .map(|_| {
            let label = s.below(2) as u8;
            let centre = if label == 1 { half } else { -half };
            let features = (0..spec.dim).map(|_| centre + s.next_gaussian()).collect();
            let biased = s.next_f64() < q;
            let mut u = s.next_f64();
            if biased {
                u = (label as f64 + u) / 2.0;
            }
            let age = (u * 91.0).floor().min(90.0);
            Row { features, label, attributes: [(AGE.to_owned(), age)].into() }
        })
        .collect();
    Ok(Dataset::new(spec.dim, rows).expect("generated rows are well-formed"))
}
