use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::datadist::{Regime, AGE, DEFAULT_AGE_BANDS, DEFAULT_SHIFT_BOUNDARY, DEFAULT_TEST_FRACTION};
use crate::model::ModelSchema;
use crate::protocol::{ClientInfo, SessionConfig, DEFAULT_MAX_FAILED_ROUNDS};
use crate::trainer::TrainerConfig;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Split shuffles.
    #[serde(default)]
    pub data: u64,
    /// Local SGD shuffles.
    #[serde(default)]
    pub shuffle: u64,
    /// Deterministic pair keys; only honoured with `insecure`.
    #[serde(default)]
    pub keys: Option<u64>,
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub clients: Vec<ClientInfo>,
    pub global_epochs: u32,
    #[serde(default = "one")]
    pub local_epochs: u32,
    #[serde(default = "one")]
    pub aggregate_every: u32,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_regime", with = "regime_name")]
    pub regime: Regime,
    pub dataset_path: PathBuf,
    #[serde(default)]
    pub insecure: bool,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_attribute")]
    pub attribute: String,
    #[serde(default = "default_bands")]
    pub bands: Vec<(f64, f64)>,
    #[serde(default = "default_boundary")]
    pub shift_boundary: f64,
    #[serde(default = "default_max_failed")]
    pub max_failed_rounds: u32,
    #[serde(default = "default_timeout")]
    pub io_timeout_secs: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn one() -> u32 {
    1
}
fn default_lr() -> f64 {
    0.01
}
fn default_batch() -> usize {
    32
}
fn default_regime() -> Regime {
    Regime::Iid
}
fn default_test_fraction() -> f64 {
    DEFAULT_TEST_FRACTION
}
fn default_attribute() -> String {
    AGE.into()
}
fn default_bands() -> Vec<(f64, f64)> {
    DEFAULT_AGE_BANDS.to_vec()
}
fn default_boundary() -> f64 {
    DEFAULT_SHIFT_BOUNDARY
}
fn default_max_failed() -> u32 {
    DEFAULT_MAX_FAILED_ROUNDS
}
fn default_timeout() -> u64 {
    120
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Accepts the canonical regime names plus short aliases.
mod regime_name {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::datadist::Regime;

    pub fn serialize<S: Serializer>(r: &Regime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(r.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Regime, D::Error> {
        let name = String::deserialize(d)?;
        super::parse_regime(&name).ok_or_else(|| serde::de::Error::custom(format!("unknown regime `{name}`")))
    }
}

pub fn parse_regime(name: &str) -> Option<Regime> {
    match name {
        "iid" => Some(Regime::Iid),
        "non_iid" | "non_iid_by_attribute" => Some(Regime::NonIidByAttribute),
        "shifted" | "iid_shifted" | "iid_shifted_train_test" => Some(Regime::IidShiftedTrainTest),
        _ => None,
    }
}

impl RunConfig {
    /// Reads a `run.json`, or the `config` field of a run manifest.
    /// Relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let value = match value.get("config") {
            Some(inner) if value.get("software_version").is_some() => inner.clone(),
            _ => value,
        };
        let mut cfg: RunConfig = serde_json::from_value(value)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.dataset_path.is_relative() {
            cfg.dataset_path = base.join(&cfg.dataset_path);
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.clients.is_empty() {
            return Err(HarnessError::Config("at least one client is required".into()));
        }
        if self.local_epochs == 0 || self.aggregate_every == 0 || self.batch_size == 0 {
            return Err(HarnessError::Config("local_epochs, aggregate_every and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(HarnessError::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.seeds.keys.is_some() && !self.insecure {
            return Err(HarnessError::Config("seeds.keys requires insecure mode".into()));
        }
        Ok(())
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            learning_rate: self.learning_rate,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            seed: self.seeds.shuffle,
        }
    }

    pub fn session_config(&self, schema: ModelSchema) -> SessionConfig {
        SessionConfig {
            clients: self.clients.clone(),
            global_epochs: self.global_epochs,
            local_epochs: self.local_epochs,
            aggregate_every: self.aggregate_every,
            schema,
            rng_seed: self.seeds.shuffle,
            insecure: self.insecure,
            max_failed_rounds: self.max_failed_rounds,
            io_timeout: Duration::from_secs(self.io_timeout_secs),
        }
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// A loopback config with `n` clients on consecutive ports.
    pub fn loopback(n: usize, base_port: u16, dataset_path: PathBuf) -> Self {
        RunConfig {
            clients: (0..n)
                .map(|i| ClientInfo { id: i as u32, addr: format!("127.0.0.1:{}", base_port as usize + i) })
                .collect(),
            global_epochs: 20,
            local_epochs: 1,
            aggregate_every: 1,
            learning_rate: default_lr(),
            batch_size: default_batch(),
            seeds: Seeds { data: 42, shuffle: 42, keys: None },
            regime: Regime::Iid,
            dataset_path,
            insecure: true,
            test_fraction: DEFAULT_TEST_FRACTION,
            attribute: AGE.into(),
            bands: default_bands(),
            shift_boundary: DEFAULT_SHIFT_BOUNDARY,
            max_failed_rounds: DEFAULT_MAX_FAILED_ROUNDS,
            io_timeout_secs: default_timeout(),
            out_dir: default_out(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"clients":[{"id":0,"addr":"127.0.0.1:7000"}],"global_epochs":3,"dataset_path":"data.csv","regime":"shifted"}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.learning_rate, 0.01);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.aggregate_every, 1);
        assert_eq!(cfg.regime, Regime::IidShiftedTrainTest);
        assert_eq!(cfg.dataset_path, dir.path().join("data.csv"));
        assert_eq!(cfg.bands.len(), 6);
        assert!(!cfg.insecure);
    }

    #[test]
    fn rejects_bad_configs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        for bad in [
            r#"{"clients":[],"global_epochs":1,"dataset_path":"d.csv"}"#,
            r#"{"clients":[{"id":0,"addr":"a:1"}],"global_epochs":1,"dataset_path":"d.csv","regime":"weird"}"#,
            r#"{"clients":[{"id":0,"addr":"a:1"}],"global_epochs":1,"dataset_path":"d.csv","bogus":1}"#,
            r#"{"clients":[{"id":0,"addr":"a:1"}],"global_epochs":1,"dataset_path":"d.csv","seeds":{"keys":5}}"#,
        ] {
            std::fs::write(&path, bad).unwrap();
            assert!(RunConfig::load(&path).is_err(), "{bad}");
        }
    }

    #[test]
    fn digest_ignores_out_dir() {
        let a = RunConfig::loopback(2, 9000, "d.csv".into());
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        b.learning_rate = 0.02;
        assert_ne!(a.digest(), b.digest());
    }
}
