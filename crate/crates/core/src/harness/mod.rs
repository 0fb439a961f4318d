//! Experiment runner: the single-process simulation, the distributed
//! coordinator and client entry points, reports, manifests, and the
//! distribution-regime suite.

mod config;
mod record;
mod suite;

use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datadist::{self, Regime, SplitError, SplitPlan};
use crate::dataset::{Dataset, DatasetError};
use crate::fixedpoint::{encode_model, FixedModel, FixedPointError};
use crate::masking::{self, ClientId, MaskedUpdate, MaskingError};
use crate::metrics::{EvalReport, MetricsError};
use crate::model::ModelVector;
use crate::protocol::{
    local_update, snap_to_grid, ClientNode, ClientOptions, ClientSummary, Coordinator, KeySource, ProtocolError,
    RoundPlan, SessionConfig,
};
use crate::trainer::{logistic_loss, predict, LogisticTrainer, Trainer, TrainerConfig, TrainerError};
use crate::transport;

pub use config::{parse_regime, RunConfig, Seeds};
pub use record::RecordingStream;
pub use suite::{run_regime_suite, SuiteEntry, SuiteReport};

pub const SOFTWARE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
    #[error(transparent)]
    Masking(#[from] MaskingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Transport(#[from] transport::TransportError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_owned(), source }
    }
}

/// Everything needed to run one configuration.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub cfg: RunConfig,
    pub data: Arc<Dataset>,
    pub plan: SplitPlan,
    pub digest: String,
}

pub fn make_plan(cfg: &RunConfig, data: &Dataset) -> Result<SplitPlan, SplitError> {
    let n = cfg.clients.len();
    match cfg.regime {
        Regime::Iid => datadist::split_iid(data, n, cfg.seeds.data, cfg.test_fraction),
        Regime::NonIidByAttribute => {
            datadist::split_non_iid_by_attribute(data, n, &cfg.attribute, &cfg.bands, cfg.seeds.data, cfg.test_fraction)
        }
        Regime::IidShiftedTrainTest => {
            datadist::split_iid_shifted(data, n, &cfg.attribute, cfg.shift_boundary, cfg.seeds.data)
        }
    }
}

impl Experiment {
    pub fn load(cfg: RunConfig) -> Result<Self, HarnessError> {
        let data = Dataset::load(&cfg.dataset_path)?;
        Experiment::with_data(cfg, Arc::new(data))
    }

    pub fn with_data(cfg: RunConfig, data: Arc<Dataset>) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let plan = make_plan(&cfg, &data)?;
        let digest = cfg.digest();
        Ok(Experiment { cfg, data, plan, digest })
    }

    pub fn initial_model(&self) -> ModelVector {
        ModelVector::zeros(&LogisticTrainer.schema(self.data.dim))
    }

    pub fn session_config(&self) -> SessionConfig {
        self.cfg.session_config(LogisticTrainer.schema(self.data.dim))
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        self.cfg.trainer_config()
    }

    /// Evaluate on the union of client test rows; `epoch` counts completed
    /// global epochs.
    pub fn evaluate(&self, model: &ModelVector, epoch: u32) -> Result<EvalReport, HarnessError> {
        let test = self.plan.all_test();
        let scores = test
            .iter()
            .map(|&r| Ok((predict(model, &self.data.rows[r].features)?, self.data.rows[r].label)))
            .collect::<Result<Vec<_>, TrainerError>>()?;
        let mut report = EvalReport::from_scores(epoch, &scores, &self.digest)?;
        report.train_loss = Some(logistic_loss(model, &self.data, &self.plan.all_train())?);
        Ok(report)
    }

    pub fn manifest(&self, mode: &str) -> RunManifest {
        RunManifest {
            software_version: SOFTWARE_VERSION.into(),
            mode: mode.into(),
            regime: self.cfg.regime.name().into(),
            config: self.cfg.clone(),
            config_digest: self.digest.clone(),
            session: self.session_config(),
            trainer: self.trainer_config(),
            split_digest: self.plan.digest(),
            band_clients: self.plan.band_clients.clone(),
            seeds: self.cfg.seeds.clone(),
        }
    }
}

/// Written before training starts; enough to reproduce the run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub software_version: String,
    pub mode: String,
    pub regime: String,
    pub config: RunConfig,
    pub config_digest: String,
    pub session: SessionConfig,
    pub trainer: TrainerConfig,
    pub split_digest: String,
    pub band_clients: Vec<ClientId>,
    pub seeds: Seeds,
}

/// Writes reports, manifests, checkpoints and the final model.
#[derive(Clone, Debug)]
pub struct OutputDir {
    pub path: PathBuf,
}

pub const FINAL_MODEL: &str = "final.bin";
pub const FINAL_REPORT: &str = "final.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const MANIFEST: &str = "manifest.json";
pub const SPLIT_PLAN: &str = "split.json";

impl OutputDir {
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        std::fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))?;
        Ok(OutputDir { path: path.to_owned() })
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<(), HarnessError> {
        let path = self.path.join(name);
        // Write-then-rename so readers never see a partial file.
        let tmp = self.path.join(format!(".{name}.tmp"));
        std::fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| HarnessError::io(&path, e))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), HarnessError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn write_manifest(&self, exp: &Experiment, mode: &str) -> Result<(), HarnessError> {
        self.write_json(MANIFEST, &exp.manifest(mode))?;
        self.write_json(SPLIT_PLAN, &exp.plan.export_json())
    }

    pub fn write_epoch(&self, report: &EvalReport) -> Result<(), HarnessError> {
        self.write_json(&format!("report_epoch_{:03}.json", report.epoch), report)?;
        self.write(&format!("report_epoch_{:03}.txt", report.epoch), report.to_table().as_bytes())
    }

    pub fn write_checkpoint(&self, model: &ModelVector) -> Result<(), HarnessError> {
        self.write(CHECKPOINT, &transport::serialize_model(&encode_model(model)?))
    }

    pub fn write_final(&self, model: &ModelVector, report: &EvalReport) -> Result<(), HarnessError> {
        self.write_json(FINAL_REPORT, report)?;
        self.write("final.txt", report.to_table().as_bytes())?;
        self.write(FINAL_MODEL, &transport::serialize_model(&encode_model(model)?))
    }
}

pub fn read_model(path: &Path) -> Result<FixedModel, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(transport::parse_model(&bytes)?)
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: ModelVector,
    pub reports: Vec<EvalReport>,
    pub final_report: EvalReport,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MockOptions {
    /// Plain floating-point averaging instead of the fixed-point path.
    pub float_aggregate: bool,
}

/// Single-process simulation: clients train one after another in id order
/// and are averaged through the same fixed-point path as the distributed
/// protocol, minus the masks (which cancel exactly).
///
/// `on_local` sees each client's encoded plaintext model per round.
pub fn run_mock(
    exp: &Experiment,
    opts: MockOptions,
    out: Option<&OutputDir>,
    mut on_local: impl FnMut(&RoundPlan, ClientId, &FixedModel),
) -> Result<RunOutput, HarnessError> {
    let session = exp.session_config();
    session.validate()?;
    if let Some(out) = out {
        out.write_manifest(exp, if opts.float_aggregate { "mock-float" } else { "mock" })?;
    }
    let trainer_cfg = exp.trainer_config();
    let n = exp.plan.client_count();
    let mut global = snap_to_grid(&exp.initial_model())?;
    let mut reports = Vec::new();
    for plan in session.schedule() {
        let mut updates = Vec::with_capacity(n);
        let mut locals = Vec::with_capacity(n);
        for (id, rows) in exp.plan.clients.iter().enumerate() {
            let id = id as ClientId;
            let local = local_update(&LogisticTrainer, &global, &exp.data, &rows.train, &trainer_cfg, id, &plan)?;
            let fixed = encode_model(&local)?;
            on_local(&plan, id, &fixed);
            updates.push(MaskedUpdate { client_id: id, round: plan.round, payload: fixed });
            locals.push(local);
        }
        global = if opts.float_aggregate {
            float_average(&locals)
        } else {
            snap_to_grid(&masking::aggregate(&updates, n)?)?
        };
        let report = exp.evaluate(&global, plan.last_epoch() + 1)?;
        if let Some(out) = out {
            out.write_epoch(&report)?;
            out.write_checkpoint(&global)?;
        }
        reports.push(report);
    }
    finish(exp, global, reports, out)
}

fn float_average(models: &[ModelVector]) -> ModelVector {
    let mut avg = models[0].clone();
    for layer in avg.layers.iter_mut() {
        layer.params.iter_mut().for_each(|p| *p = 0.0);
    }
    for m in models {
        for (a, l) in avg.layers.iter_mut().zip(&m.layers) {
            for (x, y) in a.params.iter_mut().zip(&l.params) {
                *x += y;
            }
        }
    }
    let n = models.len() as f64;
    for layer in avg.layers.iter_mut() {
        layer.params.iter_mut().for_each(|p| *p /= n);
    }
    avg
}

fn finish(
    exp: &Experiment,
    model: ModelVector,
    reports: Vec<EvalReport>,
    out: Option<&OutputDir>,
) -> Result<RunOutput, HarnessError> {
    let final_report = exp.evaluate(&model, exp.cfg.global_epochs)?;
    if let Some(out) = out {
        out.write_final(&model, &final_report)?;
    }
    Ok(RunOutput { model, reports, final_report })
}

/// Coordinator side of a distributed run over already-connected streams.
/// The final model is written only if every round completes.
pub fn run_coordinator<L: Read + Write + Send>(
    exp: &Experiment,
    links: Vec<L>,
    out: Option<&OutputDir>,
) -> Result<RunOutput, HarnessError> {
    if let Some(out) = out {
        out.write_manifest(exp, "distributed")?;
    }
    let mut coordinator = Coordinator::initialize(exp.session_config(), links, &exp.initial_model())?;
    let mut reports = Vec::new();
    let outcome = coordinator.run_session(|plan, model| {
        let report = exp.evaluate(model, plan.last_epoch() + 1).map_err(|e| ProtocolError::Observer(e.to_string()))?;
        if let Some(out) = out {
            out.write_epoch(&report)
                .and_then(|_| out.write_checkpoint(model))
                .map_err(|e| ProtocolError::Observer(e.to_string()))?;
        }
        info!("epoch {}: auc {:.4}", report.epoch, report.auc);
        reports.push(report);
        Ok(())
    })?;
    finish(exp, outcome.model, reports, out)
}

/// Client side of a distributed run.
pub fn run_client(
    exp: &Experiment,
    id: ClientId,
    listener: TcpListener,
    crash_at_round: Option<u64>,
) -> Result<ClientSummary, HarnessError> {
    let rows = exp
        .plan
        .clients
        .get(id as usize)
        .ok_or_else(|| HarnessError::Config(format!("client {id} is not in the roster")))?;
    let opts = ClientOptions {
        id,
        insecure: exp.cfg.insecure,
        key_source: exp.cfg.seeds.keys.map_or(KeySource::Os, KeySource::Seeded),
        io_timeout: std::time::Duration::from_secs(exp.cfg.io_timeout_secs),
        crash_at_round,
    };
    let node = ClientNode {
        opts,
        trainer: LogisticTrainer,
        data: Arc::clone(&exp.data),
        train_rows: rows.train.clone(),
        trainer_cfg: exp.trainer_config(),
    };
    Ok(node.serve(listener)?)
}
