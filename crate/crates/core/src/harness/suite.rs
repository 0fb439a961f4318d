use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{run_mock, Experiment, HarnessError, MockOptions, OutputDir, RunConfig};
use crate::datadist::Regime;
use crate::dataset::Dataset;
use crate::metrics::Confusion;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub regime: String,
    pub final_auc: f64,
    pub n_eval: u64,
    pub confusion: Confusion,
    pub split_digest: String,
    pub auc_by_epoch: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn auc(&self, regime: Regime) -> Option<f64> {
        self.entries.iter().find(|e| e.regime == regime.name()).map(|e| e.final_auc)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<24} {:>8} {:>8}\n", "regime", "auc", "n_eval");
        for e in &self.entries {
            s.push_str(&format!("{:<24} {:>8.4} {:>8}\n", e.regime, e.final_auc, e.n_eval));
        }
        s
    }
}

/// Run the same configuration under all three distribution regimes with
/// the single-process simulation. Each regime writes into its own
/// subdirectory of `cfg.out_dir`; the comparison goes to `suite.json`.
pub fn run_regime_suite(cfg: &RunConfig, data: Arc<Dataset>, write: bool) -> Result<SuiteReport, HarnessError> {
    let mut entries = Vec::new();
    for regime in [Regime::Iid, Regime::NonIidByAttribute, Regime::IidShiftedTrainTest] {
        let mut c = cfg.clone();
        c.regime = regime;
        c.out_dir = cfg.out_dir.join(regime.name());
        let exp = Experiment::with_data(c, Arc::clone(&data))?;
        let out = if write { Some(OutputDir::create(&exp.cfg.out_dir)?) } else { None };
        let run = run_mock(&exp, MockOptions::default(), out.as_ref(), |_, _, _| {})?;
        entries.push(SuiteEntry {
            regime: regime.name().into(),
            final_auc: run.final_report.auc,
            n_eval: run.final_report.n_eval,
            confusion: run.final_report.confusion,
            split_digest: exp.plan.digest(),
            auc_by_epoch: run.reports.iter().map(|r| r.auc).collect(),
        });
    }
    let report = SuiteReport { entries };
    if write {
        let out = OutputDir::create(&cfg.out_dir)?;
        out.write_json("suite.json", &report)?;
        out.write("suite.txt", report.to_table().as_bytes())?;
    }
    Ok(report)
}
