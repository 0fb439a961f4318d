//! ROC/AUC and confusion matrices for a binary scorer.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Predictions at or above this probability count as positive.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("ROC needs at least one positive and one negative label")]
    DegenerateLabels,
    #[error("score {0} is not a number")]
    NanScore(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// ROC points from (0,0) to (1,1), one step per distinct score, and the
/// trapezoidal area under them.
pub fn roc_auc(scores: &[(f64, u8)]) -> Result<(Vec<(f64, f64)>, f64), MetricsError> {
    if let Some(&(s, _)) = scores.iter().find(|(s, _)| s.is_nan()) {
        return Err(MetricsError::NanScore(s));
    }
    let pos = scores.iter().filter(|(_, y)| *y == 1).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::DegenerateLabels);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        let (prev_tp, prev_fp) = (tp, fp);
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // Trapezoid in count units; normalized once at the end.
        auc += (fp - prev_fp) as f64 * (tp + prev_tp) as f64 / 2.0;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok((points, auc / (pos as f64 * neg as f64)))
}

pub fn confusion_at_threshold(scores: &[(f64, u8)], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for &(p, y) in scores {
        match (p >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// Evaluation of one global model on held-out rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epoch: u32,
    pub auc: f64,
    pub roc: Vec<[f64; 2]>,
    pub confusion: Confusion,
    pub threshold: f64,
    pub n_eval: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    pub config_digest: String,
}

impl EvalReport {
    pub fn from_scores(epoch: u32, scores: &[(f64, u8)], config_digest: &str) -> Result<Self, MetricsError> {
        let (roc, auc) = roc_auc(scores)?;
        Ok(EvalReport {
            epoch,
            auc,
            roc: roc.into_iter().map(|(f, t)| [f, t]).collect(),
            confusion: confusion_at_threshold(scores, DEFAULT_THRESHOLD),
            threshold: DEFAULT_THRESHOLD,
            n_eval: scores.len() as u64,
            train_loss: None,
            config_digest: config_digest.to_owned(),
        })
    }

    pub fn to_table(&self) -> String {
        let c = &self.confusion;
        let mut s = String::new();
        let _ = writeln!(s, "epoch      {}", self.epoch);
        let _ = writeln!(s, "n_eval     {}", self.n_eval);
        let _ = writeln!(s, "auc        {:.6}", self.auc);
        if let Some(loss) = self.train_loss {
            let _ = writeln!(s, "train_loss {loss:.6}");
        }
        let _ = writeln!(s, "threshold  >= {}", self.threshold);
        let _ = writeln!(s, "             pred+   pred-");
        let _ = writeln!(s, "  actual+ {:>7} {:>7}", c.tp, c.fn_);
        let _ = writeln!(s, "  actual- {:>7} {:>7}", c.fp, c.tn);
        s
    }
}
