//! Federated logistic regression with pairwise additive masking.
//!
//! Clients train locally, encode their models as 64-bit fixed-point words,
//! and add keystreams shared with every peer so that the coordinator only
//! ever sees masked words. The masks cancel in the sum.

pub mod datadist;
pub mod dataset;
pub mod fixedpoint;
pub mod harness;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod trainer;
pub mod transport;

pub use datadist::{Regime, SplitPlan};
pub use dataset::{Dataset, Row};
pub use fixedpoint::{decode, encode, FixedModel, FixedWord};
pub use harness::{Experiment, HarnessError, RunConfig};
pub use masking::{ClientId, MaskedUpdate, PairKey, RoundNonce};
pub use metrics::EvalReport;
pub use model::{ModelSchema, ModelVector};
pub use protocol::{ProtocolError, SessionConfig};
pub use trainer::{LogisticTrainer, Trainer, TrainerConfig};
