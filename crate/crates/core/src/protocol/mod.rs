//! Coordinator and client roles.
//!
//! Threat model: honest-but-curious. Every party follows the protocol; the
//! coordinator only ever observes the roster, masked payloads, and the
//! resulting averages. Pair keys travel between clients only, and a missing
//! client aborts the round instead of averaging a subset.

mod client;
mod coordinator;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::fixedpoint::{decode_model, encode_model, FixedPointError};
use crate::masking::{self, ClientId, MaskedUpdate, MaskingError, PairId, RoundNonce};
use crate::model::{ModelSchema, ModelVector};
use crate::trainer::{Trainer, TrainerConfig, TrainerError};
use crate::transport::TransportError;

pub use client::{ClientNode, ClientOptions, ClientSummary, KeySource};
pub use coordinator::{connect_clients, Coordinator, SessionOutcome};

pub const DEFAULT_MAX_FAILED_ROUNDS: u32 = 3;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("client {id} unreachable at {addr}: {reason}")]
    UnreachableClient { id: ClientId, addr: String, reason: String },
    #[error("key exchange between {low} and {high} failed: {reason}")]
    KeyExchangeFailure { low: ClientId, high: ClientId, reason: String },
    #[error("client {0} appears more than once in the roster")]
    DuplicateClientId(ClientId),
    #[error("invalid roster: {0}")]
    InvalidRoster(String),
    #[error("refusing to exchange pair keys over a channel that is not confidential")]
    ChannelNotConfidential,
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("round {round} aborted: {reason}")]
    RoundAborted { round: RoundNonce, reason: String },
    #[error("session aborted at round {round} after {attempts} consecutive failed attempts; last: {last}")]
    SessionAborted { round: RoundNonce, attempts: u32, last: Box<ProtocolError> },
    #[error("client {0} received a model with the wrong schema")]
    SchemaMismatch(ClientId),
    #[error("client {0} stopped at an injected fault")]
    InjectedFault(ClientId),
    #[error("peer error: {0}")]
    Peer(String),
    #[error("report hook: {0}")]
    Observer(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Masking(#[from] MaskingError),
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl ProtocolError {
    /// Whether the session may retry the round after this error.
    pub fn is_round_failure(&self) -> bool {
        matches!(self, ProtocolError::RoundAborted { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientInfo {
    pub id: ClientId,
    pub addr: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub clients: Vec<ClientInfo>,
    pub global_epochs: u32,
    pub local_epochs: u32,
    pub aggregate_every: u32,
    pub schema: ModelSchema,
    pub rng_seed: u64,
    pub insecure: bool,
    pub max_failed_rounds: u32,
    pub io_timeout: Duration,
}

impl SessionConfig {
    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    /// Client ids must be exactly `0..n` in roster order.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        validate_roster(self.clients.iter().map(|c| c.id))?;
        if self.global_epochs > 0 && (self.local_epochs == 0 || self.aggregate_every == 0) {
            return Err(ProtocolError::InvalidRoster("local_epochs and aggregate_every must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Vec<RoundPlan> {
        schedule(self.global_epochs, self.aggregate_every)
    }
}

pub(crate) fn validate_roster(ids: impl Iterator<Item = ClientId>) -> Result<usize, ProtocolError> {
    let mut seen = BTreeSet::new();
    let mut n = 0;
    for (pos, id) in ids.enumerate() {
        if !seen.insert(id) {
            return Err(ProtocolError::DuplicateClientId(id));
        }
        if id as usize != pos {
            return Err(ProtocolError::InvalidRoster(format!(
                "client ids must be 0..n in order; found {id} at position {pos}"
            )));
        }
        n += 1;
    }
    if n == 0 {
        return Err(ProtocolError::InvalidRoster("no clients".into()));
    }
    Ok(n)
}

/// One aggregation round covering `epoch_count` global epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round: RoundNonce,
    pub first_epoch: u32,
    pub epoch_count: u32,
}

impl RoundPlan {
    pub fn last_epoch(&self) -> u32 {
        self.first_epoch + self.epoch_count - 1
    }
}

/// Aggregate after every `aggregate_every` global epochs and after the last.
pub fn schedule(global_epochs: u32, aggregate_every: u32) -> Vec<RoundPlan> {
    let k = aggregate_every.max(1);
    let mut out = Vec::new();
    let mut epoch = 0;
    while epoch < global_epochs {
        let count = k.min(global_epochs - epoch);
        out.push(RoundPlan { round: out.len() as RoundNonce, first_epoch: epoch, epoch_count: count });
        epoch += count;
    }
    out
}

/// Per-client trainer seed; keeps client shuffles independent.
pub fn client_seed(base: u64, client: ClientId) -> u64 {
    base ^ (u64::from(client) << 32)
}

/// One client's training for one round, shared by the distributed client
/// and the single-process simulation.
pub fn local_update<T: Trainer + ?Sized>(
    trainer: &T,
    global: &ModelVector,
    data: &Dataset,
    rows: &[usize],
    base: &TrainerConfig,
    client: ClientId,
    plan: &RoundPlan,
) -> Result<ModelVector, TrainerError> {
    let cfg = TrainerConfig {
        local_epochs: base.local_epochs * plan.epoch_count,
        seed: client_seed(base.seed, client),
        ..base.clone()
    };
    let first = u64::from(plan.first_epoch) * u64::from(base.local_epochs);
    trainer.train(global, data, rows, &cfg, first)
}

/// Round a model onto the fixed-point grid. Installed global models are
/// always on the grid so that distributing, persisting and evaluating them
/// all see the same values.
pub fn snap_to_grid(m: &ModelVector) -> Result<ModelVector, FixedPointError> {
    Ok(decode_model(&encode_model(m)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Distributing,
    Collecting,
    Complete,
    Aborted,
}

/// Coordinator-side bookkeeping for one round.
#[derive(Debug)]
pub struct RoundState {
    pub round: RoundNonce,
    pub expected: BTreeSet<ClientId>,
    pub received: BTreeMap<ClientId, MaskedUpdate>,
    pub phase: Phase,
}

impl RoundState {
    pub fn new(round: RoundNonce, expected: BTreeSet<ClientId>) -> Self {
        RoundState { round, expected, received: BTreeMap::new(), phase: Phase::Distributing }
    }

    pub fn begin_collecting(&mut self) {
        if self.phase == Phase::Distributing {
            self.phase = Phase::Collecting;
        }
    }

    pub fn accept(&mut self, update: MaskedUpdate) -> Result<(), ProtocolError> {
        if self.phase != Phase::Collecting {
            return Err(self.abort_with(format!("update outside collection phase ({:?})", self.phase)));
        }
        let id = update.client_id;
        if !self.expected.contains(&id) {
            return Err(self.abort_with(format!("update from unexpected client {id}")));
        }
        if update.round != self.round {
            return Err(self.abort_with(format!("client {id} sent round {}", update.round)));
        }
        if self.received.insert(id, update).is_some() {
            return Err(self.abort_with(format!("duplicate update from client {id}")));
        }
        if self.received.len() == self.expected.len() {
            self.phase = Phase::Complete;
        }
        Ok(())
    }

    pub fn missing(&self) -> Vec<ClientId> {
        self.expected.iter().filter(|id| !self.received.contains_key(id)).copied().collect()
    }

    pub fn abort_with(&mut self, reason: String) -> ProtocolError {
        self.phase = Phase::Aborted;
        ProtocolError::RoundAborted { round: self.round, reason }
    }

    /// Secure average of the collected updates; only valid once complete.
    pub fn finish(&mut self) -> Result<ModelVector, ProtocolError> {
        if self.phase != Phase::Complete {
            let missing = self.missing();
            return Err(self.abort_with(format!("incomplete round, missing {missing:?}")));
        }
        masking::aggregate(self.received.values(), self.expected.len()).map_err(|e| self.abort_with(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairStatus {
    Pending,
    Established,
}

/// Status of every unordered client pair. A pair is established once both
/// endpoints report holding its key.
#[derive(Clone, Debug)]
pub struct KeyExchangeState {
    pairs: BTreeMap<PairId, PairStatus>,
    ready: BTreeSet<ClientId>,
}

impl KeyExchangeState {
    pub fn new(n: usize) -> Self {
        let n = n as ClientId;
        let pairs =
            (0..n).flat_map(|i| (i + 1..n).map(move |j| (PairId { low: i, high: j }, PairStatus::Pending))).collect();
        KeyExchangeState { pairs, ready: BTreeSet::new() }
    }

    /// Record that `client` holds keys for all of its pairs.
    pub fn client_ready(&mut self, client: ClientId) {
        self.ready.insert(client);
        for (pair, status) in self.pairs.iter_mut() {
            if self.ready.contains(&pair.low) && self.ready.contains(&pair.high) {
                *status = PairStatus::Established;
            }
        }
    }

    pub fn established(&self) -> usize {
        self.pairs.values().filter(|s| **s == PairStatus::Established).count()
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_complete(&self) -> bool {
        self.established() == self.pairs.len()
    }

    pub fn status(&self, pair: PairId) -> Option<PairStatus> {
        self.pairs.get(&pair).copied()
    }
}

/// `Error` frame text for a failed key exchange, parsed back by the
/// coordinator.
pub(crate) fn key_failure_text(low: ClientId, high: ClientId, reason: &str) -> String {
    format!("key-exchange {low} {high}: {reason}")
}

pub(crate) fn parse_key_failure(text: &str) -> Option<ProtocolError> {
    let rest = text.strip_prefix("key-exchange ")?;
    let (ids, reason) = rest.split_once(": ")?;
    let (low, high) = ids.split_once(' ')?;
    Some(ProtocolError::KeyExchangeFailure {
        low: low.parse().ok()?,
        high: high.parse().ok()?,
        reason: reason.to_owned(),
    })
}
