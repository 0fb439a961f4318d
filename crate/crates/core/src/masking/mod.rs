//! Pairwise additive masking.
//!
//! Client `i` adds the keystream it shares with every higher-id peer and
//! subtracts the keystream it shares with every lower-id peer. Summed over
//! all clients modulo 2^64, every mask appears once with each sign and the
//! plaintext sum is left behind.

pub mod keystream;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::fixedpoint::{decode, FixedModel, FixedPointError, FixedWord};
use crate::model::ModelVector;
use keystream::{WordStream, KEY_LEN, MAX_WORDS, NONCE_LEN};

/// Session-assigned client index; also fixes the mask sign ordering.
pub type ClientId = u32;

/// Per-round nonce salted into every mask stream.
pub type RoundNonce = u64;

/// Length of a shared pair secret in bytes (1024 bits).
pub const PAIR_KEY_LEN: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskingError {
    #[error("no pair key shared with client {0}")]
    MissingKey(ClientId),
    #[error("client {0} listed as its own peer")]
    SelfPeer(ClientId),
    #[error("round incomplete, missing updates from {0:?}")]
    IncompleteRound(Vec<ClientId>),
    #[error("update from client {got_client} is for round {got}, expected {expected}")]
    RoundMismatch { got_client: ClientId, got: RoundNonce, expected: RoundNonce },
    #[error("update from unexpected client {0}")]
    UnexpectedClient(ClientId),
    #[error("duplicate update from client {0}")]
    DuplicateUpdate(ClientId),
    #[error("client count must be at least 1")]
    NoClients,
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
}

/// A 1024-bit secret shared by exactly one unordered client pair.
///
/// The ChaCha20 key is the first 32 bytes; the remaining 96 are reserved.
#[derive(Clone, PartialEq, Eq)]
pub struct PairKey([u8; PAIR_KEY_LEN]);

impl PairKey {
    pub fn from_bytes(bytes: [u8; PAIR_KEY_LEN]) -> Self {
        PairKey(bytes)
    }

    /// Fresh key from the operating system's CSPRNG.
    pub fn generate() -> Result<Self, getrandom::Error> {
        let mut bytes = [0u8; PAIR_KEY_LEN];
        getrandom::getrandom(&mut bytes)?;
        Ok(PairKey(bytes))
    }

    pub fn as_bytes(&self) -> &[u8; PAIR_KEY_LEN] {
        &self.0
    }

    fn cipher_key(&self) -> [u8; KEY_LEN] {
        self.0[..KEY_LEN].try_into().unwrap()
    }
}

impl fmt::Debug for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PairKey(..)")
    }
}

/// Unordered client pair, stored as (lower id, higher id).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairId {
    pub low: ClientId,
    pub high: ClientId,
}

impl PairId {
    pub fn new(a: ClientId, b: ClientId) -> Option<PairId> {
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Some(PairId { low: a, high: b }),
            std::cmp::Ordering::Greater => Some(PairId { low: b, high: a }),
            std::cmp::Ordering::Equal => None,
        }
    }
}

pub type PairKeys = BTreeMap<PairId, PairKey>;

/// Nonce layout: round as 8 little-endian bytes, then 4 zero bytes.
fn round_nonce_bytes(round: RoundNonce) -> [u8; NONCE_LEN] {
    let mut nonce = [0u8; NONCE_LEN];
    nonce[..8].copy_from_slice(&round.to_le_bytes());
    nonce
}

/// The mask word stream for one pair key and one round.
pub fn mask_stream(key: &PairKey, round: RoundNonce) -> WordStream {
    WordStream::new(key.cipher_key(), round_nonce_bytes(round))
}

/// The first `count` mask words for `(key, round)`.
pub fn expand_mask(key: &PairKey, round: RoundNonce, count: usize) -> Vec<FixedWord> {
    assert!(count as u64 <= MAX_WORDS, "mask longer than one keystream");
    mask_stream(key, round).take(count).map(FixedWord::from).collect()
}

/// A client's masked fixed-point model for one round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedUpdate {
    pub client_id: ClientId,
    pub round: RoundNonce,
    pub payload: FixedModel,
}

/// Apply every pairwise mask for `self_id` to `m`.
pub fn mask_model(
    m: &FixedModel,
    self_id: ClientId,
    peers: &BTreeSet<ClientId>,
    keys: &PairKeys,
    round: RoundNonce,
) -> Result<MaskedUpdate, MaskingError> {
    assert!(m.param_count() as u64 <= MAX_WORDS, "model longer than one keystream");
    let mut payload = m.clone();
    for &peer in peers {
        let pair = PairId::new(self_id, peer).ok_or(MaskingError::SelfPeer(peer))?;
        let key = keys.get(&pair).ok_or(MaskingError::MissingKey(peer))?;
        let stream = mask_stream(key, round).map(FixedWord::from);
        if peer > self_id {
            payload.words_mut().zip(stream).for_each(|(w, k)| *w = w.wrapping_add(k));
        } else {
            payload.words_mut().zip(stream).for_each(|(w, k)| *w = w.wrapping_sub(k));
        }
    }
    Ok(MaskedUpdate { client_id: self_id, round, payload })
}

/// Decode a fixed-point sum of `n` models and divide by `n`.
pub fn average_of_sum(sum: &FixedModel, n: usize) -> ModelVector {
    let n = n as f64;
    ModelVector::new(
        sum.layers.iter().map(|l| (l.name.clone(), l.words.iter().map(|&w| decode(w) / n).collect())).collect(),
    )
}

/// Wrapping sum of all payloads, after checking the round is complete.
pub fn sum_updates<'a, I>(updates: I, n: usize) -> Result<FixedModel, MaskingError>
where
    I: IntoIterator<Item = &'a MaskedUpdate>,
{
    if n == 0 {
        return Err(MaskingError::NoClients);
    }
    let mut seen = BTreeSet::new();
    let mut round = None;
    let mut sum: Option<FixedModel> = None;
    for u in updates {
        if u.client_id as usize >= n {
            return Err(MaskingError::UnexpectedClient(u.client_id));
        }
        if !seen.insert(u.client_id) {
            return Err(MaskingError::DuplicateUpdate(u.client_id));
        }
        match round {
            None => round = Some(u.round),
            Some(r) if r != u.round => {
                return Err(MaskingError::RoundMismatch { got_client: u.client_id, got: u.round, expected: r })
            }
            Some(_) => {}
        }
        match sum.as_mut() {
            None => sum = Some(u.payload.clone()),
            Some(s) => s.wrapping_add_assign(&u.payload)?,
        }
    }
    let missing: Vec<ClientId> = (0..n as ClientId).filter(|id| !seen.contains(id)).collect();
    if !missing.is_empty() {
        return Err(MaskingError::IncompleteRound(missing));
    }
    Ok(sum.expect("n >= 1 updates"))
}

/// Secure average of exactly one update from each of clients `0..n`.
pub fn aggregate<'a, I>(updates: I, n: usize) -> Result<ModelVector, MaskingError>
where
    I: IntoIterator<Item = &'a MaskedUpdate>,
{
    let sum = sum_updates(updates, n)?;
    Ok(average_of_sum(&sum, n))
}
