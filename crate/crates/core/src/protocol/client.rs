use std::collections::BTreeSet;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::coordinator::connect_with_retry;
use super::{key_failure_text, local_update, validate_roster, ProtocolError, RoundPlan};
use crate::dataset::Dataset;
use crate::fixedpoint::{decode_model, encode_model};
use crate::masking::keystream::WordStream;
use crate::masking::{mask_model, ClientId, PairId, PairKey, PairKeys, PAIR_KEY_LEN};
use crate::trainer::{Trainer, TrainerConfig};
use crate::transport::{self, Message, RosterEntry, TransportError};

/// Where a responder's pair keys come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeySource {
    /// The operating system's CSPRNG.
    Os,
    /// Derived from a seed; reproducible and therefore insecure.
    Seeded(u64),
}

impl KeySource {
    fn key_for(self, pair: PairId) -> Result<PairKey, ProtocolError> {
        match self {
            KeySource::Os => PairKey::generate().map_err(|e| ProtocolError::Peer(format!("os randomness: {e}"))),
            KeySource::Seeded(seed) => {
                let mut key = [0u8; 32];
                key[..8].copy_from_slice(&seed.to_le_bytes());
                let mut nonce = [0u8; 12];
                nonce[..4].copy_from_slice(&pair.low.to_le_bytes());
                nonce[4..8].copy_from_slice(&pair.high.to_le_bytes());
                let mut stream = WordStream::new(key, nonce);
                let mut bytes = [0u8; PAIR_KEY_LEN];
                for chunk in bytes.chunks_exact_mut(8) {
                    chunk.copy_from_slice(&stream.next_u64().to_le_bytes());
                }
                Ok(PairKey::from_bytes(bytes))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClientOptions {
    pub id: ClientId,
    /// Allow pair keys over plain TCP. Both endpoints and the coordinator's
    /// roster must opt in.
    pub insecure: bool,
    pub key_source: KeySource,
    pub io_timeout: Duration,
    /// Fault injection: drop the coordinator connection on receiving this
    /// round's global model.
    pub crash_at_round: Option<u64>,
}

impl ClientOptions {
    pub fn new(id: ClientId) -> Self {
        ClientOptions {
            id,
            insecure: false,
            key_source: KeySource::Os,
            io_timeout: Duration::from_secs(60),
            crash_at_round: None,
        }
    }
}

#[derive(Debug)]
pub struct ClientSummary {
    pub rounds_completed: u64,
    pub keys: PairKeys,
}

#[derive(Default)]
struct KeyStore {
    keys: Mutex<PairKeys>,
    changed: Condvar,
}

impl KeyStore {
    fn insert(&self, pair: PairId, key: PairKey) {
        self.keys.lock().unwrap().insert(pair, key);
        self.changed.notify_all();
    }

    /// Wait until every pair in `pairs` has a key.
    fn wait_for(&self, pairs: &[PairId], timeout: Duration) -> Result<PairKeys, PairId> {
        let deadline = Instant::now() + timeout;
        let mut guard = self.keys.lock().unwrap();
        loop {
            match pairs.iter().find(|p| !guard.contains_key(p)) {
                None => return Ok(guard.clone()),
                Some(&missing) => {
                    let now = Instant::now();
                    if now >= deadline {
                        return Err(missing);
                    }
                    guard = self.changed.wait_timeout(guard, deadline - now).unwrap().0;
                }
            }
        }
    }
}

/// A client process: answers key requests from lower-id peers, initiates
/// exchanges with higher-id peers, then trains and masks in lockstep with
/// the coordinator.
pub struct ClientNode<T> {
    pub opts: ClientOptions,
    pub trainer: T,
    pub data: Arc<Dataset>,
    pub train_rows: Vec<usize>,
    pub trainer_cfg: TrainerConfig,
}

impl<T: Trainer> ClientNode<T> {
    pub fn serve(self, listener: TcpListener) -> Result<ClientSummary, ProtocolError> {
        if matches!(self.opts.key_source, KeySource::Seeded(_)) && !self.opts.insecure {
            return Err(ProtocolError::ChannelNotConfidential);
        }
        let store = Arc::new(KeyStore::default());
        let stop = Arc::new(AtomicBool::new(false));
        let (control_tx, control_rx) = mpsc::channel();
        listener.set_nonblocking(true)?;
        let acceptor = {
            let store = Arc::clone(&store);
            let stop = Arc::clone(&stop);
            let opts = self.opts.clone();
            thread::spawn(move || accept_loop(listener, opts, store, stop, control_tx))
        };
        let result = self.run(&store, control_rx);
        stop.store(true, Ordering::SeqCst);
        let _ = acceptor.join();
        result
    }

    fn run(&self, store: &KeyStore, control: Receiver<(TcpStream, Message)>) -> Result<ClientSummary, ProtocolError> {
        let id = self.opts.id;
        let (mut stream, first) = control
            .recv()
            .map_err(|_| ProtocolError::Peer("listener closed before the coordinator connected".into()))?;
        let Message::InitRoster { recipient, insecure, roster } = first else {
            unreachable!("acceptor only forwards InitRoster");
        };
        let n = match validate_roster(roster.iter().map(|e| e.id)) {
            Ok(n) if recipient == id => n,
            Ok(_) => {
                let e = ProtocolError::InvalidRoster(format!("roster addressed to {recipient}, I am {id}"));
                let _ = transport::send(&mut stream, &Message::Error(e.to_string()));
                return Err(e);
            }
            Err(e) => {
                let _ = transport::send(&mut stream, &Message::Error(e.to_string()));
                return Err(e);
            }
        };
        if id as usize >= n {
            let e = ProtocolError::InvalidRoster(format!("client {id} not in roster of {n}"));
            let _ = transport::send(&mut stream, &Message::Error(e.to_string()));
            return Err(e);
        }

        let keys = match self.exchange_keys(store, &roster, insecure) {
            Ok(keys) => keys,
            Err((low, high, e)) => {
                let _ = transport::send(&mut stream, &Message::Error(key_failure_text(low, high, &e.to_string())));
                return Err(ProtocolError::KeyExchangeFailure { low, high, reason: e.to_string() });
            }
        };
        transport::send(&mut stream, &Message::Ack)?;
        info!("client {id}: {} pair keys established", keys.len());

        let peers: BTreeSet<ClientId> = (0..n as ClientId).filter(|&p| p != id).collect();
        let schema = self.trainer.schema(self.data.dim);
        let mut rounds_completed = 0;
        loop {
            let msg = match transport::recv(&mut stream) {
                Ok(m) => m,
                Err(TransportError::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            };
            match msg {
                Message::GlobalModel { round, first_epoch, epoch_count, model } => {
                    if self.opts.crash_at_round == Some(round) {
                        warn!("client {id}: injected fault at round {round}");
                        return Err(ProtocolError::InjectedFault(id));
                    }
                    let global = decode_model(&model);
                    if global.schema() != schema {
                        let e = ProtocolError::SchemaMismatch(id);
                        transport::send(&mut stream, &Message::Error(e.to_string()))?;
                        continue;
                    }
                    let plan = RoundPlan { round, first_epoch, epoch_count };
                    let update = local_update(
                        &self.trainer,
                        &global,
                        &self.data,
                        &self.train_rows,
                        &self.trainer_cfg,
                        id,
                        &plan,
                    )
                    .map_err(ProtocolError::from)
                    .and_then(|m| Ok(encode_model(&m)?))
                    .and_then(|fixed| Ok(mask_model(&fixed, id, &peers, &keys, round)?));
                    match update {
                        Ok(masked) => {
                            transport::send(&mut stream, &Message::MaskedUpdate(masked))?;
                            rounds_completed += 1;
                            debug!("client {id}: sent round {round}");
                        }
                        Err(e) => {
                            warn!("client {id}: round {round} failed locally: {e}");
                            transport::send(&mut stream, &Message::Error(e.to_string()))?;
                        }
                    }
                }
                Message::RoundAbort { round, reason } => {
                    warn!("client {id}: round {round} aborted by coordinator: {reason}");
                }
                Message::Error(text) => return Err(ProtocolError::Peer(text)),
                other => {
                    return Err(TransportError::UnexpectedMessage {
                        got: other.msg_type(),
                        expected: "GlobalModel or RoundAbort",
                    }
                    .into())
                }
            }
        }
        Ok(ClientSummary { rounds_completed, keys })
    }

    /// Request a key from every higher-id peer, then wait for lower-id
    /// peers to request theirs.
    fn exchange_keys(
        &self,
        store: &KeyStore,
        roster: &[RosterEntry],
        roster_insecure: bool,
    ) -> Result<PairKeys, (ClientId, ClientId, ProtocolError)> {
        let id = self.opts.id;
        for peer in roster.iter().filter(|e| e.id > id) {
            let fail = |e: ProtocolError| (id, peer.id, e);
            if !(self.opts.insecure && roster_insecure) {
                return Err(fail(ProtocolError::ChannelNotConfidential));
            }
            let mut s = connect_with_retry(&peer.addr, self.opts.io_timeout).map_err(|e| fail(e.into()))?;
            s.set_read_timeout(Some(self.opts.io_timeout)).map_err(|e| fail(e.into()))?;
            let req = Message::KeyRequest { initiator: id, responder: peer.id };
            transport::send(&mut s, &req).map_err(|e| fail(e.into()))?;
            match transport::recv(&mut s).map_err(|e| fail(e.into()))? {
                Message::KeyResponse { key } => {
                    store.insert(PairId { low: id, high: peer.id }, PairKey::from_bytes(*key));
                }
                Message::Error(text) => return Err(fail(ProtocolError::Peer(text))),
                other => {
                    return Err(fail(
                        TransportError::UnexpectedMessage { got: other.msg_type(), expected: "KeyResponse" }.into(),
                    ))
                }
            }
        }
        let pairs: Vec<PairId> = roster.iter().filter(|e| e.id != id).map(|e| PairId::new(id, e.id).unwrap()).collect();
        store.wait_for(&pairs, self.opts.io_timeout).map_err(|missing| {
            (missing.low, missing.high, ProtocolError::Timeout(format!("no key request from client {}", missing.low)))
        })
    }
}

fn accept_loop(
    listener: TcpListener,
    opts: ClientOptions,
    store: Arc<KeyStore>,
    stop: Arc<AtomicBool>,
    control: Sender<(TcpStream, Message)>,
) {
    let control_taken = Arc::new(AtomicBool::new(false));
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                debug!("client {}: connection from {peer}", opts.id);
                let (opts, store, control, taken) =
                    (opts.clone(), Arc::clone(&store), control.clone(), Arc::clone(&control_taken));
                thread::spawn(move || {
                    if let Err(e) = handle_connection(stream, &opts, &store, &control, &taken) {
                        warn!("client {}: incoming connection failed: {e}", opts.id);
                    }
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
            Err(e) => {
                warn!("client {}: accept failed: {e}", opts.id);
                thread::sleep(Duration::from_millis(10));
            }
        }
    }
}

fn handle_connection(
    mut stream: TcpStream,
    opts: &ClientOptions,
    store: &KeyStore,
    control: &Sender<(TcpStream, Message)>,
    control_taken: &AtomicBool,
) -> Result<(), ProtocolError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(opts.io_timeout))?;
    match transport::recv(&mut stream)? {
        Message::KeyRequest { initiator, responder } => {
            let pair = match PairId::new(initiator, responder) {
                Some(p) if responder == opts.id && initiator < responder => p,
                _ => {
                    let text = format!("bad key request {initiator}->{responder}");
                    transport::send(&mut stream, &Message::Error(text.clone()))?;
                    return Err(ProtocolError::Peer(text));
                }
            };
            if !opts.insecure {
                let e = ProtocolError::ChannelNotConfidential;
                transport::send(&mut stream, &Message::Error(e.to_string()))?;
                return Err(e);
            }
            let key = opts.key_source.key_for(pair)?;
            transport::send(&mut stream, &Message::KeyResponse { key: Box::new(*key.as_bytes()) })?;
            store.insert(pair, key);
            Ok(())
        }
        msg @ Message::InitRoster { .. } => {
            if control_taken.swap(true, Ordering::SeqCst) {
                transport::send(&mut stream, &Message::Error("session already initialized".into()))?;
                return Ok(());
            }
            // Rounds can be far apart; the coordinator connection blocks
            // without a read timeout.
            stream.set_read_timeout(None)?;
            let _ = control.send((stream, msg));
            Ok(())
        }
        other => {
            transport::send(&mut stream, &Message::Error(format!("unexpected {:?}", other.msg_type())))?;
            Ok(())
        }
    }
}
