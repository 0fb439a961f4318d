use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::{parse_key_failure, snap_to_grid, KeyExchangeState, ProtocolError, RoundPlan, RoundState, SessionConfig};
use crate::fixedpoint::encode_model;
use crate::masking::ClientId;
use crate::model::ModelVector;
use crate::transport::{self, Message, RosterEntry, TransportError};

/// Result of a completed session.
#[derive(Debug)]
pub struct SessionOutcome {
    pub model: ModelVector,
    pub rounds: Vec<RoundPlan>,
}

/// Coordinator state machine over one stream per client.
///
/// Streams are indexed by client id. A stream that fails is dropped and
/// never reused; every later round that needs it aborts.
pub struct Coordinator<L> {
    cfg: SessionConfig,
    links: Vec<Option<L>>,
    global: ModelVector,
    next_round: u64,
    keys: KeyExchangeState,
}

/// Open one TCP stream per client, retrying until `cfg.io_timeout`.
pub fn connect_clients(cfg: &SessionConfig) -> Result<Vec<TcpStream>, ProtocolError> {
    cfg.validate()?;
    cfg.clients
        .iter()
        .map(|c| {
            let unreachable =
                |reason: String| ProtocolError::UnreachableClient { id: c.id, addr: c.addr.clone(), reason };
            let stream = connect_with_retry(&c.addr, cfg.io_timeout).map_err(|e| unreachable(e.to_string()))?;
            stream.set_read_timeout(Some(cfg.io_timeout)).map_err(|e| unreachable(e.to_string()))?;
            stream.set_nodelay(true).map_err(|e| unreachable(e.to_string()))?;
            Ok(stream)
        })
        .collect()
}

pub(crate) fn connect_with_retry(addr: &str, timeout: Duration) -> std::io::Result<TcpStream> {
    let deadline = Instant::now() + timeout;
    loop {
        let attempt = addr.to_socket_addrs().and_then(|mut addrs| {
            let a = addrs
                .next()
                .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "address did not resolve"))?;
            TcpStream::connect_timeout(&a, Duration::from_secs(1))
        });
        match attempt {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => return Err(e),
            Err(_) => thread::sleep(Duration::from_millis(25)),
        }
    }
}

impl<L: Read + Write + Send> Coordinator<L> {
    /// Broadcast the roster, then wait until every client reports holding
    /// all of its pair keys.
    pub fn initialize(cfg: SessionConfig, links: Vec<L>, initial: &ModelVector) -> Result<Self, ProtocolError> {
        cfg.validate()?;
        if links.len() != cfg.client_count() {
            return Err(ProtocolError::InvalidRoster(format!(
                "{} links for {} clients",
                links.len(),
                cfg.client_count()
            )));
        }
        if initial.schema() != cfg.schema {
            return Err(ProtocolError::InvalidRoster("initial model does not match the session schema".into()));
        }
        let global = snap_to_grid(initial)?;
        let roster: Vec<RosterEntry> =
            cfg.clients.iter().map(|c| RosterEntry { id: c.id, addr: c.addr.clone() }).collect();
        let mut links: Vec<Option<L>> = links.into_iter().map(Some).collect();
        for (id, link) in links.iter_mut().enumerate() {
            let msg = Message::InitRoster { recipient: id as ClientId, insecure: cfg.insecure, roster: roster.clone() };
            transport::send(link.as_mut().unwrap(), &msg).map_err(|e| ProtocolError::UnreachableClient {
                id: id as ClientId,
                addr: cfg.clients[id].addr.clone(),
                reason: e.to_string(),
            })?;
        }
        let mut keys = KeyExchangeState::new(cfg.client_count());
        for (id, link) in links.iter_mut().enumerate() {
            match transport::recv(link.as_mut().unwrap()) {
                Ok(Message::Ack) => keys.client_ready(id as ClientId),
                Ok(Message::Error(text)) => {
                    return Err(parse_key_failure(&text).unwrap_or(ProtocolError::Peer(text)));
                }
                Ok(other) => {
                    return Err(TransportError::UnexpectedMessage { got: other.msg_type(), expected: "Ack" }.into())
                }
                Err(TransportError::Io(e))
                    if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
                {
                    return Err(ProtocolError::Timeout(format!("client {id} did not finish key exchange")));
                }
                Err(e) => return Err(e.into()),
            }
        }
        debug_assert!(keys.is_complete());
        info!("session initialized: {} clients, {} pairs", cfg.client_count(), keys.established());
        Ok(Coordinator { cfg, links, global, next_round: 0, keys })
    }

    pub fn global_model(&self) -> &ModelVector {
        &self.global
    }

    pub fn key_state(&self) -> &KeyExchangeState {
        &self.keys
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn next_round(&self) -> u64 {
        self.next_round
    }

    pub fn into_links(self) -> Vec<Option<L>> {
        self.links
    }

    fn drop_link(&mut self, id: usize, why: &dyn std::fmt::Display) {
        if self.links[id].take().is_some() {
            warn!("dropping client {id}: {why}");
        }
    }

    /// Distribute the global model, collect one masked update per client,
    /// and install the secure average. On any failure the global model is
    /// left untouched.
    pub fn run_global_epoch(&mut self, plan: &RoundPlan) -> Result<&ModelVector, ProtocolError> {
        if plan.round != self.next_round {
            return Err(ProtocolError::InvalidRoster(format!(
                "round {} requested, expected {}",
                plan.round, self.next_round
            )));
        }
        let n = self.cfg.client_count();
        let mut state = RoundState::new(plan.round, (0..n as ClientId).collect());
        let msg = Message::GlobalModel {
            round: plan.round,
            first_epoch: plan.first_epoch,
            epoch_count: plan.epoch_count,
            model: encode_model(&self.global)?,
        };
        let mut failures: Vec<String> = Vec::new();
        for id in 0..n {
            if let Some(link) = self.links[id].as_mut() {
                if let Err(e) = transport::send(link, &msg) {
                    self.drop_link(id, &e);
                }
            }
            if self.links[id].is_none() {
                failures.push(format!("client {id} disconnected"));
            }
        }
        state.begin_collecting();

        // Updates arrive concurrently and are applied to the round state
        // one at a time, in arrival order.
        let mut arrivals = Vec::new();
        thread::scope(|scope| {
            let (tx, rx) = mpsc::channel();
            for (id, link) in self.links.iter_mut().enumerate() {
                if let Some(link) = link.as_mut() {
                    let tx = tx.clone();
                    scope.spawn(move || {
                        let _ = tx.send((id, transport::recv(link)));
                    });
                }
            }
            drop(tx);
            arrivals.extend(rx.iter());
        });

        let mut round_error: Option<ProtocolError> = None;
        for (id, result) in arrivals {
            match result {
                Ok(Message::MaskedUpdate(u)) if u.client_id as usize != id => {
                    failures.push(format!("client {id} sent an update labelled {}", u.client_id));
                }
                Ok(Message::MaskedUpdate(u)) => {
                    if let Err(e) = state.accept(u) {
                        round_error.get_or_insert(e);
                    }
                }
                Ok(Message::Error(text)) => failures.push(format!("client {id}: {text}")),
                Ok(other) => failures.push(format!("client {id} sent unexpected {:?}", other.msg_type())),
                Err(e) => {
                    failures.push(format!("client {id}: {e}"));
                    self.drop_link(id, &e);
                }
            }
        }

        let result = match (round_error, failures.is_empty()) {
            (Some(e), _) => Err(e),
            (None, false) => Err(state.abort_with(failures.join("; "))),
            (None, true) => state.finish(),
        };
        match result {
            Ok(average) => {
                self.global = snap_to_grid(&average)?;
                self.next_round += 1;
                debug!("round {} complete", plan.round);
                Ok(&self.global)
            }
            Err(e) => {
                let reason = e.to_string();
                for id in 0..n {
                    if let Some(link) = self.links[id].as_mut() {
                        let abort = Message::RoundAbort { round: plan.round, reason: reason.clone() };
                        if let Err(send_err) = transport::send(link, &abort) {
                            self.drop_link(id, &send_err);
                        }
                    }
                }
                Err(e)
            }
        }
    }

    /// Run every remaining round of the schedule, retrying a failed round
    /// up to `max_failed_rounds` consecutive attempts.
    pub fn run_session<F>(&mut self, mut on_round: F) -> Result<SessionOutcome, ProtocolError>
    where
        F: FnMut(&RoundPlan, &ModelVector) -> Result<(), ProtocolError>,
    {
        let start = self.next_round;
        let plans = self.cfg.schedule();
        let mut done = Vec::new();
        for plan in plans.iter().filter(|p| p.round >= start) {
            let mut attempts = 0;
            loop {
                match self.run_global_epoch(plan) {
                    Ok(model) => {
                        on_round(plan, model)?;
                        done.push(*plan);
                        break;
                    }
                    Err(e) if e.is_round_failure() => {
                        attempts += 1;
                        warn!("round {} attempt {attempts} failed: {e}", plan.round);
                        if attempts >= self.cfg.max_failed_rounds.max(1) {
                            return Err(ProtocolError::SessionAborted {
                                round: plan.round,
                                attempts,
                                last: Box::new(e),
                            });
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(SessionOutcome { model: self.global.clone(), rounds: done })
    }
}
