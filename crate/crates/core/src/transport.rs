//! Length-prefixed binary framing over any reliable byte stream.
//!
//! Frame layout: `length: u32 LE | msg_type: u8 | payload: [u8; length]`.
//! All integers are little-endian; model words are 8-byte two's-complement.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::fixedpoint::{FixedLayer, FixedModel, FixedWord};
use crate::masking::{ClientId, MaskedUpdate, RoundNonce, PAIR_KEY_LEN};

/// Largest accepted payload, 256 MiB.
pub const MAX_PAYLOAD: u32 = 256 * 1024 * 1024;

pub const HEADER_LEN: usize = 5;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("payload of {0} bytes exceeds the 256 MiB bound")]
    OversizePayload(u64),
    #[error("unknown message type 0x{0:02x}")]
    UnknownMsgType(u8),
    #[error("malformed model at offset {offset}: {reason}")]
    MalformedModel { offset: usize, reason: &'static str },
    #[error("malformed {kind} message: {reason}")]
    MalformedMessage { kind: &'static str, reason: &'static str },
    #[error("unexpected {got:?} message while waiting for {expected}")]
    UnexpectedMessage { got: MsgType, expected: &'static str },
    #[error("peer reported error: {0}")]
    Remote(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    InitRoster = 0x01,
    KeyRequest = 0x02,
    KeyResponse = 0x03,
    GlobalModel = 0x10,
    MaskedUpdate = 0x11,
    RoundAbort = 0x12,
    Ack = 0x20,
    Error = 0x7F,
}

impl TryFrom<u8> for MsgType {
    type Error = TransportError;

    fn try_from(b: u8) -> Result<Self, TransportError> {
        Ok(match b {
            0x01 => MsgType::InitRoster,
            0x02 => MsgType::KeyRequest,
            0x03 => MsgType::KeyResponse,
            0x10 => MsgType::GlobalModel,
            0x11 => MsgType::MaskedUpdate,
            0x12 => MsgType::RoundAbort,
            0x20 => MsgType::Ack,
            0x7F => MsgType::Error,
            other => return Err(TransportError::UnknownMsgType(other)),
        })
    }
}

/// Write one frame as a single buffered unit.
pub fn write_frame<W: Write>(w: &mut W, msg_type: MsgType, payload: &[u8]) -> Result<(), TransportError> {
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|&l| l <= MAX_PAYLOAD)
        .ok_or(TransportError::OversizePayload(payload.len() as u64))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + payload.len());
    buf.extend_from_slice(&len.to_le_bytes());
    buf.push(msg_type as u8);
    buf.extend_from_slice(payload);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Read one frame. A truncated stream yields an I/O error and no message.
pub fn read_frame<R: Read>(r: &mut R) -> Result<(MsgType, Vec<u8>), TransportError> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    let len = u32::from_le_bytes(header[..4].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(TransportError::OversizePayload(len as u64));
    }
    let msg_type = MsgType::try_from(header[4])?;
    // Grow with the bytes actually received rather than trusting `len`.
    let mut payload = Vec::with_capacity((len as usize).min(64 * 1024));
    r.take(len as u64).read_to_end(&mut payload)?;
    if payload.len() != len as usize {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated frame payload").into());
    }
    Ok((msg_type, payload))
}

/// [`read_frame`], but answers an unknown message type with an Error frame.
/// The caller is expected to drop the stream afterwards.
pub fn read_frame_or_reject<S: Read + Write>(s: &mut S) -> Result<(MsgType, Vec<u8>), TransportError> {
    let res = read_frame(s);
    if let Err(TransportError::UnknownMsgType(t)) = &res {
        let msg = format!("unknown message type 0x{t:02x}");
        let _ = write_frame(s, MsgType::Error, msg.as_bytes());
    }
    res
}

pub fn serialize_model(m: &FixedModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + m.layers.len() * 6 + m.param_count() * 8);
    write_model(&mut out, m);
    out
}

/// Panics if a layer name exceeds 65535 bytes or a layer exceeds `u32::MAX`
/// words; neither fits the wire format.
fn write_model(out: &mut Vec<u8>, m: &FixedModel) {
    assert!(m.layers.iter().all(|l| l.name.len() <= u16::MAX as usize && l.words.len() <= u32::MAX as usize));
    out.extend_from_slice(&(m.layers.len() as u32).to_le_bytes());
    for layer in &m.layers {
        let name = layer.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(layer.words.len() as u32).to_le_bytes());
        for w in &layer.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
}

/// Bounds-checked little-endian reader over a byte slice.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], TransportError> {
        if self.remaining() < n {
            return Err(TransportError::MalformedModel { offset: self.pos, reason: what });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, TransportError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, TransportError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, TransportError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn model(&mut self) -> Result<FixedModel, TransportError> {
        let layer_count = self.u32("truncated layer count")? as usize;
        // Each layer needs at least 6 header bytes.
        if layer_count > self.remaining() / 6 {
            return Err(TransportError::MalformedModel { offset: self.pos - 4, reason: "layer count exceeds buffer" });
        }
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let name_len = self.u16("truncated name length")? as usize;
            let name_at = self.pos;
            let name = std::str::from_utf8(self.take(name_len, "truncated layer name")?)
                .map_err(|_| TransportError::MalformedModel { offset: name_at, reason: "layer name is not UTF-8" })?
                .to_owned();
            let count_at = self.pos;
            let word_count = self.u32("truncated word count")? as usize;
            if word_count > self.remaining() / 8 {
                return Err(TransportError::MalformedModel { offset: count_at, reason: "word count exceeds buffer" });
            }
            let words = self
                .take(word_count * 8, "truncated words")?
                .chunks_exact(8)
                .map(|c| FixedWord::from_le_bytes(c.try_into().unwrap()))
                .collect();
            layers.push(FixedLayer { name, words });
        }
        Ok(FixedModel { layers })
    }

    fn finish(&self) -> Result<(), TransportError> {
        if self.remaining() != 0 {
            return Err(TransportError::MalformedModel { offset: self.pos, reason: "trailing bytes" });
        }
        Ok(())
    }
}

pub fn parse_model(bytes: &[u8]) -> Result<FixedModel, TransportError> {
    let mut c = Cursor::new(bytes);
    let m = c.model()?;
    c.finish()?;
    Ok(m)
}

/// Roster entry sent in an InitRoster message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RosterEntry {
    pub id: ClientId,
    pub addr: String,
}

/// Typed protocol messages and their payload layouts.
///
/// | type | payload |
/// |------|---------|
/// | InitRoster  | `recipient u32, insecure u8, count u32, count × (id u32, addr_len u16, addr)` |
/// | KeyRequest  | `initiator u32, responder u32` |
/// | KeyResponse | 128 key bytes |
/// | GlobalModel | `round u64, first_epoch u32, epoch_count u32, model` |
/// | MaskedUpdate| `client u32, round u64, model` |
/// | RoundAbort  | `round u64, UTF-8 reason` |
/// | Ack         | empty |
/// | Error       | UTF-8 message |
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    InitRoster { recipient: ClientId, insecure: bool, roster: Vec<RosterEntry> },
    KeyRequest { initiator: ClientId, responder: ClientId },
    KeyResponse { key: Box<[u8; PAIR_KEY_LEN]> },
    GlobalModel { round: RoundNonce, first_epoch: u32, epoch_count: u32, model: FixedModel },
    MaskedUpdate(MaskedUpdate),
    RoundAbort { round: RoundNonce, reason: String },
    Ack,
    Error(String),
}

fn malformed(kind: &'static str, reason: &'static str) -> TransportError {
    TransportError::MalformedMessage { kind, reason }
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::InitRoster { .. } => MsgType::InitRoster,
            Message::KeyRequest { .. } => MsgType::KeyRequest,
            Message::KeyResponse { .. } => MsgType::KeyResponse,
            Message::GlobalModel { .. } => MsgType::GlobalModel,
            Message::MaskedUpdate(_) => MsgType::MaskedUpdate,
            Message::RoundAbort { .. } => MsgType::RoundAbort,
            Message::Ack => MsgType::Ack,
            Message::Error(_) => MsgType::Error,
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Message::InitRoster { recipient, insecure, roster } => {
                out.extend_from_slice(&recipient.to_le_bytes());
                out.push(*insecure as u8);
                out.extend_from_slice(&(roster.len() as u32).to_le_bytes());
                for e in roster {
                    out.extend_from_slice(&e.id.to_le_bytes());
                    out.extend_from_slice(&(e.addr.len() as u16).to_le_bytes());
                    out.extend_from_slice(e.addr.as_bytes());
                }
            }
            Message::KeyRequest { initiator, responder } => {
                out.extend_from_slice(&initiator.to_le_bytes());
                out.extend_from_slice(&responder.to_le_bytes());
            }
            Message::KeyResponse { key } => out.extend_from_slice(&key[..]),
            Message::GlobalModel { round, first_epoch, epoch_count, model } => {
                out.extend_from_slice(&round.to_le_bytes());
                out.extend_from_slice(&first_epoch.to_le_bytes());
                out.extend_from_slice(&epoch_count.to_le_bytes());
                write_model(&mut out, model);
            }
            Message::MaskedUpdate(u) => {
                out.extend_from_slice(&u.client_id.to_le_bytes());
                out.extend_from_slice(&u.round.to_le_bytes());
                write_model(&mut out, &u.payload);
            }
            Message::RoundAbort { round, reason } => {
                out.extend_from_slice(&round.to_le_bytes());
                out.extend_from_slice(reason.as_bytes());
            }
            Message::Ack => {}
            Message::Error(msg) => out.extend_from_slice(msg.as_bytes()),
        }
        out
    }

    pub fn decode(msg_type: MsgType, payload: &[u8]) -> Result<Message, TransportError> {
        let mut c = Cursor::new(payload);
        let relabel = |kind: &'static str| {
            move |e: TransportError| match e {
                TransportError::MalformedModel { reason, .. } => malformed(kind, reason),
                other => other,
            }
        };
        let msg = match msg_type {
            MsgType::InitRoster => {
                let r = relabel("InitRoster");
                let recipient = c.u32("truncated").map_err(r)?;
                let insecure = match c.take(1, "truncated").map_err(r)?[0] {
                    0 => false,
                    1 => true,
                    _ => return Err(malformed("InitRoster", "insecure flag not 0/1")),
                };
                let count = c.u32("truncated").map_err(r)? as usize;
                if count > c.remaining() / 6 {
                    return Err(malformed("InitRoster", "roster count exceeds payload"));
                }
                let mut roster = Vec::with_capacity(count);
                for _ in 0..count {
                    let id = c.u32("truncated").map_err(r)?;
                    let len = c.u16("truncated").map_err(r)? as usize;
                    let addr = std::str::from_utf8(c.take(len, "truncated").map_err(r)?)
                        .map_err(|_| malformed("InitRoster", "address is not UTF-8"))?
                        .to_owned();
                    roster.push(RosterEntry { id, addr });
                }
                c.finish().map_err(r)?;
                Message::InitRoster { recipient, insecure, roster }
            }
            MsgType::KeyRequest => {
                let r = relabel("KeyRequest");
                let initiator = c.u32("truncated").map_err(r)?;
                let responder = c.u32("truncated").map_err(r)?;
                c.finish().map_err(r)?;
                Message::KeyRequest { initiator, responder }
            }
            MsgType::KeyResponse => {
                let key: [u8; PAIR_KEY_LEN] =
                    payload.try_into().map_err(|_| malformed("KeyResponse", "key must be 128 bytes"))?;
                Message::KeyResponse { key: Box::new(key) }
            }
            MsgType::GlobalModel => {
                let round = c.u64("truncated header").map_err(relabel("GlobalModel"))?;
                let first_epoch = c.u32("truncated header").map_err(relabel("GlobalModel"))?;
                let epoch_count = c.u32("truncated header").map_err(relabel("GlobalModel"))?;
                let model = c.model()?;
                c.finish()?;
                Message::GlobalModel { round, first_epoch, epoch_count, model }
            }
            MsgType::MaskedUpdate => {
                let client_id = c.u32("truncated header").map_err(relabel("MaskedUpdate"))?;
                let round = c.u64("truncated header").map_err(relabel("MaskedUpdate"))?;
                let payload = c.model()?;
                c.finish()?;
                Message::MaskedUpdate(MaskedUpdate { client_id, round, payload })
            }
            MsgType::RoundAbort => {
                let round = c.u64("truncated").map_err(relabel("RoundAbort"))?;
                let reason = String::from_utf8_lossy(&payload[8..]).into_owned();
                Message::RoundAbort { round, reason }
            }
            MsgType::Ack => {
                c.finish().map_err(relabel("Ack"))?;
                Message::Ack
            }
            MsgType::Error => Message::Error(String::from_utf8_lossy(payload).into_owned()),
        };
        Ok(msg)
    }
}

pub fn send<W: Write>(w: &mut W, msg: &Message) -> Result<(), TransportError> {
    write_frame(w, msg.msg_type(), &msg.encode_payload())
}

pub fn recv<S: Read + Write>(s: &mut S) -> Result<Message, TransportError> {
    let (t, payload) = read_frame_or_reject(s)?;
    Message::decode(t, &payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn write_frame_layout() {
        let mut out = Vec::new();
        write_frame(&mut out, MsgType::Ack, &[]).unwrap();
        assert_eq!(out, [0x00, 0x00, 0x00, 0x00, 0x20]);
        out.clear();
        write_frame(&mut out, MsgType::RoundAbort, &[0xFF]).unwrap();
        assert_eq!(out, [0x01, 0x00, 0x00, 0x00, 0x12, 0xFF]);
    }

    #[test]
    fn truncated_stream_is_io_error() {
        let mut out = Vec::new();
        write_frame(&mut out, MsgType::Error, b"hello").unwrap();
        for cut in 0..out.len() {
            let res = read_frame(&mut &out[..cut]);
            assert!(matches!(res, Err(TransportError::Io(_))), "cut {cut}");
        }
        assert_eq!(read_frame(&mut &out[..]).unwrap(), (MsgType::Error, b"hello".to_vec()));
    }

    #[test]
    fn oversize_length_rejected_before_allocation() {
        let bytes = [0xFF, 0xFF, 0xFF, 0xFF, 0x20];
        assert!(matches!(read_frame(&mut &bytes[..]), Err(TransportError::OversizePayload(0xFFFF_FFFF))));
        let big = vec![0u8; MAX_PAYLOAD as usize + 1];
        assert!(matches!(write_frame(&mut Vec::new(), MsgType::Ack, &big), Err(TransportError::OversizePayload(_))));
    }

    #[test]
    fn unknown_type_answered_with_error_frame() {
        struct Duplex {
            input: std::io::Cursor<Vec<u8>>,
            output: Vec<u8>,
        }
        impl Read for Duplex {
            fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
                self.input.read(buf)
            }
        }
        impl Write for Duplex {
            fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
                self.output.write(buf)
            }
            fn flush(&mut self) -> io::Result<()> {
                Ok(())
            }
        }
        let mut d = Duplex { input: std::io::Cursor::new(vec![0, 0, 0, 0, 0x55]), output: Vec::new() };
        assert!(matches!(read_frame_or_reject(&mut d), Err(TransportError::UnknownMsgType(0x55))));
        let (t, p) = read_frame(&mut &d.output[..]).unwrap();
        assert_eq!(t, MsgType::Error);
        assert_eq!(p, b"unknown message type 0x55");
    }

    #[test]
    fn empty_model_is_four_zero_bytes() {
        assert_eq!(serialize_model(&FixedModel::default()), [0, 0, 0, 0]);
        assert_eq!(parse_model(&[0, 0, 0, 0]).unwrap(), FixedModel::default());
    }

    #[test]
    fn parse_rejects_bad_buffers() {
        let m = FixedModel::new(vec![FixedLayer { name: "w".into(), words: vec![FixedWord(1), FixedWord(-1)] }]);
        let bytes = serialize_model(&m);
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(parse_model(&trailing), Err(TransportError::MalformedModel { reason: "trailing bytes", .. })));
        for cut in 0..bytes.len() {
            assert!(matches!(parse_model(&bytes[..cut]), Err(TransportError::MalformedModel { .. })));
        }
        let mut bad_name = bytes.clone();
        bad_name[6] = 0xFF;
        assert!(matches!(
            parse_model(&bad_name),
            Err(TransportError::MalformedModel { offset: 6, reason: "layer name is not UTF-8" })
        ));
        // Huge declared counts must fail without allocating.
        assert!(parse_model(&[0xFF, 0xFF, 0xFF, 0xFF]).is_err());
        assert!(parse_model(&[1, 0, 0, 0, 0, 0, 0xFF, 0xFF, 0xFF, 0xFF]).is_err());
    }

    #[test]
    fn messages_round_trip() {
        let model = FixedModel::new(vec![FixedLayer {
            name: "weights".into(),
            words: vec![FixedWord(3), FixedWord(i64::MIN)],
        }]);
        let msgs = vec![
            Message::InitRoster {
                recipient: 1,
                insecure: true,
                roster: vec![
                    RosterEntry { id: 0, addr: "127.0.0.1:9000".into() },
                    RosterEntry { id: 1, addr: "127.0.0.1:9001".into() },
                ],
            },
            Message::KeyRequest { initiator: 0, responder: 2 },
            Message::KeyResponse { key: Box::new([9; PAIR_KEY_LEN]) },
            Message::GlobalModel { round: 7, first_epoch: 7, epoch_count: 1, model: model.clone() },
            Message::MaskedUpdate(MaskedUpdate { client_id: 1, round: 7, payload: model }),
            Message::RoundAbort { round: 7, reason: "client 1 vanished".into() },
            Message::Ack,
            Message::Error("nope".into()),
        ];
        for msg in msgs {
            let mut wire = Vec::new();
            send(&mut wire, &msg).unwrap();
            let (t, p) = read_frame(&mut &wire[..]).unwrap();
            assert_eq!(Message::decode(t, &p).unwrap(), msg);
        }
    }

    #[test]
    fn malformed_messages() {
        assert!(Message::decode(MsgType::KeyResponse, &[0; 127]).is_err());
        assert!(Message::decode(MsgType::KeyRequest, &[0; 9]).is_err());
        assert!(Message::decode(MsgType::Ack, &[0]).is_err());
        assert!(Message::decode(MsgType::InitRoster, &[0, 0, 0, 0, 2, 0, 0, 0, 0]).is_err());
        assert!(Message::decode(MsgType::GlobalModel, &[0; 15]).is_err());
        assert!(Message::decode(MsgType::RoundAbort, &[0; 7]).is_err());
    }

    fn arb_model() -> impl Strategy<Value = FixedModel> {
        prop::collection::vec(("[a-z\u{e9}]{0,12}", prop::collection::vec(any::<i64>(), 0..20)), 0..5).prop_map(
            |layers| {
                FixedModel::new(
                    layers
                        .into_iter()
                        .map(|(name, ws)| FixedLayer { name, words: ws.into_iter().map(FixedWord).collect() })
                        .collect(),
                )
            },
        )
    }

    proptest! {
        #[test]
        fn model_round_trip(m in arb_model()) {
            prop_assert_eq!(parse_model(&serialize_model(&m)).unwrap(), m);
        }

        #[test]
        fn frame_round_trip(t in prop::sample::select(vec![0x01u8, 0x02, 0x03, 0x10, 0x11, 0x12, 0x20, 0x7F]),
                            payload in prop::collection::vec(any::<u8>(), 0..300)) {
            let t = MsgType::try_from(t).unwrap();
            let mut wire = Vec::new();
            write_frame(&mut wire, t, &payload).unwrap();
            prop_assert_eq!(wire.len(), HEADER_LEN + payload.len());
            prop_assert_eq!(read_frame(&mut &wire[..]).unwrap(), (t, payload));
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let _ = parse_model(&bytes);
            let _ = read_frame(&mut &bytes[..]);
            for t in [MsgType::InitRoster, MsgType::GlobalModel, MsgType::MaskedUpdate, MsgType::RoundAbort] {
                let _ = Message::decode(t, &bytes);
            }
        }
    }
}
