//! Golden frames under `testdata/wire/` were produced by an independent
//! script (`testdata/oracles/wire.py`).

use std::collections::BTreeSet;
use std::io::Cursor;
use std::path::PathBuf;

use maskfed::fixedpoint::{encode_model, FixedLayer, FixedModel};
use maskfed::masking::{mask_model, PairId, PairKey, PairKeys};
use maskfed::model::ModelVector;
use maskfed::transport::{self, Message, RosterEntry};

fn golden(name: &str) -> Vec<u8> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("testdata/wire").join(format!("{name}.bin"));
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn encode_frame(msg: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    transport::send(&mut out, msg).unwrap();
    out
}

fn decode_frame(bytes: &[u8]) -> Message {
    let (t, payload) = transport::read_frame(&mut Cursor::new(bytes)).unwrap();
    Message::decode(t, &payload).unwrap()
}

#[test]
fn every_golden_file_round_trips() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("testdata/wire");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let bytes = std::fs::read(entry.unwrap().path()).unwrap();
        assert_eq!(encode_frame(&decode_frame(&bytes)), bytes);
        seen += 1;
    }
    assert!(seen >= 9);
}

#[test]
fn builds_the_same_bytes_as_the_reference() {
    let words = |name: &str, w: &[i64]| FixedLayer {
        name: name.into(),
        words: w.iter().map(|&x| maskfed::FixedWord(x)).collect(),
    };
    let cases = [
        ("ack", Message::Ack),
        ("error", Message::Error("bad request".into())),
        ("key_request", Message::KeyRequest { initiator: 0, responder: 3 }),
        ("key_response", Message::KeyResponse { key: Box::new(std::array::from_fn(|i| i as u8)) }),
        (
            "init_roster",
            Message::InitRoster {
                recipient: 1,
                insecure: true,
                roster: vec![
                    RosterEntry { id: 0, addr: "127.0.0.1:7000".into() },
                    RosterEntry { id: 1, addr: "127.0.0.1:7001".into() },
                ],
            },
        ),
        (
            "global_model",
            Message::GlobalModel {
                round: 4,
                first_epoch: 4,
                epoch_count: 1,
                model: FixedModel { layers: vec![words("w", &[1 << 24, -(5 << 23)])] },
            },
        ),
        (
            "global_model_empty",
            Message::GlobalModel { round: 0, first_epoch: 0, epoch_count: 1, model: FixedModel { layers: vec![] } },
        ),
        ("round_abort", Message::RoundAbort { round: 7, reason: "client 2 disconnected".into() }),
    ];
    for (name, msg) in cases {
        assert_eq!(encode_frame(&msg), golden(name), "{name}");
    }
}

#[test]
fn masked_update_matches_reference_masking() {
    let plain = ModelVector::new(vec![("weights".into(), vec![0.5, -0.25]), ("bias".into(), vec![0.1])]);
    let fixed = encode_model(&plain).unwrap();
    let mut keys = PairKeys::new();
    keys.insert(PairId { low: 0, high: 1 }, PairKey::from_bytes([0; 128]));
    let update = mask_model(&fixed, 0, &BTreeSet::from([1]), &keys, 1).unwrap();
    assert_eq!(encode_frame(&Message::MaskedUpdate(update)), golden("masked_update"));
}
