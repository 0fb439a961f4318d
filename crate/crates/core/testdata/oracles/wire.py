"""Golden frames for the wire format, built with struct only.

Writes one .bin file per frame into testdata/wire/. The masked update uses
the OpenSSL keystream from keystream.py, so it also pins the mask layout.
"""
import os
import struct

from keystream import words

SCALE = 1 << 24
MOD = 1 << 64


def encode(x: float) -> int:
    # Python's round() is round-half-to-even.
    return round(x * SCALE) % MOD


def frame(msg_type: int, payload: bytes) -> bytes:
    return struct.pack("<IB", len(payload), msg_type) + payload


def model(layers) -> bytes:
    out = struct.pack("<I", len(layers))
    for name, ws in layers:
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<I", len(ws))
        out += b"".join(struct.pack("<Q", w % MOD) for w in ws)
    return out


def main():
    here = os.path.dirname(os.path.abspath(__file__))
    dest = os.path.join(here, "..", "wire")
    os.makedirs(dest, exist_ok=True)

    plain = [("weights", [encode(0.5), encode(-0.25)]), ("bias", [encode(0.1)])]
    ks = words(b"\x00" * 32, 1, 3)
    flat = [w for _, ws in plain for w in ws]
    masked_flat = [(w + k) % MOD for w, k in zip(flat, ks)]
    masked = [("weights", masked_flat[:2]), ("bias", masked_flat[2:])]

    frames = {
        "ack": frame(0x20, b""),
        "error": frame(0x7F, "bad request".encode()),
        "key_request": frame(0x02, struct.pack("<II", 0, 3)),
        "key_response": frame(0x03, bytes(range(128))),
        "init_roster": frame(
            0x01,
            struct.pack("<IBI", 1, 1, 2)
            + struct.pack("<IH", 0, 14) + b"127.0.0.1:7000"
            + struct.pack("<IH", 1, 14) + b"127.0.0.1:7001",
        ),
        "global_model": frame(0x10, struct.pack("<QII", 4, 4, 1) + model([("w", [encode(1.0), encode(-2.5)])])),
        "global_model_empty": frame(0x10, struct.pack("<QII", 0, 0, 1) + model([])),
        "masked_update": frame(0x11, struct.pack("<IQ", 0, 1) + model(masked)),
        "round_abort": frame(0x12, struct.pack("<Q", 7) + "client 2 disconnected".encode()),
    }
    for name, data in frames.items():
        with open(os.path.join(dest, name + ".bin"), "wb") as f:
            f.write(data)


if __name__ == "__main__":
    main()
