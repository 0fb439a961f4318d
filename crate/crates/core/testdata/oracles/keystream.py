"""Reference ChaCha20 keystream words for the mask generator.

Uses the `cryptography` package (OpenSSL) as an independent implementation.
Key: first 32 bytes of the pair key. Nonce: round as 8 bytes LE + 4 zero
bytes. Block counter starts at 0. Words are consecutive 8-byte LE chunks.
"""
import struct
import sys

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms


def words(key32: bytes, rnd: int, count: int):
    # OpenSSL's 16-byte "nonce" is counter (4 bytes LE) || 96-bit nonce.
    iv = struct.pack("<I", 0) + struct.pack("<Q", rnd) + b"\x00" * 4
    enc = Cipher(algorithms.ChaCha20(key32, iv), mode=None).encryptor()
    stream = enc.update(b"\x00" * (8 * count))
    return [struct.unpack_from("<Q", stream, 8 * i)[0] for i in range(count)]


if __name__ == "__main__":
    out = sys.stdout
    out.write("# ChaCha20 mask keystream, all-zero 128-byte pair key\n")
    out.write("# one section per round: '# round R' then 16 hex u64 words\n")
    for rnd in range(4):
        out.write(f"# round {rnd}\n")
        for w in words(b"\x00" * 32, rnd, 16):
            out.write(f"{w:016x}\n")
