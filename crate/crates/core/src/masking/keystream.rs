//! ChaCha20 keystream (96-bit nonce, 32-bit block counter) read as a
//! sequence of little-endian 64-bit words.

const SIGMA: [u32; 4] = [0x6170_7865, 0x3320_646e, 0x7962_2d32, 0x6b20_6574];

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const BLOCK_LEN: usize = 64;

/// Maximum number of 64-bit words one (key, nonce) stream can produce.
pub const MAX_WORDS: u64 = (1u64 << 32) * (BLOCK_LEN as u64 / 8);

#[inline(always)]
fn quarter_round(s: &mut [u32; 16], a: usize, b: usize, c: usize, d: usize) {
    s[a] = s[a].wrapping_add(s[b]);
    s[d] = (s[d] ^ s[a]).rotate_left(16);
    s[c] = s[c].wrapping_add(s[d]);
    s[b] = (s[b] ^ s[c]).rotate_left(12);
    s[a] = s[a].wrapping_add(s[b]);
    s[d] = (s[d] ^ s[a]).rotate_left(8);
    s[c] = s[c].wrapping_add(s[d]);
    s[b] = (s[b] ^ s[c]).rotate_left(7);
}

/// One 64-byte ChaCha20 block.
pub fn block(key: &[u8; KEY_LEN], counter: u32, nonce: &[u8; NONCE_LEN]) -> [u8; BLOCK_LEN] {
    let mut input = [0u32; 16];
    input[..4].copy_from_slice(&SIGMA);
    for (i, chunk) in key.chunks_exact(4).enumerate() {
        input[4 + i] = u32::from_le_bytes(chunk.try_into().unwrap());
    }
    input[12] = counter;
    for (i, chunk) in nonce.chunks_exact(4).enumerate() {
        input[13 + i] = u32::from_le_bytes(chunk.try_into().unwrap());
    }

    let mut state = input;
    for _ in 0..10 {
        quarter_round(&mut state, 0, 4, 8, 12);
        quarter_round(&mut state, 1, 5, 9, 13);
        quarter_round(&mut state, 2, 6, 10, 14);
        quarter_round(&mut state, 3, 7, 11, 15);
        quarter_round(&mut state, 0, 5, 10, 15);
        quarter_round(&mut state, 1, 6, 11, 12);
        quarter_round(&mut state, 2, 7, 8, 13);
        quarter_round(&mut state, 3, 4, 9, 14);
    }

    let mut out = [0u8; BLOCK_LEN];
    for (i, (s, x)) in state.iter().zip(input.iter()).enumerate() {
        out[4 * i..4 * i + 4].copy_from_slice(&s.wrapping_add(*x).to_le_bytes());
    }
    out
}

/// Deterministic stream of 64-bit words.
#[derive(Clone)]
pub struct WordStream {
    key: [u8; KEY_LEN],
    nonce: [u8; NONCE_LEN],
    counter: u32,
    exhausted: bool,
    buf: [u8; BLOCK_LEN],
    pos: usize,
}

impl WordStream {
    pub fn new(key: [u8; KEY_LEN], nonce: [u8; NONCE_LEN]) -> Self {
        WordStream { key, nonce, counter: 0, exhausted: false, buf: [0; BLOCK_LEN], pos: BLOCK_LEN }
    }

    /// Stream keyed by a 64-bit seed: key = seed (LE) zero-padded to 32
    /// bytes, all-zero nonce.
    pub fn from_seed(seed: u64) -> Self {
        let mut key = [0u8; KEY_LEN];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        WordStream::new(key, [0; NONCE_LEN])
    }

    fn refill(&mut self) {
        assert!(!self.exhausted, "ChaCha20 block counter exhausted");
        self.buf = block(&self.key, self.counter, &self.nonce);
        match self.counter.checked_add(1) {
            Some(c) => self.counter = c,
            None => self.exhausted = true,
        }
        self.pos = 0;
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        if self.pos == BLOCK_LEN {
            self.refill();
        }
        let word = u64::from_le_bytes(self.buf[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        word
    }

    /// Uniform integer in `0..bound` by rejection sampling.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "empty range");
        // Largest multiple of `bound` that fits; reject draws at or above it.
        let zone = u64::MAX - (u64::MAX % bound + 1) % bound;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return x % bound;
            }
        }
    }

    /// Uniform real in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal deviate by the Box-Muller transform (cosine branch).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

impl Iterator for WordStream {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        Some(self.next_u64())
    }
}
