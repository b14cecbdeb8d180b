//! Deterministic, splittable random streams.
//!
//! A stream is identified by `(seed, stream id)` and advances a block counter,
//! so equal inputs reproduce equal sequences on every platform. Children are
//! derived by hashing the parent identity with a label, which lets parallel
//! workers draw from per-item streams and still agree with serial runs.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless 64-bit hash of an integer.
pub fn hash64(x: u64) -> u64 {
    mix64(x)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Position in the output sequence, in 32-bit words.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Child stream keyed by `label`. The parent is not advanced.
    pub fn split(&self, label: &str) -> RngStream {
        self.derive(fnv1a(label.as_bytes()))
    }

    /// Child stream keyed by an integer, e.g. a shape index.
    pub fn split_index(&self, index: u64) -> RngStream {
        self.derive(mix64(index ^ 0x6A09_E667_F3BC_C909))
    }

    fn derive(&self, key: u64) -> RngStream {
        let stream = mix64(mix64(self.seed ^ mix64(self.stream)) ^ key);
        RngStream::with_stream(self.seed, stream)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_f64()).collect()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Zero-mean normal samples via the Box-Muller transform.
    pub fn gaussian(&mut self, n: usize, sigma: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(n + 1);
        while out.len() < n {
            let u1 = self.next_f64();
            let u2 = self.next_f64();
            let r = (-2.0 * (1.0 - u1).ln()).sqrt();
            let theta = std::f64::consts::TAU * u2;
            out.push(sigma * r * theta.cos());
            out.push(sigma * r * theta.sin());
        }
        out.truncate(n);
        out
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        // Lemire's multiply-shift with rejection.
        let n64 = n as u64;
        loop {
            let x = self.rng.next_u64();
            let m = (x as u128) * (n64 as u128);
            let lo = m as u64;
            if lo >= n64 || lo >= n64.wrapping_neg() % n64 {
                return (m >> 64) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<V>(&mut self, items: &mut [V]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in selection order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} of {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
