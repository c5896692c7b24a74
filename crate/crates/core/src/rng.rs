//! Deterministic randomness with labeled sub-streams.
//!
//! Every random decision in the crate flows from a single root seed through a
//! tree of named streams, so adding a draw at one site never shifts the values
//! another site sees. A stream is identified by the path of `(label, index)`
//! pairs used to derive it; derivation is a pure function of the parent key
//! and never consumes generator state.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer; full-avalanche mix of one word.
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A ChaCha8 generator that remembers its own 256-bit key so child streams
/// can be derived without touching the output stream.
#[derive(Clone, Debug)]
pub struct Prng {
    key: [u64; 4],
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Prng {
    /// Root stream for a run. Equal seeds give equal trees of streams.
    pub fn from_root(seed: u64) -> Self {
        let mut s = mix(seed ^ GOLDEN);
        let mut key = [0u64; 4];
        for k in key.iter_mut() {
            s = s.wrapping_add(GOLDEN);
            *k = mix(s);
        }
        Self::from_key(key)
    }

    fn from_key(key: [u64; 4]) -> Self {
        let mut seed = [0u8; 32];
        for (i, w) in key.iter().enumerate() {
            seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
        }
        Prng { key, rng: ChaCha8Rng::from_seed(seed), spare_normal: None }
    }

    /// Child stream for `(label, index)`. Pure in the parent key: calling this
    /// any number of times, in any order, interleaved with draws, always
    /// yields the same child.
    pub fn derive(&self, label: &str, index: u64) -> Prng {
        let mut s = fnv1a(label.as_bytes());
        s = mix(s ^ index.wrapping_mul(GOLDEN));
        for w in self.key {
            s = mix(s ^ w);
        }
        let mut key = [0u64; 4];
        for k in key.iter_mut() {
            s = s.wrapping_add(GOLDEN);
            *k = mix(s);
        }
        Self::from_key(key)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in (0, 1]; never returns 0 so it is safe under `ln`.
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal via Box-Muller; pairs are cached, so draws come in
    /// twos off the uniform stream.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Unbiased integer in `[0, n)` by masked rejection. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) has no valid output");
        if n == 1 {
            return 0;
        }
        let mask = u64::MAX >> (n - 1).leading_zeros();
        loop {
            let x = self.next_u64() & mask;
            if x < n {
                return x;
            }
        }
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// Pick one element of a nonempty slice.
    pub fn choose<'a, T>(&mut self, xs: &'a [T]) -> &'a T {
        &xs[self.below(xs.len() as u64) as usize]
    }

    /// Bernoulli trial with success probability `p`.
    pub fn flip(&mut self, p: f64) -> bool {
        self.uniform() <= p
    }
}
