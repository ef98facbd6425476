//! Splittable counter-based random numbers.
//!
//! Every value is a pure function of `(key, counter)`:
//!
//! ```text
//! at(key, i) = mix64(key + (i + 1) * 0x9E3779B97F4A7C15)      (wrapping)
//! child(key, id) = mix64(key ^ mix64(id + 0x9E3779B97F4A7C15))
//! ```
//!
//! `mix64` is the SplitMix64 finalizer, so `Stream::new(seed).at(i)` is the
//! i-th output of a SplitMix64 generator seeded with `seed`. The reference
//! vectors in `docs/rng_vectors.md` pin this down for ports to other
//! languages. Because values are addressed by counter rather than drawn
//! from shared state, rendering order and thread count never change the
//! output.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Converts the top 53 bits to a uniform double in `[0, 1)`.
#[inline]
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stream {
    key: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { key: seed }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Independent sub-stream labelled by `id`.
    pub fn child(&self, id: u64) -> Stream {
        Stream {
            key: mix64(self.key ^ mix64(id.wrapping_add(GOLDEN))),
        }
    }

    #[inline]
    pub fn at(&self, counter: u64) -> u64 {
        mix64(self.key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    pub fn cursor(&self) -> Cursor {
        Cursor { stream: *self, next: 0 }
    }
}

/// Sequential reader over a [`Stream`].
#[derive(Debug, Clone)]
pub struct Cursor {
    stream: Stream,
    next: u64,
}

impl Cursor {
    pub fn next_u64(&mut self) -> u64 {
        let v = self.stream.at(self.next);
        self.next += 1;
        v
    }

    pub fn uniform(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw (Box-Muller, cosine branch only).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
