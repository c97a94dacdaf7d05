//! Deterministic seeded random stream.
//!
//! Splitmix64 core with derived helpers. The same seed yields the same
//! draw sequence on every platform, which makes corpus generation,
//! initialization, and training reproducible bit for bit.

/// A deterministic stream of pseudo-random numbers.
///
/// ```
/// use h2rat::numerics::RngStream;
/// let mut a = RngStream::new(42);
/// let mut b = RngStream::new(42);
/// assert_eq!(a.next_u64(), b.next_u64());
/// ```
#[derive(Debug, Clone)]
pub struct RngStream {
    state: u64,
    /// Cached second value of a Box-Muller pair.
    spare_gauss: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            state: seed,
            spare_gauss: None,
        }
    }

    /// Splitmix64 step.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, bound). Rejection-free modulo is fine here;
    /// bounds are tiny compared to 2^64 so bias is negligible and, more
    /// importantly, deterministic.
    pub fn next_index(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "next_index bound must be positive");
        (self.next_u64() % bound as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn next_gauss(&mut self) -> f64 {
        if let Some(g) = self.spare_gauss.take() {
            return g;
        }
        // u1 in (0,1] so ln is finite
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_gauss = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Derive an independent child stream. Used to give each sample or
    /// subsystem its own stream without coupling draw counts.
    pub fn fork(&mut self) -> RngStream {
        RngStream::new(self.next_u64())
    }

    /// Fisher-Yates shuffle, in place.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }
}
