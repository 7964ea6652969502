//! Deterministic counter-based PRNG.
//!
//! Every random choice in the crate flows through [`SeededRng`], which hashes
//! (key, counter) with the splitmix64 finalizer. A stream is a pure function
//! of its seed and position, so identical seeds reproduce identical output on
//! any platform, and `derive` splits off independent substreams without
//! consuming state from the parent.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    key: u64,
    counter: u64,
    spare_gaussian: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            key: mix(seed ^ GOLDEN),
            counter: 0,
            spare_gaussian: None,
        }
    }

    /// Independent substream identified by `stream`; does not advance `self`.
    pub fn derive(&self, stream: u64) -> Self {
        SeededRng {
            key: mix(self.key ^ mix(stream.wrapping_add(GOLDEN))),
            counter: 0,
            spare_gaussian: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1), with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Panics if `n == 0`.
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index requires n > 0");
        // multiply-shift maps the full 64-bit range onto [0, n)
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// Standard normal via Box-Muller. The transform yields pairs; the
    /// second value is cached for the next call.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_gaussian = Some(radius * theta.sin());
        radius * theta.cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }

    /// `n` distinct indices drawn without replacement from [0, len), in
    /// random order (partial Fisher-Yates). Panics if `n > len`.
    pub fn sample_indices(&mut self, len: usize, n: usize) -> Vec<usize> {
        assert!(n <= len, "cannot sample {n} of {len}");
        let mut pool: Vec<usize> = (0..len).collect();
        for i in 0..n {
            let j = i + self.next_index(len - i);
            pool.swap(i, j);
        }
        pool.truncate(n);
        pool
    }

    /// Index sampled proportionally to the given non-negative weights, by
    /// cumulative inversion with a single uniform draw. Returns `None` when
    /// the total weight is zero or non-finite.
    pub fn choose_weighted(&mut self, weights: &[f64]) -> Option<usize> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return None;
        }
        let target = self.next_f64() * total;
        let mut cum = 0.0;
        let mut last_positive = None;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                last_positive = Some(i);
            }
            cum += w;
            if target < cum && w > 0.0 {
                return Some(i);
            }
        }
        // rounding can leave target at or past the final cumulative sum
        last_positive
    }
}
