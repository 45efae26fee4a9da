//! Counter-based deterministic random number generator.
//!
//! The stream is a pure function of `(seed, stream, counter)`, so identical
//! seeds and call sequences reproduce identical draws on every platform. All
//! state is integer; floats are produced by explicit conversion. Sub-streams
//! are derived by label so that e.g. data generation, parameter init and
//! diffusion noise stay decoupled: changing how one consumes its stream never
//! shifts the others.

use serde::{Deserialize, Serialize};

/// Well-known sub-stream labels.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const DIFFUSION_NOISE: u64 = 3;
    pub const SAMPLER: u64 = 4;
    pub const SHUFFLE: u64 = 5;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix3(seed: u64, stream: u64, counter: u64) -> u64 {
    splitmix(splitmix(splitmix(seed.wrapping_add(GOLDEN)) ^ stream) ^ counter)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    seed: u64,
    stream: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, stream: 0, counter: 0 }
    }

    /// Derive an independent child stream from a label and an index.
    ///
    /// The child starts at counter 0; the parent is not advanced.
    pub fn substream(&self, label: u64, index: u64) -> Rng {
        let s1 = splitmix(self.stream ^ GOLDEN.wrapping_mul(label.wrapping_add(1)));
        let s2 = splitmix(s1 ^ splitmix(index.wrapping_add(GOLDEN)));
        Rng { seed: self.seed, stream: s2, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let z = mix3(self.seed, self.stream, self.counter);
        self.counter += 1;
        z
    }

    /// Uniform in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in 0..n via widening multiply.
    pub fn uniform_int(&mut self, n: u64) -> u64 {
        assert!(n > 0, "uniform_int requires n > 0");
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal draw (Box-Muller, two uniforms per draw).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out.iter_mut() {
            *x = self.normal();
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_int(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn state(&self) -> (u64, u64, u64) {
        (self.seed, self.stream, self.counter)
    }

    pub fn from_state(seed: u64, stream: u64, counter: u64) -> Self {
        Rng { seed, stream, counter }
    }
}
