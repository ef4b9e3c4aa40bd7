//! Seeds, low-discrepancy points and the small amount of statistics the
//! estimators need.
//!
//! Every random draw in the crate comes from one master seed. A purpose string
//! is hashed into the seed with SplitMix64, so streams for different purposes
//! are independent and a change in one stage never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linear_anosov::Vec3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// A per-purpose seed derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedStream {
    pub seed: u64,
}

impl SeedStream {
    pub fn new(master: u64, purpose: &str) -> Self {
        Self { seed: splitmix64(master ^ splitmix64(fnv1a(purpose))) }
    }

    pub fn child(&self, purpose: &str) -> Self {
        Self::new(self.seed, purpose)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Additive recurrence with the generalized golden ratio in three dimensions,
/// randomly shifted by the seed. Points are uniform on `[0,1)^3` with low
/// discrepancy.
#[derive(Debug, Clone)]
pub struct QuasiRandom {
    alpha: [f64; 3],
    state: [f64; 3],
}

impl QuasiRandom {
    pub fn new(seed: u64) -> Self {
        // plastic-number analogue for d = 3: root of x^4 = x + 1
        let g = 1.220_744_084_605_759_5_f64;
        let alpha = [1.0 / g, 1.0 / (g * g), 1.0 / (g * g * g)];
        let s = splitmix64(seed);
        let shift = [
            (s >> 11) as f64 / (1u64 << 53) as f64,
            (splitmix64(s) >> 11) as f64 / (1u64 << 53) as f64,
            (splitmix64(s ^ 0xabcd) >> 11) as f64 / (1u64 << 53) as f64,
        ];
        Self { alpha, state: shift }
    }

    pub fn next_vec(&mut self) -> Vec3 {
        for i in 0..3 {
            self.state[i] += self.alpha[i];
            self.state[i] -= self.state[i].floor();
        }
        Vec3::new(self.state[0], self.state[1], self.state[2])
    }

    pub fn take_points(seed: u64, n: usize) -> Vec<Vec3> {
        let mut q = Self::new(seed);
        (0..n).map(|_| q.next_vec()).collect()
    }
}

/// Pseudo-random uniform points on the torus from a seed stream.
pub fn uniform_points(stream: SeedStream, n: usize) -> Vec<Vec3> {
    use rand::Rng;
    let mut rng = stream.rng();
    (0..n).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect()
}

/// Pairwise (cascade) summation: order-fixed and accurate.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_dev: f64,
    pub count: usize,
    /// Half-width of the 95% normal-approximation interval.
    pub ci95: f64,
}

impl MeanEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, std_dev: f64::NAN, count: 0, ci95: f64::INFINITY };
        }
        let mean = pairwise_sum(xs) / n as f64;
        let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
        let var = if n > 1 { pairwise_sum(&dev) / (n - 1) as f64 } else { 0.0 };
        let std_dev = var.sqrt();
        Self { mean, std_dev, count: n, ci95: Z95 * std_dev / (n as f64).sqrt() }
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.ci95
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.ci95
    }
}

pub const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for a binomial proportion at 95%.
pub fn wilson95(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = Z95 * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if successes == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

/// Fixed-bin histogram over `[lo, hi)`, values outside clamped into the end bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn build(xs: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let mut counts = vec![0usize; bins];
        let width = (hi - lo) / bins as f64;
        for x in xs {
            let i = if width > 0.0 { ((x - lo) / width).floor() } else { 0.0 };
            let i = if i.is_nan() { 0 } else { i.clamp(0.0, (bins - 1) as f64) as usize };
            counts[i] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn bin_edges(&self) -> Vec<(f64, f64)> {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (0..self.counts.len()).map(|i| (self.lo + i as f64 * w, self.lo + (i + 1) as f64 * w)).collect()
    }
}
