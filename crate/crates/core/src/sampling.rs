//! Seeded low-discrepancy point sets.
//!
//! Points come from a Halton sequence with a Cranley-Patterson shift drawn
//! from a ChaCha stream, so the same seed always yields the same points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PRIMES: [u32; 40] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173,
];

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % b) as f64;
        i /= b;
        f *= inv;
    }
    r
}

/// Shifted Halton sequence in `[0,1)^dim`.
#[derive(Debug, Clone)]
pub struct Halton {
    shift: Vec<f64>,
    index: u64,
    rng: ChaCha8Rng,
}

impl Halton {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shift = (0..dim).map(|_| rng.gen::<f64>()).collect();
        Halton {
            shift,
            index: 1,
            rng,
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        let i = self.index;
        self.index += 1;
        self.shift
            .iter()
            .enumerate()
            .map(|(k, s)| match PRIMES.get(k) {
                Some(&base) => (radical_inverse(i, base) + s).fract(),
                // past the prime table fall back to plain pseudo-random coordinates
                None => self.rng.gen::<f64>(),
            })
            .collect()
    }
}

/// `n` points in the product of unit Euclidean balls of dimensions `dims`,
/// each concatenated in order. Zero-dimensional blocks are empty.
pub fn unit_ball_product(dims: &[usize], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let total: usize = dims.iter().sum();
    let mut halton = Halton::new(total, seed);
    let mut out = Vec::with_capacity(n);
    if total == 0 {
        out.resize(n, Vec::new());
        return out;
    }
    while out.len() < n {
        let u: Vec<f64> = halton.next_point().into_iter().map(|t| 2.0 * t - 1.0).collect();
        let mut offset = 0;
        let inside = dims.iter().all(|&d| {
            let block = &u[offset..offset + d];
            offset += d;
            block.iter().map(|t| t * t).sum::<f64>() <= 1.0
        });
        if inside {
            out.push(u);
        }
    }
    out
}

/// `n` points in the unit ball of dimension `dim`.
pub fn unit_ball(dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    unit_ball_product(&[dim], n, seed)
}

/// `center + radius * u` for each pattern point `u`.
pub fn scale_into(center: &[f64], radius: f64, pattern: &[f64]) -> Vec<f64> {
    center.iter().zip(pattern).map(|(c, u)| c + radius * u).collect()
}

/// Axis points `center ± t * e_k` for every `t` in `offsets`.
pub fn axis_stencil(center: &[f64], offsets: &[f64]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for k in 0..center.len() {
        for &t in offsets {
            for sign in [1.0, -1.0] {
                let mut q = center.to_vec();
                q[k] += sign * t;
                out.push(q);
            }
        }
    }
    out
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|t| t * t).sum::<f64>().sqrt()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(s, t)| (s - t) * (s - t)).sum::<f64>().sqrt()
}
