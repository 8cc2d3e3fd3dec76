//! Dense linear-algebra kernels: numerical rank, independent row subsets,
//! minimum-norm nonnegative least squares, and a brute-force distance oracle.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::system::ParametricSystem;

pub const DEFAULT_RANK_TOL: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("grid oracle supports dx <= 3 and n_per_axis in 2..=401 (got dx={dx}, n={n})")]
    GridTooLarge { dx: usize, n: usize },
    #[error("box bounds do not match dx")]
    BoxDimension,
    #[error("empty within box at this resolution")]
    EmptyGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankResult {
    pub rank: usize,
    /// Descending.
    pub singular_values: Vec<f64>,
    pub threshold_used: f64,
}

/// Rank as the count of singular values above `rank_tol * max(sigma_max, 1)`.
pub fn numerical_rank(a: &DMatrix<f64>, rank_tol: f64) -> Result<RankResult, NumericsError> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite);
    }
    let mut singular_values: Vec<f64> = if a.nrows() == 0 || a.ncols() == 0 {
        Vec::new()
    } else {
        a.clone().svd(false, false).singular_values.iter().copied().collect()
    };
    singular_values.sort_by(|x, y| y.total_cmp(x));
    let sigma_max = singular_values.first().copied().unwrap_or(0.0);
    let threshold_used = rank_tol * sigma_max.max(1.0);
    let rank = singular_values.iter().filter(|&&s| s > threshold_used).count();
    Ok(RankResult {
        rank,
        singular_values,
        threshold_used,
    })
}

fn stack_rows(rows: &[&[f64]]) -> DMatrix<f64> {
    let ncols = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

/// Greedy maximal linearly independent subset of `rows`, scanning in order
/// so that earlier rows win. Returns zero-based positions.
pub fn max_li_subset(rows: &[Vec<f64>], rank_tol: f64) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    for i in 0..rows.len() {
        let mut trial: Vec<&[f64]> = chosen.iter().map(|&k| rows[k].as_slice()).collect();
        trial.push(&rows[i]);
        match numerical_rank(&stack_rows(&trial), rank_tol) {
            Ok(r) if r.rank == chosen.len() + 1 => chosen.push(i),
            _ => {}
        }
    }
    chosen
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NnlsResult {
    pub lambda: Vec<f64>,
    /// `||A lambda - b||`.
    pub residual: f64,
}

/// Solves `min ||A lambda - b||` with `lambda_i >= 0` except on the
/// `sign_free` columns, returning a minimizer of least Euclidean norm.
///
/// The minimum-norm element is approached by Tikhonov regularization at three
/// successive decades of the weight, Richardson-extrapolated to zero weight,
/// and then refined by an unregularized least-squares solve on the support
/// the regularized solutions agree on.
pub fn nnls_minnorm(a: &DMatrix<f64>, b: &[f64], sign_free: &[usize]) -> NnlsResult {
    let k = a.ncols();
    let b = DVector::from_column_slice(b);
    if k == 0 {
        return NnlsResult {
            lambda: Vec::new(),
            residual: b.norm(),
        };
    }
    let free: Vec<bool> = (0..k).map(|j| sign_free.contains(&j)).collect();
    let scale = a.norm_squared().max(f64::MIN_POSITIVE);
    let weights = [1e-8 * scale, 1e-9 * scale, 1e-10 * scale];
    let regularized: Vec<DVector<f64>> = weights.iter().map(|&w| tikhonov_nnls(a, &b, &free, w)).collect();

    let fine = &regularized[2];
    let mut extrapolated = (fine * 10.0 - &regularized[1]) / 9.0;
    for j in 0..k {
        if !free[j] {
            extrapolated[j] = extrapolated[j].max(0.0);
        }
    }

    let residual_of = |c: &DVector<f64>| (a * c - &b).norm();
    let tie = 1e-12 * (1.0 + b.norm());
    let mut best = [fine.clone(), extrapolated]
        .into_iter()
        .map(|c| (residual_of(&c), c))
        .reduce(|x, y| if y.0 < x.0 - tie || (y.0 <= x.0 + tie && y.1.norm() < x.1.norm()) { y } else { x });
    // the unregularized support solve is exact on its face: it wins ties
    let big = fine.amax().max(1.0);
    let support: Vec<usize> = (0..k).filter(|&j| free[j] || fine[j] > 1e-9 * big).collect();
    if let Some(polished) = support_solve(a, &b, &support, &free) {
        let r = residual_of(&polished);
        if best.as_ref().map_or(true, |(rb, _)| r <= rb + tie) {
            best = Some((r, polished));
        }
    }
    let (residual, lambda) = best.expect("at least one candidate");
    NnlsResult {
        lambda: lambda.iter().copied().collect(),
        residual,
    }
}

/// Unregularized least squares restricted to `support`; `None` if a
/// sign-constrained component comes out negative.
fn support_solve(a: &DMatrix<f64>, b: &DVector<f64>, support: &[usize], free: &[bool]) -> Option<DVector<f64>> {
    let mut out = DVector::zeros(a.ncols());
    if support.is_empty() {
        return Some(out);
    }
    let sub = DMatrix::from_fn(a.nrows(), support.len(), |i, j| a[(i, support[j])]);
    let svd = sub.svd(true, true);
    let tol = 1e-13 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    let z = svd.solve(b, tol).ok()?;
    let mag = z.amax().max(1.0);
    for (j, &col) in support.iter().enumerate() {
        let mut v = z[j];
        if !free[col] {
            if v < -1e-10 * mag {
                return None;
            }
            v = v.max(0.0);
        }
        out[col] = v;
    }
    Some(out)
}

/// `min ||A l - b||^2 + w ||l||^2` with sign constraints, via Lawson-Hanson on
/// the stacked system. Free columns are split into positive and negative parts.
fn tikhonov_nnls(a: &DMatrix<f64>, b: &DVector<f64>, free: &[bool], w: f64) -> DVector<f64> {
    let (m, k) = a.shape();
    let mut cols: Vec<(usize, f64)> = (0..k).map(|j| (j, 1.0)).collect();
    cols.extend((0..k).filter(|&j| free[j]).map(|j| (j, -1.0)));
    let nv = cols.len();
    let sw = w.sqrt();
    let mut big = DMatrix::zeros(m + nv, nv);
    for (c, &(j, s)) in cols.iter().enumerate() {
        for i in 0..m {
            big[(i, c)] = s * a[(i, j)];
        }
        big[(m + c, c)] = sw;
    }
    let mut rhs = DVector::zeros(m + nv);
    rhs.rows_mut(0, m).copy_from(b);
    let z = lawson_hanson(&big, &rhs);
    let mut lambda = DVector::zeros(k);
    for (c, &(j, s)) in cols.iter().enumerate() {
        lambda[j] += s * z[c];
    }
    lambda
}

/// Classic active-set NNLS, `min ||E z - f||` with `z >= 0`.
fn lawson_hanson(e: &DMatrix<f64>, f: &DVector<f64>) -> DVector<f64> {
    let n = e.ncols();
    let mut z = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let tol = 10.0 * f64::EPSILON * e.norm() * (e.nrows().max(n) as f64);
    let max_outer = 3 * n + 10;

    for _ in 0..max_outer {
        let w = e.transpose() * (f - e * &z);
        let candidate = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(t) = candidate else { break };
        passive[t] = true;

        for _ in 0..(3 * n + 10) {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let sub = DMatrix::from_fn(e.nrows(), idx.len(), |i, j| e[(i, idx[j])]);
            let sol = match sub.svd(true, true).solve(f, 1e-15) {
                Ok(s) => s,
                Err(_) => return z,
            };
            if sol.iter().all(|&v| v > tol) {
                z.fill(0.0);
                for (c, &j) in idx.iter().enumerate() {
                    z[j] = sol[c];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (c, &j) in idx.iter().enumerate() {
                if sol[c] <= tol {
                    let denom = z[j] - sol[c];
                    if denom > 0.0 {
                        alpha = alpha.min(z[j] / denom);
                    } else {
                        alpha = 0.0_f64.min(alpha);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            let mut full = DVector::zeros(n);
            for (c, &j) in idx.iter().enumerate() {
                full[j] = sol[c];
            }
            z += (full - &z) * alpha;
            for j in 0..n {
                if passive[j] && z[j] <= tol {
                    passive[j] = false;
                    z[j] = 0.0;
                }
            }
        }
    }
    z
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceBracket {
    pub lower: f64,
    pub upper: f64,
    /// Feasible grid point attaining `upper`.
    pub nearest: Vec<f64>,
    pub grid_diagonal: f64,
}

/// Brute-force bracket for `dist(v, F(p) ∩ box)` on a uniform grid with
/// `n_per_axis` points per axis. Test infrastructure, limited to `dx <= 3`.
pub fn grid_distance(
    sys: &ParametricSystem,
    p: &[f64],
    v: &[f64],
    lo: &[f64],
    hi: &[f64],
    n_per_axis: usize,
    tol_feas: f64,
) -> Result<DistanceBracket, NumericsError> {
    let dx = sys.dx;
    if dx == 0 || dx > 3 || !(2..=401).contains(&n_per_axis) {
        return Err(NumericsError::GridTooLarge { dx, n: n_per_axis });
    }
    if lo.len() != dx || hi.len() != dx || v.len() != dx {
        return Err(NumericsError::BoxDimension);
    }
    let n = n_per_axis;
    let step: Vec<f64> = (0..dx).map(|k| (hi[k] - lo[k]) / (n - 1) as f64).collect();
    let coord = |k: usize, i: usize| if i == n - 1 { hi[k] } else { lo[k] + step[k] * i as f64 };
    let grid_diagonal = step.iter().map(|s| s * s).sum::<f64>().sqrt();

    let inner = n.pow(dx as u32 - 1);
    let best = (0..n)
        .into_par_iter()
        .map(|i0| {
            let mut best: Option<(f64, usize)> = None;
            let mut point = vec![0.0; dx];
            for rest in 0..inner {
                let flat = i0 * inner + rest;
                let mut r = rest;
                point[0] = coord(0, i0);
                for k in 1..dx {
                    let stride = n.pow((dx - 1 - k) as u32);
                    point[k] = coord(k, r / stride);
                    r %= stride;
                }
                if !matches!(sys.residual(p, &point), Ok(res) if res <= tol_feas) {
                    continue;
                }
                let d = crate::sampling::dist(&point, v);
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, flat));
                }
            }
            best
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let (upper, flat) = best.ok_or(NumericsError::EmptyGrid)?;
    let mut nearest = vec![0.0; dx];
    let mut r = flat;
    for k in 0..dx {
        let stride = n.pow((dx - 1 - k) as u32);
        nearest[k] = coord(k, r / stride);
        r %= stride;
    }
    Ok(DistanceBracket {
        lower: (upper - grid_diagonal).max(0.0),
        upper,
        nearest,
        grid_diagonal,
    })
}
