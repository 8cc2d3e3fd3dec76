//! Relaxed constant rank condition: for every subset `K` of the active
//! inequalities at `(p0, x0)`, the rank of `{∇x h_i : i in I0 ∪ K}` must stay
//! constant on a neighbourhood of `(p0, x0)`.
//!
//! The neighbourhood is probed with seeded samples, so a `violated` verdict
//! is a certificate (a witness point with a different rank) while
//! `verified_on_samples` is evidence only.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::expr::EvalError;
use crate::numerics::{max_li_subset, numerical_rank, DEFAULT_RANK_TOL};
use crate::sampling;
use crate::system::{default_eta_of, ParametricSystem, DEFAULT_TOL_FEAS};

/// Subsets of the active set are enumerated exhaustively; beyond this many
/// active inequalities the check refuses to run.
pub const MAX_ACTIVE: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum CqError {
    #[error("base point is infeasible (residual {residual:e})")]
    InfeasibleBase { residual: f64 },
    #[error("{count} active inequalities exceed the subset cap of {MAX_ACTIVE}")]
    SubsetCap { count: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    VerifiedOnSamples,
    Violated,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankWitness {
    pub p: Vec<f64>,
    pub x: Vec<f64>,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetRank {
    /// One-based inequality indices.
    pub k: Vec<usize>,
    pub base_rank: usize,
    pub sampled_rank_min: usize,
    pub sampled_rank_max: usize,
    /// First sample whose rank differs from `base_rank`.
    pub witness: Option<RankWitness>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingInfo {
    pub radius: f64,
    pub count: usize,
    pub seed: u64,
    pub stencil_points: usize,
    pub skipped_eval_errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RcrcqReport {
    pub p0: Vec<f64>,
    pub x0: Vec<f64>,
    pub active_set_at_base: Vec<usize>,
    pub equality_indices: Vec<usize>,
    pub per_subset: Vec<SubsetRank>,
    pub verdict: Verdict,
    pub sampling: SamplingInfo,
    pub rank_tol: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RcrcqParams {
    pub radius: f64,
    pub n_samples: usize,
    pub rank_tol: f64,
    /// Activity band; `None` uses the scale-aware default at the base point.
    pub eta: Option<f64>,
    pub tol_feas: f64,
    pub seed: u64,
}

impl Default for RcrcqParams {
    fn default() -> Self {
        RcrcqParams {
            radius: 1e-2,
            n_samples: 256,
            rank_tol: DEFAULT_RANK_TOL,
            eta: None,
            tol_feas: DEFAULT_TOL_FEAS,
            seed: 0,
        }
    }
}

fn rank_of_rows(grads: &[Vec<f64>], rows: &[usize], dx: usize, rank_tol: f64) -> usize {
    let a = DMatrix::from_fn(rows.len(), dx, |r, c| grads[rows[r]][c]);
    numerical_rank(&a, rank_tol).map_or(0, |r| r.rank)
}

pub fn check_rcrcq(
    sys: &ParametricSystem,
    p0: &[f64],
    x0: &[f64],
    params: &RcrcqParams,
) -> Result<RcrcqReport, CqError> {
    let (values, grads0) = sys.values_grads(p0, x0)?;
    let residual = sys.residual_of(&values);
    if residual > params.tol_feas {
        return Err(CqError::InfeasibleBase { residual });
    }
    let eta = params.eta.unwrap_or_else(|| default_eta_of(&values));
    let active = sys.active_of(&values, eta).indices;
    if active.len() > MAX_ACTIVE {
        return Err(CqError::SubsetCap { count: active.len() });
    }

    // zero-based rows of I0 ∪ K for every K, K enumerated by bitmask
    let eq_rows: Vec<usize> = (sys.m()..sys.n()).collect();
    let subsets: Vec<(Vec<usize>, Vec<usize>)> = (0u32..(1 << active.len()))
        .map(|mask| {
            let k: Vec<usize> = (0..active.len())
                .filter(|b| mask & (1 << b) != 0)
                .map(|b| active[b])
                .collect();
            let mut rows = eq_rows.clone();
            rows.extend(k.iter().map(|i| i - 1));
            (k, rows)
        })
        .collect();
    let base_ranks: Vec<usize> = subsets
        .iter()
        .map(|(_, rows)| rank_of_rows(&grads0, rows, sys.dx, params.rank_tol))
        .collect();

    let dim = sys.dp + sys.dx;
    let mut center = p0.to_vec();
    center.extend_from_slice(x0);
    let r = params.radius;
    let mut points = sampling::axis_stencil(&center, &[0.5 * r, 0.25 * r]);
    let stencil_points = points.len();
    for u in sampling::unit_ball(dim, params.n_samples, params.seed) {
        points.push(sampling::scale_into(&center, r, &u));
    }

    let sampled: Vec<Option<Vec<usize>>> = points
        .par_iter()
        .map(|z| {
            let (p, x) = z.split_at(sys.dp);
            let (_, grads) = sys.values_grads(p, x).ok()?;
            Some(
                subsets
                    .iter()
                    .map(|(_, rows)| rank_of_rows(&grads, rows, sys.dx, params.rank_tol))
                    .collect(),
            )
        })
        .collect();

    let mut per_subset: Vec<SubsetRank> = subsets
        .iter()
        .zip(&base_ranks)
        .map(|((k, _), &base)| SubsetRank {
            k: k.clone(),
            base_rank: base,
            sampled_rank_min: base,
            sampled_rank_max: base,
            witness: None,
        })
        .collect();
    let mut skipped = 0;
    for (z, ranks) in points.iter().zip(&sampled) {
        let Some(ranks) = ranks else {
            skipped += 1;
            continue;
        };
        for (entry, &rank) in per_subset.iter_mut().zip(ranks) {
            entry.sampled_rank_min = entry.sampled_rank_min.min(rank);
            entry.sampled_rank_max = entry.sampled_rank_max.max(rank);
            if rank != entry.base_rank && entry.witness.is_none() {
                let (p, x) = z.split_at(sys.dp);
                entry.witness = Some(RankWitness {
                    p: p.to_vec(),
                    x: x.to_vec(),
                    rank,
                });
            }
        }
    }
    let verdict = if per_subset.iter().any(|e| e.witness.is_some()) {
        Verdict::Violated
    } else {
        Verdict::VerifiedOnSamples
    };
    Ok(RcrcqReport {
        p0: p0.to_vec(),
        x0: x0.to_vec(),
        active_set_at_base: active,
        equality_indices: sys.equality_indices(),
        per_subset,
        verdict,
        sampling: SamplingInfo {
            radius: r,
            count: points.len(),
            seed: params.seed,
            stencil_points,
            skipped_eval_errors: skipped,
        },
        rank_tol: params.rank_tol,
        eta,
    })
}

/// Maximal linearly independent subset of the equality gradients at
/// `(p0, x0)`, earliest indices first. One-based constraint indices.
pub fn select_i0_prime(
    sys: &ParametricSystem,
    p0: &[f64],
    x0: &[f64],
    rank_tol: f64,
) -> Result<Vec<usize>, EvalError> {
    if sys.eq.is_empty() {
        return Ok(Vec::new());
    }
    let (_, grads) = sys.values_grads(p0, x0)?;
    let eq_grads = grads[sys.m()..].to_vec();
    Ok(max_li_subset(&eq_grads, rank_tol)
        .into_iter()
        .map(|k| sys.m() + k + 1)
        .collect())
}
