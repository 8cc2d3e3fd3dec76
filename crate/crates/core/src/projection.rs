//! Metric projection onto `F(p)` and the normalized multipliers of the
//! projection problem.
//!
//! Solutions are local: several starts are run and the nearest feasible
//! result wins. Global optimality is only ever certified against the grid
//! oracle in tests.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::expr::EvalError;
use crate::numerics::nnls_minnorm;
use crate::sampling::{self, dist, norm};
use crate::solver::{solve_local, HalfSquaredDistance, LocalSolution, SolverOpts};
use crate::system::{default_eta_of, ActiveSet, ParametricSystem};

#[derive(Debug, Error, PartialEq)]
pub enum ProjectionError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("multipliers are undefined when v coincides with x")]
    Coincident,
    #[error("multiplier set is empty at tolerance (stationarity residual {residual:e})")]
    EmptyMultiplierSet { residual: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIter,
    InfeasibleSystem,
}

/// Region from which the extra starting points are drawn.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchRegion {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectOpts {
    pub tol_feas: f64,
    pub tol_kkt: f64,
    pub n_starts: usize,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Defaults to the ball of radius `10 (1 + ‖v‖)` around `v`.
    pub region: Option<SearchRegion>,
    pub seed: u64,
}

impl Default for ProjectOpts {
    fn default() -> Self {
        ProjectOpts {
            tol_feas: 1e-8,
            tol_kkt: 1e-7,
            n_starts: 8,
            max_outer: 200,
            max_inner: 500,
            region: None,
            seed: 0,
        }
    }
}

impl ProjectOpts {
    pub(crate) fn solver(&self) -> SolverOpts {
        SolverOpts {
            tol_feas: self.tol_feas,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
        }
    }

    /// `v` followed by `n_starts - 1` seeded points of the search region.
    pub(crate) fn starts(&self, v: &[f64]) -> Vec<Vec<f64>> {
        let mut starts = vec![v.to_vec()];
        let extra = self.n_starts.saturating_sub(1);
        if extra == 0 || v.is_empty() {
            return starts;
        }
        match &self.region {
            Some(SearchRegion::Box { lo, hi }) => {
                let mut halton = sampling::Halton::new(v.len(), self.seed);
                for _ in 0..extra {
                    let u = halton.next_point();
                    starts.push((0..v.len()).map(|k| lo[k] + u[k] * (hi[k] - lo[k])).collect());
                }
            }
            region => {
                let (center, radius) = match region {
                    Some(SearchRegion::Ball { center, radius }) => (center.clone(), *radius),
                    _ => (v.to_vec(), 10.0 * (1.0 + norm(v))),
                };
                for u in sampling::unit_ball(v.len(), extra, self.seed) {
                    starts.push(sampling::scale_into(&center, radius, &u));
                }
            }
        }
        starts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectionResult {
    pub x_star: Vec<f64>,
    pub distance: f64,
    pub kkt_residual: f64,
    pub feas_residual: f64,
    /// Unnormalized multipliers over all constraints (`x* − v + Σ λ̂ ∇h = 0`).
    pub multipliers_hat: Vec<f64>,
    /// `λ̂ / distance`, present when the distance is positive.
    pub multipliers: Option<Vec<f64>>,
    pub active: ActiveSet,
    pub status: Status,
    /// Always true: the result is the best of several local solves.
    pub local: bool,
}

/// Picks the better of two feasible candidates: nearer wins, near-ties go to
/// the lexicographically smaller point.
pub(crate) fn nearer(a: &LocalSolution, b: &LocalSolution, v: &[f64]) -> bool {
    let (da, db) = (dist(&a.x, v), dist(&b.x, v));
    let tie = 1e-9 * (1.0 + da.min(db));
    if (da - db).abs() <= tie {
        a.x.iter().zip(&b.x).find(|(s, t)| s != t).map_or(false, |(s, t)| s < t)
    } else {
        da < db
    }
}

/// Nearest point of `F(p)` to `v` found by multi-start local solves.
pub fn project(
    sys: &ParametricSystem,
    p: &[f64],
    v: &[f64],
    opts: &ProjectOpts,
) -> Result<ProjectionResult, ProjectionError> {
    let values = sys.values(p, v)?;
    if sys.residual_of(&values) == 0.0 {
        return Ok(ProjectionResult {
            x_star: v.to_vec(),
            distance: 0.0,
            kkt_residual: 0.0,
            feas_residual: 0.0,
            multipliers_hat: vec![0.0; sys.n()],
            multipliers: None,
            active: sys.active_of(&values, default_eta_of(&values)),
            status: Status::Converged,
            local: true,
        });
    }

    let solver = opts.solver();
    let obj = HalfSquaredDistance { v };
    let runs: Vec<LocalSolution> = opts
        .starts(v)
        .par_iter()
        .filter_map(|s| solve_local(sys, p, &obj, s, &solver).ok())
        .collect();

    let mut best_feasible: Option<&LocalSolution> = None;
    let mut least_violating: Option<&LocalSolution> = None;
    for run in &runs {
        if run.feas_residual <= opts.tol_feas {
            if best_feasible.map_or(true, |b| nearer(run, b, v)) {
                best_feasible = Some(run);
            }
        } else if least_violating.map_or(true, |b| run.feas_residual < b.feas_residual) {
            least_violating = Some(run);
        }
    }

    let Some(best) = best_feasible else {
        let x_star = least_violating.map_or_else(|| v.to_vec(), |s| s.x.clone());
        let values = sys.values(p, &x_star)?;
        return Ok(ProjectionResult {
            distance: dist(&x_star, v),
            kkt_residual: f64::INFINITY,
            feas_residual: sys.residual_of(&values),
            multipliers_hat: vec![0.0; sys.n()],
            multipliers: None,
            active: sys.active_of(&values, default_eta_of(&values)),
            status: Status::InfeasibleSystem,
            local: true,
            x_star,
        });
    };

    let x_star = best.x.clone();
    let distance = dist(&x_star, v);
    let b: Vec<f64> = v.iter().zip(&x_star).map(|(a, c)| a - c).collect();
    let (lambda_hat, kkt_residual, active) = active_multipliers(sys, p, &x_star, &b)?;
    let status = if kkt_residual <= opts.tol_kkt {
        Status::Converged
    } else {
        Status::MaxIter
    };
    let multipliers = (distance > 0.0).then(|| lambda_hat.iter().map(|l| l / distance).collect());
    Ok(ProjectionResult {
        distance,
        kkt_residual,
        feas_residual: best.feas_residual,
        multipliers_hat: lambda_hat,
        multipliers,
        active,
        status,
        local: true,
        x_star,
    })
}

/// Minimum-norm multipliers over the active constraints at `x` for
/// `Σ λ_i ∇h_i = b`, scattered to a full-length vector.
pub(crate) fn active_multipliers(
    sys: &ParametricSystem,
    p: &[f64],
    x: &[f64],
    b: &[f64],
) -> Result<(Vec<f64>, f64, ActiveSet), EvalError> {
    let (values, grads) = sys.values_grads(p, x)?;
    let active = sys.active_of(&values, default_eta_of(&values));
    let mut cols: Vec<usize> = active.indices.iter().map(|i| i - 1).collect();
    cols.extend(sys.m()..sys.n());
    let a = DMatrix::from_fn(x.len(), cols.len(), |r, c| grads[cols[c]][r]);
    let free: Vec<usize> = (0..cols.len()).filter(|&c| cols[c] >= sys.m()).collect();
    let nn = nnls_minnorm(&a, b, &free);
    let mut lambda = vec![0.0; sys.n()];
    for (c, &i) in cols.iter().enumerate() {
        lambda[i] = nn.lambda[c];
    }
    Ok((lambda, nn.residual, active))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Multipliers {
    /// Over all constraints; zero off the active set.
    pub lambda: Vec<f64>,
    pub stationarity_residual: f64,
    /// The stationarity residual exceeded the tolerance.
    pub empty_at_tolerance: bool,
}

/// Min-norm element of the normalized multiplier set at `x` for the point `v`:
/// `(x − v)/‖x − v‖ + Σ λ_i ∇h_i(p,x) = 0`, `λ_i ≥ 0` on inequalities.
pub fn multipliers(
    sys: &ParametricSystem,
    p: &[f64],
    x: &[f64],
    v: &[f64],
    tol: f64,
) -> Result<Multipliers, ProjectionError> {
    let d = dist(x, v);
    if d == 0.0 {
        return Err(ProjectionError::Coincident);
    }
    let b: Vec<f64> = v.iter().zip(x).map(|(a, c)| (a - c) / d).collect();
    let (lambda, residual, _) = active_multipliers(sys, p, x, &b)?;
    Ok(Multipliers {
        lambda,
        stationarity_residual: residual,
        empty_at_tolerance: residual > tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiplierNorm {
    /// `Σ|λ_i|` of the min-2-norm multiplier: an upper bound on the least `M`
    /// with a multiplier of 1-norm at most `M`.
    pub l1: f64,
    /// `‖λ‖₂` of the same element: a lower bound on that least `M`.
    pub l1_lower_bound: f64,
    pub lambda: Vec<f64>,
    pub stationarity_residual: f64,
}

pub fn min_multiplier_norm(
    sys: &ParametricSystem,
    p: &[f64],
    x: &[f64],
    v: &[f64],
    tol: f64,
) -> Result<MultiplierNorm, ProjectionError> {
    let m = multipliers(sys, p, x, v, tol)?;
    if m.empty_at_tolerance {
        return Err(ProjectionError::EmptyMultiplierSet {
            residual: m.stationarity_residual,
        });
    }
    Ok(MultiplierNorm {
        l1: m.lambda.iter().map(|l| l.abs()).sum(),
        l1_lower_bound: norm(&m.lambda),
        lambda: m.lambda,
        stationarity_residual: m.stationarity_residual,
    })
}
