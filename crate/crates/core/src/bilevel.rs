//! Lower-level optimal value `φ(p) = inf { f(p, x) : x ∈ F(p) }`, Lipschitz
//! estimates, and the partial-penalty objective `G + μ (f − φ)` of a bilevel
//! problem.
//!
//! The lower level is solved locally from several starts; `φ` is the best
//! value found and the solution set is approximated by the minimizers within
//! the value tolerance. Every bilevel report states that the domain of the
//! solution map is assumed to coincide with the domain of `F` on `P`.

use std::borrow::Cow;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::expr::{EvalError, Expr, Wrt};
use crate::projection::{active_multipliers, ProjectOpts, SearchRegion, Status};
use crate::regularity::{
    self, EstimatorOpts, RegularityError, RegularityReport, ReportKind, SampleRecord, SetMap, ShrinkSchedule,
};
use crate::sampling::{self, dist, norm};
use crate::solver::{solve_local, ExprObjective, LocalSolution};
use crate::system::{ParametricSystem, ProblemFile};

/// Stated in every bilevel report.
pub const DOMAIN_ASSUMPTION: &str = "assumed, not verified: on P the parameters with a nonempty lower-level solution set are exactly those with F(p) nonempty";

/// Strict tolerance of the neighbourhood local-minimum test.
pub const PENALTY_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum BilevelError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no feasible lower-level point found (least residual {residual:e})")]
    InfeasibleSystem { residual: f64 },
    #[error("lower-level objective appears unbounded below")]
    Unbounded,
    #[error("infeasible anchor: {0}")]
    InfeasibleAnchor(String),
    #[error(transparent)]
    Regularity(#[from] RegularityError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilevelProblem {
    pub upper: Expr,
    pub lower: Expr,
    pub sys: ParametricSystem,
    pub pcons: Vec<Expr>,
}

impl BilevelProblem {
    pub fn from_problem_file(pf: ProblemFile) -> Option<Self> {
        Some(BilevelProblem {
            upper: pf.upper?,
            lower: pf.lower?,
            sys: pf.system,
            pcons: pf.pcons,
        })
    }

    /// `max_j g_j(p)`, or `-inf` without parameter constraints.
    pub fn pcons_violation(&self, p: &[f64]) -> Result<f64, EvalError> {
        let mut worst = f64::NEG_INFINITY;
        for g in &self.pcons {
            worst = worst.max(g.eval(p, &[])?);
        }
        Ok(worst)
    }

    pub fn solve_lower(&self, p: &[f64], opts: &LowerOpts) -> Result<LowerSolution, BilevelError> {
        solve_lower(&self.sys, &self.lower, p, opts)
    }

    /// Same problem with the upper objective replaced.
    pub fn with_upper(&self, upper: Expr) -> Self {
        BilevelProblem {
            upper,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowerOpts {
    pub project: ProjectOpts,
    /// Minimizers within this of the best value are kept.
    pub value_tol: f64,
    /// Centre of the start region; the origin when `None`.
    pub center: Option<Vec<f64>>,
    pub radius: f64,
    /// Times the start region may double to cover the solutions found.
    pub max_expansions: usize,
}

impl Default for LowerOpts {
    fn default() -> Self {
        LowerOpts {
            project: ProjectOpts::default(),
            value_tol: 1e-8,
            center: None,
            radius: 10.0,
            max_expansions: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowerSolution {
    pub phi: f64,
    pub x_solutions: Vec<Vec<f64>>,
    pub kkt_residual: f64,
    pub status: Status,
    /// Always true: `φ` is the best of several local solves.
    pub local: bool,
    pub search_radius: f64,
}

fn distinct(sols: &[Vec<f64>], x: &[f64]) -> bool {
    sols.iter().all(|s| dist(s, x) > 1e-6)
}

/// Multi-start local minimization of `f(p, ·)` over `F(p)`.
pub fn solve_lower(
    sys: &ParametricSystem,
    f: &Expr,
    p: &[f64],
    opts: &LowerOpts,
) -> Result<LowerSolution, BilevelError> {
    let center = opts.center.clone().unwrap_or_else(|| vec![0.0; sys.dx]);
    let obj = ExprObjective { f, p };
    let solver = opts.project.solver();
    let mut radius = opts.radius;
    let mut carried: Vec<Vec<f64>> = Vec::new();
    for expansion in 0..=opts.max_expansions {
        let popts = ProjectOpts {
            region: Some(SearchRegion::Ball {
                center: center.clone(),
                radius,
            }),
            ..opts.project.clone()
        };
        let mut starts = popts.starts(&center);
        starts.extend(carried.iter().cloned());
        let runs: Vec<LocalSolution> = starts
            .par_iter()
            .filter_map(|s| solve_local(sys, p, &obj, s, &solver).ok())
            .collect();
        let feasible: Vec<&LocalSolution> = runs
            .iter()
            .filter(|r| r.feas_residual <= opts.project.tol_feas && r.objective.is_finite())
            .collect();
        if feasible.is_empty() {
            let residual = runs.iter().map(|r| r.feas_residual).fold(f64::INFINITY, f64::min);
            return Err(BilevelError::InfeasibleSystem { residual });
        }
        let phi = feasible.iter().map(|r| r.objective).fold(f64::INFINITY, f64::min);
        if phi < -1e12 {
            return Err(BilevelError::Unbounded);
        }
        let mut best: Vec<&LocalSolution> = feasible
            .into_iter()
            .filter(|r| r.objective <= phi + opts.value_tol)
            .collect();
        best.sort_by(|a, b| {
            a.objective
                .partial_cmp(&b.objective)
                .unwrap()
                .then_with(|| a.x.partial_cmp(&b.x).unwrap_or(std::cmp::Ordering::Equal))
        });
        let mut x_solutions: Vec<Vec<f64>> = Vec::new();
        for r in best {
            if distinct(&x_solutions, &r.x) {
                x_solutions.push(r.x.clone());
            }
        }
        let reach = x_solutions.iter().map(|x| dist(x, &center)).fold(0.0, f64::max);
        if 2.0 * reach > radius && expansion < opts.max_expansions {
            radius = 2.0 * radius.max(2.0 * reach);
            carried = x_solutions;
            continue;
        }
        let x0 = &x_solutions[0];
        let (_, grad) = f.value_grad(p, x0, Wrt::X)?;
        let b: Vec<f64> = grad.iter().map(|g| -g).collect();
        let (_, kkt_residual, _) = active_multipliers(sys, p, x0, &b)?;
        let status = if kkt_residual <= opts.project.tol_kkt * (1.0 + norm(&grad)) {
            Status::Converged
        } else {
            Status::MaxIter
        };
        return Ok(LowerSolution {
            phi,
            x_solutions,
            kkt_residual,
            status,
            local: true,
            search_radius: radius,
        });
    }
    unreachable!("the last expansion always returns")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    pub estimate: f64,
    /// Pair of `(p, x)` points attaining the estimate.
    pub witness: Option<(Vec<f64>, Vec<f64>)>,
    pub pairs_used: usize,
    pub skipped_eval_errors: usize,
}

/// Sup of difference quotients of `e` over pairs built from `points`
/// (each a concatenated `(p, x)`): consecutive pairs, pairs with the first
/// point, and a short central probe along the gradient at every point.
pub fn lipschitz_on_points(e: &Expr, dp: usize, points: &[Vec<f64>]) -> LipschitzEstimate {
    let eval = |z: &[f64]| e.eval(&z[..dp], &z[dp..]).ok();
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for w in points.windows(2) {
        pairs.push((w[0].clone(), w[1].clone()));
    }
    for z in points.iter().skip(2) {
        pairs.push((points[0].clone(), z.clone()));
    }
    let probes: Vec<Option<(Vec<f64>, Vec<f64>)>> = points
        .par_iter()
        .map(|z| {
            let (_, g) = e.value_grad(&z[..dp], &z[dp..], Wrt::Both).ok()?;
            let gn = norm(&g);
            if gn == 0.0 {
                return None;
            }
            let t = 1e-6 * (1.0 + norm(z));
            let a = z.iter().zip(&g).map(|(s, d)| s - t * d / gn).collect();
            let b = z.iter().zip(&g).map(|(s, d)| s + t * d / gn).collect();
            Some((a, b))
        })
        .collect();
    pairs.extend(probes.into_iter().flatten());
    let quotients: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|(a, b)| {
            let gap = dist(a, b);
            if gap == 0.0 {
                return Some(0.0);
            }
            Some((eval(a)? - eval(b)?).abs() / gap)
        })
        .collect();
    let mut est = LipschitzEstimate {
        estimate: 0.0,
        witness: None,
        pairs_used: 0,
        skipped_eval_errors: 0,
    };
    for (pair, q) in pairs.iter().zip(quotients) {
        match q {
            Some(q) => {
                est.pairs_used += 1;
                if q > est.estimate {
                    est.estimate = q;
                    est.witness = Some(pair.clone());
                }
            }
            None => est.skipped_eval_errors += 1,
        }
    }
    est
}

/// Lower estimate of the Lipschitz constant of `e` on the ball of `radius`
/// around `center = (p, x)`.
pub fn estimate_lipschitz_constant(e: &Expr, dp: usize, center: &[f64], radius: f64, n: usize, seed: u64) -> LipschitzEstimate {
    let mut points = vec![center.to_vec()];
    for u in sampling::unit_ball(center.len(), n, seed) {
        points.push(sampling::scale_into(center, radius, &u));
    }
    lipschitz_on_points(e, dp, &points)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictedBound {
    pub l0: f64,
    pub alpha: f64,
    pub r_modulus: f64,
    pub r_modulus_diverging: bool,
    pub max_constraint_lipschitz: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhiLipschitzReport {
    #[serde(flatten)]
    pub report: RegularityReport,
    /// `l0 + α M max l_i`, for comparison only.
    pub predicted_bound: Option<PredictedBound>,
    pub domain_assumption: &'static str,
}

/// Sup of `|φ(p) − φ(p̃)| / ‖p − p̃‖` over all pairs of sampled parameters
/// within `delta` of `p0` where the lower level is solvable.
pub fn phi_lipschitz_estimate(
    blp: &BilevelProblem,
    p0: &[f64],
    delta: f64,
    n: usize,
    seed: u64,
    opts: &LowerOpts,
) -> Result<PhiLipschitzReport, BilevelError> {
    let anchor = blp.solve_lower(p0, opts)?;
    let mut params = vec![p0.to_vec()];
    let stencil = sampling::axis_stencil(p0, &[delta, 0.5 * delta]);
    let n_stencil = stencil.len();
    params.extend(stencil);
    for u in sampling::unit_ball(p0.len(), n, seed) {
        params.push(sampling::scale_into(p0, delta, &u));
    }
    let solved: Vec<Option<LowerSolution>> = params.par_iter().map(|p| blp.solve_lower(p, opts).ok()).collect();
    let usable: Vec<(usize, &LowerSolution)> = solved
        .iter()
        .enumerate()
        .filter_map(|(k, s)| s.as_ref().map(|s| (k, s)))
        .collect();
    let skipped_infeasible = params.len() - usable.len();

    let mut records = Vec::new();
    for (a, &(i, si)) in usable.iter().enumerate() {
        for &(j, sj) in &usable[a + 1..] {
            let gap = dist(&params[i], &params[j]);
            if gap < regularity::MIN_PARAM_GAP {
                continue;
            }
            let num = (si.phi - sj.phi).abs();
            records.push(SampleRecord {
                step: 0,
                radius: delta,
                p: params[i].clone(),
                p2: Some(params[j].clone()),
                x: si.x_solutions[0].clone(),
                numerator: num,
                denominator: gap,
                ratio: num / gap,
                stencil: i <= n_stencil && j <= n_stencil,
            });
        }
    }
    let mut witness: Option<&SampleRecord> = None;
    for r in &records {
        if witness.map_or(true, |w| r.ratio > w.ratio) {
            witness = Some(r);
        }
    }
    let witness = witness.cloned();
    let report = RegularityReport {
        kind: ReportKind::LowerLevelValue,
        estimate: witness.as_ref().map(|w| w.ratio),
        witness,
        trend: vec![regularity::TrendPoint {
            radius: delta,
            sup_ratio: records.iter().map(|r| r.ratio).reduce(f64::max),
            samples_used: usable.len(),
        }],
        diverging: false,
        samples_used: usable.len(),
        skipped_infeasible_p: skipped_infeasible,
        skipped: regularity::SkipCounts {
            infeasible_p: skipped_infeasible,
            ..Default::default()
        },
        params: regularity::ReportParams {
            delta: Some(delta),
            eps: None,
            schedule: ShrinkSchedule {
                r0: delta,
                factor: 1.0,
                steps: 1,
                samples_per_step: n,
            },
            seed,
            growth_factor: regularity::GROWTH_FACTOR,
            growth_run: regularity::GROWTH_RUN,
        },
        records,
        notes: vec![DOMAIN_ASSUMPTION.to_string()],
    };
    let predicted_bound = predicted_bound(blp, p0, &anchor.x_solutions[0], delta, n, seed, opts);
    Ok(PhiLipschitzReport {
        report,
        predicted_bound,
        domain_assumption: DOMAIN_ASSUMPTION,
    })
}

fn predicted_bound(
    blp: &BilevelProblem,
    p0: &[f64],
    x0: &[f64],
    delta: f64,
    n: usize,
    seed: u64,
    opts: &LowerOpts,
) -> Option<PredictedBound> {
    let dp = blp.sys.dp;
    let mut center = p0.to_vec();
    center.extend_from_slice(x0);
    let l0 = estimate_lipschitz_constant(&blp.lower, dp, &center, delta, n, seed).estimate;
    let max_l = blp
        .sys
        .ineq
        .iter()
        .chain(&blp.sys.eq)
        .map(|h| estimate_lipschitz_constant(h, dp, &center, delta, n, seed).estimate)
        .fold(0.0, f64::max);
    let eopts = EstimatorOpts {
        schedule: ShrinkSchedule {
            r0: delta,
            factor: 0.5,
            steps: 4,
            samples_per_step: n.min(32),
        },
        seed,
        project: opts.project.clone(),
        ..EstimatorOpts::default()
    };
    let m = regularity::estimate_r_modulus(&blp.sys, p0, x0, &eopts).ok()?;
    let r_modulus = m.estimate.unwrap_or(0.0);
    let alpha = l0 * (1.0 + 1e-3);
    Some(PredictedBound {
        l0,
        alpha,
        r_modulus,
        r_modulus_diverging: m.diverging,
        max_constraint_lipschitz: max_l,
        bound: l0 + alpha * r_modulus * max_l,
    })
}

/// `G(p, x) + μ (f(p, x) − φ(p))`.
pub fn penalized_objective(
    blp: &BilevelProblem,
    mu: f64,
    p: &[f64],
    x: &[f64],
    opts: &LowerOpts,
) -> Result<f64, BilevelError> {
    let tol = opts.project.tol_feas;
    let residual = blp.sys.residual(p, x)?;
    if residual > tol {
        return Err(BilevelError::InfeasibleAnchor(format!("x is not in F(p) (residual {residual:e})")));
    }
    let g = blp.pcons_violation(p)?;
    if g > tol {
        return Err(BilevelError::InfeasibleAnchor(format!("p violates the parameter constraints by {g:e}")));
    }
    let upper = blp.upper.eval(p, x)?;
    if mu == 0.0 {
        return Ok(upper);
    }
    let phi = blp.solve_lower(p, opts)?.phi;
    Ok(upper + mu * (blp.lower.eval(p, x)? - phi))
}

/// `p ⇒ C(p) = { x ∈ F(p) : f(p, x) − φ(p) ≤ 0 }` on `P`.
pub struct ValueConstrained<'a> {
    pub blp: &'a BilevelProblem,
    pub opts: &'a LowerOpts,
}

impl SetMap for ValueConstrained<'_> {
    fn dp(&self) -> usize {
        self.blp.sys.dp
    }

    fn dx(&self) -> usize {
        self.blp.sys.dx
    }

    fn slice(&self, p: &[f64]) -> Option<Cow<'_, ParametricSystem>> {
        if self.blp.pcons_violation(p).ok()? > self.opts.project.tol_feas {
            return None;
        }
        let phi = self.blp.solve_lower(p, self.opts).ok()?.phi;
        let h0 = Expr::Sub(Box::new(self.blp.lower.clone()), Box::new(Expr::Const(phi)));
        Some(Cow::Owned(self.blp.sys.with_inequality(h0)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PenaltyWitness {
    pub p: Vec<f64>,
    pub x: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MuRow {
    pub mu: f64,
    pub passes: bool,
    pub anchor_value: f64,
    /// Least `value(sample) − value(anchor)` over the samples.
    pub worst_gap: f64,
    pub witness: Option<PenaltyWitness>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FormulaInputs {
    pub l0: f64,
    pub r_modulus: Option<f64>,
    pub r_modulus_diverging: bool,
    pub samples_in_d: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PenaltyReport {
    pub p_star: Vec<f64>,
    pub x_star: Vec<f64>,
    pub mu0_empirical: Option<f64>,
    pub mu0_formula: Option<f64>,
    pub formula_inputs: FormulaInputs,
    pub per_mu: Vec<MuRow>,
    pub radius: f64,
    pub samples_used: usize,
    pub skipped_outside_d: usize,
    pub skipped_lower_failures: usize,
    /// Samples where a feasible sample point beat the lower-level solver and
    /// replaced its value of `φ`.
    pub phi_improved_by_samples: usize,
    pub seed: u64,
    pub notes: Vec<String>,
}

/// `2^-4, 2^-3, ..., 2^8`.
pub fn default_mu_grid() -> Vec<f64> {
    (-4..=8).map(|k| 2f64.powi(k)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PenaltyParams {
    pub mu_grid: Vec<f64>,
    pub radius: f64,
    pub n: usize,
    pub seed: u64,
    /// Samples per step when estimating the modulus of `C`.
    pub modulus_samples: usize,
    pub modulus_steps: usize,
}

impl Default for PenaltyParams {
    fn default() -> Self {
        PenaltyParams {
            mu_grid: default_mu_grid(),
            radius: 0.2,
            n: 256,
            seed: 0,
            modulus_samples: 16,
            modulus_steps: 4,
        }
    }
}

/// Tests, for each `μ`, whether `(p*, x*)` minimizes the penalized objective
/// over sampled points of `D` near it, and evaluates `l0 · M` with `l0`
/// estimated for `G` on the same samples and `M` the R-modulus of `C`.
pub fn find_penalty_threshold(
    blp: &BilevelProblem,
    p_star: &[f64],
    x_star: &[f64],
    params: &PenaltyParams,
    opts: &LowerOpts,
) -> Result<PenaltyReport, BilevelError> {
    let tol = opts.project.tol_feas;
    let residual = blp.sys.residual(p_star, x_star)?;
    if residual > tol {
        return Err(BilevelError::InfeasibleAnchor(format!("x* is not in F(p*) (residual {residual:e})")));
    }
    let g = blp.pcons_violation(p_star)?;
    if g > tol {
        return Err(BilevelError::InfeasibleAnchor(format!("p* violates the parameter constraints by {g:e}")));
    }
    let anchor_lower = blp.solve_lower(p_star, opts)?;
    let f_star = blp.lower.eval(p_star, x_star)?;
    let phi_star = anchor_lower.phi.min(f_star);
    if f_star - phi_star > opts.value_tol {
        return Err(BilevelError::InfeasibleAnchor(format!(
            "x* is not lower-level optimal (f − φ = {:e})",
            f_star - phi_star
        )));
    }

    let dp = blp.sys.dp;
    let r = params.radius;
    let mut points: Vec<(Vec<f64>, Vec<f64>)> = regularity::joint_stencil(p_star, x_star, r);
    points.extend(regularity::joint_stencil(p_star, x_star, 0.5 * r));
    for u in sampling::unit_ball_product(&[dp, blp.sys.dx], params.n, params.seed) {
        points.push((sampling::scale_into(p_star, r, &u[..dp]), sampling::scale_into(x_star, r, &u[dp..])));
    }

    enum Sample {
        Outside,
        LowerFailed,
        Used { g: f64, h0: f64, improved: bool },
    }
    let evaluated: Vec<Sample> = points
        .par_iter()
        .map(|(p, x)| {
            let in_d = blp.sys.residual(p, x).map_or(false, |res| res <= tol)
                && blp.pcons_violation(p).map_or(false, |g| g <= tol);
            if !in_d {
                return Sample::Outside;
            }
            let (Ok(gv), Ok(fv)) = (blp.upper.eval(p, x), blp.lower.eval(p, x)) else {
                return Sample::Outside;
            };
            match blp.solve_lower(p, opts) {
                Ok(lower) => Sample::Used {
                    g: gv,
                    h0: (fv - lower.phi).max(0.0),
                    improved: fv < lower.phi,
                },
                Err(_) => Sample::LowerFailed,
            }
        })
        .collect();

    let mut used: Vec<(&(Vec<f64>, Vec<f64>), f64, f64)> = Vec::new();
    let (mut outside, mut failed, mut improved) = (0, 0, 0);
    for (pt, s) in points.iter().zip(&evaluated) {
        match s {
            Sample::Outside => outside += 1,
            Sample::LowerFailed => failed += 1,
            Sample::Used { g, h0, improved: imp } => {
                improved += usize::from(*imp);
                used.push((pt, *g, *h0));
            }
        }
    }

    let g_star = blp.upper.eval(p_star, x_star)?;
    let h0_star = f_star - phi_star;
    let per_mu: Vec<MuRow> = params
        .mu_grid
        .iter()
        .map(|&mu| {
            let anchor_value = g_star + mu * h0_star;
            let mut worst_gap = f64::INFINITY;
            let mut worst: Option<PenaltyWitness> = None;
            for ((p, x), g, h0) in &used {
                let value = g + mu * h0;
                let gap = value - anchor_value;
                if gap < worst_gap {
                    worst_gap = gap;
                    worst = Some(PenaltyWitness {
                        p: p.clone(),
                        x: x.clone(),
                        value,
                    });
                }
            }
            let passes = worst_gap >= -PENALTY_TOL;
            MuRow {
                mu,
                passes,
                anchor_value,
                worst_gap,
                witness: if passes { None } else { worst },
            }
        })
        .collect();
    let mu0_empirical = per_mu.iter().find(|row| row.passes).map(|row| row.mu);

    let mut joint: Vec<Vec<f64>> = Vec::with_capacity(used.len() + 1);
    joint.push([p_star, x_star].concat());
    joint.extend(used.iter().map(|((p, x), _, _)| [p.as_slice(), x.as_slice()].concat()));
    let l0 = lipschitz_on_points(&blp.upper, dp, &joint).estimate;
    let eopts = EstimatorOpts {
        schedule: ShrinkSchedule {
            r0: r,
            factor: 0.5,
            steps: params.modulus_steps,
            samples_per_step: params.modulus_samples,
        },
        seed: params.seed,
        project: opts.project.clone(),
        ..EstimatorOpts::default()
    };
    let c_map = ValueConstrained { blp, opts };
    let modulus = regularity::estimate_r_modulus(&c_map, p_star, x_star, &eopts)?;
    let mu0_formula = modulus.estimate.map(|m| l0 * m);

    let mut notes = vec![
        DOMAIN_ASSUMPTION.to_string(),
        "the modulus in the formula is estimated for the value-constrained map C(p), not for the solution map".to_string(),
        "passing rows are evidence on a finite neighbourhood sample, not a proof of partial calmness".to_string(),
    ];
    if modulus.diverging {
        notes.push("the R-modulus trend of C diverges; the formula value is unreliable".to_string());
    }
    Ok(PenaltyReport {
        p_star: p_star.to_vec(),
        x_star: x_star.to_vec(),
        mu0_empirical,
        mu0_formula,
        formula_inputs: FormulaInputs {
            l0,
            r_modulus: modulus.estimate,
            r_modulus_diverging: modulus.diverging,
            samples_in_d: used.len(),
        },
        per_mu,
        radius: r,
        samples_used: used.len(),
        skipped_outside_d: outside,
        skipped_lower_failures: failed,
        phi_improved_by_samples: improved,
        seed: params.seed,
        notes,
    })
}
