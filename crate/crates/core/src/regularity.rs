//! Sample-based estimates of regularity moduli of `p ⇒ F(p)` near a point
//! `(p0, x0)` of its graph.
//!
//! Each estimator evaluates a ratio on seeded samples over a shrinking
//! schedule of radii and reports the sup. At every step the same normalized
//! sample pattern is rescaled to the current radius, and a deterministic axis
//! stencil at exactly that radius is evaluated first, so the per-step sup
//! tracks how the ratio scales as the neighbourhood shrinks. A run of
//! geometric growth in the per-step sups sets the `diverging` flag.
//!
//! Parameters are treated as members of `dom F` only when a projection onto
//! `F(p)` converged; other samples are skipped and counted, never used as
//! evidence. Sup estimates are lower bounds on the true moduli.

use std::borrow::Cow;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::cq::Verdict;
use crate::expr::EvalError;
use crate::projection::{min_multiplier_norm, project, ProjectOpts, ProjectionError, Status};
use crate::sampling::{self, dist, norm};
use crate::system::{default_eta_of, ParametricSystem, DEFAULT_TOL_FEAS};

/// Per-step growth factor that counts towards divergence.
pub const GROWTH_FACTOR: f64 = 1.8;
/// Consecutive growth steps needed to flag divergence.
pub const GROWTH_RUN: usize = 3;
/// Residuals below this are treated as membership and skipped.
pub const MIN_RESIDUAL: f64 = 1e-12;
/// Parameter pairs closer than this are skipped.
pub const MIN_PARAM_GAP: f64 = 1e-9;
/// Tangency threshold on `dist(x + t d, F(p)) / t` at the last `t`.
pub const TANGENCY_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum RegularityError {
    #[error("base point is not in F(p0) (residual {residual:e})")]
    InfeasibleBase { residual: f64 },
    #[error("direction {index} is not a unit vector")]
    NotUnit { index: usize },
    #[error("invalid schedule: {0}")]
    Schedule(&'static str),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// A set-valued map whose value at each `p` is described by a constraint
/// system.
pub trait SetMap: Sync {
    fn dp(&self) -> usize;
    fn dx(&self) -> usize;
    /// Constraint system whose feasible set at `p` is the map's value, or
    /// `None` if it cannot be formed at `p`.
    fn slice(&self, p: &[f64]) -> Option<Cow<'_, ParametricSystem>>;
}

impl SetMap for ParametricSystem {
    fn dp(&self) -> usize {
        self.dp
    }

    fn dx(&self) -> usize {
        self.dx
    }

    fn slice(&self, _p: &[f64]) -> Option<Cow<'_, ParametricSystem>> {
        Some(Cow::Borrowed(self))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShrinkSchedule {
    pub r0: f64,
    pub factor: f64,
    pub steps: usize,
    pub samples_per_step: usize,
}

impl Default for ShrinkSchedule {
    fn default() -> Self {
        ShrinkSchedule {
            r0: 0.1,
            factor: 0.5,
            steps: 8,
            samples_per_step: 32,
        }
    }
}

impl ShrinkSchedule {
    pub fn with_r0(r0: f64) -> Self {
        ShrinkSchedule {
            r0,
            ..Self::default()
        }
    }

    pub fn radii(&self) -> Vec<f64> {
        (0..self.steps).map(|k| self.r0 * self.factor.powi(k as i32)).collect()
    }

    fn validate(&self) -> Result<(), RegularityError> {
        if !(self.r0 > 0.0 && self.r0.is_finite()) {
            return Err(RegularityError::Schedule("r0 must be positive"));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(RegularityError::Schedule("factor must lie in (0, 1)"));
        }
        if self.steps == 0 {
            return Err(RegularityError::Schedule("steps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    RModulus,
    Aubin,
    LowerLipschitz,
    MultiplierNorm,
    LowerLevelValue,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRecord {
    pub step: usize,
    pub radius: f64,
    /// Parameter (for Aubin pairs: the parameter of the slice containing `x`).
    pub p: Vec<f64>,
    /// Second parameter of an Aubin pair.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p2: Option<Vec<f64>>,
    pub x: Vec<f64>,
    pub numerator: f64,
    pub denominator: f64,
    pub ratio: f64,
    pub stencil: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendPoint {
    pub radius: f64,
    pub sup_ratio: Option<f64>,
    pub samples_used: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SkipCounts {
    /// Projection reported an infeasible system: `p ∈ dom F` not detected.
    pub infeasible_p: usize,
    /// Projection found a feasible point but KKT did not converge.
    pub unconverged: usize,
    /// Residual or parameter gap below the floor.
    pub degenerate: usize,
    /// Point outside the `ε`-neighbourhood of `x0`.
    pub outside_eps: usize,
    /// Expression evaluation failed.
    pub eval_errors: usize,
    /// Multiplier set empty at tolerance.
    pub empty_multipliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportParams {
    pub delta: Option<f64>,
    pub eps: Option<f64>,
    pub schedule: ShrinkSchedule,
    pub seed: u64,
    pub growth_factor: f64,
    pub growth_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularityReport {
    pub kind: ReportKind,
    /// Max over recorded ratios; `None` when no sample was usable.
    pub estimate: Option<f64>,
    pub witness: Option<SampleRecord>,
    pub trend: Vec<TrendPoint>,
    pub diverging: bool,
    pub samples_used: usize,
    pub skipped_infeasible_p: usize,
    pub skipped: SkipCounts,
    pub params: ReportParams,
    pub records: Vec<SampleRecord>,
    pub notes: Vec<String>,
}

/// True when `trend` grows by at least `factor` over `run` consecutive steps.
pub fn diverging_from_trend(trend: &[TrendPoint], factor: f64, run: usize) -> bool {
    let mut streak = 0;
    for w in trend.windows(2) {
        match (w[0].sup_ratio, w[1].sup_ratio) {
            (Some(a), Some(b)) if a > 0.0 && b >= factor * a => {
                streak += 1;
                if streak >= run {
                    return true;
                }
            }
            _ => streak = 0,
        }
    }
    false
}

enum Outcome {
    Used(SampleRecord),
    Skip(fn(&mut SkipCounts)),
}

fn skip_infeasible(c: &mut SkipCounts) {
    c.infeasible_p += 1;
}
fn skip_unconverged(c: &mut SkipCounts) {
    c.unconverged += 1;
}
fn skip_degenerate(c: &mut SkipCounts) {
    c.degenerate += 1;
}
fn skip_outside(c: &mut SkipCounts) {
    c.outside_eps += 1;
}
fn skip_eval(c: &mut SkipCounts) {
    c.eval_errors += 1;
}
fn skip_empty(c: &mut SkipCounts) {
    c.empty_multipliers += 1;
}

fn status_skip(status: Status) -> Outcome {
    match status {
        Status::InfeasibleSystem => Outcome::Skip(skip_infeasible),
        _ => Outcome::Skip(skip_unconverged),
    }
}

fn assemble(
    kind: ReportKind,
    radii: &[f64],
    per_step: Vec<Vec<Outcome>>,
    params: ReportParams,
    notes: Vec<String>,
) -> RegularityReport {
    let mut skipped = SkipCounts::default();
    let mut records = Vec::new();
    let mut trend = Vec::with_capacity(radii.len());
    for (&radius, outcomes) in radii.iter().zip(per_step) {
        let mut sup: Option<f64> = None;
        let mut used = 0;
        for o in outcomes {
            match o {
                Outcome::Used(rec) => {
                    used += 1;
                    sup = Some(sup.map_or(rec.ratio, |s| s.max(rec.ratio)));
                    records.push(rec);
                }
                Outcome::Skip(count) => count(&mut skipped),
            }
        }
        trend.push(TrendPoint {
            radius,
            sup_ratio: sup,
            samples_used: used,
        });
    }
    let mut witness: Option<&SampleRecord> = None;
    for r in &records {
        if witness.map_or(true, |w| r.ratio > w.ratio) {
            witness = Some(r);
        }
    }
    let witness = witness.cloned();
    let diverging = diverging_from_trend(&trend, params.growth_factor, params.growth_run);
    RegularityReport {
        kind,
        estimate: witness.as_ref().map(|w| w.ratio),
        witness,
        diverging,
        samples_used: records.len(),
        skipped_infeasible_p: skipped.infeasible_p,
        skipped,
        trend,
        params,
        records,
        notes,
    }
}

/// Common knobs for the sample-based estimators.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorOpts {
    pub schedule: ShrinkSchedule,
    pub seed: u64,
    pub project: ProjectOpts,
    pub tol_feas: f64,
    /// Stationarity tolerance for normalized multipliers.
    pub tol_multiplier: f64,
}

impl Default for EstimatorOpts {
    fn default() -> Self {
        EstimatorOpts {
            schedule: ShrinkSchedule::default(),
            seed: 0,
            project: ProjectOpts::default(),
            tol_feas: DEFAULT_TOL_FEAS,
            tol_multiplier: 1e-6,
        }
    }
}

impl EstimatorOpts {
    fn report_params(&self, delta: Option<f64>, eps: Option<f64>) -> ReportParams {
        ReportParams {
            delta,
            eps,
            schedule: self.schedule.clone(),
            seed: self.seed,
            growth_factor: GROWTH_FACTOR,
            growth_run: GROWTH_RUN,
        }
    }
}

fn check_base<M: SetMap + ?Sized>(map: &M, p0: &[f64], x0: &[f64], tol: f64) -> Result<(), RegularityError> {
    let Some(sys) = map.slice(p0) else {
        return Err(RegularityError::InfeasibleBase {
            residual: f64::INFINITY,
        });
    };
    let residual = sys.residual(p0, x0)?;
    if residual > tol {
        return Err(RegularityError::InfeasibleBase { residual });
    }
    Ok(())
}

/// Joint `(p, x)` stencil at radius `r`: pure parameter moves, pure `x`
/// moves, then every signed pair of one parameter axis and one `x` axis.
pub fn joint_stencil(p0: &[f64], x0: &[f64], r: f64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut out = Vec::new();
    for p in sampling::axis_stencil(p0, &[r]) {
        out.push((p, x0.to_vec()));
    }
    for x in sampling::axis_stencil(x0, &[r]) {
        out.push((p0.to_vec(), x));
    }
    for a in 0..p0.len() {
        for b in 0..x0.len() {
            for s in [1.0, -1.0] {
                for t in [1.0, -1.0] {
                    let mut p = p0.to_vec();
                    let mut x = x0.to_vec();
                    p[a] += s * r;
                    x[b] += t * r;
                    out.push((p, x));
                }
            }
        }
    }
    out
}

/// Joint samples for step radius `r`: stencil first, then the rescaled pattern.
fn joint_points(
    p0: &[f64],
    x0: &[f64],
    r: f64,
    pattern: &[Vec<f64>],
) -> Vec<(Vec<f64>, Vec<f64>, bool)> {
    let dp = p0.len();
    let mut pts: Vec<(Vec<f64>, Vec<f64>, bool)> = joint_stencil(p0, x0, r)
        .into_iter()
        .map(|(p, x)| (p, x, true))
        .collect();
    for u in pattern {
        let (up, ux) = u.split_at(dp);
        pts.push((sampling::scale_into(p0, r, up), sampling::scale_into(x0, r, ux), false));
    }
    pts
}

/// Parameter samples for step radius `r`.
fn param_points(p0: &[f64], r: f64, pattern: &[Vec<f64>]) -> Vec<(Vec<f64>, bool)> {
    let mut pts: Vec<(Vec<f64>, bool)> = sampling::axis_stencil(p0, &[r])
        .into_iter()
        .map(|p| (p, true))
        .collect();
    for u in pattern {
        pts.push((sampling::scale_into(p0, r, u), false));
    }
    pts
}

fn r_ratio<M: SetMap + ?Sized>(
    map: &M,
    p: &[f64],
    x: &[f64],
    opts: &ProjectOpts,
) -> Result<(f64, f64), Outcome> {
    let sys = map.slice(p).ok_or(Outcome::Skip(skip_infeasible))?;
    let residual = sys.residual(p, x).map_err(|_| Outcome::Skip(skip_eval))?;
    if residual < MIN_RESIDUAL {
        return Err(Outcome::Skip(skip_degenerate));
    }
    let proj = project(&sys, p, x, opts).map_err(|_| Outcome::Skip(skip_eval))?;
    if proj.status != Status::Converged {
        return Err(status_skip(proj.status));
    }
    Ok((proj.distance, residual.max(MIN_RESIDUAL)))
}

/// Sup of `dist(x, F(p)) / residual(p, x)` over `(p, x)` near `(p0, x0)`.
pub fn estimate_r_modulus<M: SetMap + ?Sized>(
    map: &M,
    p0: &[f64],
    x0: &[f64],
    opts: &EstimatorOpts,
) -> Result<RegularityReport, RegularityError> {
    opts.schedule.validate()?;
    check_base(map, p0, x0, opts.tol_feas)?;
    let radii = opts.schedule.radii();
    let pattern = sampling::unit_ball_product(&[map.dp(), map.dx()], opts.schedule.samples_per_step, opts.seed);
    let per_step = radii
        .iter()
        .enumerate()
        .map(|(step, &r)| {
            joint_points(p0, x0, r, &pattern)
                .par_iter()
                .map(|(p, x, stencil)| match r_ratio(map, p, x, &opts.project) {
                    Ok((d, res)) => Outcome::Used(SampleRecord {
                        step,
                        radius: r,
                        p: p.clone(),
                        p2: None,
                        x: x.clone(),
                        numerator: d,
                        denominator: res,
                        ratio: d / res,
                        stencil: *stencil,
                    }),
                    Err(o) => o,
                })
                .collect()
        })
        .collect();
    Ok(assemble(
        ReportKind::RModulus,
        &radii,
        per_step,
        opts.report_params(None, None),
        Vec::new(),
    ))
}

/// R-modulus ratios on an explicit list of `(p, x)` points, all as step 0.
pub fn r_modulus_on_points<M: SetMap + ?Sized>(
    map: &M,
    points: &[(Vec<f64>, Vec<f64>)],
    opts: &EstimatorOpts,
) -> RegularityReport {
    let outcomes = points
        .par_iter()
        .map(|(p, x)| match r_ratio(map, p, x, &opts.project) {
            Ok((d, res)) => Outcome::Used(SampleRecord {
                step: 0,
                radius: 0.0,
                p: p.clone(),
                p2: None,
                x: x.clone(),
                numerator: d,
                denominator: res,
                ratio: d / res,
                stencil: false,
            }),
            Err(o) => o,
        })
        .collect();
    assemble(
        ReportKind::RModulus,
        &[0.0],
        vec![outcomes],
        opts.report_params(None, None),
        Vec::new(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiplierBoundReport {
    pub bounded: bool,
    /// Per-step sup of the min-norm multiplier 1-norm, with records.
    #[serde(flatten)]
    pub report: RegularityReport,
}

/// Tracks the least multiplier norm along projections of points `v ∉ F(p)`
/// near `x0`, `p` near `p0`. Unbounded growth falsifies R-regularity.
pub fn check_multiplier_bound<M: SetMap + ?Sized>(
    map: &M,
    p0: &[f64],
    x0: &[f64],
    opts: &EstimatorOpts,
) -> Result<MultiplierBoundReport, RegularityError> {
    opts.schedule.validate()?;
    check_base(map, p0, x0, opts.tol_feas)?;
    let radii = opts.schedule.radii();
    let pattern = sampling::unit_ball_product(&[map.dp(), map.dx()], opts.schedule.samples_per_step, opts.seed);
    let per_step = radii
        .iter()
        .enumerate()
        .map(|(step, &r)| {
            joint_points(p0, x0, r, &pattern)
                .par_iter()
                .map(|(p, v, stencil)| {
                    let Some(sys) = map.slice(p) else {
                        return Outcome::Skip(skip_infeasible);
                    };
                    match sys.residual(p, v) {
                        Ok(res) if res >= MIN_RESIDUAL => {}
                        Ok(_) => return Outcome::Skip(skip_degenerate),
                        Err(_) => return Outcome::Skip(skip_eval),
                    }
                    let proj = match project(&sys, p, v, &opts.project) {
                        Ok(proj) if proj.status == Status::Converged => proj,
                        Ok(proj) => return status_skip(proj.status),
                        Err(_) => return Outcome::Skip(skip_eval),
                    };
                    if proj.distance <= 0.0 {
                        return Outcome::Skip(skip_degenerate);
                    }
                    match min_multiplier_norm(&sys, p, &proj.x_star, v, opts.tol_multiplier) {
                        Ok(mn) => Outcome::Used(SampleRecord {
                            step,
                            radius: r,
                            p: p.clone(),
                            p2: None,
                            x: v.clone(),
                            numerator: mn.l1,
                            denominator: 1.0,
                            ratio: mn.l1,
                            stencil: *stencil,
                        }),
                        Err(ProjectionError::EmptyMultiplierSet { .. }) => Outcome::Skip(skip_empty),
                        Err(_) => Outcome::Skip(skip_eval),
                    }
                })
                .collect()
        })
        .collect();
    let notes = vec![
        "one projection per sample is checked; other points of a multi-valued projection are not enumerated".to_string(),
    ];
    let report = assemble(
        ReportKind::MultiplierNorm,
        &radii,
        per_step,
        opts.report_params(None, None),
        notes,
    );
    Ok(MultiplierBoundReport {
        bounded: !report.diverging && report.skipped.empty_multipliers == 0,
        report,
    })
}

fn lower_lipschitz_ratio<M: SetMap + ?Sized>(
    map: &M,
    p0: &[f64],
    x0: &[f64],
    p: &[f64],
    opts: &ProjectOpts,
) -> Result<(f64, f64), Outcome> {
    let gap = dist(p, p0);
    if gap < MIN_PARAM_GAP {
        return Err(Outcome::Skip(skip_degenerate));
    }
    let sys = map.slice(p).ok_or(Outcome::Skip(skip_infeasible))?;
    let proj = project(&sys, p, x0, opts).map_err(|_| Outcome::Skip(skip_eval))?;
    if proj.status != Status::Converged {
        return Err(status_skip(proj.status));
    }
    Ok((proj.distance, gap))
}

/// Sup of `dist(x0, F(p)) / ‖p − p0‖` with the schedule's `r0` as `δ`.
pub fn estimate_lower_lipschitz<M: SetMap + ?Sized>(
    map: &M,
    p0: &[f64],
    x0: &[f64],
    opts: &EstimatorOpts,
) -> Result<RegularityReport, RegularityError> {
    opts.schedule.validate()?;
    check_base(map, p0, x0, opts.tol_feas)?;
    let radii = opts.schedule.radii();
    let pattern = sampling::unit_ball(map.dp(), opts.schedule.samples_per_step, opts.seed);
    let per_step = radii
        .iter()
        .enumerate()
        .map(|(step, &r)| lower_lipschitz_step(map, p0, x0, step, r, &pattern, &opts.project))
        .collect();
    Ok(assemble(
        ReportKind::LowerLipschitz,
        &radii,
        per_step,
        opts.report_params(Some(opts.schedule.r0), None),
        Vec::new(),
    ))
}

fn lower_lipschitz_step<M: SetMap + ?Sized>(
    map: &M,
    p0: &[f64],
    x0: &[f64],
    step: usize,
    r: f64,
    pattern: &[Vec<f64>],
    opts: &ProjectOpts,
) -> Vec<Outcome> {
    param_points(p0, r, pattern)
        .par_iter()
        .map(|(p, stencil)| match lower_lipschitz_ratio(map, p0, x0, p, opts) {
            Ok((d, gap)) => Outcome::Used(SampleRecord {
                step,
                radius: r,
                p: p0.to_vec(),
                p2: Some(p.clone()),
                x: x0.to_vec(),
                numerator: d,
                denominator: gap,
                ratio: d / gap,
                stencil: *stencil,
            }),
            Err(o) => o,
        })
        .collect()
}

/// Sup of `dist(x̃, F(p2)) / ‖p1 − p2‖` over `p1, p2` within the step radius
/// of `p0` and `x̃ ∈ F(p1)` within `eps` of `x0`.
///
/// The samples include, with the same seed, every lower-Lipschitz sample as
/// the pair `(p0, p)` with `x̃ = x0`, so this estimate never falls below
/// `estimate_lower_lipschitz` run with the same options.
pub fn estimate_aubin_modulus<M: SetMap + ?Sized>(
    map: &M,
    p0: &[f64],
    x0: &[f64],
    eps: f64,
    opts: &EstimatorOpts,
) -> Result<RegularityReport, RegularityError> {
    opts.schedule.validate()?;
    check_base(map, p0, x0, opts.tol_feas)?;
    let radii = opts.schedule.radii();
    let dp = map.dp();
    let anchor_pattern = sampling::unit_ball(dp, opts.schedule.samples_per_step, opts.seed);
    let pair_pattern = sampling::unit_ball_product(
        &[dp, dp, map.dx()],
        opts.schedule.samples_per_step,
        opts.seed.wrapping_add(1),
    );
    let per_step = radii
        .iter()
        .enumerate()
        .map(|(step, &r)| {
            let mut outcomes = lower_lipschitz_step(map, p0, x0, step, r, &anchor_pattern, &opts.project);
            // reversed stencil pairs (p0 ± r e_k, p0) and the random pairs
            let mut jobs: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, bool)> = sampling::axis_stencil(p0, &[r])
                .into_iter()
                .map(|p1| (p1, p0.to_vec(), x0.to_vec(), true))
                .collect();
            for u in &pair_pattern {
                let p1 = sampling::scale_into(p0, r, &u[..dp]);
                let p2 = sampling::scale_into(p0, r, &u[dp..2 * dp]);
                let start = sampling::scale_into(x0, 0.5 * eps, &u[2 * dp..]);
                jobs.push((p1, p2, start, false));
            }
            let pairs: Vec<Outcome> = jobs
                .par_iter()
                .map(|(p1, p2, start, stencil)| {
                    match aubin_pair(map, x0, p1, p2, start, eps, &opts.project) {
                        Ok((xt, d, gap)) => Outcome::Used(SampleRecord {
                            step,
                            radius: r,
                            p: p1.clone(),
                            p2: Some(p2.clone()),
                            x: xt,
                            numerator: d,
                            denominator: gap,
                            ratio: d / gap,
                            stencil: *stencil,
                        }),
                        Err(o) => o,
                    }
                })
                .collect();
            outcomes.extend(pairs);
            outcomes
        })
        .collect();
    Ok(assemble(
        ReportKind::Aubin,
        &radii,
        per_step,
        opts.report_params(Some(opts.schedule.r0), Some(eps)),
        Vec::new(),
    ))
}

fn aubin_pair<M: SetMap + ?Sized>(
    map: &M,
    x0: &[f64],
    p1: &[f64],
    p2: &[f64],
    start: &[f64],
    eps: f64,
    opts: &ProjectOpts,
) -> Result<(Vec<f64>, f64, f64), Outcome> {
    let gap = dist(p1, p2);
    if gap < MIN_PARAM_GAP {
        return Err(Outcome::Skip(skip_degenerate));
    }
    let s1 = map.slice(p1).ok_or(Outcome::Skip(skip_infeasible))?;
    let on_slice = project(&s1, p1, start, opts).map_err(|_| Outcome::Skip(skip_eval))?;
    if on_slice.status != Status::Converged {
        return Err(status_skip(on_slice.status));
    }
    let xt = on_slice.x_star;
    if dist(&xt, x0) > eps {
        return Err(Outcome::Skip(skip_outside));
    }
    let s2 = map.slice(p2).ok_or(Outcome::Skip(skip_infeasible))?;
    let across = project(&s2, p2, &xt, opts).map_err(|_| Outcome::Skip(skip_eval))?;
    if across.status != Status::Converged {
        return Err(status_skip(across.status));
    }
    Ok((xt, across.distance, gap))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LscReport {
    pub holds_on_samples: bool,
    /// First sampled parameter with `dist(x0, F(p)) >= eps`.
    pub witness: Option<Vec<f64>>,
    pub witness_distance: Option<f64>,
    pub delta: f64,
    pub eps: f64,
    pub samples_used: usize,
    pub skipped_infeasible_p: usize,
    pub seed: u64,
}

/// Checks `dist(x0, F(p)) < eps` for sampled `p` within `delta` of `p0`:
/// the axis stencil at `delta/2` and `delta`, then `n` seeded points.
pub fn check_lsc<M: SetMap + ?Sized>(
    map: &M,
    p0: &[f64],
    x0: &[f64],
    delta: f64,
    eps: f64,
    n: usize,
    seed: u64,
    opts: &ProjectOpts,
) -> Result<LscReport, RegularityError> {
    check_base(map, p0, x0, opts.tol_feas)?;
    let mut points = sampling::axis_stencil(p0, &[0.5 * delta, delta]);
    for u in sampling::unit_ball(map.dp(), n, seed) {
        points.push(sampling::scale_into(p0, delta, &u));
    }
    let dists: Vec<Option<f64>> = points
        .par_iter()
        .map(|p| {
            let sys = map.slice(p)?;
            let proj = project(&sys, p, x0, opts).ok()?;
            (proj.status == Status::Converged).then_some(proj.distance)
        })
        .collect();
    let mut witness = None;
    let mut used = 0;
    for (p, d) in points.iter().zip(&dists) {
        if let Some(d) = d {
            used += 1;
            if *d >= eps && witness.is_none() {
                witness = Some((p.clone(), *d));
            }
        }
    }
    Ok(LscReport {
        holds_on_samples: witness.is_none(),
        witness_distance: witness.as_ref().map(|w| w.1),
        witness: witness.map(|w| w.0),
        delta,
        eps,
        samples_used: used,
        skipped_infeasible_p: points.len() - used,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionResult {
    pub d: Vec<f64>,
    pub in_gamma: bool,
    /// `(t, dist(x + t d, F(p)) / t)`.
    pub tangency_ratio_trend: Vec<(f64, f64)>,
    /// `None` when a projection failed.
    pub tangent: Option<bool>,
    pub agree: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConeReport {
    pub p: Vec<f64>,
    pub x: Vec<f64>,
    pub active: Vec<usize>,
    pub per_direction: Vec<DirectionResult>,
    pub disagreements: usize,
    pub inconclusive: usize,
    /// Set when the caller supplied a constant-rank verdict: a disagreement
    /// under a verified verdict contradicts the equality of the two cones.
    pub flagged_violation: Option<bool>,
}

pub fn default_t_schedule() -> Vec<f64> {
    vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5]
}

/// Classifies each direction by the linearized cone test and by the decay of
/// `dist(x + t d, F(p)) / t` along `t_schedule`, and compares the two.
pub fn cone_compare(
    sys: &ParametricSystem,
    p: &[f64],
    x: &[f64],
    directions: &[Vec<f64>],
    t_schedule: &[f64],
    rcrcq: Option<Verdict>,
    opts: &ProjectOpts,
) -> Result<ConeReport, RegularityError> {
    let (values, grads) = sys.values_grads(p, x)?;
    let residual = sys.residual_of(&values);
    if residual > opts.tol_feas {
        return Err(RegularityError::InfeasibleBase { residual });
    }
    for (k, d) in directions.iter().enumerate() {
        if d.len() != sys.dx || (norm(d) - 1.0).abs() > 1e-9 {
            return Err(RegularityError::NotUnit { index: k });
        }
    }
    let active = sys.active_of(&values, default_eta_of(&values)).indices;
    let per_direction: Vec<DirectionResult> = directions
        .par_iter()
        .map(|d| {
            let dv = DVector::from_column_slice(d);
            let dot = |i: usize| DVector::from_column_slice(&grads[i]).dot(&dv);
            let in_gamma = active.iter().all(|&i| dot(i - 1) <= 1e-9)
                && (sys.m()..sys.n()).all(|i| dot(i).abs() <= 1e-9);
            let mut trend = Vec::with_capacity(t_schedule.len());
            let mut failed = false;
            for &t in t_schedule {
                let y: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + t * b).collect();
                match project(sys, p, &y, opts) {
                    Ok(r) if r.status == Status::Converged => trend.push((t, r.distance / t)),
                    _ => {
                        failed = true;
                        break;
                    }
                }
            }
            let tangent = (!failed).then(|| {
                let last = trend.last().map_or(f64::INFINITY, |(_, r)| *r);
                let non_increasing = trend.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12);
                last <= TANGENCY_THRESHOLD && non_increasing
            });
            DirectionResult {
                d: d.clone(),
                in_gamma,
                tangency_ratio_trend: trend,
                agree: tangent.map(|t| t == in_gamma),
                tangent,
            }
        })
        .collect();
    let disagreements = per_direction.iter().filter(|r| r.agree == Some(false)).count();
    let inconclusive = per_direction.iter().filter(|r| r.tangent.is_none()).count();
    Ok(ConeReport {
        p: p.to_vec(),
        x: x.to_vec(),
        active,
        flagged_violation: rcrcq.map(|v| v == Verdict::VerifiedOnSamples && disagreements > 0),
        per_direction,
        disagreements,
        inconclusive,
    })
}

/// `count` unit vectors evenly spaced on the circle, starting at angle 0.
pub fn circle_directions(count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
            vec![theta.cos(), theta.sin()]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn opts(r0: f64, steps: usize, samples: usize, seed: u64) -> EstimatorOpts {
        EstimatorOpts {
            schedule: ShrinkSchedule {
                r0,
                factor: 0.5,
                steps,
                samples_per_step: samples,
            },
            seed,
            ..EstimatorOpts::default()
        }
    }

    fn trend(values: &[Option<f64>]) -> Vec<TrendPoint> {
        values
            .iter()
            .map(|&s| TrendPoint {
                radius: 1.0,
                sup_ratio: s,
                samples_used: 1,
            })
            .collect()
    }

    #[test]
    fn divergence_rule() {
        assert!(diverging_from_trend(&trend(&[Some(1.0), Some(2.0), Some(4.0), Some(8.0)]), 1.8, 3));
        assert!(!diverging_from_trend(&trend(&[Some(1.0), Some(2.0), Some(4.0)]), 1.8, 3));
        assert!(!diverging_from_trend(&trend(&[Some(1.0), Some(2.0), Some(3.0), Some(6.0)]), 1.8, 3));
        assert!(!diverging_from_trend(&trend(&[Some(1.0), Some(2.0), None, Some(8.0), Some(16.0)]), 1.8, 3));
    }

    #[test]
    fn schedule_radii() {
        let s = ShrinkSchedule {
            r0: 0.1,
            factor: 0.5,
            steps: 3,
            samples_per_step: 1,
        };
        assert_eq!(s.radii(), vec![0.1, 0.05, 0.025]);
        let bad = ShrinkSchedule { factor: 1.0, ..s };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn linear_halfspace_r_modulus_is_one() {
        let rep = estimate_r_modulus(&fixtures::sys_lin(), &[0.0], &[0.0], &opts(0.1, 4, 16, 1)).unwrap();
        let est = rep.estimate.unwrap();
        assert!((est - 1.0).abs() < 1e-9, "{est}");
        assert!(!rep.diverging);
        assert!(rep.records.iter().all(|r| (r.ratio - 1.0).abs() < 1e-9));
    }

    #[test]
    fn ball_r_modulus_below_half() {
        let rep = estimate_r_modulus(&fixtures::sys_ball(), &[], &[1.0, 0.0], &opts(0.1, 4, 32, 2)).unwrap();
        let est = rep.estimate.unwrap();
        assert!(est <= 0.5 && est > 0.45, "{est}");
        for r in &rep.records {
            let nx = norm(&r.x);
            assert!((r.ratio - 1.0 / (nx + 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn example_one_r_modulus_diverges() {
        let rep = estimate_r_modulus(&fixtures::sys_ex1(), &[0.0], &[0.0, -1.0], &opts(0.1, 5, 16, 42)).unwrap();
        assert!(rep.diverging, "{:?}", rep.trend);
    }

    #[test]
    fn witness_replays() {
        let ex1 = fixtures::sys_ex1();
        let o = opts(0.1, 3, 8, 5);
        let rep = estimate_r_modulus(&ex1, &[0.0], &[0.0, -1.0], &o).unwrap();
        let w = rep.witness.unwrap();
        let res = ex1.residual(&w.p, &w.x).unwrap();
        let d = project(&ex1, &w.p, &w.x, &o.project).unwrap().distance;
        assert!((d / res - w.ratio).abs() <= 1e-9 * w.ratio.max(1.0));
    }

    #[test]
    fn lower_lipschitz_examples() {
        let lin = estimate_lower_lipschitz(&fixtures::sys_lin(), &[0.0], &[0.0], &opts(0.1, 4, 8, 0)).unwrap();
        assert!((lin.estimate.unwrap() - 1.0).abs() < 1e-9);
        let deg = estimate_lower_lipschitz(&fixtures::sys_degen(), &[0.0], &[0.0, 0.0], &opts(0.1, 4, 8, 0)).unwrap();
        assert!((deg.estimate.unwrap() - 1.0).abs() < 1e-9);
        let ex1 = estimate_lower_lipschitz(&fixtures::sys_ex1(), &[0.0], &[0.0, -1.0], &opts(0.1, 5, 8, 0)).unwrap();
        assert!(ex1.diverging);
    }

    #[test]
    fn aubin_examples() {
        let deg = estimate_aubin_modulus(&fixtures::sys_degen(), &[0.0], &[0.0, 0.0], 0.5, &opts(0.1, 3, 16, 0)).unwrap();
        assert!((deg.estimate.unwrap() - 1.0).abs() < 1e-9);
        let lin = estimate_aubin_modulus(&fixtures::sys_lin(), &[0.0], &[0.0], 0.5, &opts(0.1, 3, 16, 0)).unwrap();
        assert!((lin.estimate.unwrap() - 1.0).abs() < 1e-9);
        let ex1 = estimate_aubin_modulus(&fixtures::sys_ex1(), &[0.0], &[0.0, -1.0], 0.5, &opts(0.1, 5, 8, 0)).unwrap();
        assert!(ex1.diverging);
    }

    #[test]
    fn lsc_examples() {
        let po = ProjectOpts::default();
        let ball = check_lsc(&fixtures::sys_ball(), &[], &[1.0, 0.0], 0.2, 0.5, 8, 0, &po).unwrap();
        assert!(ball.holds_on_samples);
        let ex1 = check_lsc(&fixtures::sys_ex1(), &[0.0], &[0.0, -1.0], 0.2, 0.5, 16, 0, &po).unwrap();
        assert!(!ex1.holds_on_samples);
        assert!((ex1.witness.unwrap()[0] - 0.1).abs() < 1e-12);
        let deg = check_lsc(&fixtures::sys_degen(), &[0.0], &[0.0, 0.0], 0.1, 0.5, 16, 0, &po).unwrap();
        assert!(deg.holds_on_samples);
    }

    #[test]
    fn multiplier_bounds() {
        let o = opts(0.1, 5, 8, 0);
        let ex1 = check_multiplier_bound(&fixtures::sys_ex1(), &[0.0], &[0.0, -1.0], &o).unwrap();
        assert!(!ex1.bounded, "{:?}", ex1.report.trend);
        let ball = check_multiplier_bound(&fixtures::sys_ball(), &[], &[1.0, 0.0], &o).unwrap();
        assert!(ball.bounded);
        assert!(ball.report.records.iter().all(|r| (r.ratio - 0.5).abs() < 1e-8));
        let deg = check_multiplier_bound(&fixtures::sys_degen(), &[0.0], &[0.0, 0.0], &o).unwrap();
        assert!(deg.bounded);
        assert!(deg.report.estimate.unwrap() <= 1.0 + 1e-9);
    }

    #[test]
    fn cone_examples() {
        let ball = fixtures::sys_ball();
        let dirs = vec![vec![-1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let rep = cone_compare(&ball, &[], &[1.0, 0.0], &dirs, &default_t_schedule(), None, &ProjectOpts::default()).unwrap();
        let [inward, along, outward] = &rep.per_direction[..] else { panic!() };
        assert!(inward.in_gamma && inward.tangent == Some(true));
        assert!(along.in_gamma && along.tangent == Some(true));
        // r(t) = (sqrt(1 + t^2) - 1) / t
        for (t, r) in &along.tangency_ratio_trend {
            let exact = ((1.0 + t * t).sqrt() - 1.0) / t;
            assert!((r - exact).abs() < 1e-9, "{t} {r} {exact}");
        }
        assert!(!outward.in_gamma && outward.tangent == Some(false));
        assert!((outward.tangency_ratio_trend.last().unwrap().1 - 1.0).abs() < 1e-6);
        assert_eq!(rep.disagreements, 0);

        assert!(matches!(
            cone_compare(&ball, &[], &[1.0, 0.0], &[vec![1.0, 1.0]], &[0.1], None, &ProjectOpts::default()),
            Err(RegularityError::NotUnit { index: 0 })
        ));
    }
}
