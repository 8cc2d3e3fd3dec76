//! Local solver for `min obj(x)` over `F(p)` at a fixed parameter.
//!
//! An augmented-Lagrangian outer loop (PHR form for inequalities, penalty
//! multiplied by ten each outer step) with damped-Newton inner minimization,
//! followed by a polish: the active set is identified, the equality-constrained
//! KKT system is iterated to full precision with least-squares Newton steps,
//! and the result is accepted only if it stays feasible.

use nalgebra::{DMatrix, DVector};

use crate::expr::{EvalError, Expr, Wrt};
use crate::numerics::nnls_minnorm;
use crate::system::ParametricSystem;

/// Smooth objective in `x` at a fixed parameter.
pub(crate) trait Objective: Sync {
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), EvalError>;

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>, EvalError> {
        fd_hessian(x, |y| Ok(self.value_grad(y)?.1))
    }
}

/// `½‖x − v‖²`.
pub(crate) struct HalfSquaredDistance<'a> {
    pub v: &'a [f64],
}

impl Objective for HalfSquaredDistance<'_> {
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), EvalError> {
        let g: Vec<f64> = x.iter().zip(self.v).map(|(a, b)| a - b).collect();
        Ok((0.5 * g.iter().map(|t| t * t).sum::<f64>(), g))
    }

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>, EvalError> {
        Ok(DMatrix::identity(x.len(), x.len()))
    }
}

/// `f(p, ·)` for an expression `f`.
pub(crate) struct ExprObjective<'a> {
    pub f: &'a Expr,
    pub p: &'a [f64],
}

impl Objective for ExprObjective<'_> {
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), EvalError> {
        self.f.value_grad(self.p, x, Wrt::X)
    }
}

/// Central differences of an exact gradient, symmetrized.
pub(crate) fn fd_hessian<F>(x: &[f64], grad: F) -> Result<DMatrix<f64>, EvalError>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, EvalError>,
{
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut y = x.to_vec();
    for k in 0..n {
        let s = 1e-5 * (1.0 + x[k].abs());
        y[k] = x[k] + s;
        let gp = grad(&y)?;
        y[k] = x[k] - s;
        let gm = grad(&y)?;
        y[k] = x[k];
        for i in 0..n {
            h[(i, k)] = (gp[i] - gm[i]) / (2.0 * s);
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SolverOpts {
    pub tol_feas: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LocalSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub feas_residual: f64,
}

const RHO0: f64 = 10.0;
const RHO_MAX: f64 = 1e8;
const DIVERGED: f64 = 1e12;

struct Alm<'a, O: Objective> {
    sys: &'a ParametricSystem,
    p: &'a [f64],
    obj: &'a O,
    lam: Vec<f64>,
    mu: Vec<f64>,
    rho: f64,
}

impl<O: Objective> Alm<'_, O> {
    fn merit(&self, x: &[f64]) -> Result<f64, EvalError> {
        let (f, _) = self.obj.value_grad(x)?;
        let h = self.sys.values(self.p, x)?;
        Ok(f + self.penalty(&h))
    }

    fn penalty(&self, h: &[f64]) -> f64 {
        let m = self.sys.m();
        let rho = self.rho;
        let mut s = 0.0;
        for i in 0..m {
            let t = (self.lam[i] + rho * h[i]).max(0.0);
            s += (t * t - self.lam[i] * self.lam[i]) / (2.0 * rho);
        }
        for (j, &hj) in h[m..].iter().enumerate() {
            s += self.mu[j] * hj + 0.5 * rho * hj * hj;
        }
        s
    }

    /// Constraint weights `max(0, λ + ρh)` and `μ + ρh`; `None` marks an
    /// inequality outside the penalty region.
    fn weights(&self, h: &[f64]) -> Vec<Option<f64>> {
        let m = self.sys.m();
        h.iter()
            .enumerate()
            .map(|(i, &hi)| {
                if i < m {
                    let t = self.lam[i] + self.rho * hi;
                    (t > 0.0).then_some(t)
                } else {
                    Some(self.mu[i - m] + self.rho * hi)
                }
            })
            .collect()
    }

    fn gradient(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>), EvalError> {
        let (_, mut g) = self.obj.value_grad(x)?;
        let (h, grads) = self.sys.values_grads(self.p, x)?;
        for (w, gi) in self.weights(&h).iter().zip(&grads) {
            if let Some(w) = w {
                for (a, b) in g.iter_mut().zip(gi) {
                    *a += w * b;
                }
            }
        }
        Ok((g, h, grads))
    }

    fn hessian(&self, x: &[f64], h: &[f64], grads: &[Vec<f64>]) -> Result<DMatrix<f64>, EvalError> {
        let n = x.len();
        let mut hess = self.obj.hessian(x)?;
        let weights = self.weights(h);
        for (w, gi) in weights.iter().zip(grads) {
            if w.is_some() {
                let gv = DVector::from_column_slice(gi);
                hess += &gv * gv.transpose() * self.rho;
            }
        }
        let curvature = weighted_constraint_hessian(self.sys, self.p, x, &weights)?;
        if let Some(c) = curvature {
            hess += c;
        }
        debug_assert_eq!(hess.nrows(), n);
        Ok(hess)
    }

    fn minimize(&self, x: &mut Vec<f64>, max_inner: usize) -> Result<(), EvalError> {
        for _ in 0..max_inner {
            let (g, h, grads) = self.gradient(x)?;
            let gnorm = g.iter().fold(0.0_f64, |a, t| a.max(t.abs()));
            if gnorm <= 1e-11 * (1.0 + self.rho.sqrt()) {
                return Ok(());
            }
            let hess = self.hessian(x, &h, &grads)?;
            let mut d = newton_direction(hess, &g);
            let xnorm = crate::sampling::norm(x);
            let dnorm = crate::sampling::norm(&d);
            let cap = 1e3 * (1.0 + xnorm);
            if dnorm > cap {
                d.iter_mut().for_each(|t| *t *= cap / dnorm);
            }
            let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            let phi0 = self.merit(x)?;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
                if let Ok(phi) = self.merit(&trial) {
                    if phi <= phi0 + 1e-4 * t * slope || (phi <= phi0 && t * dnorm <= 1e-14 * (1.0 + xnorm)) {
                        *x = trial;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted || t * dnorm <= 1e-16 * (1.0 + xnorm) {
                return Ok(());
            }
            if crate::sampling::norm(x) > DIVERGED {
                return Ok(());
            }
        }
        Ok(())
    }
}

/// `Σ w_i ∇²h_i(p,x)` by differencing the weighted gradient sum; `None` if
/// all weights vanish.
fn weighted_constraint_hessian(
    sys: &ParametricSystem,
    p: &[f64],
    x: &[f64],
    weights: &[Option<f64>],
) -> Result<Option<DMatrix<f64>>, EvalError> {
    let used: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .filter_map(|(i, w)| w.filter(|w| *w != 0.0).map(|w| (i, w)))
        .collect();
    if used.is_empty() {
        return Ok(None);
    }
    let exprs: Vec<&Expr> = sys.ineq.iter().chain(&sys.eq).collect();
    let h = fd_hessian(x, |y| {
        let mut g = vec![0.0; y.len()];
        for &(i, w) in &used {
            let gi = exprs[i].grad_x(p, y)?;
            for (a, b) in g.iter_mut().zip(&gi) {
                *a += w * b;
            }
        }
        Ok(g)
    })?;
    Ok(Some(h))
}

/// Solves `(H + τI) d = −g` with the smallest τ ≥ 0 (from a short ladder)
/// that makes the matrix positive definite.
fn newton_direction(hess: DMatrix<f64>, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let rhs = -DVector::from_column_slice(g);
    let scale = hess.amax().max(1.0);
    let mut tau = 0.0;
    for _ in 0..40 {
        let shifted = &hess + DMatrix::identity(n, n) * tau;
        if let Some(ch) = shifted.cholesky() {
            let d = ch.solve(&rhs);
            if d.iter().all(|t| t.is_finite()) {
                return d.iter().copied().collect();
            }
        }
        tau = if tau == 0.0 { 1e-10 * scale } else { tau * 10.0 };
    }
    rhs.iter().copied().collect()
}

/// One local solve from `start`.
pub(crate) fn solve_local<O: Objective>(
    sys: &ParametricSystem,
    p: &[f64],
    obj: &O,
    start: &[f64],
    opts: &SolverOpts,
) -> Result<LocalSolution, EvalError> {
    let mut alm = Alm {
        sys,
        p,
        obj,
        lam: vec![0.0; sys.m()],
        mu: vec![0.0; sys.eq.len()],
        rho: RHO0,
    };
    let mut x = start.to_vec();
    let mut best_res = f64::INFINITY;
    let mut stall = 0;
    for _ in 0..opts.max_outer {
        alm.minimize(&mut x, opts.max_inner)?;
        if crate::sampling::norm(&x) > DIVERGED {
            break;
        }
        let h = sys.values(p, &x)?;
        let res = sys.residual_of(&h);
        let m = sys.m();
        let comp = (0..m).fold(0.0_f64, |a, i| a.max(h[i].max(-alm.lam[i] / alm.rho).abs()));
        for i in 0..m {
            alm.lam[i] = (alm.lam[i] + alm.rho * h[i]).max(0.0);
        }
        for (j, hj) in h[m..].iter().enumerate() {
            alm.mu[j] += alm.rho * hj;
        }
        if res <= 1e-3 * opts.tol_feas && comp <= 1e-6 {
            break;
        }
        if res < 0.9 * best_res {
            best_res = res;
            stall = 0;
        } else if alm.rho >= RHO_MAX {
            stall += 1;
            if stall >= 3 {
                break;
            }
        }
        alm.rho = (alm.rho * 10.0).min(RHO_MAX);
    }

    let alm_res = sys.residual(p, &x)?;
    let alm_obj = obj.value_grad(&x)?.0;
    let mut best = LocalSolution {
        x: x.clone(),
        objective: alm_obj,
        feas_residual: alm_res,
    };
    if let Some(pol) = polish(sys, p, obj, &x, &alm.lam, opts)? {
        let improves = alm_res > opts.tol_feas
            || pol.objective <= alm_obj + 1e-6 * (1.0 + alm_obj.abs());
        if pol.feas_residual <= opts.tol_feas && improves {
            best = pol;
        }
    }
    Ok(best)
}

/// Active-set KKT refinement starting near a local solution.
fn polish<O: Objective>(
    sys: &ParametricSystem,
    p: &[f64],
    obj: &O,
    x0: &[f64],
    lam: &[f64],
    opts: &SolverOpts,
) -> Result<Option<LocalSolution>, EvalError> {
    let m = sys.m();
    let h0 = sys.values(p, x0)?;
    let band = 1e-6 * (1.0 + h0.iter().fold(0.0_f64, |a, v| a.max(v.abs())));
    let mut active: Vec<usize> = (0..m).filter(|&i| h0[i] >= -band || lam[i] > 0.0).collect();
    active.extend(m..sys.n());

    for _ in 0..(m + 3) {
        let Some((x, y)) = kkt_newton(sys, p, obj, x0, &active)? else {
            return Ok(None);
        };
        let (h, grads) = sys.values_grads(p, &x)?;
        let (_, gobj) = obj.value_grad(&x)?;
        let res = sys.residual_of(&h);

        // violated inactive inequality: add it
        if let Some(j) = (0..m)
            .filter(|i| !active.contains(i) && h[*i] > opts.tol_feas)
            .max_by(|a, b| h[*a].total_cmp(&h[*b]))
        {
            active.push(j);
            active.sort_unstable();
            continue;
        }

        // sign check on the inequality multipliers via min-norm NNLS
        let cols: Vec<usize> = active.clone();
        let a = DMatrix::from_fn(x.len(), cols.len(), |r, c| grads[cols[c]][r]);
        let free: Vec<usize> = (0..cols.len()).filter(|&c| cols[c] >= m).collect();
        let b: Vec<f64> = gobj.iter().map(|t| -t).collect();
        let nn = nnls_minnorm(&a, &b, &free);
        let scale = 1.0 + crate::sampling::norm(&gobj);
        if nn.residual <= 1e-9 * scale {
            return Ok(Some(LocalSolution {
                objective: obj.value_grad(&x)?.0,
                feas_residual: res,
                x,
            }));
        }
        let drop = (0..cols.len())
            .filter(|&c| cols[c] < m)
            .min_by(|&a, &b| y[a].total_cmp(&y[b]));
        match drop {
            Some(c) if y[c] < 0.0 => {
                active.remove(c);
            }
            _ => {
                return Ok(Some(LocalSolution {
                    objective: obj.value_grad(&x)?.0,
                    feas_residual: res,
                    x,
                }))
            }
        }
    }
    Ok(None)
}

/// Newton iteration on the KKT system of `min obj s.t. h_A(x) = 0`, solved by
/// minimum-norm least squares so redundant active rows are tolerated.
/// Returns the point and the least-squares multipliers for `active`.
fn kkt_newton<O: Objective>(
    sys: &ParametricSystem,
    p: &[f64],
    obj: &O,
    x0: &[f64],
    active: &[usize],
) -> Result<Option<(Vec<f64>, Vec<f64>)>, EvalError> {
    let n = x0.len();
    let k = active.len();
    let mut x = x0.to_vec();
    let mut y = vec![0.0; k];
    for iter in 0..40 {
        let (h, grads) = sys.values_grads(p, &x)?;
        let (_, gobj) = obj.value_grad(&x)?;
        let jac = DMatrix::from_fn(k, n, |r, c| grads[active[r]][c]);
        if iter == 0 && k > 0 {
            let rhs = -DVector::from_column_slice(&gobj);
            let svd = jac.transpose().svd(true, true);
            let tol = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
            if let Ok(sol) = svd.solve(&rhs, tol) {
                y = sol.iter().copied().collect();
            }
        }
        let weights: Vec<Option<f64>> = (0..sys.n())
            .map(|i| active.iter().position(|&a| a == i).map(|r| y[r]))
            .collect();
        let mut hess = obj.hessian(&x)?;
        if let Some(c) = weighted_constraint_hessian(sys, p, &x, &weights)? {
            hess += c;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&hess);
        kkt.view_mut((0, n), (n, k)).copy_from(&jac.transpose());
        kkt.view_mut((n, 0), (k, n)).copy_from(&jac);
        let mut rhs = DVector::zeros(n + k);
        for i in 0..n {
            rhs[i] = -gobj[i];
        }
        for r in 0..k {
            rhs[n + r] = -h[active[r]];
        }
        let svd = kkt.svd(true, true);
        let tol = 1e-13 * svd.singular_values.max().max(f64::MIN_POSITIVE);
        let Ok(sol) = svd.solve(&rhs, tol) else {
            return Ok(None);
        };
        if sol.iter().any(|t| !t.is_finite()) {
            return Ok(None);
        }
        let step: Vec<f64> = sol.rows(0, n).iter().copied().collect();
        y = sol.rows(n, k).iter().copied().collect();
        for (a, b) in x.iter_mut().zip(&step) {
            *a += b;
        }
        let snorm = crate::sampling::norm(&step);
        if snorm <= 1e-15 * (1.0 + crate::sampling::norm(&x)) {
            break;
        }
        if snorm > 1e6 * (1.0 + crate::sampling::norm(x0)) {
            return Ok(None);
        }
    }
    Ok(Some((x, y)))
}
