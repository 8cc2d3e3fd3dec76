//! Acceptance suite: one PASS/FAIL line per criterion, run as a single test
//! so that the lines come out in order.

use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regmod_core::bilevel::{self, LowerOpts, PenaltyParams};
use regmod_core::cq::{self, RcrcqParams, Verdict};
use regmod_core::numerics::grid_distance;
use regmod_core::projection::multipliers;
use regmod_core::regularity::{self, EstimatorOpts, ShrinkSchedule};
use regmod_core::{fixtures, parse, project, Expr, ParametricSystem, ProjectOpts, Status, Wrt};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target.abs()
}

fn opts(r0: f64, factor: f64, steps: usize, samples: usize, seed: u64) -> EstimatorOpts {
    EstimatorOpts {
        schedule: ShrinkSchedule {
            r0,
            factor,
            steps,
            samples_per_step: samples,
        },
        seed,
        ..EstimatorOpts::default()
    }
}

fn runtime(limit: Duration, started: Instant) -> Result<String, String> {
    let took = started.elapsed();
    check(took <= limit, || format!("took {took:?}, limit {limit:?}"))?;
    Ok(format!("{:.1}s", took.as_secs_f64()))
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let sys = fixtures::sys_ex1();
    let (p0, x0) = ([0.0], [0.0, -1.0]);
    let o = opts(0.1, 0.5, 6, 32, 42);
    let radii = o.schedule.radii();

    let lsc = regularity::check_lsc(&sys, &p0, &x0, 0.1, 0.5, 32, 42, &o.project).map_err(|e| e.to_string())?;
    check(!lsc.holds_on_samples && lsc.witness.is_some(), || "lsc not falsified".into())?;

    let lolip = regularity::estimate_lower_lipschitz(&sys, &p0, &x0, &o).map_err(|e| e.to_string())?;
    for (k, &r) in radii.iter().enumerate() {
        for sign in [1.0, -1.0] {
            let rec = lolip
                .records
                .iter()
                .find(|rec| rec.step == k && rec.stencil && rec.p2.as_ref().unwrap()[0] == sign * r)
                .ok_or_else(|| format!("no lower-Lipschitz stencil record at p = {}", sign * r))?;
            check(within(rec.ratio, 1.0 / r, 0.1), || {
                format!("lower-Lipschitz ratio {} at r = {r}, expected {}", rec.ratio, 1.0 / r)
            })?;
        }
    }

    let rmod = regularity::estimate_r_modulus(&sys, &p0, &x0, &o).map_err(|e| e.to_string())?;
    check(rmod.diverging, || format!("R-modulus trend not diverging: {:?}", rmod.trend))?;

    let mult = regularity::check_multiplier_bound(&sys, &p0, &x0, &o).map_err(|e| e.to_string())?;
    check(!mult.bounded, || "multiplier norms reported bounded".into())?;
    for (k, &r) in radii.iter().enumerate() {
        let rec = mult
            .report
            .records
            .iter()
            .find(|rec| rec.step == k && rec.stencil && rec.p == [r] && rec.x == [r, -1.0])
            .ok_or_else(|| format!("no multiplier stencil record at r = {r}"))?;
        check(within(rec.ratio, 2.0 / r, 0.1), || {
            format!("multiplier norm {} at r = {r}, expected {}", rec.ratio, 2.0 / r)
        })?;
    }
    let took = runtime(Duration::from_secs(30), started)?;
    Ok(format!("lsc witness {:?}, final R-ratio {:?}, {took}", lsc.witness.unwrap(), rmod.trend.last().unwrap().sup_ratio))
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let cases: [(&str, ParametricSystem, Vec<f64>, Vec<f64>, f64, Option<f64>); 3] = [
        ("SYS-LIN", fixtures::sys_lin(), vec![0.0], vec![0.0], 1.0, Some(1.0)),
        ("SYS-DEGEN", fixtures::sys_degen(), vec![0.0], vec![0.0, 0.0], 1.0, Some(1.0)),
        // no parameter: the Aubin and lower-Lipschitz moduli are 0 and there is nothing to sample
        ("SYS-BALL", fixtures::sys_ball(), vec![], vec![1.0, 0.0], 0.5, None),
    ];
    let mut summary = Vec::new();
    for (name, sys, p0, x0, r_target, param_target) in cases {
        let rc = cq::check_rcrcq(&sys, &p0, &x0, &RcrcqParams::default()).map_err(|e| e.to_string())?;
        check(rc.verdict == Verdict::VerifiedOnSamples, || format!("{name}: RCRCQ not verified"))?;
        let lsc = regularity::check_lsc(&sys, &p0, &x0, 0.1, 0.5, 32, 0, &ProjectOpts::default()).map_err(|e| e.to_string())?;
        check(lsc.holds_on_samples, || format!("{name}: lsc failed"))?;

        let o = opts(0.1, 0.5, 6, 32, 0);
        let rmod = regularity::estimate_r_modulus(&sys, &p0, &x0, &o).map_err(|e| e.to_string())?;
        let est = rmod.estimate.ok_or(format!("{name}: no R-modulus samples"))?;
        check(!rmod.diverging && within(est, r_target, 0.05), || {
            format!("{name}: R-modulus {est} (diverging {}), expected {r_target}", rmod.diverging)
        })?;
        let aubin = regularity::estimate_aubin_modulus(&sys, &p0, &x0, 0.5, &o).map_err(|e| e.to_string())?;
        let lolip = regularity::estimate_lower_lipschitz(&sys, &p0, &x0, &o).map_err(|e| e.to_string())?;
        check(!aubin.diverging && !lolip.diverging, || format!("{name}: Aubin or lower-Lipschitz trend diverging"))?;
        match param_target {
            Some(t) => {
                let a = aubin.estimate.ok_or(format!("{name}: no Aubin samples"))?;
                let l = lolip.estimate.ok_or(format!("{name}: no lower-Lipschitz samples"))?;
                check(within(a, t, 0.05) && within(l, t, 0.05), || format!("{name}: Aubin {a}, lower-Lipschitz {l}, expected {t}"))?;
                summary.push(format!("{name} M={est:.4} lF={a:.4} l={l:.4}"));
            }
            None => {
                check(aubin.estimate.is_none() && lolip.estimate.is_none(), || {
                    format!("{name}: parameter-free system produced parameter samples")
                })?;
                summary.push(format!("{name} M={est:.4}"));
            }
        }
    }
    let took = runtime(Duration::from_secs(60), started)?;
    Ok(format!("{}, {took}", summary.join("; ")))
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let rankdrop = fixtures::sys_rankdrop();
    for radius in [1e-1, 1e-2, 1e-3] {
        let params = RcrcqParams {
            radius,
            ..RcrcqParams::default()
        };
        let rep = cq::check_rcrcq(&rankdrop, &[0.0], &[0.0, 0.0], &params).map_err(|e| e.to_string())?;
        check(rep.verdict == Verdict::Violated, || format!("rank drop not found at radius {radius}"))?;
        let w = rep
            .per_subset
            .iter()
            .find_map(|s| s.witness.as_ref())
            .ok_or("no witness")?;
        check(w.p[0].abs() <= radius, || format!("witness p {:?} outside radius {radius}", w.p))?;
    }
    for (name, sys, x0) in [
        ("SYS-LIN", fixtures::sys_lin(), vec![0.0]),
        ("SYS-DEGEN", fixtures::sys_degen(), vec![0.0, 0.0]),
    ] {
        for seed in 0..10 {
            let params = RcrcqParams {
                seed,
                ..RcrcqParams::default()
            };
            let rep = cq::check_rcrcq(&sys, &[0.0], &x0, &params).map_err(|e| e.to_string())?;
            check(rep.verdict == Verdict::VerifiedOnSamples, || format!("{name} violated with seed {seed}"))?;
        }
    }
    runtime(Duration::from_secs(10), started)
}

struct Draw {
    fixture: &'static str,
    sys: ParametricSystem,
    p: Vec<f64>,
    v: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

/// 100 seeded `(p, v)` draws per fixture, each with a grid box that contains
/// the nearest point of `F(p)`.
fn projection_draws() -> Vec<Draw> {
    let systems: Vec<(&'static str, ParametricSystem)> = vec![
        ("SYS-BALL", fixtures::sys_ball()),
        ("SYS-EX1", fixtures::sys_ex1()),
        ("SYS-LIN", fixtures::sys_lin()),
        ("SYS-RANKDROP", fixtures::sys_rankdrop()),
        ("SYS-DEGEN", fixtures::sys_degen()),
        ("BLPP-1", fixtures::blpp_1().sys),
        ("BLPP-BOX", fixtures::blpp_box().sys),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut draws = Vec::new();
    for (fixture, sys) in systems {
        for _ in 0..100 {
            let p: Vec<f64> = (0..sys.dp).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..sys.dx).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (lo, hi) = match fixture {
                "SYS-LIN" => (vec![-3.0], vec![3.0]),
                "SYS-RANKDROP" => (vec![-4.0, -4.0], vec![4.0, 4.0]),
                // the feasible set is the line x2 = p1: keep it on the grid
                "SYS-DEGEN" => (vec![-3.0, p[0] - 3.0], vec![3.0, p[0] + 3.0]),
                _ => (vec![-1.0; sys.dx], vec![1.0; sys.dx]),
            };
            draws.push(Draw {
                fixture,
                sys: sys.clone(),
                p,
                v,
                lo,
                hi,
            });
        }
    }
    draws
}

fn criterion_4_and_5() -> (Outcome, Outcome) {
    let started = Instant::now();
    let draws = projection_draws();
    let popts = ProjectOpts::default();
    let mut failures4 = Vec::new();
    let mut failures5 = Vec::new();
    let (mut converged, mut identity_checked) = (0, 0);
    for d in &draws {
        let res = match project(&d.sys, &d.p, &d.v, &popts) {
            Ok(r) => r,
            Err(e) => {
                failures4.push(format!("{} p={:?} v={:?}: {e}", d.fixture, d.p, d.v));
                continue;
            }
        };
        let bracket = match grid_distance(&d.sys, &d.p, &d.v, &d.lo, &d.hi, 201, popts.tol_feas) {
            Ok(b) => b,
            Err(e) => {
                failures4.push(format!("{} p={:?}: oracle {e}", d.fixture, d.p));
                continue;
            }
        };
        let slack = 1e-9;
        if res.distance < bracket.lower - slack || res.distance > bracket.upper + slack {
            failures4.push(format!(
                "{} p={:?} v={:?}: distance {} outside [{}, {}]",
                d.fixture, d.p, d.v, res.distance, bracket.lower, bracket.upper
            ));
        }
        if res.status == Status::Converged {
            converged += 1;
            if res.kkt_residual > 1e-7 {
                failures4.push(format!("{} p={:?}: KKT residual {}", d.fixture, d.p, res.kkt_residual));
            }
            if res.distance > 1e-6 {
                let params = RcrcqParams {
                    n_samples: 64,
                    ..RcrcqParams::default()
                };
                let verified = matches!(
                    cq::check_rcrcq(&d.sys, &d.p, &res.x_star, &params),
                    Ok(r) if r.verdict == Verdict::VerifiedOnSamples
                );
                if verified {
                    identity_checked += 1;
                    match multipliers(&d.sys, &d.p, &res.x_star, &d.v, 1e-6) {
                        Ok(m) if m.stationarity_residual <= 1e-6 => {}
                        Ok(m) => failures5.push(format!(
                            "{} p={:?} v={:?}: stationarity residual {}",
                            d.fixture, d.p, d.v, m.stationarity_residual
                        )),
                        Err(e) => failures5.push(format!("{} p={:?}: {e}", d.fixture, d.p)),
                    }
                }
            }
        }
    }
    let took = started.elapsed();
    let c4 = if !failures4.is_empty() {
        Err(format!("{} failures, first: {}", failures4.len(), failures4[0]))
    } else if took > Duration::from_secs(120) {
        Err(format!("took {took:?}, limit 120s"))
    } else {
        Ok(format!("{} draws, {converged} converged, {:.1}s", draws.len(), took.as_secs_f64()))
    };
    let c5 = if failures5.is_empty() {
        Ok(format!("{identity_checked} projections at RCRCQ-verified points"))
    } else {
        Err(format!("{} failures, first: {}", failures5.len(), failures5[0]))
    };
    (c4, c5)
}

fn criterion_6() -> Outcome {
    let ball = fixtures::sys_ball();
    let dirs = regularity::circle_directions(64);
    let rep = regularity::cone_compare(
        &ball,
        &[],
        &[1.0, 0.0],
        &dirs,
        &regularity::default_t_schedule(),
        None,
        &ProjectOpts::default(),
    )
    .map_err(|e| e.to_string())?;
    for (k, r) in rep.per_direction.iter().enumerate() {
        // angle 2πk/64 has a nonpositive first component for k in 16..=48
        let analytic = (16..=48).contains(&k);
        check(r.in_gamma == analytic, || format!("direction {k}: in_gamma {} vs analytic {analytic}", r.in_gamma))?;
        check(r.tangent == Some(r.in_gamma), || format!("direction {k}: tangent {:?} vs in_gamma {}", r.tangent, r.in_gamma))?;
        let (t, _) = *r.tangency_ratio_trend.last().unwrap();
        check(t == 1e-5, || format!("direction {k}: last t = {t}"))?;
    }
    Ok(format!("64 directions, {} in the linearized cone", rep.per_direction.iter().filter(|r| r.in_gamma).count()))
}

fn criterion_7() -> Outcome {
    let o = LowerOpts::default();
    let one = bilevel::phi_lipschitz_estimate(&fixtures::blpp_1(), &[0.4], 0.2, 32, 0, &o).map_err(|e| e.to_string())?;
    let boxed = bilevel::phi_lipschitz_estimate(&fixtures::blpp_box(), &[0.0], 0.2, 32, 0, &o).map_err(|e| e.to_string())?;
    let (a, b) = (one.report.estimate.unwrap_or(f64::NAN), boxed.report.estimate.unwrap_or(f64::NAN));
    check(within(a, 1.0, 0.05), || format!("BLPP-1 estimate {a}"))?;
    check(within(b, 1.0, 0.05), || format!("box estimate {b}"))?;
    Ok(format!("BLPP-1 {a:.6}, box {b:.6}"))
}

fn criterion_8() -> Outcome {
    let started = Instant::now();
    let params = PenaltyParams {
        mu_grid: vec![0.125, 0.25, 0.5 * (1.0 + 1e-3), 1.0, 2.0, 4.0],
        radius: 0.05,
        n: 2000,
        seed: 0,
        ..PenaltyParams::default()
    };
    let rep = bilevel::find_penalty_threshold(&fixtures::blpp_1(), &[0.25], &[0.25], &params, &LowerOpts::default())
        .map_err(|e| e.to_string())?;
    for row in &rep.per_mu {
        if row.mu <= 0.25 {
            check(!row.passes && row.witness.is_some(), || format!("mu = {} passed", row.mu))?;
        } else {
            check(row.passes, || format!("mu = {} failed with gap {}", row.mu, row.worst_gap))?;
        }
    }
    let flags: Vec<bool> = rep.per_mu.iter().map(|r| r.passes).collect();
    check(flags.windows(2).all(|w| !w[0] || w[1]), || format!("pass/fail not monotone: {flags:?}"))?;
    let took = runtime(Duration::from_secs(60), started)?;
    Ok(format!(
        "mu0_empirical {:?}, mu0_formula {:?}, {} samples in D, {took}",
        rep.mu0_empirical, rep.mu0_formula, rep.samples_used
    ))
}

/// Random expression text over `p1..p2`, `x1..x3`.
fn random_expr(rng: &mut ChaCha8Rng, depth: u32) -> String {
    if depth == 0 || rng.gen_bool(0.25) {
        return match rng.gen_range(0..3) {
            0 => format!("p{}", rng.gen_range(1..=2)),
            1 => format!("x{}", rng.gen_range(1..=3)),
            _ => format!("{:.3}", rng.gen_range(-2.0..2.0)),
        };
    }
    let a = random_expr(rng, depth - 1);
    match rng.gen_range(0..11) {
        0 => format!("({a}) + ({})", random_expr(rng, depth - 1)),
        1 => format!("({a}) - ({})", random_expr(rng, depth - 1)),
        2 | 3 => format!("({a}) * ({})", random_expr(rng, depth - 1)),
        4 => format!("({a}) / ({})", random_expr(rng, depth - 1)),
        5 => format!("({a})^{}", rng.gen_range(0..4)),
        6 => format!("-({a})"),
        7 => format!("sin({a})"),
        8 => format!("cos({a})"),
        9 => format!("exp(({a}) / 4)"),
        _ => match rng.gen_range(0..2) {
            0 => format!("log({a})"),
            _ => format!("abs({a})"),
        },
    }
}

/// Smallest distance of any abs, division or log argument from its kink or
/// pole, evaluated directly on the tree.
fn kink_distance(e: &Expr, p: &[f64], x: &[f64]) -> f64 {
    let v = |e: &Expr| e.eval(p, x).unwrap_or(0.0);
    match e {
        Expr::Const(_) | Expr::P(_) | Expr::X(_) => f64::INFINITY,
        Expr::Neg(a) | Expr::Pow(a, _) | Expr::Sin(a) | Expr::Cos(a) | Expr::Exp(a) => kink_distance(a, p, x),
        Expr::Abs(a) | Expr::Log(a) => v(a).abs().min(kink_distance(a, p, x)),
        Expr::Div(a, b) => v(b).abs().min(kink_distance(a, p, x)).min(kink_distance(b, p, x)),
        Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => kink_distance(a, p, x).min(kink_distance(b, p, x)),
    }
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut attempts = 0;
    while checked < 1000 {
        attempts += 1;
        check(attempts < 200_000, || format!("only {checked} usable pairs"))?;
        let text = random_expr(&mut rng, 4);
        let e = parse(&text, 2, 3).map_err(|err| format!("{text}: {err}"))?.expr;
        let p: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let Ok((f, g)) = e.value_grad(&p, &x, Wrt::Both) else {
            continue;
        };
        if kink_distance(&e, &p, &x) < 1e-3 || f.abs() > 1e4 || g.iter().any(|t| !t.is_finite() || t.abs() > 1e4) {
            continue;
        }
        let mut z: Vec<f64> = p.iter().chain(&x).copied().collect();
        let mut ok = true;
        for k in 0..z.len() {
            let h = 1e-6 * (1.0 + z[k].abs());
            let z0 = z[k];
            z[k] = z0 + h;
            let fp = e.eval(&z[..2], &z[2..]);
            z[k] = z0 - h;
            let fm = e.eval(&z[..2], &z[2..]);
            z[k] = z0;
            let (Ok(fp), Ok(fm)) = (fp, fm) else {
                ok = false;
                break;
            };
            let fd = (fp - fm) / (2.0 * h);
            let rel = (g[k] - fd).abs() / g[k].abs().max(1.0);
            worst = worst.max(rel);
            if rel > 1e-6 {
                return Err(format!("{text} at p={p:?} x={x:?}: d/dz{k} AD {} FD {fd}", g[k]));
            }
        }
        if ok {
            checked += 1;
        }
    }
    Ok(format!("{checked} pairs, worst relative error {worst:.2e}"))
}

fn criterion_10() -> Outcome {
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../..");
    let commands: &[&[&str]] = &[
        &["fixtures"],
        &["validate", "--problem", "fixtures/sys_ex1.prob"],
        &["rcrcq", "--problem", "fixtures/sys_rankdrop.prob", "--p0", "0", "--x0", "0,0", "--seed", "3"],
        &["project", "--problem", "fixtures/sys_ex1.prob", "--p", "0.1", "--v", "0.1,-1", "--seed", "3"],
        &["rreg", "--problem", "fixtures/sys_ex1.prob", "--p0", "0", "--x0", "0,-1", "--steps", "6", "--seed", "42"],
        &["aubin", "--problem", "fixtures/sys_degen.prob", "--p0", "0", "--x0", "0,0", "--steps", "4", "--seed", "5"],
        &["lolip", "--problem", "fixtures/sys_ex1.prob", "--p0", "0", "--x0", "0,-1", "--steps", "6", "--seed", "42"],
        &["lsc", "--problem", "fixtures/sys_ex1.prob", "--p0", "0", "--x0", "0,-1", "--seed", "42"],
        &["cones", "--problem", "fixtures/sys_ball.prob", "--x0", "1,0", "--with-rcrcq", "--seed", "1"],
        &["value", "--problem", "fixtures/blpp_1.prob", "--p", "0.4", "--seed", "2"],
        &["phi-lip", "--problem", "fixtures/blpp_box.prob", "--p0", "0", "--seed", "2"],
        &["penalty", "--problem", "fixtures/blpp_1.prob", "--pstar", "0.25", "--xstar", "0.25", "--seed", "2"],
    ];
    let run = |args: &[&str], threads: &str| -> Result<String, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_regmod"))
            .args(args)
            .args(["--threads", threads])
            .current_dir(root)
            .output()
            .map_err(|e| e.to_string())?;
        check(out.status.code() == Some(0), || format!("{args:?} exited with {:?}", out.status.code()))?;
        let text = String::from_utf8(out.stdout).map_err(|e| e.to_string())?;
        Ok(text.lines().filter(|l| !l.trim_start().starts_with("\"wall_time_ms\"")).collect::<Vec<_>>().join("\n"))
    };
    for args in commands {
        let first = run(args, "1")?;
        let again = run(args, "1")?;
        let parallel = run(args, "4")?;
        check(first == again, || format!("{args:?}: rerun differs"))?;
        check(first == parallel, || format!("{args:?}: --threads 4 differs from --threads 1"))?;
    }
    Ok(format!("{} commands, threads 1 and 4", commands.len()))
}

#[test]
fn acceptance() {
    let (c4, c5) = criterion_4_and_5();
    let results: Vec<(u32, &str, Outcome)> = vec![
        (1, "SYS-EX1 falsification", criterion_1()),
        (2, "positive implications", criterion_2()),
        (3, "constant rank checker", criterion_3()),
        (4, "projection vs grid oracle", c4),
        (5, "multiplier identity", c5),
        (6, "cone comparison", criterion_6()),
        (7, "value function Lipschitz", criterion_7()),
        (8, "penalty threshold", criterion_8()),
        (9, "gradient correctness", criterion_9()),
        (10, "determinism", criterion_10()),
    ];
    let mut failed = Vec::new();
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
            Err(why) => {
                println!("FAIL {n:>2} {name}: {why}");
                failed.push(*n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
