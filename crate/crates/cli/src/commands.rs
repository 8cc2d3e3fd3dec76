use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use regmod_core::bilevel::{self, BilevelProblem, LowerOpts, PenaltyParams};
use regmod_core::cq::{self, RcrcqParams};
use regmod_core::fixtures;
use regmod_core::regularity::{self, EstimatorOpts, RegularityReport, ShrinkSchedule};
use regmod_core::{project, ProblemFile, ProjectOpts};

use crate::report::problem_hash;
use crate::{BasePoint, Command, ProblemArg, ScheduleArgs};

pub enum Failure {
    Usage(String),
    Numerical(String),
}

#[derive(Default)]
pub struct Out {
    pub problem_hash: Option<String>,
    pub params: Value,
    pub result: Value,
    pub witnesses: Vec<Value>,
    pub warnings: Vec<String>,
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(msg.to_string())
}

fn numerical(msg: impl std::fmt::Display) -> Failure {
    Failure::Numerical(msg.to_string())
}

fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("results serialize")
}

fn parse_vec(name: &str, text: &str, len: usize) -> Result<Vec<f64>, Failure> {
    let text = text.trim();
    let v: Vec<f64> = if text.is_empty() {
        Vec::new()
    } else {
        text.split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| usage(format!("--{name}: {e}")))?
    };
    if v.len() != len {
        return Err(usage(format!("--{name}: expected {len} components, got {}", v.len())));
    }
    if v.iter().any(|t| !t.is_finite()) {
        return Err(usage(format!("--{name}: components must be finite")));
    }
    Ok(v)
}

fn parse_list(name: &str, text: &str) -> Result<Vec<f64>, Failure> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| usage(format!("--{name}: {e}")))
}

fn load_problem(arg: &ProblemArg, out: &mut Out) -> Result<ProblemFile, Failure> {
    let path = Path::new(&arg.problem);
    let text = if path.is_file() {
        std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?
    } else if let Some(f) = fixtures::find(&arg.problem) {
        f.text.to_string()
    } else {
        return Err(usage(format!("no problem file or fixture named {}", arg.problem)));
    };
    out.problem_hash = Some(problem_hash(&text));
    let pf = ProblemFile::parse(&text).map_err(usage)?;
    out.warnings.extend(pf.warnings.iter().cloned());
    Ok(pf)
}

fn load_bilevel(arg: &ProblemArg, out: &mut Out) -> Result<BilevelProblem, Failure> {
    let pf = load_problem(arg, out)?;
    BilevelProblem::from_problem_file(pf).ok_or_else(|| usage("problem has no [upper] and [lower] sections"))
}

fn base_point(pf: &ProblemFile, point: &BasePoint) -> Result<(Vec<f64>, Vec<f64>), Failure> {
    Ok((
        parse_vec("p0", &point.p0, pf.system.dp)?,
        parse_vec("x0", &point.x0, pf.system.dx)?,
    ))
}

fn estimator_opts(s: &ScheduleArgs, r0: f64) -> EstimatorOpts {
    EstimatorOpts {
        schedule: ShrinkSchedule {
            r0,
            factor: s.factor,
            steps: s.steps,
            samples_per_step: s.samples,
        },
        seed: s.seed,
        project: ProjectOpts {
            seed: s.seed,
            ..ProjectOpts::default()
        },
        ..EstimatorOpts::default()
    }
}

fn regularity_witness(label: &str, rep: &RegularityReport) -> Option<Value> {
    rep.witness.as_ref().map(|w| json!({ "kind": label, "record": w }))
}

fn no_samples(rep: &RegularityReport) -> Result<(), Failure> {
    if rep.samples_used == 0 {
        Err(numerical("no usable samples"))
    } else {
        Ok(())
    }
}

pub fn run(cmd: &Command, out: &mut Out) -> Result<(), Failure> {
    match cmd {
        Command::Fixtures => {
            out.params = json!({});
            out.result = json!({
                "fixtures": fixtures::FIXTURES
                    .iter()
                    .map(|f| json!({ "name": f.name, "path": f.path }))
                    .collect::<Vec<_>>()
            });
        }
        Command::Validate(problem) => {
            let pf = load_problem(problem, out)?;
            let sys = &pf.system;
            out.params = json!({ "problem": problem.problem });
            out.result = json!({
                "name": sys.name,
                "dp": sys.dp,
                "dx": sys.dx,
                "m": sys.m(),
                "n": sys.n(),
                "ineq": sys.ineq.iter().map(|e| e.to_string()).collect::<Vec<_>>(),
                "eq": sys.eq.iter().map(|e| e.to_string()).collect::<Vec<_>>(),
                "upper": pf.upper.as_ref().map(|e| e.to_string()),
                "lower": pf.lower.as_ref().map(|e| e.to_string()),
                "pcons": pf.pcons.iter().map(|e| e.to_string()).collect::<Vec<_>>(),
            });
        }
        Command::Project {
            problem,
            p,
            v,
            seed,
            n_starts,
            tol_feas,
            tol_kkt,
        } => {
            let pf = load_problem(problem, out)?;
            let p = parse_vec("p", p, pf.system.dp)?;
            let v = parse_vec("v", v, pf.system.dx)?;
            let opts = ProjectOpts {
                tol_feas: *tol_feas,
                tol_kkt: *tol_kkt,
                n_starts: *n_starts,
                seed: *seed,
                ..ProjectOpts::default()
            };
            out.params = json!({ "problem": problem.problem, "p": p, "v": v, "opts": opts });
            let res = project(&pf.system, &p, &v, &opts).map_err(numerical)?;
            out.result = to_value(&res);
        }
        Command::Rcrcq {
            problem,
            point,
            radius,
            samples,
            seed,
            rank_tol,
            eta,
        } => {
            let pf = load_problem(problem, out)?;
            let (p0, x0) = base_point(&pf, point)?;
            let params = RcrcqParams {
                radius: *radius,
                n_samples: *samples,
                rank_tol: *rank_tol,
                eta: *eta,
                seed: *seed,
                ..RcrcqParams::default()
            };
            out.params = json!({ "problem": problem.problem, "p0": p0, "x0": x0, "rcrcq": params });
            let rep = cq::check_rcrcq(&pf.system, &p0, &x0, &params).map_err(|e| match e {
                cq::CqError::SubsetCap { .. } => usage(e),
                _ => numerical(e),
            })?;
            for s in &rep.per_subset {
                if let Some(w) = &s.witness {
                    out.witnesses.push(json!({ "kind": "rank_change", "k": s.k, "base_rank": s.base_rank, "point": w }));
                }
            }
            out.result = to_value(&rep);
        }
        Command::Rreg {
            problem,
            point,
            schedule,
        } => {
            let pf = load_problem(problem, out)?;
            let (p0, x0) = base_point(&pf, point)?;
            let opts = estimator_opts(schedule, schedule.r0);
            out.params = json!({ "problem": problem.problem, "p0": p0, "x0": x0, "estimator": opts });
            let rmod = regularity::estimate_r_modulus(&pf.system, &p0, &x0, &opts).map_err(numerical)?;
            let mult = regularity::check_multiplier_bound(&pf.system, &p0, &x0, &opts).map_err(numerical)?;
            no_samples(&rmod)?;
            out.witnesses.extend(regularity_witness("r_modulus", &rmod));
            out.witnesses.extend(regularity_witness("multiplier_norm", &mult.report));
            out.result = json!({ "r_modulus": rmod, "multiplier_bound": mult });
        }
        Command::Aubin {
            problem,
            point,
            schedule,
            delta,
            eps,
        } => {
            let pf = load_problem(problem, out)?;
            let (p0, x0) = base_point(&pf, point)?;
            let opts = estimator_opts(schedule, delta.unwrap_or(schedule.r0));
            out.params = json!({ "problem": problem.problem, "p0": p0, "x0": x0, "eps": eps, "estimator": opts });
            let rep = regularity::estimate_aubin_modulus(&pf.system, &p0, &x0, *eps, &opts).map_err(numerical)?;
            no_samples(&rep)?;
            out.witnesses.extend(regularity_witness("aubin", &rep));
            out.result = to_value(&rep);
        }
        Command::Lolip {
            problem,
            point,
            schedule,
            delta,
        } => {
            let pf = load_problem(problem, out)?;
            let (p0, x0) = base_point(&pf, point)?;
            let opts = estimator_opts(schedule, delta.unwrap_or(schedule.r0));
            out.params = json!({ "problem": problem.problem, "p0": p0, "x0": x0, "estimator": opts });
            let rep = regularity::estimate_lower_lipschitz(&pf.system, &p0, &x0, &opts).map_err(numerical)?;
            no_samples(&rep)?;
            out.witnesses.extend(regularity_witness("lower_lipschitz", &rep));
            out.result = to_value(&rep);
        }
        Command::Lsc {
            problem,
            point,
            delta,
            eps,
            samples,
            seed,
        } => {
            let pf = load_problem(problem, out)?;
            let (p0, x0) = base_point(&pf, point)?;
            let popts = ProjectOpts {
                seed: *seed,
                ..ProjectOpts::default()
            };
            out.params = json!({
                "problem": problem.problem, "p0": p0, "x0": x0, "delta": delta, "eps": eps,
                "samples": samples, "seed": seed, "project": popts,
            });
            let rep = regularity::check_lsc(&pf.system, &p0, &x0, *delta, *eps, *samples, *seed, &popts).map_err(numerical)?;
            if rep.samples_used == 0 {
                return Err(numerical("no usable samples"));
            }
            if let Some(w) = &rep.witness {
                out.witnesses.push(json!({ "kind": "lsc_violation", "p": w, "distance": rep.witness_distance }));
            }
            out.result = to_value(&rep);
        }
        Command::Cones {
            problem,
            point,
            directions,
            dirs,
            t,
            with_rcrcq,
            seed,
        } => {
            let pf = load_problem(problem, out)?;
            let (p0, x0) = base_point(&pf, point)?;
            let dx = pf.system.dx;
            let dirs: Vec<Vec<f64>> = if !dirs.is_empty() {
                dirs.iter().map(|d| parse_vec("dir", d, dx)).collect::<Result<_, _>>()?
            } else if dx == 2 {
                regularity::circle_directions(*directions)
            } else {
                (0..dx)
                    .flat_map(|k| {
                        [1.0, -1.0].map(|s| {
                            let mut d = vec![0.0; dx];
                            d[k] = s;
                            d
                        })
                    })
                    .collect()
            };
            let ts = match t {
                Some(t) => parse_list("t", t)?,
                None => regularity::default_t_schedule(),
            };
            let popts = ProjectOpts {
                seed: *seed,
                ..ProjectOpts::default()
            };
            out.params = json!({
                "problem": problem.problem, "p0": p0, "x0": x0, "directions": dirs, "t": ts,
                "with_rcrcq": with_rcrcq, "project": popts,
            });
            let verdict = if *with_rcrcq {
                let params = RcrcqParams {
                    seed: *seed,
                    ..RcrcqParams::default()
                };
                Some(cq::check_rcrcq(&pf.system, &p0, &x0, &params).map_err(numerical)?.verdict)
            } else {
                None
            };
            let rep = regularity::cone_compare(&pf.system, &p0, &x0, &dirs, &ts, verdict, &popts).map_err(|e| match e {
                regularity::RegularityError::NotUnit { .. } => usage(e),
                _ => numerical(e),
            })?;
            for d in rep.per_direction.iter().filter(|d| d.agree == Some(false)) {
                out.witnesses.push(json!({ "kind": "cone_disagreement", "d": d.d, "in_gamma": d.in_gamma, "tangent": d.tangent }));
            }
            out.result = to_value(&rep);
        }
        Command::Value { problem, p, seed } => {
            let blp = load_bilevel(problem, out)?;
            let p = parse_vec("p", p, blp.sys.dp)?;
            let opts = lower_opts(*seed);
            out.params = json!({ "problem": problem.problem, "p": p, "lower": opts });
            let sol = blp.solve_lower(&p, &opts).map_err(numerical)?;
            out.warnings.push(bilevel::DOMAIN_ASSUMPTION.to_string());
            out.result = to_value(&sol);
        }
        Command::PhiLip {
            problem,
            p0,
            delta,
            samples,
            seed,
        } => {
            let blp = load_bilevel(problem, out)?;
            let p0 = parse_vec("p0", p0, blp.sys.dp)?;
            let opts = lower_opts(*seed);
            out.params = json!({
                "problem": problem.problem, "p0": p0, "delta": delta, "samples": samples, "seed": seed, "lower": opts,
            });
            let rep = bilevel::phi_lipschitz_estimate(&blp, &p0, *delta, *samples, *seed, &opts).map_err(numerical)?;
            if rep.report.estimate.is_none() {
                return Err(numerical("no usable samples"));
            }
            out.witnesses.extend(regularity_witness("lower_level_value", &rep.report));
            out.warnings.push(bilevel::DOMAIN_ASSUMPTION.to_string());
            out.result = to_value(&rep);
        }
        Command::Penalty {
            problem,
            pstar,
            xstar,
            mu_grid,
            radius,
            samples,
            seed,
        } => {
            let blp = load_bilevel(problem, out)?;
            let p_star = parse_vec("pstar", pstar, blp.sys.dp)?;
            let x_star = parse_vec("xstar", xstar, blp.sys.dx)?;
            let mu_grid = match mu_grid {
                Some(g) => parse_list("mu-grid", g)?,
                None => bilevel::default_mu_grid(),
            };
            if mu_grid.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
                return Err(usage("--mu-grid: values must be finite and nonnegative"));
            }
            let params = PenaltyParams {
                mu_grid,
                radius: *radius,
                n: *samples,
                seed: *seed,
                ..PenaltyParams::default()
            };
            let opts = lower_opts(*seed);
            out.params = json!({
                "problem": problem.problem, "pstar": p_star, "xstar": x_star, "penalty": params, "lower": opts,
            });
            let rep = bilevel::find_penalty_threshold(&blp, &p_star, &x_star, &params, &opts).map_err(numerical)?;
            for row in &rep.per_mu {
                if let Some(w) = &row.witness {
                    out.witnesses.push(json!({ "kind": "penalty_violation", "mu": row.mu, "point": w }));
                }
            }
            out.warnings.push(bilevel::DOMAIN_ASSUMPTION.to_string());
            out.result = to_value(&rep);
        }
    }
    Ok(())
}

fn lower_opts(seed: u64) -> LowerOpts {
    LowerOpts {
        project: ProjectOpts {
            seed,
            ..ProjectOpts::default()
        },
        ..LowerOpts::default()
    }
}
