//! Parametric constraint systems `F(p) = {x : h_i(p,x) <= 0 (i in I), h_i(p,x) = 0 (i in I0)}`
//! and their problem-file format.
//!
//! Constraint indices are one-based across the whole system: inequalities
//! come first (`1..=m`), equalities follow (`m+1..=n`).

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::expr::{self, EvalError, Expr, ParseError, ParseWarning, Wrt};

pub const DEFAULT_TOL_FEAS: f64 = 1e-8;
pub const DEFAULT_ETA: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParametricSystem {
    pub name: String,
    pub dp: usize,
    pub dx: usize,
    pub ineq: Vec<Expr>,
    pub eq: Vec<Expr>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActiveSet {
    /// One-based inequality indices.
    pub indices: Vec<usize>,
    pub eta: f64,
}

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("expression {index} uses variables beyond dp={dp}, dx={dx}")]
    Dimension { index: usize, dp: usize, dx: usize },
    #[error("constraint index {0} out of range")]
    BadIndex(usize),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl ParametricSystem {
    pub fn new(
        name: impl Into<String>,
        dp: usize,
        dx: usize,
        ineq: Vec<Expr>,
        eq: Vec<Expr>,
    ) -> Result<Self, SystemError> {
        for (k, e) in ineq.iter().chain(&eq).enumerate() {
            let (ep, ex) = e.var_extent();
            if ep > dp || ex > dx {
                return Err(SystemError::Dimension { index: k + 1, dp, dx });
            }
        }
        Ok(ParametricSystem {
            name: name.into(),
            dp,
            dx,
            ineq,
            eq,
        })
    }

    /// Builds a system from constraint texts.
    pub fn from_strs(
        name: &str,
        dp: usize,
        dx: usize,
        ineq: &[&str],
        eq: &[&str],
    ) -> Result<Self, ParseError> {
        let parse = |t: &&str| expr::parse(t, dp, dx).map(|p| p.expr);
        Ok(ParametricSystem {
            name: name.to_string(),
            dp,
            dx,
            ineq: ineq.iter().map(parse).collect::<Result<_, _>>()?,
            eq: eq.iter().map(parse).collect::<Result<_, _>>()?,
        })
    }

    /// Number of inequalities `m`.
    pub fn m(&self) -> usize {
        self.ineq.len()
    }

    /// Total number of constraints `n`.
    pub fn n(&self) -> usize {
        self.ineq.len() + self.eq.len()
    }

    pub fn constraint(&self, index: usize) -> Option<&Expr> {
        if index == 0 {
            return None;
        }
        let k = index - 1;
        if k < self.ineq.len() {
            Some(&self.ineq[k])
        } else {
            self.eq.get(k - self.ineq.len())
        }
    }

    pub fn is_equality(&self, index: usize) -> bool {
        index > self.m() && index <= self.n()
    }

    pub fn equality_indices(&self) -> Vec<usize> {
        (self.m() + 1..=self.n()).collect()
    }

    fn check_dims(&self, p: &[f64], x: &[f64]) -> Result<(), EvalError> {
        if p.len() != self.dp {
            return Err(EvalError::Dimension {
                what: "p",
                expected: self.dp,
                got: p.len(),
            });
        }
        if x.len() != self.dx {
            return Err(EvalError::Dimension {
                what: "x",
                expected: self.dx,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Values of all constraints in index order.
    pub fn values(&self, p: &[f64], x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.check_dims(p, x)?;
        self.ineq.iter().chain(&self.eq).map(|e| e.eval(p, x)).collect()
    }

    /// `max{0, h_i (i in I), |h_i| (i in I0)}`.
    pub fn residual(&self, p: &[f64], x: &[f64]) -> Result<f64, EvalError> {
        let values = self.values(p, x)?;
        Ok(self.residual_of(&values))
    }

    pub(crate) fn residual_of(&self, values: &[f64]) -> f64 {
        let m = self.m();
        values.iter().enumerate().fold(0.0_f64, |acc, (k, &v)| {
            let violation = if k < m { v } else { v.abs() };
            acc.max(violation)
        })
    }

    pub fn is_feasible(&self, p: &[f64], x: &[f64], tol_feas: f64) -> Result<bool, EvalError> {
        Ok(self.residual(p, x)? <= tol_feas)
    }

    /// Inequalities with `|h_i(p,x)| <= eta`.
    pub fn active_set(&self, p: &[f64], x: &[f64], eta: f64) -> Result<ActiveSet, EvalError> {
        let values = self.values(p, x)?;
        Ok(self.active_of(&values, eta))
    }

    pub(crate) fn active_of(&self, values: &[f64], eta: f64) -> ActiveSet {
        let indices = values[..self.m()]
            .iter()
            .enumerate()
            .filter(|(_, v)| v.abs() <= eta)
            .map(|(k, _)| k + 1)
            .collect();
        ActiveSet { indices, eta }
    }

    /// Scale-aware activity band `DEFAULT_ETA * (1 + max_i |h_i(p,x)|)`.
    pub fn default_eta(&self, p: &[f64], x: &[f64]) -> Result<f64, EvalError> {
        let values = self.values(p, x)?;
        Ok(default_eta_of(&values))
    }

    /// Rows are `grad_x h_i(p,x)` for the requested one-based indices,
    /// in ascending index order.
    pub fn jacobian(&self, p: &[f64], x: &[f64], rows: &[usize]) -> Result<DMatrix<f64>, SystemError> {
        self.check_dims(p, x)?;
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        rows.dedup();
        let mut jac = DMatrix::zeros(rows.len(), self.dx);
        for (r, &i) in rows.iter().enumerate() {
            let e = self.constraint(i).ok_or(SystemError::BadIndex(i))?;
            let g = e.grad_x(p, x)?;
            for (c, v) in g.into_iter().enumerate() {
                jac[(r, c)] = v;
            }
        }
        Ok(jac)
    }

    /// Values and x-gradients of every constraint.
    pub(crate) fn values_grads(&self, p: &[f64], x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>), EvalError> {
        self.check_dims(p, x)?;
        let mut values = Vec::with_capacity(self.n());
        let mut grads = Vec::with_capacity(self.n());
        for e in self.ineq.iter().chain(&self.eq) {
            let (v, g) = e.value_grad(p, x, Wrt::X)?;
            values.push(v);
            grads.push(g);
        }
        Ok((values, grads))
    }

    /// Same map with `extra` appended as an inequality.
    pub fn with_inequality(&self, extra: Expr) -> Self {
        let mut sys = self.clone();
        sys.ineq.push(extra);
        sys
    }
}

pub(crate) fn default_eta_of(values: &[f64]) -> f64 {
    let scale = values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    DEFAULT_ETA * (1.0 + scale)
}

/// Contents of a problem file.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemFile {
    pub system: ParametricSystem,
    /// `[upper] G = ...`
    pub upper: Option<Expr>,
    /// `[lower] f = ...`
    pub lower: Option<Expr>,
    /// `[pcons] g<j> = ...`, expressions in `p` only.
    pub pcons: Vec<Expr>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ProblemFileError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("line {line}: {source}")]
    Expr {
        line: usize,
        #[source]
        source: ParseError,
    },
}

impl ProblemFile {
    /// Parses the sectioned problem format:
    ///
    /// ```text
    /// [problem] name=<str> dp=<int> dx=<int>
    /// [ineq]
    /// h1 = <expr>
    /// [eq]
    /// e1 = <expr>
    /// [upper]
    /// G = <expr>
    /// [lower]
    /// f = <expr>
    /// [pcons]
    /// g1 = <expr in p>
    /// ```
    ///
    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self, ProblemFileError> {
        #[derive(PartialEq, Clone, Copy)]
        enum Section {
            None,
            Ineq,
            Eq,
            Upper,
            Lower,
            Pcons,
        }
        let fail = |line: usize, message: String| ProblemFileError::Format { line, message };

        let mut header: Option<(String, usize, usize)> = None;
        let mut section = Section::None;
        let mut ineq = Vec::new();
        let mut eq = Vec::new();
        let mut upper = None;
        let mut lower = None;
        let mut pcons = Vec::new();
        let mut warnings = Vec::new();

        for (k, raw) in text.lines().enumerate() {
            let line_no = k + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let (name, tail) = rest
                    .split_once(']')
                    .ok_or_else(|| fail(line_no, "unterminated section header".into()))?;
                section = match name.trim() {
                    "problem" => {
                        if header.is_some() {
                            return Err(fail(line_no, "duplicate [problem] section".into()));
                        }
                        header = Some(parse_header(tail).map_err(|m| fail(line_no, m))?);
                        Section::None
                    }
                    "ineq" => Section::Ineq,
                    "eq" => Section::Eq,
                    "upper" => Section::Upper,
                    "lower" => Section::Lower,
                    "pcons" => Section::Pcons,
                    other => return Err(fail(line_no, format!("unknown section [{other}]"))),
                };
                if section != Section::None && !tail.trim().is_empty() {
                    return Err(fail(line_no, "unexpected text after section header".into()));
                }
                continue;
            }
            let (_, dp, dx) = header
                .as_ref()
                .ok_or_else(|| fail(line_no, "[problem] header must come first".into()))?;
            let (lhs, rhs) = line
                .split_once('=')
                .ok_or_else(|| fail(line_no, "expected `<label> = <expr>`".into()))?;
            let lhs = lhs.trim();
            let (prefix, list_len) = match section {
                Section::Ineq => ("h", Some(ineq.len())),
                Section::Eq => ("e", Some(eq.len())),
                Section::Pcons => ("g", Some(pcons.len())),
                Section::Upper => ("G", None),
                Section::Lower => ("f", None),
                Section::None => return Err(fail(line_no, "expression outside of a section".into())),
            };
            let expected = match list_len {
                Some(len) => format!("{prefix}{}", len + 1),
                None => prefix.to_string(),
            };
            if lhs != expected {
                return Err(fail(line_no, format!("expected label `{expected}`, found `{lhs}`")));
            }
            let (edp, edx) = if section == Section::Pcons { (*dp, 0) } else { (*dp, *dx) };
            let parsed = expr::parse(rhs, edp, edx).map_err(|source| ProblemFileError::Expr {
                line: line_no,
                source,
            })?;
            for w in &parsed.warnings {
                let ParseWarning::XDependentAbs { .. } = w;
                warnings.push(format!("line {line_no}: {w}"));
            }
            let e = parsed.expr;
            match section {
                Section::Ineq => ineq.push(e),
                Section::Eq => eq.push(e),
                Section::Pcons => pcons.push(e),
                Section::Upper => {
                    if upper.replace(e).is_some() {
                        return Err(fail(line_no, "duplicate G".into()));
                    }
                }
                Section::Lower => {
                    if lower.replace(e).is_some() {
                        return Err(fail(line_no, "duplicate f".into()));
                    }
                }
                Section::None => unreachable!(),
            }
        }
        let (name, dp, dx) = header.ok_or_else(|| fail(0, "missing [problem] header".into()))?;
        Ok(ProblemFile {
            system: ParametricSystem {
                name,
                dp,
                dx,
                ineq,
                eq,
            },
            upper,
            lower,
            pcons,
            warnings,
        })
    }
}

fn parse_header(tail: &str) -> Result<(String, usize, usize), String> {
    let mut name = None;
    let mut dp = None;
    let mut dx = None;
    for token in tail.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| format!("malformed header field `{token}`"))?;
        let dim = || value.parse::<usize>().map_err(|_| format!("bad integer for {key}: `{value}`"));
        match key {
            "name" => name = Some(value.to_string()),
            "dp" => dp = Some(dim()?),
            "dx" => dx = Some(dim()?),
            _ => return Err(format!("unknown header field `{key}`")),
        }
    }
    Ok((
        name.unwrap_or_default(),
        dp.ok_or("missing dp")?,
        dx.ok_or("missing dx")?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn residuals_on_fixtures() {
        let ex1 = fixtures::sys_ex1();
        assert_eq!(ex1.residual(&[0.1], &[1.0, -1.0]).unwrap(), 0.0);
        let r = ex1.residual(&[0.1], &[0.1, -1.0]).unwrap();
        assert!((r - 0.09).abs() < 1e-15);
        assert_eq!(fixtures::sys_ball().residual(&[], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn equality_residual_uses_absolute_value() {
        let sys = ParametricSystem::from_strs("eq", 0, 1, &[], &["x1 - 1"]).unwrap();
        assert_eq!(sys.residual(&[], &[0.5]).unwrap(), 0.5);
        assert_eq!(sys.residual(&[], &[1.5]).unwrap(), 0.5);
    }

    #[test]
    fn feasibility() {
        let ball = fixtures::sys_ball();
        assert!(ball.is_feasible(&[], &[1.0, 0.0], 1e-8).unwrap());
        assert!(!fixtures::sys_ex1().is_feasible(&[0.1], &[0.1, -1.0], 1e-8).unwrap());
        assert!(fixtures::sys_degen().is_feasible(&[0.3], &[5.0, 0.3], 1e-8).unwrap());
    }

    #[test]
    fn active_sets() {
        let ball = fixtures::sys_ball();
        assert_eq!(ball.active_set(&[], &[1.0, 0.0], 1e-6).unwrap().indices, vec![1]);
        assert!(ball.active_set(&[], &[0.0, 0.0], 1e-6).unwrap().indices.is_empty());
        let ex1 = fixtures::sys_ex1();
        assert_eq!(ex1.active_set(&[0.0], &[0.0, -1.0], 1e-6).unwrap().indices, vec![4, 5]);
    }

    #[test]
    fn jacobians() {
        let degen = fixtures::sys_degen();
        let j = degen.jacobian(&[0.7], &[3.0, -2.0], &[1, 2]).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -1.0]));
        let rd = fixtures::sys_rankdrop();
        let j = rd.jacobian(&[0.5], &[0.0, 0.0], &[2, 1]).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.5]));
        let j = fixtures::sys_ball().jacobian(&[], &[1.0, 0.0], &[1]).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(1, 2, &[2.0, 0.0]));
        assert!(matches!(
            rd.jacobian(&[0.5], &[0.0, 0.0], &[3]),
            Err(SystemError::BadIndex(3))
        ));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let ball = fixtures::sys_ball();
        assert!(ball.residual(&[], &[1.0]).is_err());
        assert!(ball.residual(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn new_rejects_undeclared_variables() {
        let e = expr::parse("x2", 0, 2).unwrap().expr;
        assert!(ParametricSystem::new("bad", 0, 1, vec![e], vec![]).is_err());
    }

    #[test]
    fn problem_file_roundtrip() {
        let text = "# comment\n[problem] name=demo dp=1 dx=2\n[ineq]\nh1 = x1^2 + x2^2 - 1\nh2 = -x1\n\
                    [eq]\ne1 = x2 - p1\n[upper]\nG = x1 + p1\n[lower]\nf = x2\n[pcons]\ng1 = p1 - 1\n";
        let pf = ProblemFile::parse(text).unwrap();
        assert_eq!(pf.system.name, "demo");
        assert_eq!((pf.system.dp, pf.system.dx, pf.system.m(), pf.system.n()), (1, 2, 2, 3));
        assert!(pf.upper.is_some() && pf.lower.is_some());
        assert_eq!(pf.pcons.len(), 1);
        assert!(pf.system.is_equality(3));
        assert_eq!(pf.system.equality_indices(), vec![3]);
    }

    #[test]
    fn problem_file_errors() {
        assert!(ProblemFile::parse("[ineq]\nh1 = x1\n").is_err());
        let bad_label = "[problem] name=a dp=0 dx=1\n[ineq]\nh2 = x1\n";
        assert!(matches!(
            ProblemFile::parse(bad_label),
            Err(ProblemFileError::Format { line: 3, .. })
        ));
        let bad_expr = "[problem] name=a dp=0 dx=1\n[ineq]\nh1 = x2\n";
        assert!(matches!(
            ProblemFile::parse(bad_expr),
            Err(ProblemFileError::Expr { line: 3, .. })
        ));
        let x_in_pcons = "[problem] name=a dp=1 dx=1\n[pcons]\ng1 = x1 + p1\n";
        assert!(ProblemFile::parse(x_in_pcons).is_err());
    }

    #[test]
    fn problem_file_records_abs_warning() {
        let text = "[problem] name=a dp=0 dx=1\n[ineq]\nh1 = abs(x1) - 1\n";
        let pf = ProblemFile::parse(text).unwrap();
        assert_eq!(pf.warnings.len(), 1);
    }
}
