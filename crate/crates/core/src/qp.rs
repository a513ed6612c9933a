//! Dense inequality-constrained QP `min 1/2 z'Sz + G'z  s.t.  Hz <= w` and its
//! plain-text exchange format.
//!
//! ```text
//! # comment lines are ignored
//! dims <n> <rows>
//! horizon <t> <N> <Nu>      (optional)
//! S
//! <n rows of n values>
//! G
//! <n values>
//! H
//! <rows rows of n values>
//! w
//! <rows values>
//! ```
//!
//! Values are written with 17 significant digits so a file parses back to
//! bit-identical matrices.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HorizonMeta {
    /// Sampling period (s).
    pub t: f64,
    pub n: usize,
    pub nu: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub s: DMatrix<f64>,
    pub g: DVector<f64>,
    pub h: DMatrix<f64>,
    pub w: DVector<f64>,
    pub horizon: Option<HorizonMeta>,
}

impl QpProblem {
    pub fn new(s: DMatrix<f64>, g: DVector<f64>, h: DMatrix<f64>, w: DVector<f64>) -> Result<Self> {
        let n = g.len();
        if s.nrows() != n || s.ncols() != n {
            return Err(Error::dimension("QpProblem.S", n, s.nrows().max(s.ncols())));
        }
        if h.ncols() != n {
            return Err(Error::dimension("QpProblem.H columns", n, h.ncols()));
        }
        if h.nrows() != w.len() {
            return Err(Error::dimension("QpProblem.w", h.nrows(), w.len()));
        }
        Ok(QpProblem {
            s,
            g,
            h,
            w,
            horizon: None,
        })
    }

    pub fn with_horizon(mut self, meta: HorizonMeta) -> Self {
        self.horizon = Some(meta);
        self
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.w.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.s * z)) + self.g.dot(z)
    }

    pub fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.s * z + &self.g
    }

    /// `Hz - w`; positive entries are violations.
    pub fn constraint_residual(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.h * z - &self.w
    }

    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        self.constraint_residual(z).iter().fold(0.0_f64, |m, &r| m.max(r))
    }

    /// Objective with slack lifted out optimally:
    /// `1/2 z'Sz + G'z + xi/2 |max(Hz - w, 0)|^2`, the minimum over
    /// `phi >= 0` of the slack-penalized objective.
    pub fn penalized_objective(&self, z: &DVector<f64>, xi: f64) -> f64 {
        let viol: f64 = self
            .constraint_residual(z)
            .iter()
            .map(|&r| r.max(0.0).powi(2))
            .sum();
        self.objective(z) + 0.5 * xi * viol
    }

    /// Gradient of [`Self::penalized_objective`].
    pub fn penalized_gradient(&self, z: &DVector<f64>, xi: f64) -> DVector<f64> {
        let viol = self.constraint_residual(z).map(|r| r.max(0.0));
        self.gradient(z) + self.h.tr_mul(&viol) * xi
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let n = self.dim();
        let rows = self.n_constraints();
        out.push_str("# dense QP: min 1/2 z'Sz + G'z  s.t.  Hz <= w\n");
        writeln!(out, "dims {n} {rows}").unwrap();
        if let Some(meta) = &self.horizon {
            writeln!(out, "horizon {:.16e} {} {}", meta.t, meta.n, meta.nu).unwrap();
        }
        let write_row = |out: &mut String, values: &mut dyn Iterator<Item = f64>| {
            let line: Vec<String> = values.map(|v| format!("{v:.16e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        };
        out.push_str("S\n");
        for r in 0..n {
            write_row(&mut out, &mut self.s.row(r).iter().copied());
        }
        out.push_str("G\n");
        write_row(&mut out, &mut self.g.iter().copied());
        out.push_str("H\n");
        for r in 0..rows {
            write_row(&mut out, &mut self.h.row(r).iter().copied());
        }
        out.push_str("w\n");
        write_row(&mut out, &mut self.w.iter().copied());
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .flat_map(str::split_whitespace)
            .peekable();
        let fail = |message: String| Error::Parse {
            what: "QP text".into(),
            message,
        };
        let expect_keyword = |tokens: &mut std::iter::Peekable<_>, kw: &str| -> Result<()> {
            match Iterator::next(tokens) {
                Some(tok) if tok == kw => Ok(()),
                Some(tok) => Err(fail(format!("expected '{kw}', found '{tok}'"))),
                None => Err(fail(format!("expected '{kw}', found end of input"))),
            }
        };
        fn number<'a, T: std::str::FromStr>(
            tokens: &mut impl Iterator<Item = &'a str>,
            what: &str,
        ) -> Result<T> {
            let tok = tokens.next().ok_or_else(|| Error::Parse {
                what: "QP text".into(),
                message: format!("missing value for {what}"),
            })?;
            tok.parse().map_err(|_| Error::Parse {
                what: "QP text".into(),
                message: format!("invalid value '{tok}' for {what}"),
            })
        }
        if tokens.peek().is_none() {
            return Err(fail("empty input".into()));
        }
        expect_keyword(&mut tokens, "dims")?;
        let n: usize = number(&mut tokens, "dims n")?;
        let rows: usize = number(&mut tokens, "dims rows")?;
        if n == 0 {
            return Err(fail("problem dimension must be positive".into()));
        }
        let mut horizon = None;
        if tokens.peek() == Some(&"horizon") {
            tokens.next();
            let t: f64 = number(&mut tokens, "horizon t")?;
            let hn: usize = number(&mut tokens, "horizon N")?;
            let hnu: usize = number(&mut tokens, "horizon Nu")?;
            horizon = Some(HorizonMeta { t, n: hn, nu: hnu });
        }
        let read_values = |tokens: &mut std::iter::Peekable<_>, count: usize, what: &str| -> Result<Vec<f64>> {
            (0..count).map(|i| number(tokens, &format!("{what}[{i}]"))).collect()
        };
        expect_keyword(&mut tokens, "S")?;
        let s = read_values(&mut tokens, n * n, "S")?;
        expect_keyword(&mut tokens, "G")?;
        let g = read_values(&mut tokens, n, "G")?;
        expect_keyword(&mut tokens, "H")?;
        let h = read_values(&mut tokens, rows * n, "H")?;
        expect_keyword(&mut tokens, "w")?;
        let w = read_values(&mut tokens, rows, "w")?;
        if let Some(extra) = tokens.next() {
            return Err(fail(format!("unexpected trailing token '{extra}'")));
        }
        let mut problem = QpProblem::new(
            DMatrix::from_row_slice(n, n, &s),
            DVector::from_vec(g),
            DMatrix::from_row_slice(rows, n, &h),
            DVector::from_vec(w),
        )?;
        problem.horizon = horizon;
        Ok(problem)
    }
}
