//! Finite-time convergent neural dynamics for `min 1/2 z'Sz + G'z, Hz <= w`.
//!
//! The inequality is lifted with a slack `phi >= 0` (`Hz - w + phi = 0`,
//! penalized by `xi`), giving the residual `h = N v + D` over `v = [z; phi]`.
//! The network `N v' = -mu Omega(h)` drives every residual component through
//! the same odd scalar law, so `h' = -mu Omega(h)` holds componentwise.
//!
//! Slack components at zero are pinned while their constraint is engaged and
//! released when it disengages. Pins and releases happen at located events
//! where the affected residual component is zero, so the scalar law and the
//! monotone decrease of `h'h` survive the sign constraint. The equilibrium is
//! the minimizer of `1/2 z'Sz + G'z + xi/2 |max(Hz - w, 0)|^2`.

use std::fmt::Write as _;

use log::debug;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::qp::QpProblem;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FtcndParams {
    /// Penalty factor.
    pub xi: f64,
    pub mu: f64,
    pub lambda: f64,
    pub zeta: f64,
    pub kappa: f64,
    /// Base step of the explicit integrator (virtual seconds).
    pub ode_step: f64,
    /// Convergence threshold on the residual max-norm.
    pub epsilon_h: f64,
    /// Virtual-time budget.
    pub max_time: f64,
}

impl Default for FtcndParams {
    fn default() -> Self {
        FtcndParams {
            xi: 5.0,
            mu: 5.0,
            lambda: 1.0,
            zeta: 30.0,
            kappa: 0.8,
            ode_step: 1e-4,
            epsilon_h: 1e-8,
            max_time: 10.0,
        }
    }
}

impl FtcndParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("xi", self.xi),
            ("mu", self.mu),
            ("lambda", self.lambda),
            ("zeta", self.zeta),
            ("ode_step", self.ode_step),
            ("epsilon_h", self.epsilon_h),
            ("max_time", self.max_time),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::parameter(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::parameter(
                "kappa",
                format!("must lie strictly inside (0, 1), got {}", self.kappa),
            ));
        }
        Ok(())
    }
}

/// Lifted system `h = N v + D` and the default initial state.
#[derive(Clone, Debug)]
pub struct Lifted {
    pub n_matrix: DMatrix<f64>,
    pub d: DVector<f64>,
    pub v0: DVector<f64>,
}

pub fn lift(problem: &QpProblem, xi: f64) -> Result<Lifted> {
    if !(xi > 0.0) {
        return Err(Error::parameter("xi", "penalty factor must be positive"));
    }
    let (n, r) = (problem.dim(), problem.n_constraints());
    let h = &problem.h;
    let mut nm = DMatrix::zeros(n + r, n + r);
    nm.view_mut((0, 0), (n, n))
        .copy_from(&(&problem.s + h.tr_mul(h) * xi));
    nm.view_mut((0, n), (n, r)).copy_from(&(h.transpose() * xi));
    nm.view_mut((n, 0), (r, n)).copy_from(&(h * xi));
    nm.view_mut((n, n), (r, r)).fill_with_identity();
    nm.view_mut((n, n), (r, r)).scale_mut(xi);
    let mut d = DVector::zeros(n + r);
    d.rows_mut(0, n)
        .copy_from(&(&problem.g - h.tr_mul(&problem.w) * xi));
    d.rows_mut(n, r).copy_from(&(-&problem.w * xi));
    let mut v0 = DVector::zeros(n + r);
    v0.rows_mut(n, r).copy_from(&problem.w.map(|x| x.max(0.0)));
    Ok(Lifted { n_matrix: nm, d, v0 })
}

/// Signed power `sign(x)|x|^p`.
pub fn lip(x: f64, p: f64) -> f64 {
    if x > 0.0 {
        x.powf(p)
    } else if x < 0.0 {
        -(-x).powf(p)
    } else {
        0.0
    }
}

pub fn li_scalar(x: f64, lambda: f64, zeta: f64, kappa: f64) -> f64 {
    0.5 * lambda * (lip(x, kappa) + lip(x, 1.0 / kappa)) + 0.5 * zeta * x
}

pub fn li_activation(h: &DVector<f64>, lambda: f64, zeta: f64, kappa: f64) -> DVector<f64> {
    h.map(|x| li_scalar(x, lambda, zeta, kappa))
}

/// `2 |h_max(0)|^(1-kappa) / (mu (1-kappa))`.
pub fn finite_time_bound(h0: &DVector<f64>, mu: f64, kappa: f64) -> f64 {
    let hmax = h0.amax();
    2.0 * hmax.powf(1.0 - kappa) / (mu * (1.0 - kappa))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralState {
    /// `[z; phi]`.
    pub v: DVector<f64>,
    /// `N v + D`.
    pub h: DVector<f64>,
    pub virtual_time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryPoint {
    pub virtual_time: f64,
    pub h_inf: f64,
    pub f_value: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FtcndDiagnostics {
    /// One entry for the initial state and one per accepted step.
    pub history: Vec<HistoryPoint>,
    /// Virtual time at which `|h|_inf <= epsilon_h` was reached.
    pub converge_time: Option<f64>,
    /// Finite-time bound evaluated at the initial residual, divided by lambda.
    pub bound_t_f: f64,
    pub within_bound: bool,
    pub iterations: usize,
    /// Steps rejected and retried with half the step.
    pub rejected_steps: usize,
    /// Slack pin/release events (sign-constraint handling).
    pub slack_events: usize,
    /// Accepted steps where `h'h` grew by more than round-off.
    pub monotonicity_violations: usize,
    /// Largest per-step growth of `h'h` (zero when monotone).
    pub max_f_increase: f64,
    pub final_h_inf: f64,
}

impl FtcndDiagnostics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("virtual_time,h_inf,F_value\n");
        for p in &self.history {
            writeln!(out, "{:.16e},{:.16e},{:.16e}", p.virtual_time, p.h_inf, p.f_value).unwrap();
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct FtcndSolution {
    pub z: DVector<f64>,
    pub state: NeuralState,
    pub converged: bool,
    pub diagnostics: FtcndDiagnostics,
}

impl FtcndSolution {
    /// Errors when the virtual-time budget ran out before convergence.
    pub fn ensure_converged(&self) -> Result<&Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence(format!(
                "residual {:.3e} after {:.3} s of virtual time",
                self.diagnostics.final_h_inf, self.state.virtual_time
            )))
        }
    }
}

/// Integration state. Released slack rows keep `Hz - w + phi = 0` exactly
/// along the flow, so their slack is carried implicitly as `phi = -g` with
/// `g = Hz - w`; pinned rows have `phi = 0`.
struct Flow<'a> {
    p: &'a QpProblem,
    xi: f64,
    z: DVector<f64>,
    g: DVector<f64>,
    pinned: Vec<bool>,
    h_z: DVector<f64>,
}

impl<'a> Flow<'a> {
    fn new(p: &'a QpProblem, xi: f64, z: DVector<f64>) -> Self {
        let g = &p.h * &z - &p.w;
        let pinned = g.iter().map(|&x| x >= 0.0).collect();
        let mut flow = Flow {
            p,
            xi,
            z,
            g,
            pinned,
            h_z: DVector::zeros(0),
        };
        flow.h_z = flow.stationarity();
        flow
    }

    fn set_z(&mut self, z: DVector<f64>) {
        self.g = &self.p.h * &z - &self.p.w;
        self.z = z;
        self.h_z = self.stationarity();
    }

    fn stationarity(&self) -> DVector<f64> {
        let mut grad = self.p.gradient(&self.z);
        for (i, &on) in self.pinned.iter().enumerate() {
            if on && self.g[i] != 0.0 {
                grad += self.p.h.row(i).transpose() * (self.xi * self.g[i]);
            }
        }
        grad
    }

    fn phi(&self) -> DVector<f64> {
        DVector::from_fn(self.g.len(), |i, _| {
            if self.pinned[i] {
                0.0
            } else {
                (-self.g[i]).max(0.0)
            }
        })
    }

    /// Max-norm and squared norm of the residual, with pinned slack rows
    /// reduced to their KKT part `min(xi g, 0)`.
    fn effective_inf_and_f(&self) -> (f64, f64) {
        let mut inf = self.h_z.amax();
        let mut f = self.h_z.norm_squared();
        for i in 0..self.g.len() {
            let hi = if self.pinned[i] {
                (self.xi * self.g[i]).min(0.0)
            } else {
                (self.xi * self.g[i]).max(0.0)
            };
            inf = inf.max(hi.abs());
            f += hi * hi;
        }
        (inf, f)
    }

    fn full_state(&self, time: f64) -> NeuralState {
        let n = self.z.len();
        let r = self.g.len();
        let phi = self.phi();
        let mut v = DVector::zeros(n + r);
        v.rows_mut(0, n).copy_from(&self.z);
        v.rows_mut(n, r).copy_from(&phi);
        let mut h = DVector::zeros(n + r);
        h.rows_mut(0, n).copy_from(&self.h_z);
        h.rows_mut(n, r).copy_from(&((&self.g + phi) * self.xi));
        NeuralState {
            v,
            h,
            virtual_time: time,
        }
    }
}

fn factor_reduced(p: &QpProblem, xi: f64, pinned: &[bool]) -> Result<Cholesky<f64, Dyn>> {
    let mut k = p.s.clone();
    for (i, &on) in pinned.iter().enumerate() {
        if on {
            let row = p.h.row(i);
            k += row.transpose() * row * xi;
        }
    }
    if let Some(c) = Cholesky::new(k.clone()) {
        return Ok(c);
    }
    let n = k.nrows();
    Cholesky::new(k + DMatrix::identity(n, n) * 1e-10).ok_or_else(|| {
        Error::parameter("problem.S", "quadratic term must be positive definite")
    })
}

/// Integrates the network until `|h|_inf <= epsilon_h` or `max_time`.
///
/// `warm_start` is a previous `v = [z; phi]` (or just `z`); the slack is
/// re-projected onto the new problem before integration.
pub fn solve(problem: &QpProblem, params: &FtcndParams, warm_start: Option<&DVector<f64>>) -> Result<FtcndSolution> {
    params.validate()?;
    let n = problem.dim();
    let r = problem.n_constraints();
    if Cholesky::new(problem.s.clone()).is_none() {
        return Err(Error::parameter("problem.S", "quadratic term must be positive definite"));
    }
    let z0 = match warm_start {
        Some(v) if v.len() == n || v.len() == n + r => v.rows(0, n).into_owned(),
        Some(v) => return Err(Error::dimension("warm start", n + r, v.len())),
        None => DVector::zeros(n),
    };
    let xi = params.xi;
    let mu = params.mu;
    let mut flow = Flow::new(problem, xi, z0);
    let (mut h_inf, mut f_val) = flow.effective_inf_and_f();
    if !h_inf.is_finite() {
        return Err(Error::NumericalBlowup);
    }

    let mut diag = FtcndDiagnostics {
        bound_t_f: 2.0 * h_inf.powf(1.0 - params.kappa) / (mu * (1.0 - params.kappa)) / params.lambda,
        ..Default::default()
    };
    diag.history.push(HistoryPoint {
        virtual_time: 0.0,
        h_inf,
        f_value: f_val,
    });

    let mut time = 0.0;
    let mut step = params.ode_step;
    let min_step = params.ode_step * 1e-9;
    let mut good_steps = 0usize;
    let mut chol = factor_reduced(problem, xi, &flow.pinned)?;
    let mut converged = h_inf <= params.epsilon_h;
    if converged {
        diag.converge_time = Some(0.0);
    }
    let f_tol = |f: f64| f * 1e-12 + 1e-26;

    while !converged && time < params.max_time {
        // direction for the current pinned set; rows sitting on their
        // boundary switch at once when the direction leaves their side
        let mut toggled = vec![0u8; r];
        let (dz, hd) = loop {
            let rz = li_activation(&flow.h_z, params.lambda, params.zeta, params.kappa) * (-mu);
            let dz = chol.solve(&rz);
            let hd = &problem.h * &dz;
            let mut changed = false;
            for i in 0..r {
                if toggled[i] >= 2 {
                    continue;
                }
                let flip = if flow.pinned[i] {
                    flow.g[i] <= 0.0 && hd[i] < 0.0
                } else {
                    flow.g[i] >= 0.0 && hd[i] > 0.0
                };
                if flip {
                    toggled[i] += 1;
                    // a second flip at the same instant would cycle; stay pinned
                    flow.pinned[i] = toggled[i] == 2 || !flow.pinned[i];
                    diag.slack_events += 1;
                    changed = true;
                }
            }
            if !changed {
                break (dz, hd);
            }
            flow.h_z = flow.stationarity();
            chol = factor_reduced(problem, xi, &flow.pinned)?;
        };

        // event location: a row crossing its boundary
        let mut s = step.min(params.max_time - time).max(min_step);
        let mut event = None;
        for i in 0..r {
            let gi = flow.g[i];
            let crossing = if flow.pinned[i] {
                gi > 0.0 && hd[i] < 0.0
            } else {
                gi < 0.0 && hd[i] > 0.0
            };
            if crossing {
                let sh = -gi / hd[i];
                if sh < s {
                    s = sh;
                    event = Some(i);
                }
            }
        }

        let z_prev = flow.z.clone();
        loop {
            flow.set_z(&z_prev + &dz * s);
            if let Some(i) = event {
                flow.g[i] = 0.0;
                flow.h_z = flow.stationarity();
            }
            let (hi, fv) = flow.effective_inf_and_f();
            if !hi.is_finite() {
                return Err(Error::NumericalBlowup);
            }
            if fv > f_val + f_tol(f_val) && s > min_step {
                diag.rejected_steps += 1;
                s *= 0.5;
                step = step.min(s);
                event = None;
                good_steps = 0;
                continue;
            }
            if fv > f_val + f_tol(f_val) {
                diag.monotonicity_violations += 1;
                diag.max_f_increase = diag.max_f_increase.max(fv - f_val);
            }
            h_inf = hi;
            f_val = fv;
            break;
        }
        time += s;
        diag.iterations += 1;

        if let Some(i) = event {
            flow.pinned[i] = !flow.pinned[i];
            diag.slack_events += 1;
            chol = factor_reduced(problem, xi, &flow.pinned)?;
            (h_inf, f_val) = flow.effective_inf_and_f();
        } else {
            good_steps += 1;
            if step < params.ode_step && good_steps >= 8 {
                step = (step * 2.0).min(params.ode_step);
                good_steps = 0;
            }
        }
        diag.history.push(HistoryPoint {
            virtual_time: time,
            h_inf,
            f_value: f_val,
        });
        if h_inf <= params.epsilon_h {
            converged = true;
            diag.converge_time = Some(time);
        }
    }

    diag.final_h_inf = h_inf;
    diag.within_bound = diag
        .converge_time
        .is_some_and(|t| t <= diag.bound_t_f + 10.0 * params.ode_step);
    if !converged {
        debug!("ftcnd stopped at residual {h_inf:.3e} after {time:.3} s");
    }
    Ok(FtcndSolution {
        z: flow.z.clone(),
        state: flow.full_state(time),
        converged,
        diagnostics: diag,
    })
}


/// Solver instance that warm-starts each solve from its previous solution.
#[derive(Clone, Debug)]
pub struct FtcndSolver {
    pub params: FtcndParams,
    last: Option<DVector<f64>>,
}

impl FtcndSolver {
    pub fn new(params: FtcndParams) -> Result<Self> {
        params.validate()?;
        Ok(FtcndSolver { params, last: None })
    }

    pub fn solve(&mut self, problem: &QpProblem) -> Result<FtcndSolution> {
        let warm = self.last.as_ref().filter(|z| z.len() == problem.dim());
        let sol = solve(problem, &self.params, warm)?;
        self.last = Some(sol.z.clone());
        Ok(sol)
    }

    /// Shifts the stored solution one block forward (receding horizon) so the
    /// next solve starts from the tail of the previous plan.
    pub fn shift_warm_start(&mut self, block: usize) {
        if let Some(z) = &mut self.last {
            let n = z.len();
            if block > 0 && block <= n {
                let tail = z.rows(block, n - block).into_owned();
                z.rows_mut(0, n - block).copy_from(&tail);
                z.rows_mut(n - block, block).fill(0.0);
            }
        }
    }

    pub fn reset(&mut self) {
        self.last = None;
    }
}

/// Max-norm of the lifted residual `N v + D` at `state`.
pub fn lifted_residual(problem: &QpProblem, params: &FtcndParams, state: &NeuralState) -> Result<f64> {
    let lifted = lift(problem, params.xi)?;
    Ok((&lifted.n_matrix * &state.v + &lifted.d).amax())
}
