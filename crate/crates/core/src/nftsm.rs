//! Non-singular fast terminal sliding-mode torque law.
//!
//! Surface (elementwise):
//! `s = e1 + alpha sat(e1)|e1|^r1 + beta sat(e2)|e2|^r2`
//!
//! Control: `tau = -M (u_eq + u_sw)` with
//! `u_eq = |e2|^(2-r2) sat(e2) / (beta r2) * (1 + alpha r1 |e1|^(r1-1)) + F`
//! and `u_sw = c1 |s|^r3 sat(s) + c2 s`, where `sat` is the boundary-layer
//! saturation of width `delta` standing in for `sign`.

use log::warn;
use nalgebra::DVector;

use crate::dynamics::{base_disturbance_torque, error_dynamics_terms, DesiredState, Environment, ErrorState};
use crate::error::{Error, Result};
use crate::model::RobotModel;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NftsmParams {
    pub alpha: f64,
    pub beta: f64,
    pub r1: f64,
    pub r2: f64,
    /// Reaching exponent.
    pub r3: f64,
    pub c1: f64,
    pub c2: f64,
    /// Boundary-layer half width.
    pub delta: f64,
}

impl Default for NftsmParams {
    fn default() -> Self {
        NftsmParams {
            alpha: 1.0,
            beta: 1.0,
            r1: 1.8,
            r2: 1.6,
            r3: 1.0,
            c1: 20.0,
            c2: 0.6,
            delta: 0.005,
        }
    }
}

impl NftsmParams {
    /// Checks the admissible ranges. `r3 = 1` is accepted with a warning
    /// since the reaching law then loses its fractional power.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("c1", self.c1),
            ("c2", self.c2),
            ("delta", self.delta),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::parameter(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.r2 > 1.0 && self.r2 < 2.0) {
            return Err(Error::parameter("r2", format!("must lie in (1, 2), got {}", self.r2)));
        }
        if !(self.r1 > self.r2) || !self.r1.is_finite() {
            return Err(Error::parameter(
                "r1",
                format!("must exceed r2 = {}, got {}", self.r2, self.r1),
            ));
        }
        if !(self.r3 > 0.0 && self.r3 <= 1.0) {
            return Err(Error::parameter("r3", format!("must lie in (0, 1], got {}", self.r3)));
        }
        if self.r3 == 1.0 {
            warn!("nftsm: r3 = 1 makes the reaching law linear in |s|; finite-time reaching is not guaranteed");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlidingDiagnostics {
    pub s: DVector<f64>,
    /// `1/2 s's`
    pub v: f64,
    /// Backward-difference estimate of `V'`; absent without a previous sample.
    pub vdot_estimate: Option<f64>,
    pub inside_boundary_layer: Vec<bool>,
}

impl SlidingDiagnostics {
    fn from_surface(s: DVector<f64>, delta: f64, vdot_estimate: Option<f64>) -> Self {
        let inside_boundary_layer = s.iter().map(|x| x.abs() <= delta).collect();
        let v = 0.5 * s.norm_squared();
        SlidingDiagnostics {
            s,
            v,
            vdot_estimate,
            inside_boundary_layer,
        }
    }

    pub fn outside_boundary_layer(&self) -> bool {
        self.inside_boundary_layer.iter().all(|&b| !b)
    }
}

/// Three-branch saturation: `s/delta` inside `[-delta, delta]`, `sign(s)` outside.
pub fn saturation(s: f64, delta: f64) -> f64 {
    if s > delta {
        1.0
    } else if s < -delta {
        -1.0
    } else {
        s / delta
    }
}

pub fn sliding_surface(e: &ErrorState, params: &NftsmParams) -> DVector<f64> {
    let d = params.delta;
    DVector::from_fn(e.e1.len(), |i, _| {
        let (e1, e2) = (e.e1[i], e.e2[i]);
        e1 + params.alpha * saturation(e1, d) * e1.abs().powf(params.r1)
            + params.beta * saturation(e2, d) * e2.abs().powf(params.r2)
    })
}

/// Torque and surface diagnostics for one control instant.
#[derive(Clone, Debug)]
pub struct NftsmOutput {
    /// Commanded joint torque, including any base feed-forward.
    pub tau: DVector<f64>,
    /// Model base torque cancelled by the feed-forward (zero when disabled).
    pub tau_b_compensation: DVector<f64>,
    pub diagnostics: SlidingDiagnostics,
}

/// `tau = -M (u_eq + u_sw)`, minus the modelled base torque when
/// `compensate_base` is set so that it cancels in `M q'' = ... + tau_b`.
pub fn control_torque(
    model: &RobotModel,
    q_m: &DVector<f64>,
    qdot_m: &DVector<f64>,
    desired: &DesiredState,
    params: &NftsmParams,
    env: &Environment,
    compensate_base: bool,
) -> Result<NftsmOutput> {
    let ed = error_dynamics_terms(model, q_m, qdot_m, desired, env)?;
    let e = ErrorState::new(q_m, qdot_m, desired);
    let s = sliding_surface(&e, params);
    let d = params.delta;
    let n = s.len();
    let u = DVector::from_fn(n, |i, _| {
        let (e1, e2) = (e.e1[i], e.e2[i]);
        let u_eq = e2.abs().powf(2.0 - params.r2) * saturation(e2, d) / (params.beta * params.r2)
            * (1.0 + params.alpha * params.r1 * e1.abs().powf(params.r1 - 1.0))
            + ed.f_term[i];
        let u_sw = params.c1 * s[i].abs().powf(params.r3) * saturation(s[i], d) + params.c2 * s[i];
        u_eq + u_sw
    });
    let mut tau = -(&ed.terms.m * u);
    let tau_b_compensation = if compensate_base {
        base_disturbance_torque(model, q_m, &env.base_accel)
    } else {
        DVector::zeros(n)
    };
    tau -= &tau_b_compensation;
    if tau.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalBlowup);
    }
    Ok(NftsmOutput {
        tau,
        tau_b_compensation,
        diagnostics: SlidingDiagnostics::from_surface(s, d, None),
    })
}

/// `V = 1/2 s's` at `s_now` with `V'` from the backward difference to `s_prev`.
pub fn lyapunov_diagnostics(s_prev: &DVector<f64>, s_now: &DVector<f64>, dt: f64, delta: f64) -> SlidingDiagnostics {
    assert!(dt > 0.0, "dt must be positive");
    let vdot = (0.5 * s_now.norm_squared() - 0.5 * s_prev.norm_squared()) / dt;
    SlidingDiagnostics::from_surface(s_now.clone(), delta, Some(vdot))
}
