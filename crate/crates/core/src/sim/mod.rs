//! Closed-loop simulation of the planner/solver/torque-controller cascade.
//!
//! Two rates: every `control_period` the tracking QP is assembled around the
//! kinematic desired state and solved (warm-started); every `torque_period`
//! the torque law drives the rigid-body plant, integrated with RK4 under a
//! zero-order-hold torque. Within a control period the desired joint
//! velocity ramps linearly by the commanded increment, so
//! `q''_md = dq'/t` and `q'_md` reaches `q'(j-1) + dq'(j)` at the period end.

pub mod metrics;
pub mod script;
pub mod trace;

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    base_disturbance_torque, dynamics_terms_in, forward_dynamics_in, DesiredState, Environment, ErrorState,
};
use crate::error::{Error, Result};
use crate::ftcnd::{FtcndParams, FtcndSolver};
use crate::kinematics::{forward_kinematics, rotation_zyx, ConfigurationState, Pose};
use crate::model::{RobotModel, BASE_DOF};
use crate::nftsm::{control_torque, lyapunov_diagnostics, sliding_surface, NftsmParams};
use crate::pomptc::{assemble_qp_with_preview, extract_first_increment, PomptcWeights};
use crate::qp::HorizonMeta;

pub use metrics::{error_metrics, ErrorMetrics};
pub use script::ScenarioScript;
pub use trace::{SimTrace, SolverStep, TraceRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Controller {
    /// Sliding-mode law with base-torque feed-forward.
    Nftsm,
    /// Sliding-mode law without the feed-forward.
    NftsmNoTaub,
    /// Gravity-compensated PD.
    Pd,
}

impl Controller {
    pub const ALL: [Controller; 3] = [Controller::Nftsm, Controller::NftsmNoTaub, Controller::Pd];

    pub fn name(self) -> &'static str {
        match self {
            Controller::Nftsm => "nftsm",
            Controller::NftsmNoTaub => "nftsm-no-taub",
            Controller::Pd => "pd",
        }
    }
}

impl fmt::Display for Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Controller {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Controller::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::parameter("controller", format!("unknown controller '{s}' (expected nftsm, pd or nftsm-no-taub)")))
    }
}

/// Diagonal PD gains, one entry per arm joint.
#[derive(Clone, Debug, PartialEq)]
pub struct PdGains {
    pub kp: DVector<f64>,
    pub kd: DVector<f64>,
}

/// Default PD bandwidth (rad/s).
pub const PD_BANDWIDTH: f64 = 20.0;

impl PdGains {
    pub fn uniform(n: usize, kp: f64, kd: f64) -> Self {
        PdGains {
            kp: DVector::from_element(n, kp),
            kd: DVector::from_element(n, kd),
        }
    }

    /// `kp = w^2 M_ii`, `kd = 2 w M_ii` with the inertia diagonal at `q_m`:
    /// each joint, seen alone, is critically damped at bandwidth `w`.
    pub fn critically_damped(model: &RobotModel, q_m: &DVector<f64>, bandwidth: f64) -> Self {
        let diag = crate::dynamics::mass_matrix(model, q_m).diagonal();
        PdGains {
            kp: &diag * (bandwidth * bandwidth),
            kd: &diag * (2.0 * bandwidth),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for (name, v) in [("pd.kp", &self.kp), ("pd.kd", &self.kd)] {
            if v.len() != n {
                return Err(Error::dimension(name, n, v.len()));
            }
            if let Some(bad) = v.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
                return Err(Error::parameter(name, format!("gains must be positive, got {bad}")));
            }
        }
        Ok(())
    }
}

/// Everything a run needs besides the model and the script.
#[derive(Clone, Debug, PartialEq)]
pub struct SimParams {
    pub weights: PomptcWeights,
    /// Prediction horizon N.
    pub horizon: usize,
    /// Control horizon Nu.
    pub control_horizon: usize,
    pub ftcnd: FtcndParams,
    pub nftsm: NftsmParams,
    pub pd: PdGains,
    pub controller: Controller,
    /// Consecutive unconverged solves tolerated before the run aborts.
    pub failure_budget: usize,
}

/// `tau = G - Kp e1 - Kd e2`.
pub fn pd_baseline_torque(
    model: &RobotModel,
    q_m: &DVector<f64>,
    qdot_m: &DVector<f64>,
    desired: &DesiredState,
    gains: &PdGains,
    env: &Environment,
) -> DVector<f64> {
    let e = ErrorState::new(q_m, qdot_m, desired);
    let g = dynamics_terms_in(model, q_m, qdot_m, env).g;
    g - e.e1.component_mul(&gains.kp) - e.e2.component_mul(&gains.kd)
}

fn stack(base: &DVector<f64>, arm: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(base.len() + arm.len(), base.iter().chain(arm.iter()).copied())
}

fn environment(model: &RobotModel, base_q: &DVector<f64>, base_qdd: &DVector<f64>) -> Environment {
    let r = rotation_zyx(base_q[3], base_q[4], base_q[5]);
    Environment::moving(model, &r, &Vector3::new(base_qdd[0], base_qdd[1], base_qdd[2]))
}

/// Kinematic desired arm motion over one control period.
struct Segment {
    start: f64,
    q: DVector<f64>,
    qd: DVector<f64>,
    delta: DVector<f64>,
}

impl Segment {
    fn desired(&self, t: f64, period: f64) -> DesiredState {
        let tau = t - self.start;
        DesiredState {
            q: &self.q + &self.qd * tau + &self.delta * (tau * tau / (2.0 * period)),
            qd: &self.qd + &self.delta * (tau / period),
            qdd: &self.delta / period,
        }
    }
}

/// Runs `script` on `model` under `params` and returns the full trace.
pub fn run_closed_loop(model: &RobotModel, params: &SimParams, script: &ScenarioScript) -> Result<SimTrace> {
    model.validate()?;
    let n = model.arm_joint_count();
    script.validate(n, "scenario")?;
    params.ftcnd.validate()?;
    params.nftsm.validate()?;
    params.pd.validate(n)?;
    let horizon = HorizonMeta {
        t: script.control_period,
        n: params.horizon,
        nu: params.control_horizon,
    };
    let k_act = model.actuated_count();
    if model.actuated_indices().iter().any(|&i| i < BASE_DOF) {
        return Err(Error::config(
            "robot.actuated_by_mpc",
            "the simulator scripts the base, so only arm joints may be planned",
        ));
    }

    let (cp, tp) = (script.control_period, script.torque_period);
    let substeps = script.substeps();
    let steps = script.torque_steps();
    let motion = &script.base_motion;

    let arm0 = DVector::from_column_slice(&script.initial_arm);
    let base0 = motion.state(0.0);
    let reference = script.reference.resolve(&forward_kinematics(model, &stack(&base0.q, &arm0)));

    let mut q_m = arm0.clone();
    let mut qd_m = DVector::zeros(n);
    let mut segment = Segment {
        start: 0.0,
        q: arm0.clone(),
        qd: DVector::zeros(n),
        delta: DVector::zeros(n),
    };
    let mut solver = FtcndSolver::new(params.ftcnd)?;
    let mut disturbance = script.disturbance.source(n);
    let mut consecutive_failures = 0;
    let mut solver_steps = Vec::new();
    let mut records = Vec::with_capacity(steps + 1);
    let mut s_prev: Option<DVector<f64>> = None;
    let mut latest = (f64::NAN, f64::NAN, f64::NAN);

    for k in 0..=steps {
        let t = k as f64 * tp;
        if k % substeps == 0 {
            let now = segment.desired(t, cp);
            segment = Segment {
                start: t,
                q: now.q,
                qd: now.qd,
                delta: DVector::zeros(n),
            };
            if k < steps {
                let base = motion.state(t);
                let qdot_prev = stack(&base.qd, &segment.qd);
                let state = ConfigurationState::new(stack(&base.q, &segment.q), qdot_prev.clone(), qdot_prev)?;
                let pose_refs: Vec<Pose> = (1..=horizon.n).map(|i| reference.pose(t + i as f64 * cp)).collect();
                let preview: Vec<DVector<f64>> = (1..=horizon.n)
                    .map(|i| stack(&motion.state(t + i as f64 * cp).q, &segment.q))
                    .collect();
                let assembly =
                    assemble_qp_with_preview(model, &state, &pose_refs, &params.weights, &horizon, Some(&preview))?;
                if !assembly.relaxations.is_empty() {
                    debug!("t = {t:.3}: relaxed {} constraint rows", assembly.relaxations.len());
                }
                let sol = solver.solve(&assembly.problem)?;
                let diag = &sol.diagnostics;
                if sol.converged {
                    consecutive_failures = 0;
                } else {
                    consecutive_failures += 1;
                    warn!("t = {t:.3}: solver stopped at |h|_inf = {:.3e}", diag.final_h_inf);
                    if consecutive_failures > params.failure_budget {
                        return Err(Error::NonConvergence(format!(
                            "{consecutive_failures} consecutive unconverged solves at t = {t:.3} s"
                        )));
                    }
                }
                solver_steps.push(SolverStep {
                    time: t,
                    converged: sol.converged,
                    converge_time: diag.converge_time,
                    bound: diag.bound_t_f,
                    within_bound: diag.within_bound,
                    h_inf: diag.final_h_inf,
                    iterations: diag.iterations,
                    relaxed_rows: assembly.relaxations.len(),
                });
                latest = (diag.final_h_inf, diag.converge_time.unwrap_or(f64::NAN), diag.bound_t_f);
                let full = extract_first_increment(&sol.z, model);
                segment.delta = full.rows(BASE_DOF, n).into_owned();
                solver.shift_warm_start(k_act);
            }
        }

        let desired = segment.desired(t, cp);
        let base = motion.state(t);
        let env = environment(model, &base.q, &base.qdd);
        let e = ErrorState::new(&q_m, &qd_m, &desired);
        let tau = match params.controller {
            Controller::Nftsm | Controller::NftsmNoTaub => {
                let compensate = params.controller == Controller::Nftsm;
                control_torque(model, &q_m, &qd_m, &desired, &params.nftsm, &env, compensate)?.tau
            }
            Controller::Pd => pd_baseline_torque(model, &q_m, &qd_m, &desired, &params.pd, &env),
        };
        let s = sliding_surface(&e, &params.nftsm);
        let lyap = match &s_prev {
            Some(prev) => lyapunov_diagnostics(prev, &s, tp, params.nftsm.delta),
            None => lyapunov_diagnostics(&s, &s, tp, params.nftsm.delta),
        };
        let tau_d = disturbance.sample(t);
        let tau_b = base_disturbance_torque(model, &q_m, &env.base_accel);
        let qdd_m = forward_dynamics_in(model, &q_m, &qd_m, &tau, &tau_d, &tau_b, &env)?;

        let q_full = stack(&base.q, &q_m);
        let pose = forward_kinematics(model, &q_full);
        let pose_ref = reference.pose(t);
        let err = pose.error_from(&pose_ref);
        records.push(TraceRecord {
            time: t,
            q: q_full,
            qd: stack(&base.qd, &qd_m),
            qdd: stack(&base.qdd, &qdd_m),
            q_md: desired.q.clone(),
            tau: tau.clone(),
            tau_b,
            tau_d: tau_d.clone(),
            pose,
            pose_ref,
            pos_err: err.fixed_rows::<3>(0).into_owned(),
            ori_err: err.fixed_rows::<3>(3).into_owned(),
            h_inf: latest.0,
            converge_time: latest.1,
            bound: latest.2,
            s: s.clone(),
            v: lyap.v,
            vdot: if s_prev.is_some() { lyap.vdot_estimate.unwrap_or(f64::NAN) } else { f64::NAN },
        });
        s_prev = Some(s);

        if k < steps {
            let accel = |time: f64, q: &DVector<f64>, qd: &DVector<f64>| -> Result<DVector<f64>> {
                let b = motion.state(time);
                let env = environment(model, &b.q, &b.qdd);
                let tau_b = base_disturbance_torque(model, q, &env.base_accel);
                forward_dynamics_in(model, q, qd, &tau, &tau_d, &tau_b, &env)
            };
            let (q_next, qd_next) = rk4_step(&accel, t, &q_m, &qd_m, tp, qdd_m)?;
            if q_next.iter().chain(qd_next.iter()).any(|x| !x.is_finite()) {
                return Err(Error::NumericalBlowup);
            }
            q_m = q_next;
            qd_m = qd_next;
        }
    }

    Ok(SimTrace {
        records,
        solver_steps,
        control_period: cp,
        limits: model.limits.clone(),
        task_rows: model.task_rows,
    })
}

/// One classical RK4 step of `q'' = f(t, q, q')`; `k1` is the acceleration
/// already evaluated at the start of the step.
fn rk4_step(
    f: &impl Fn(f64, &DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
    t: f64,
    q: &DVector<f64>,
    qd: &DVector<f64>,
    h: f64,
    k1: DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let half = 0.5 * h;
    let q2 = q + qd * half;
    let qd2 = qd + &k1 * half;
    let k2 = f(t + half, &q2, &qd2)?;
    let q3 = q + &qd2 * half;
    let qd3 = qd + &k2 * half;
    let k3 = f(t + half, &q3, &qd3)?;
    let q4 = q + &qd3 * h;
    let qd4 = qd + &k3 * h;
    let k4 = f(t + h, &q4, &qd4)?;
    let q_next = q + (qd + &qd2 * 2.0 + &qd3 * 2.0 + &qd4) * (h / 6.0);
    let qd_next = qd + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    Ok((q_next, qd_next))
}
