//! Summary figures of a trace.

use serde::{Deserialize, Serialize};

use super::trace::{SimTrace, TraceRecord};
use crate::error::{Error, Result};

/// Error ball used for the reported convergence times (m and rad).
pub const CONVERGENCE_THRESHOLD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub settle_window: f64,
    /// Max-norm over the settle window (m).
    pub steady_state_pos_err: f64,
    /// Max-norm over the settle window (rad).
    pub steady_state_ori_err: f64,
    pub convergence_threshold: f64,
    pub pos_convergence_time: Option<f64>,
    pub ori_convergence_time: Option<f64>,
    /// Largest excess over the joint limits (angle, velocity, discrete
    /// acceleration); zero when every sample is inside.
    pub max_constraint_violation: f64,
    pub solver_bound_violations: usize,
    pub solver_failures: usize,
    pub max_abs_tau: f64,
}

/// First time after which `err` never leaves `[0, threshold]`, linearly
/// interpolated at the crossing. `None` if the final sample is outside.
pub fn convergence_time_to(times: &[f64], err: &[f64], threshold: f64) -> Option<f64> {
    let last_out = err.iter().rposition(|&e| e > threshold);
    match last_out {
        None => times.first().copied(),
        Some(i) if i + 1 == err.len() => None,
        Some(i) => {
            let (e0, e1) = (err[i], err[i + 1]);
            let frac = (e0 - threshold) / (e0 - e1);
            Some(times[i] + frac * (times[i + 1] - times[i]))
        }
    }
}

fn excess(x: f64, lo: f64, hi: f64) -> f64 {
    (lo - x).max(x - hi).max(0.0)
}

/// Largest limit excess over every record (angles, velocities) and over
/// control-period velocity differences.
pub fn max_constraint_violation(trace: &SimTrace) -> f64 {
    let l = &trace.limits;
    let mut worst = 0.0_f64;
    for r in &trace.records {
        for i in 0..r.q.len() {
            worst = worst.max(excess(r.q[i], l.q_lower[i], l.q_upper[i]));
            worst = worst.max(excess(r.qd[i], l.qd_lower[i], l.qd_upper[i]));
        }
    }
    if trace.records.len() < 2 {
        return worst;
    }
    let dt = trace.records[1].time - trace.records[0].time;
    let stride = ((trace.control_period / dt).round() as usize).max(1);
    let samples: Vec<&TraceRecord> = trace.records.iter().step_by(stride).collect();
    for w in samples.windows(2) {
        let dt = w[1].time - w[0].time;
        for i in 0..w[0].qd.len() {
            let acc = (w[1].qd[i] - w[0].qd[i]) / dt;
            worst = worst.max(excess(acc, l.qdd_lower[i], l.qdd_upper[i]));
        }
    }
    worst
}

pub fn error_metrics(trace: &SimTrace, settle_window: f64) -> Result<ErrorMetrics> {
    let (first, last) = match (trace.records.first(), trace.records.last()) {
        (Some(f), Some(l)) => (f.time, l.time),
        _ => return Err(Error::parameter("trace", "trace has no records")),
    };
    if !(settle_window > 0.0) || settle_window > last - first {
        return Err(Error::parameter(
            "settle_window",
            format!("must lie in (0, {}] for this trace, got {settle_window}", last - first),
        ));
    }
    let start = last - settle_window;
    let times: Vec<f64> = trace.records.iter().map(|r| r.time).collect();
    let pos: Vec<f64> = trace.records.iter().map(|r| trace.position_error(r)).collect();
    let ori: Vec<f64> = trace.records.iter().map(|r| trace.orientation_error(r)).collect();
    let window_max = |e: &[f64]| {
        times
            .iter()
            .zip(e)
            .filter(|(&t, _)| t >= start - 1e-12)
            .fold(0.0_f64, |m, (_, &x)| m.max(x))
    };
    let max_abs_tau = trace
        .records
        .iter()
        .flat_map(|r| r.tau.iter())
        .fold(0.0_f64, |m, &x| m.max(x.abs()));
    Ok(ErrorMetrics {
        settle_window,
        steady_state_pos_err: window_max(&pos),
        steady_state_ori_err: window_max(&ori),
        convergence_threshold: CONVERGENCE_THRESHOLD,
        pos_convergence_time: convergence_time_to(&times, &pos, CONVERGENCE_THRESHOLD),
        ori_convergence_time: convergence_time_to(&times, &ori, CONVERGENCE_THRESHOLD),
        max_constraint_violation: max_constraint_violation(trace),
        solver_bound_violations: trace.solver_steps.iter().filter(|s| !s.within_bound).count(),
        solver_failures: trace.solver_steps.iter().filter(|s| !s.converged).count(),
        max_abs_tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::Pose;
    use crate::model::JointLimits;
    use approx::assert_relative_eq;
    use nalgebra::{DVector, Vector3};

    fn trace_with(errors: impl Fn(f64) -> f64, duration: f64, dt: f64) -> SimTrace {
        let n = (duration / dt).round() as usize;
        let records = (0..=n)
            .map(|k| {
                let t = k as f64 * dt;
                let e = errors(t);
                TraceRecord {
                    time: t,
                    q: DVector::zeros(1),
                    qd: DVector::zeros(1),
                    qdd: DVector::zeros(1),
                    q_md: DVector::zeros(1),
                    tau: DVector::zeros(1),
                    tau_b: DVector::zeros(1),
                    tau_d: DVector::zeros(1),
                    pose: Pose::new(Vector3::zeros(), Vector3::zeros()),
                    pose_ref: Pose::new(Vector3::zeros(), Vector3::zeros()),
                    pos_err: Vector3::new(e, 0.0, 0.0),
                    ori_err: Vector3::new(0.0, 0.0, e),
                    h_inf: 0.0,
                    converge_time: 0.0,
                    bound: 0.0,
                    s: DVector::zeros(1),
                    v: 0.0,
                    vdot: 0.0,
                }
            })
            .collect();
        SimTrace {
            records,
            solver_steps: vec![],
            control_period: 0.01,
            limits: JointLimits {
                q_lower: vec![-1.0],
                q_upper: vec![1.0],
                qd_lower: vec![-1.0],
                qd_upper: vec![1.0],
                qdd_lower: vec![-1.0],
                qdd_upper: vec![1.0],
            },
            task_rows: [true; 6],
        }
    }

    #[test]
    fn zero_error_trace() {
        let m = error_metrics(&trace_with(|_| 0.0, 2.0, 1e-3), 1.0).unwrap();
        assert_eq!(m.steady_state_pos_err, 0.0);
        assert_eq!(m.steady_state_ori_err, 0.0);
        assert_eq!(m.pos_convergence_time, Some(0.0));
        assert_eq!(m.max_constraint_violation, 0.0);
        assert_eq!(m.solver_bound_violations, 0);
    }

    #[test]
    fn exponential_decay_crossing() {
        let m = error_metrics(&trace_with(|t| (-t).exp(), 8.0, 1e-3), 2.0).unwrap();
        assert_relative_eq!(m.pos_convergence_time.unwrap(), 100f64.ln(), epsilon = 1e-6);
        assert_relative_eq!(m.steady_state_pos_err, (-6.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn never_settling_has_no_convergence_time() {
        let m = error_metrics(&trace_with(|t| 0.5 + 0.1 * t, 2.0, 1e-3), 1.0).unwrap();
        assert_eq!(m.pos_convergence_time, None);
    }

    #[test]
    fn window_longer_than_trace_is_rejected() {
        assert!(error_metrics(&trace_with(|_| 0.0, 1.0, 1e-3), 2.0).is_err());
    }

    #[test]
    fn untracked_rows_are_ignored() {
        let mut t = trace_with(|_| 0.2, 1.0, 1e-2);
        t.task_rows = [true, true, false, false, false, false];
        for r in &mut t.records {
            r.pos_err = Vector3::new(0.0, 0.0, 5.0);
        }
        let m = error_metrics(&t, 0.5).unwrap();
        assert_eq!(m.steady_state_pos_err, 0.0);
        assert_eq!(m.steady_state_ori_err, 0.0);
    }

    #[test]
    fn limit_excess_is_reported() {
        let mut t = trace_with(|_| 0.0, 1.0, 1e-3);
        t.records[10].q[0] = 1.25;
        assert_relative_eq!(error_metrics(&t, 0.5).unwrap().max_constraint_violation, 0.25);
    }
}
