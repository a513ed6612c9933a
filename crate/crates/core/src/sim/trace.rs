//! Per-torque-step records of a run and their CSV form.
//!
//! Column order: `time`, `q_*` (m), `qd_*` (m), `qdd_*` (m), `qmd_*` (n),
//! `tau_*`, `tau_b_*`, `tau_d_*` (n each), `x y z roll pitch yaw`,
//! `ref_x .. ref_yaw`, `ex ey ez`, `eroll epitch eyaw`, `h_inf`,
//! `converge_time`, `bound`, `s_*` (n), `V`, `Vdot`. Missing values are `NaN`.

use std::fmt::Write as _;

use nalgebra::{DVector, Vector3};

use crate::error::{Error, Result};
use crate::kinematics::Pose;
use crate::model::JointLimits;

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub time: f64,
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub qdd: DVector<f64>,
    /// Desired arm angles from the kinematic layer.
    pub q_md: DVector<f64>,
    pub tau: DVector<f64>,
    pub tau_b: DVector<f64>,
    pub tau_d: DVector<f64>,
    pub pose: Pose,
    pub pose_ref: Pose,
    pub pos_err: Vector3<f64>,
    pub ori_err: Vector3<f64>,
    pub h_inf: f64,
    pub converge_time: f64,
    pub bound: f64,
    pub s: DVector<f64>,
    pub v: f64,
    pub vdot: f64,
}

/// One receding-horizon solve.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverStep {
    pub time: f64,
    pub converged: bool,
    pub converge_time: Option<f64>,
    pub bound: f64,
    pub within_bound: bool,
    pub h_inf: f64,
    pub iterations: usize,
    pub relaxed_rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimTrace {
    pub records: Vec<TraceRecord>,
    pub solver_steps: Vec<SolverStep>,
    pub control_period: f64,
    pub limits: JointLimits,
    /// Pose rows that are tracked (x y z roll pitch yaw).
    pub task_rows: [bool; 6],
}

const POSE_COLS: [&str; 6] = ["x", "y", "z", "roll", "pitch", "yaw"];

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.16e}")
    }
}

impl SimTrace {
    pub fn dof(&self) -> usize {
        self.records.first().map_or(0, |r| r.q.len())
    }

    pub fn arm_joints(&self) -> usize {
        self.records.first().map_or(0, |r| r.tau.len())
    }

    pub fn csv_header(m: usize, n: usize) -> Vec<String> {
        let mut h = vec!["time".to_string()];
        for prefix in ["q", "qd", "qdd"] {
            h.extend((0..m).map(|i| format!("{prefix}_{i}")));
        }
        for prefix in ["qmd", "tau", "tau_b", "tau_d"] {
            h.extend((0..n).map(|i| format!("{prefix}_{i}")));
        }
        h.extend(POSE_COLS.iter().map(|c| c.to_string()));
        h.extend(POSE_COLS.iter().map(|c| format!("ref_{c}")));
        h.extend(POSE_COLS.iter().map(|c| format!("e{c}")));
        h.extend(["h_inf", "converge_time", "bound"].map(String::from));
        h.extend((0..n).map(|i| format!("s_{i}")));
        h.extend(["V", "Vdot"].map(String::from));
        h
    }

    pub fn to_csv(&self) -> String {
        let (m, n) = (self.dof(), self.arm_joints());
        let mut out = Self::csv_header(m, n).join(",");
        out.push('\n');
        for r in &self.records {
            let mut row: Vec<f64> = vec![r.time];
            for v in [&r.q, &r.qd, &r.qdd, &r.q_md, &r.tau, &r.tau_b, &r.tau_d] {
                row.extend(v.iter());
            }
            row.extend(r.pose.as_vector().iter());
            row.extend(r.pose_ref.as_vector().iter());
            row.extend(r.pos_err.iter());
            row.extend(r.ori_err.iter());
            row.extend([r.h_inf, r.converge_time, r.bound]);
            row.extend(r.s.iter());
            row.extend([r.v, r.vdot]);
            let cells: Vec<String> = row.into_iter().map(fmt).collect();
            writeln!(out, "{}", cells.join(",")).unwrap();
        }
        out
    }

    /// Parses the records of [`Self::to_csv`]; column counts come from the header.
    pub fn records_from_csv(text: &str) -> Result<Vec<TraceRecord>> {
        let fail = |message: String| Error::Parse {
            what: "trace CSV".into(),
            message,
        };
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| fail("empty input".into()))?.split(',').collect();
        let m = header.iter().filter(|c| c.starts_with("q_")).count();
        let n = header.iter().filter(|c| c.starts_with("tau_") && !c.starts_with("tau_b") && !c.starts_with("tau_d")).count();
        let expected = Self::csv_header(m, n);
        if header != expected {
            return Err(fail("header does not match the trace column layout".into()));
        }
        let mut records = Vec::new();
        for (line_no, line) in lines.enumerate() {
            let values: Vec<f64> = line
                .split(',')
                .map(|c| c.parse::<f64>().map_err(|_| fail(format!("line {}: invalid number '{c}'", line_no + 2))))
                .collect::<Result<_>>()?;
            if values.len() != expected.len() {
                return Err(fail(format!(
                    "line {}: expected {} columns, found {}",
                    line_no + 2,
                    expected.len(),
                    values.len()
                )));
            }
            let mut it = values.into_iter();
            let mut take = |k: usize| DVector::from_iterator(k, it.by_ref().take(k));
            let time = take(1)[0];
            let q = take(m);
            let qd = take(m);
            let qdd = take(m);
            let q_md = take(n);
            let tau = take(n);
            let tau_b = take(n);
            let tau_d = take(n);
            let pose = take(6);
            let pose_ref = take(6);
            let pos_err = take(3);
            let ori_err = take(3);
            let solver = take(3);
            let s = take(n);
            let lyap = take(2);
            let as_pose = |p: &DVector<f64>| Pose {
                position: Vector3::new(p[0], p[1], p[2]),
                orientation: Vector3::new(p[3], p[4], p[5]),
            };
            records.push(TraceRecord {
                time,
                q,
                qd,
                qdd,
                q_md,
                tau,
                tau_b,
                tau_d,
                pose: as_pose(&pose),
                pose_ref: as_pose(&pose_ref),
                pos_err: Vector3::new(pos_err[0], pos_err[1], pos_err[2]),
                ori_err: Vector3::new(ori_err[0], ori_err[1], ori_err[2]),
                h_inf: solver[0],
                converge_time: solver[1],
                bound: solver[2],
                s,
                v: lyap[0],
                vdot: lyap[1],
            });
        }
        Ok(records)
    }

    /// Max-norm of the tracked position error rows.
    pub fn position_error(&self, r: &TraceRecord) -> f64 {
        (0..3)
            .filter(|&i| self.task_rows[i])
            .fold(0.0_f64, |m, i| m.max(r.pos_err[i].abs()))
    }

    /// Max-norm of the tracked orientation error rows.
    pub fn orientation_error(&self, r: &TraceRecord) -> f64 {
        (0..3)
            .filter(|&i| self.task_rows[i + 3])
            .fold(0.0_f64, |m, i| m.max(r.ori_err[i].abs()))
    }
}
