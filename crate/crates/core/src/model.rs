//! Robot description: the virtual 6-DOF base, the arm chain, and the
//! three-level joint limit table.
//!
//! Arm links use the modified Denavit-Hartenberg convention: link `i` is
//! reached from frame `i-1` by `Rx(alpha) * Tx(a) * Rz(theta) * Tz(d)`, with
//! `theta` (revolute) or `d` (prismatic) carrying the joint variable. The
//! base is three prismatic joints along world x, y, z followed by a Z-Y-X
//! Euler rotation, so that `q = [x, y, z, roll, pitch, yaw, q_arm...]`.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BASE_DOF: usize = 6;
pub const STANDARD_GRAVITY: f64 = 9.81;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

/// One arm link: the frame transform that carries the joint, plus the
/// rigid-body parameters of the body attached after that joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub kind: JointKind,
    /// Translation along the previous frame's x axis (m).
    pub a: f64,
    /// Twist about the previous frame's x axis (rad).
    pub alpha: f64,
    /// Offset along the joint axis (m).
    pub d: f64,
    #[serde(default)]
    pub theta_offset: f64,
    /// kg
    pub mass: f64,
    /// Center of mass in the link frame (m).
    pub com: [f64; 3],
    /// Principal moments of inertia about the COM, link-frame axes (kg m^2).
    pub inertia: [f64; 3],
}

/// Fixed transform from the last link frame to the end-effector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolFrame {
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub d: f64,
}

/// Position, velocity and acceleration bounds for every DOF (base first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub q_lower: Vec<f64>,
    pub q_upper: Vec<f64>,
    pub qd_lower: Vec<f64>,
    pub qd_upper: Vec<f64>,
    pub qdd_lower: Vec<f64>,
    pub qdd_upper: Vec<f64>,
}

impl JointLimits {
    pub fn len(&self) -> usize {
        self.q_lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_lower.is_empty()
    }

    /// Checks lengths and ordering. Errors carry the key path below `prefix`.
    pub fn validate(&self, dof: usize, prefix: &str) -> Result<()> {
        let arrays: [(&str, &Vec<f64>); 6] = [
            ("q_lower", &self.q_lower),
            ("q_upper", &self.q_upper),
            ("qd_lower", &self.qd_lower),
            ("qd_upper", &self.qd_upper),
            ("qdd_lower", &self.qdd_lower),
            ("qdd_upper", &self.qdd_upper),
        ];
        for (name, values) in arrays {
            if values.len() != dof {
                return Err(Error::config(
                    format!("{prefix}.{name}"),
                    format!("expected {dof} entries (one per DOF), found {}", values.len()),
                ));
            }
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::config(
                    format!("{prefix}.{name}[{i}]"),
                    "value is not finite",
                ));
            }
        }
        for i in 0..dof {
            if self.q_lower[i] >= self.q_upper[i] {
                return Err(Error::config(
                    format!("{prefix}.q_upper[{i}]"),
                    format!("limit ordering violated at index {i}"),
                ));
            }
            if !(self.qd_lower[i] < 0.0 && 0.0 < self.qd_upper[i]) {
                return Err(Error::config(
                    format!("{prefix}.qd_upper[{i}]"),
                    format!("limit ordering violated at index {i} (need qd_lower < 0 < qd_upper)"),
                ));
            }
            if !(self.qdd_lower[i] < 0.0 && 0.0 < self.qdd_upper[i]) {
                return Err(Error::config(
                    format!("{prefix}.qdd_upper[{i}]"),
                    format!("limit ordering violated at index {i} (need qdd_lower < 0 < qdd_upper)"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub name: String,
    pub links: Vec<LinkParams>,
    #[serde(default)]
    pub tool: ToolFrame,
    /// Gravity in the world frame (m/s^2).
    pub gravity: [f64; 3],
    pub limits: JointLimits,
    /// Which DOFs are decision variables of the receding-horizon QP.
    pub actuated_by_mpc: Vec<bool>,
    /// Pose rows (x, y, z, roll, pitch, yaw) the arm is expected to control;
    /// used for the task-space singularity test.
    pub task_rows: [bool; 6],
}

impl RobotModel {
    pub fn base_dof_count(&self) -> usize {
        BASE_DOF
    }

    pub fn arm_joint_count(&self) -> usize {
        self.links.len()
    }

    /// Total DOF count m.
    pub fn dof(&self) -> usize {
        BASE_DOF + self.links.len()
    }

    pub fn joint_kind(&self, index: usize) -> JointKind {
        if index < 3 {
            JointKind::Prismatic
        } else if index < BASE_DOF {
            JointKind::Revolute
        } else {
            self.links[index - BASE_DOF].kind
        }
    }

    /// Indices of the MPC decision DOFs, in ascending order.
    pub fn actuated_indices(&self) -> Vec<usize> {
        self.actuated_by_mpc
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect()
    }

    pub fn actuated_count(&self) -> usize {
        self.actuated_by_mpc.iter().filter(|&&a| a).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.links.is_empty() {
            return Err(Error::config("robot.links", "arm needs at least one link"));
        }
        for (i, link) in self.links.iter().enumerate() {
            if !(link.mass > 0.0) {
                return Err(Error::config(
                    format!("robot.links[{i}].mass"),
                    "link mass must be positive",
                ));
            }
            if link.inertia.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::config(
                    format!("robot.links[{i}].inertia"),
                    "principal moments must be finite and non-negative",
                ));
            }
        }
        let m = self.dof();
        self.limits.validate(m, "robot.limits")?;
        if self.actuated_by_mpc.len() != m {
            return Err(Error::config(
                "robot.actuated_by_mpc",
                format!("expected {m} entries, found {}", self.actuated_by_mpc.len()),
            ));
        }
        if self.actuated_count() == 0 {
            return Err(Error::config(
                "robot.actuated_by_mpc",
                "at least one DOF must be actuated",
            ));
        }
        if !self.task_rows.iter().any(|&r| r) {
            return Err(Error::config("robot.task_rows", "no task rows selected"));
        }
        Ok(())
    }

    /// Arm-only mask: base DOFs move exogenously.
    pub fn arm_only_mask(arm_joints: usize) -> Vec<bool> {
        let mut mask = vec![false; BASE_DOF];
        mask.extend(std::iter::repeat(true).take(arm_joints));
        mask
    }
}

/// Base rows of the joint-limit table: translation then rotation.
struct BaseLimits;

impl BaseLimits {
    const Q_LOWER: [f64; 6] = [-1.0, -1.0, -1.0, -1.0, -1.0, -1.0];
    const Q_UPPER: [f64; 6] = [1.0, 1.0, 3.0, 1.0, 1.0, 1.0];
    const QD_LOWER: [f64; 6] = [-1.0, -1.0, -1.0, -1.0, -1.0, -1.0];
    const QD_UPPER: [f64; 6] = [1.0, 1.0, 3.0, 1.0, 1.0, 1.0];
    const QDD_LOWER: [f64; 6] = [-1.0, -1.0, -1.0, -1.0, -1.0, -1.0];
    const QDD_UPPER: [f64; 6] = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
}

fn stack(base: &[f64; 6], arm: &[f64]) -> Vec<f64> {
    base.iter().chain(arm.iter()).copied().collect()
}

pub const PANDA_Q_UPPER: [f64; 7] = [2.5, 1.70, 2.5, -0.07, 2.5, 3.75, 2.5];
pub const PANDA_Q_LOWER: [f64; 7] = [-2.5, -1.70, -2.5, -3.07, -2.5, -0.01, -2.5];
pub const PANDA_QD_UPPER: [f64; 7] = [2.0, 2.0, 2.0, 2.0, 2.5, 2.5, 2.5];
pub const PANDA_QD_LOWER: [f64; 7] = [-2.0, -2.0, -2.0, -2.0, -2.5, -2.5, -2.5];
pub const PANDA_QDD_UPPER: [f64; 7] = [15.0, 7.0, 10.0, 12.0, 15.0, 20.0, 20.0];
pub const PANDA_QDD_LOWER: [f64; 7] = [-15.0, -7.0, -10.0, -12.0, -15.0, -20.0, -20.0];

/// Initial arm configuration of the circular tracking scenario (rad).
pub const PANDA_HOME: [f64; 7] = [0.0, -0.78, 0.0, -2.35, 0.0, 1.57, 0.78];

/// 7-joint arm on the 6-DOF virtual base.
///
/// Frame geometry follows the arm's published modified-DH table. Masses,
/// COM offsets and inertias are a surrogate (unit-order values with a
/// plausible mass distribution), not identified parameters.
pub fn builtin_panda_on_base() -> RobotModel {
    let h = FRAC_PI_2;
    #[rustfmt::skip]
    let geometry: [(f64, f64, f64); 7] = [
        // (a, alpha, d)
        (0.0,     0.0, 0.333),
        (0.0,     -h,  0.0),
        (0.0,      h,  0.316),
        (0.0825,   h,  0.0),
        (-0.0825, -h,  0.384),
        (0.0,      h,  0.0),
        (0.088,    h,  0.0),
    ];
    #[rustfmt::skip]
    let bodies: [(f64, [f64; 3], [f64; 3]); 7] = [
        // (mass, com, principal inertia)
        (4.0,  [0.0,   -0.03,  -0.10], [0.030, 0.030, 0.010]),
        (1.0,  [0.0,   -0.03,   0.0 ], [0.010, 0.008, 0.010]),
        (3.0,  [0.03,   0.04,  -0.07], [0.020, 0.020, 0.010]),
        (3.5,  [-0.05,  0.10,   0.03], [0.025, 0.015, 0.025]),
        (1.5,  [-0.01,  0.04,  -0.10], [0.030, 0.025, 0.006]),
        (1.5,  [0.06,  -0.01,  -0.01], [0.004, 0.006, 0.006]),
        (0.75, [0.01,   0.0,    0.06], [0.003, 0.003, 0.002]),
    ];
    let links = geometry
        .iter()
        .zip(bodies.iter())
        .map(|(&(a, alpha, d), &(mass, com, inertia))| LinkParams {
            kind: JointKind::Revolute,
            a,
            alpha,
            d,
            theta_offset: 0.0,
            mass,
            com,
            inertia,
        })
        .collect();
    RobotModel {
        name: "panda_on_base".into(),
        links,
        tool: ToolFrame {
            a: 0.0,
            alpha: 0.0,
            d: 0.107,
        },
        gravity: [0.0, 0.0, -STANDARD_GRAVITY],
        limits: JointLimits {
            q_lower: stack(&BaseLimits::Q_LOWER, &PANDA_Q_LOWER),
            q_upper: stack(&BaseLimits::Q_UPPER, &PANDA_Q_UPPER),
            qd_lower: stack(&BaseLimits::QD_LOWER, &PANDA_QD_LOWER),
            qd_upper: stack(&BaseLimits::QD_UPPER, &PANDA_QD_UPPER),
            qdd_lower: stack(&BaseLimits::QDD_LOWER, &PANDA_QDD_LOWER),
            qdd_upper: stack(&BaseLimits::QDD_UPPER, &PANDA_QDD_UPPER),
        },
        actuated_by_mpc: RobotModel::arm_only_mask(7),
        task_rows: [true; 6],
    }
}

/// Two-link arm moving in the base x-y plane with gravity along -y, so the
/// textbook vertical-plane Lagrangian applies. Uniform rods: COM at mid-link,
/// `Izz = m l^2 / 12`.
pub fn builtin_planar_two_link() -> RobotModel {
    planar_chain(&[0.5, 0.5], &[1.0, 1.0])
}

/// Planar revolute chain with uniform-rod links.
pub fn planar_chain(lengths: &[f64], masses: &[f64]) -> RobotModel {
    assert_eq!(lengths.len(), masses.len());
    let n = lengths.len();
    let links = (0..n)
        .map(|i| {
            let l = lengths[i];
            let m = masses[i];
            let rod = m * l * l / 12.0;
            LinkParams {
                kind: JointKind::Revolute,
                a: if i == 0 { 0.0 } else { lengths[i - 1] },
                alpha: 0.0,
                d: 0.0,
                theta_offset: 0.0,
                mass: m,
                com: [0.5 * l, 0.0, 0.0],
                inertia: [rod * 1e-3, rod, rod],
            }
        })
        .collect();
    let arm_q = vec![3.0; n];
    let neg = |v: &Vec<f64>| v.iter().map(|x| -x).collect::<Vec<_>>();
    let arm_qd = vec![3.0; n];
    let arm_qdd = vec![20.0; n];
    RobotModel {
        name: format!("planar_{n}link"),
        links,
        tool: ToolFrame {
            a: lengths[n - 1],
            alpha: 0.0,
            d: 0.0,
        },
        gravity: [0.0, -STANDARD_GRAVITY, 0.0],
        limits: JointLimits {
            q_lower: stack(&BaseLimits::Q_LOWER, &neg(&arm_q)),
            q_upper: stack(&BaseLimits::Q_UPPER, &arm_q),
            qd_lower: stack(&BaseLimits::QD_LOWER, &neg(&arm_qd)),
            qd_upper: stack(&BaseLimits::QD_UPPER, &arm_qd),
            qdd_lower: stack(&BaseLimits::QDD_LOWER, &neg(&arm_qdd)),
            qdd_upper: stack(&BaseLimits::QDD_UPPER, &arm_qdd),
        },
        actuated_by_mpc: RobotModel::arm_only_mask(n),
        task_rows: [true, true, false, false, false, false],
    }
}
