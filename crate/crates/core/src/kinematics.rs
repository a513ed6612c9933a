//! Forward kinematics, the Euler-rate Jacobian and horizon prediction.
//!
//! Orientation is always Z-Y-X Euler angles stored as `[roll, pitch, yaw]`
//! with `R = Rz(yaw) * Ry(pitch) * Rx(roll)`. Angles live in `(-pi, pi]`.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::model::{JointKind, RobotModel, BASE_DOF};

/// Wraps an angle into `(-pi, pi]`; angles already inside are returned unchanged.
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let r = (angle + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

pub fn rotation_zyx(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// `[roll, pitch, yaw]` of a rotation matrix. At gimbal lock yaw is set to 0.
pub fn euler_zyx(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_pitch = r[(0, 0)].hypot(r[(1, 0)]);
    let pitch = (-r[(2, 0)]).atan2(cos_pitch);
    if cos_pitch < 1e-12 {
        let roll = (-r[(1, 2)]).atan2(r[(1, 1)]);
        return Vector3::new(wrap_angle(roll), pitch, 0.0);
    }
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    Vector3::new(wrap_angle(roll), pitch, wrap_angle(yaw))
}

/// Maps Euler rates to world angular velocity: `omega = E(eta) * eta_dot`.
pub fn euler_rate_matrix(euler: &Vector3<f64>) -> Matrix3<f64> {
    let (sp, cp) = euler[1].sin_cos();
    let (sy, cy) = euler[2].sin_cos();
    Matrix3::new(cy * cp, -sy, 0.0, sy * cp, cy, 0.0, -sp, 0.0, 1.0)
}

/// Inverse of [`euler_rate_matrix`]; infinite at pitch = +-pi/2.
pub fn euler_rate_matrix_inverse(euler: &Vector3<f64>) -> Matrix3<f64> {
    let (sp, cp) = euler[1].sin_cos();
    let (sy, cy) = euler[2].sin_cos();
    Matrix3::new(
        cy / cp,
        sy / cp,
        0.0,
        -sy,
        cy,
        0.0,
        cy * sp / cp,
        sy * sp / cp,
        1.0,
    )
}

/// End-effector position and Z-Y-X Euler orientation in the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: Vector3<f64>,
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: Vector3<f64>) -> Self {
        Pose {
            position,
            orientation: orientation.map(wrap_angle),
        }
    }

    pub fn from_rotation(position: Vector3<f64>, rotation: &Matrix3<f64>) -> Self {
        Pose {
            position,
            orientation: euler_zyx(rotation),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_zyx(self.orientation[0], self.orientation[1], self.orientation[2])
    }

    /// Axis-angle vector of the orientation (for plotting).
    pub fn rotation_vector(&self) -> Vector3<f64> {
        Rotation3::from_matrix_unchecked(self.rotation()).scaled_axis()
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.position[0],
            self.position[1],
            self.position[2],
            self.orientation[0],
            self.orientation[1],
            self.orientation[2],
        )
    }

    /// `self - reference`, with shortest-arc angle differences.
    pub fn error_from(&self, reference: &Pose) -> Vector6<f64> {
        let dp = self.position - reference.position;
        let mut e = Vector6::zeros();
        for i in 0..3 {
            e[i] = dp[i];
            e[i + 3] = wrap_angle(self.orientation[i] - reference.orientation[i]);
        }
        e
    }

    pub fn is_representation_singular(&self, tol: f64) -> bool {
        self.orientation[1].cos().abs() < tol
    }
}

/// Joint state at sample `j` plus the previously commanded velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigurationState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    /// q_dot(j-1) of the velocity recursion.
    pub qdot_prev: DVector<f64>,
}

impl ConfigurationState {
    pub fn new(q: DVector<f64>, qdot: DVector<f64>, qdot_prev: DVector<f64>) -> Result<Self> {
        let m = q.len();
        if qdot.len() != m {
            return Err(Error::dimension("ConfigurationState.qdot", m, qdot.len()));
        }
        if qdot_prev.len() != m {
            return Err(Error::dimension("ConfigurationState.qdot_prev", m, qdot_prev.len()));
        }
        Ok(ConfigurationState { q, qdot, qdot_prev })
    }

    pub fn at_rest(q: DVector<f64>) -> Self {
        let m = q.len();
        ConfigurationState {
            q,
            qdot: DVector::zeros(m),
            qdot_prev: DVector::zeros(m),
        }
    }
}

/// Arm frames expressed in the arm-base frame.
#[derive(Clone, Debug)]
pub struct ArmFrames {
    /// Joint screw axes: a point `p` on any body after joint `i` moves with
    /// `dp/dq_i = omega_i x p + v_i`, a direction `u` with `omega_i x u`.
    pub omega: Vec<Vector3<f64>>,
    pub v: Vec<Vector3<f64>>,
    pub link_rotation: Vec<Matrix3<f64>>,
    pub link_origin: Vec<Vector3<f64>>,
    pub com: Vec<Vector3<f64>>,
    pub ee_rotation: Matrix3<f64>,
    pub ee_position: Vector3<f64>,
}

impl ArmFrames {
    /// Velocity of the point `p` per unit rate of joint `i`.
    pub fn point_velocity(&self, i: usize, p: &Vector3<f64>) -> Vector3<f64> {
        self.omega[i].cross(p) + self.v[i]
    }
}

fn rot_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn arm_frames(model: &RobotModel, q_arm: &[f64]) -> ArmFrames {
    let n = model.arm_joint_count();
    debug_assert_eq!(q_arm.len(), n);
    let mut frames = ArmFrames {
        omega: Vec::with_capacity(n),
        v: Vec::with_capacity(n),
        link_rotation: Vec::with_capacity(n),
        link_origin: Vec::with_capacity(n),
        com: Vec::with_capacity(n),
        ee_rotation: Matrix3::identity(),
        ee_position: Vector3::zeros(),
    };
    let mut rot = Matrix3::identity();
    let mut pos = Vector3::zeros();
    for (link, &qi) in model.links.iter().zip(q_arm) {
        let axis_point = pos + rot * Vector3::new(link.a, 0.0, 0.0);
        let twisted = rot * rot_x(link.alpha);
        let axis = twisted.column(2).into_owned();
        let (theta, d) = match link.kind {
            JointKind::Revolute => (link.theta_offset + qi, link.d),
            JointKind::Prismatic => (link.theta_offset, link.d + qi),
        };
        rot = twisted * rot_z(theta);
        pos = axis_point + axis * d;
        match link.kind {
            JointKind::Revolute => {
                frames.omega.push(axis);
                frames.v.push(axis_point.cross(&axis));
            }
            JointKind::Prismatic => {
                frames.omega.push(Vector3::zeros());
                frames.v.push(axis);
            }
        }
        frames.link_rotation.push(rot);
        frames.link_origin.push(pos);
        frames.com.push(pos + rot * Vector3::from(link.com));
    }
    let tool = &model.tool;
    let ee_rot = rot * rot_x(tool.alpha);
    frames.ee_position = pos + rot * Vector3::new(tool.a, 0.0, 0.0) + ee_rot * Vector3::new(0.0, 0.0, tool.d);
    frames.ee_rotation = ee_rot;
    frames
}

/// Rotation and position of the arm base in the world frame.
pub fn base_transform(q: &DVector<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    (
        rotation_zyx(q[3], q[4], q[5]),
        Vector3::new(q[0], q[1], q[2]),
    )
}

/// Pose of the base frame alone (the six virtual joints), angles wrapped.
pub fn base_pose(q: &DVector<f64>) -> Pose {
    Pose::new(
        Vector3::new(q[0], q[1], q[2]),
        Vector3::new(wrap_angle(q[3]), wrap_angle(q[4]), wrap_angle(q[5])),
    )
}

fn check_len(model: &RobotModel, q: &DVector<f64>, context: &str) {
    assert_eq!(
        q.len(),
        model.dof(),
        "{context}: configuration length must equal the model DOF count"
    );
}

pub fn forward_kinematics(model: &RobotModel, q: &DVector<f64>) -> Pose {
    check_len(model, q, "forward_kinematics");
    let (rb, pb) = base_transform(q);
    let frames = arm_frames(model, &q.as_slice()[BASE_DOF..]);
    Pose::from_rotation(pb + rb * frames.ee_position, &(rb * frames.ee_rotation))
}

/// World-frame geometric Jacobian: rows are linear velocity and angular
/// velocity of the end-effector, columns are all `m` DOFs (base Euler rates
/// for the base rotation columns).
pub fn spatial_jacobian(model: &RobotModel, q: &DVector<f64>) -> (DMatrix<f64>, Pose) {
    check_len(model, q, "spatial_jacobian");
    let m = model.dof();
    let (rb, pb) = base_transform(q);
    let frames = arm_frames(model, &q.as_slice()[BASE_DOF..]);
    let ee = pb + rb * frames.ee_position;
    let mut jac = DMatrix::zeros(6, m);
    for k in 0..3 {
        jac[(k, k)] = 1.0;
    }
    let rate = euler_rate_matrix(&Vector3::new(q[3], q[4], q[5]));
    let lever = ee - pb;
    for k in 0..3 {
        let w = rate.column(k).into_owned();
        let lin = w.cross(&lever);
        jac.fixed_view_mut::<3, 1>(0, 3 + k).copy_from(&lin);
        jac.fixed_view_mut::<3, 1>(3, 3 + k).copy_from(&w);
    }
    for j in 0..model.arm_joint_count() {
        let lin = rb * frames.point_velocity(j, &frames.ee_position);
        let ang = rb * frames.omega[j];
        jac.fixed_view_mut::<3, 1>(0, BASE_DOF + j).copy_from(&lin);
        jac.fixed_view_mut::<3, 1>(3, BASE_DOF + j).copy_from(&ang);
    }
    let pose = Pose::from_rotation(ee, &(rb * frames.ee_rotation));
    (jac, pose)
}

/// Jacobian of the Euler-angle pose: `p_dot = J(q) q_dot`.
///
/// Built from the world-frame Jacobian by mapping angular velocity to Euler
/// rates of the end-effector orientation.
pub fn geometric_jacobian(model: &RobotModel, q: &DVector<f64>) -> DMatrix<f64> {
    jacobian_and_pose(model, q).0
}

pub fn jacobian_and_pose(model: &RobotModel, q: &DVector<f64>) -> (DMatrix<f64>, Pose) {
    let (mut jac, pose) = spatial_jacobian(model, q);
    let inv = euler_rate_matrix_inverse(&pose.orientation);
    let ang = inv * jac.rows(3, 3);
    jac.rows_mut(3, 3).copy_from(&ang);
    (jac, pose)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SingularityReport {
    pub singular: bool,
    /// det(J J^T) over the task rows and MPC-actuated columns.
    pub det: f64,
}

/// Euler-representation or task-space singularity test.
///
/// Singular when the base pitch (or the end-effector pitch, if orientation
/// rows are tracked) is within `tol` of +-pi/2 in cosine, or when
/// `det(J J^T) < tol` on the task rows / actuated columns.
pub fn is_representation_singular(model: &RobotModel, q: &DVector<f64>, tol: f64) -> SingularityReport {
    let base_cos = q[4].cos().abs();
    let (jac, pose) = jacobian_and_pose(model, q);
    let rows: Vec<usize> = (0..6).filter(|&r| model.task_rows[r]).collect();
    let cols = model.actuated_indices();
    let sub = DMatrix::from_fn(rows.len(), cols.len(), |r, c| jac[(rows[r], cols[c])]);
    let det = (&sub * sub.transpose()).determinant();
    let tracks_orientation = rows.iter().any(|&r| r >= 3);
    let ee_singular = tracks_orientation && pose.is_representation_singular(tol);
    SingularityReport {
        singular: base_cos < tol || ee_singular || !det.is_finite() || det < tol,
        det,
    }
}

/// Joint positions and velocities over the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPrediction {
    /// Row `i` is `q(j+i+1)`, `N` rows.
    pub angles: DMatrix<f64>,
    /// Row `i` is `q_dot(j+i)`, `Nu` rows.
    pub velocities: DMatrix<f64>,
}

/// Rolls velocity increments forward over the horizon.
///
/// `delta_v` has one row per increment (`Nu` rows); increments beyond the
/// control horizon are zero, so the last velocity is held until step `N`.
pub fn predict_joint_trajectory(
    q_j: &DVector<f64>,
    qdot_prev: &DVector<f64>,
    delta_v: &DMatrix<f64>,
    t: f64,
    horizon: usize,
) -> Result<JointPrediction> {
    let k = q_j.len();
    let nu = delta_v.nrows();
    if !(t > 0.0) {
        return Err(Error::parameter("t", "sampling period must be positive"));
    }
    if nu == 0 {
        return Err(Error::parameter("Nu", "control horizon must be at least 1"));
    }
    if horizon < nu {
        return Err(Error::parameter(
            "N",
            format!("prediction horizon {horizon} is shorter than control horizon {nu}"),
        ));
    }
    if qdot_prev.len() != k {
        return Err(Error::dimension("qdot_prev", k, qdot_prev.len()));
    }
    if delta_v.ncols() != k {
        return Err(Error::dimension("delta_v columns", k, delta_v.ncols()));
    }
    let mut velocities = DMatrix::zeros(nu, k);
    let mut acc = qdot_prev.transpose();
    for i in 0..nu {
        acc += delta_v.row(i);
        velocities.row_mut(i).copy_from(&acc);
    }
    let mut angles = DMatrix::zeros(horizon, k);
    for i in 1..=horizon {
        let mut row = q_j.transpose() + qdot_prev.transpose() * (i as f64 * t);
        for kk in 0..i.min(nu) {
            row += delta_v.row(kk) * ((i - kk) as f64 * t);
        }
        angles.row_mut(i - 1).copy_from(&row);
    }
    Ok(JointPrediction { angles, velocities })
}
