//! Arm rigid-body dynamics `M q'' + C q' + G = tau + tau_d + tau_b`.
//!
//! Everything is expressed in the arm-base frame. The base is exogenous: it
//! enters only through the gravity direction seen by the arm and the
//! inertial force of its linear acceleration.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::kinematics::{arm_frames, ArmFrames};
use crate::model::RobotModel;

/// Condition number above which the inertia matrix is rejected.
pub const MAX_INERTIA_CONDITION: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Environment {
    /// Gravity in the arm-base frame (m/s^2).
    pub gravity_base: Vector3<f64>,
    /// Linear acceleration of the base, arm-base frame (m/s^2).
    pub base_accel: Vector3<f64>,
}

impl Environment {
    /// Level, non-accelerating base.
    pub fn level(model: &RobotModel) -> Self {
        Environment {
            gravity_base: Vector3::from(model.gravity),
            base_accel: Vector3::zeros(),
        }
    }

    /// Base with world rotation `r_base` and world linear acceleration.
    pub fn moving(model: &RobotModel, r_base: &Matrix3<f64>, accel_world: &Vector3<f64>) -> Self {
        Environment {
            gravity_base: r_base.transpose() * Vector3::from(model.gravity),
            base_accel: r_base.transpose() * accel_world,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsTerms {
    pub m: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub g: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorState {
    /// `q_m - q_md`
    pub e1: DVector<f64>,
    /// `qdot_m - qdot_md`
    pub e2: DVector<f64>,
}

impl ErrorState {
    pub fn new(q_m: &DVector<f64>, qdot_m: &DVector<f64>, desired: &DesiredState) -> Self {
        ErrorState {
            e1: q_m - &desired.q,
            e2: qdot_m - &desired.qd,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DesiredState {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub qdd: DVector<f64>,
}

impl DesiredState {
    pub fn hold(q: DVector<f64>) -> Self {
        let n = q.len();
        DesiredState {
            q,
            qd: DVector::zeros(n),
            qdd: DVector::zeros(n),
        }
    }
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    w.cross_matrix()
}

fn to_dyn(m: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 3, m.as_slice())
}

/// Per-link Jacobians of the COM (linear) and body (angular) velocity.
struct LinkJacobians {
    jv: Vec<DMatrix<f64>>,
    jw: Vec<DMatrix<f64>>,
    inertia: Vec<Matrix3<f64>>,
}

fn link_jacobians(model: &RobotModel, frames: &ArmFrames) -> LinkJacobians {
    let n = model.arm_joint_count();
    let mut out = LinkJacobians {
        jv: Vec::with_capacity(n),
        jw: Vec::with_capacity(n),
        inertia: Vec::with_capacity(n),
    };
    for l in 0..n {
        let mut jv = DMatrix::zeros(3, n);
        let mut jw = DMatrix::zeros(3, n);
        for i in 0..=l {
            jv.fixed_view_mut::<3, 1>(0, i)
                .copy_from(&frames.point_velocity(i, &frames.com[l]));
            jw.fixed_view_mut::<3, 1>(0, i).copy_from(&frames.omega[i]);
        }
        let r = frames.link_rotation[l];
        let principal = Matrix3::from_diagonal(&Vector3::from(model.links[l].inertia));
        out.jv.push(jv);
        out.jw.push(jw);
        out.inertia.push(r * principal * r.transpose());
    }
    out
}

fn mass_matrix_from(model: &RobotModel, jac: &LinkJacobians) -> DMatrix<f64> {
    let n = model.arm_joint_count();
    let mut m = DMatrix::zeros(n, n);
    for l in 0..n {
        let mass = model.links[l].mass;
        m += jac.jv[l].tr_mul(&jac.jv[l]) * mass;
        m += jac.jw[l].tr_mul(&(to_dyn(&jac.inertia[l]) * &jac.jw[l]));
    }
    (&m + m.transpose()) * 0.5
}

pub fn mass_matrix(model: &RobotModel, q_m: &DVector<f64>) -> DMatrix<f64> {
    let frames = arm_frames(model, q_m.as_slice());
    mass_matrix_from(model, &link_jacobians(model, &frames))
}

/// `dM/dq_k` for every `k`, from the screw-axis derivatives
/// `d omega_i / dq_k = omega_k x omega_i`,
/// `d v_i / dq_k = omega_k x v_i + v_k x omega_i` (for `k < i`).
fn mass_matrix_partials(model: &RobotModel, frames: &ArmFrames, jac: &LinkJacobians) -> Vec<DMatrix<f64>> {
    let n = model.arm_joint_count();
    let (om, vv) = (&frames.omega, &frames.v);
    let mut partials = Vec::with_capacity(n);
    for k in 0..n {
        let mut dm = DMatrix::zeros(n, n);
        let wk = om[k];
        let vk = vv[k];
        for l in k..n {
            let mass = model.links[l].mass;
            let c = frames.com[l];
            let dc = wk.cross(&c) + vk;
            let mut djv = DMatrix::zeros(3, n);
            let mut djw = DMatrix::zeros(3, n);
            for i in 0..=l {
                let (dwi, dvi) = if k < i {
                    (wk.cross(&om[i]), wk.cross(&vv[i]) + vk.cross(&om[i]))
                } else {
                    (Vector3::zeros(), Vector3::zeros())
                };
                let col = dwi.cross(&c) + om[i].cross(&dc) + dvi;
                djv.fixed_view_mut::<3, 1>(0, i).copy_from(&col);
                djw.fixed_view_mut::<3, 1>(0, i).copy_from(&dwi);
            }
            let lin = djv.tr_mul(&jac.jv[l]) * mass;
            dm += &lin + lin.transpose();
            let inertia = jac.inertia[l];
            let di = skew(&wk) * inertia - inertia * skew(&wk);
            let cross = djw.tr_mul(&(to_dyn(&inertia) * &jac.jw[l]));
            dm += &cross + cross.transpose();
            dm += jac.jw[l].tr_mul(&(to_dyn(&di) * &jac.jw[l]));
        }
        partials.push(dm);
    }
    partials
}

fn coriolis_from(partials: &[DMatrix<f64>], qdot: &DVector<f64>) -> DMatrix<f64> {
    let n = qdot.len();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut sum = 0.0;
            for k in 0..n {
                sum += 0.5 * (partials[k][(i, j)] + partials[j][(i, k)] - partials[i][(j, k)]) * qdot[k];
            }
            c[(i, j)] = sum;
        }
    }
    c
}

/// Generalized force of a uniform acceleration field `field` acting on every
/// link mass: `sum_l m_l Jv_l' field`.
fn field_torque(model: &RobotModel, jac: &LinkJacobians, field: &Vector3<f64>) -> DVector<f64> {
    let n = model.arm_joint_count();
    let mut tau = DVector::zeros(n);
    for l in 0..n {
        tau += jac.jv[l].tr_mul(&DVector::from_column_slice(field.as_slice())) * model.links[l].mass;
    }
    tau
}

/// `M`, Christoffel `C` and `G` for a level base.
pub fn dynamics_terms(model: &RobotModel, q_m: &DVector<f64>, qdot_m: &DVector<f64>) -> DynamicsTerms {
    dynamics_terms_in(model, q_m, qdot_m, &Environment::level(model))
}

pub fn dynamics_terms_in(
    model: &RobotModel,
    q_m: &DVector<f64>,
    qdot_m: &DVector<f64>,
    env: &Environment,
) -> DynamicsTerms {
    let n = model.arm_joint_count();
    assert_eq!(q_m.len(), n, "q_m length must equal the arm joint count");
    assert_eq!(qdot_m.len(), n, "qdot_m length must equal the arm joint count");
    let frames = arm_frames(model, q_m.as_slice());
    let jac = link_jacobians(model, &frames);
    let m = mass_matrix_from(model, &jac);
    let partials = mass_matrix_partials(model, &frames, &jac);
    let c = coriolis_from(&partials, qdot_m);
    // potential -sum m g'c_l, so G = -sum m Jv' g
    let g = -field_torque(model, &jac, &env.gravity_base);
    DynamicsTerms { m, c, g }
}

/// Joint torque of the inertial (d'Alembert) force `-m_l a_b` that the
/// accelerating base exerts on every link.
pub fn base_disturbance_torque(model: &RobotModel, q_m: &DVector<f64>, a_b: &Vector3<f64>) -> DVector<f64> {
    let frames = arm_frames(model, q_m.as_slice());
    let jac = link_jacobians(model, &frames);
    -field_torque(model, &jac, a_b)
}

/// Symmetric-eigenvalue condition number of `m`.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn factor_inertia(m: &DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let cond = condition_number(m);
    if !(cond <= MAX_INERTIA_CONDITION) {
        return Err(Error::IllConditioned { condition: cond });
    }
    Cholesky::new(m.clone()).ok_or(Error::IllConditioned { condition: cond })
}

/// `q'' = M^-1 (tau + tau_d + tau_b - C q' - G)`.
pub fn forward_dynamics(
    model: &RobotModel,
    q_m: &DVector<f64>,
    qdot_m: &DVector<f64>,
    tau: &DVector<f64>,
    tau_d: &DVector<f64>,
    tau_b: &DVector<f64>,
) -> Result<DVector<f64>> {
    forward_dynamics_in(model, q_m, qdot_m, tau, tau_d, tau_b, &Environment::level(model))
}

pub fn forward_dynamics_in(
    model: &RobotModel,
    q_m: &DVector<f64>,
    qdot_m: &DVector<f64>,
    tau: &DVector<f64>,
    tau_d: &DVector<f64>,
    tau_b: &DVector<f64>,
    env: &Environment,
) -> Result<DVector<f64>> {
    let terms = dynamics_terms_in(model, q_m, qdot_m, env);
    let chol = factor_inertia(&terms.m)?;
    let rhs = tau + tau_d + tau_b - &terms.c * qdot_m - &terms.g;
    Ok(chol.solve(&rhs))
}

/// Tracking-error dynamics `e2' = F + M^-1 (tau + tau_d + tau_b)` with
/// `F = -M^-1 (C q' + G) - q''_md`.
#[derive(Clone, Debug)]
pub struct ErrorDynamics {
    pub terms: DynamicsTerms,
    pub f_term: DVector<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl ErrorDynamics {
    pub fn apply(&self, tau: &DVector<f64>, tau_d: &DVector<f64>, tau_b: &DVector<f64>) -> DVector<f64> {
        &self.f_term + self.chol.solve(&(tau + tau_d + tau_b))
    }

    pub fn m_inv_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(x)
    }
}

pub fn error_dynamics_terms(
    model: &RobotModel,
    q_m: &DVector<f64>,
    qdot_m: &DVector<f64>,
    desired: &DesiredState,
    env: &Environment,
) -> Result<ErrorDynamics> {
    let terms = dynamics_terms_in(model, q_m, qdot_m, env);
    let chol = factor_inertia(&terms.m)?;
    let f_term = -chol.solve(&(&terms.c * qdot_m + &terms.g)) - &desired.qdd;
    Ok(ErrorDynamics { terms, f_term, chol })
}

/// Kinetic energy `1/2 q'^T M q'`.
pub fn kinetic_energy(model: &RobotModel, q_m: &DVector<f64>, qdot_m: &DVector<f64>) -> f64 {
    0.5 * qdot_m.dot(&(mass_matrix(model, q_m) * qdot_m))
}
