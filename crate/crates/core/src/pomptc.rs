//! Receding-horizon tracking QP over joint-velocity increments.
//!
//! Decision vector `z` is time-major: block `k` (length m') is the increment
//! applied at step `j+k`, for `k = 0..Nu`. Pose prediction is linearized about
//! the current configuration with the Jacobian held over the horizon.

use log::debug;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kinematics::{is_representation_singular, jacobian_and_pose, ConfigurationState, Pose};
use crate::model::RobotModel;
use crate::qp::{HorizonMeta, QpProblem};

/// Tolerance for refusing to linearize at a representation singularity.
pub const SINGULARITY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct PomptcWeights {
    /// 6x6 pose tracking weight.
    pub c_pose: DMatrix<f64>,
    /// m'xm' velocity weight.
    pub b_vel: DMatrix<f64>,
    /// m'xm' increment weight; positive definite.
    pub b_acc: DMatrix<f64>,
}

impl PomptcWeights {
    pub fn new(c_pose: DMatrix<f64>, b_vel: DMatrix<f64>, b_acc: DMatrix<f64>) -> Result<Self> {
        if c_pose.shape() != (6, 6) {
            return Err(Error::dimension("PomptcWeights.c_pose", 6, c_pose.nrows()));
        }
        let k = b_acc.nrows();
        if b_vel.shape() != (k, k) || b_acc.ncols() != k {
            return Err(Error::dimension("PomptcWeights.b_vel", k, b_vel.nrows()));
        }
        check_psd(&c_pose, "c_pose", false)?;
        check_psd(&b_vel, "b_vel", false)?;
        check_psd(&b_acc, "b_acc", true)?;
        Ok(PomptcWeights { c_pose, b_vel, b_acc })
    }

    /// Diagonal weights `diag(c_pose)`, `b_vel I`, `b_acc I` for `k` actuated DOFs.
    pub fn diagonal(c_pose: [f64; 6], b_vel: f64, b_acc: f64, k: usize) -> Result<Self> {
        PomptcWeights::new(
            DMatrix::from_diagonal(&DVector::from_row_slice(&c_pose)),
            DMatrix::identity(k, k) * b_vel,
            DMatrix::identity(k, k) * b_acc,
        )
    }

    pub fn actuated_count(&self) -> usize {
        self.b_acc.nrows()
    }
}

fn check_psd(m: &DMatrix<f64>, name: &str, strict: bool) -> Result<()> {
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::parameter(name, "weight must be symmetric"));
    }
    let min_eig = SymmetricEigen::new(m.clone()).eigenvalues.min();
    if strict && !(min_eig > 0.0) {
        return Err(Error::parameter(name, "weight must be positive definite"));
    }
    if min_eig < -1e-12 * scale {
        return Err(Error::parameter(name, "weight must be positive semidefinite"));
    }
    Ok(())
}

/// A position (or velocity) row loosened by the feasibility guard.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowRelaxation {
    pub row: usize,
    pub slack: f64,
}

#[derive(Clone, Debug)]
pub struct QpAssembly {
    pub problem: QpProblem,
    /// Cost at `z = 0`; `direct_cost(z) = 1/2 z'Sz + G'z + constant`.
    pub constant: f64,
    /// A point satisfying `Hz <= w` (after any relaxation).
    pub certificate: DVector<f64>,
    pub relaxations: Vec<RowRelaxation>,
}

/// Row offsets of the six constraint blocks in `H`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConstraintLayout {
    pub k: usize,
    pub n: usize,
    pub nu: usize,
}

impl ConstraintLayout {
    pub fn rows(&self) -> usize {
        (2 * self.n + 4 * self.nu) * self.k
    }
    pub fn pos_upper(&self, i: usize, a: usize) -> usize {
        i * self.k + a
    }
    pub fn pos_lower(&self, i: usize, a: usize) -> usize {
        (self.n + i) * self.k + a
    }
    pub fn vel_upper(&self, i: usize, a: usize) -> usize {
        (2 * self.n + i) * self.k + a
    }
    pub fn vel_lower(&self, i: usize, a: usize) -> usize {
        (2 * self.n + self.nu + i) * self.k + a
    }
    pub fn acc_upper(&self, i: usize, a: usize) -> usize {
        (2 * self.n + 2 * self.nu + i) * self.k + a
    }
    pub fn acc_lower(&self, i: usize, a: usize) -> usize {
        (2 * self.n + 3 * self.nu + i) * self.k + a
    }
    /// True for the position blocks.
    pub fn is_position_row(&self, row: usize) -> bool {
        row < 2 * self.n * self.k
    }
}

/// Linearized prediction shared by the assembly and the direct evaluator.
struct Linearization {
    actuated: Vec<usize>,
    j_act: DMatrix<f64>,
    /// Error offsets `c_i` (i = 1..N): tracking error with `z = 0`.
    offsets: Vec<DVector<f64>>,
    q_act: DVector<f64>,
    qdot_prev_act: DVector<f64>,
}

fn linearize(
    model: &RobotModel,
    state: &ConfigurationState,
    pose_refs: &[Pose],
    weights: &PomptcWeights,
    horizon: &HorizonMeta,
    preview: Option<&[DVector<f64>]>,
) -> Result<Linearization> {
    let m = model.dof();
    let HorizonMeta { t, n, nu } = *horizon;
    if !(t > 0.0) {
        return Err(Error::parameter("t", "sampling period must be positive"));
    }
    if nu == 0 || n < nu {
        return Err(Error::parameter(
            "N/Nu",
            format!("need N >= Nu >= 1, got N = {n}, Nu = {nu}"),
        ));
    }
    if state.q.len() != m {
        return Err(Error::dimension("state.q", m, state.q.len()));
    }
    if pose_refs.len() != n {
        return Err(Error::dimension("pose_refs", n, pose_refs.len()));
    }
    let actuated = model.actuated_indices();
    let k = actuated.len();
    if weights.actuated_count() != k {
        return Err(Error::dimension("PomptcWeights.b_acc", k, weights.actuated_count()));
    }
    if let Some(p) = preview {
        if p.len() != n {
            return Err(Error::dimension("base preview", n, p.len()));
        }
        if let Some(bad) = p.iter().find(|q| q.len() != m) {
            return Err(Error::dimension("base preview entry", m, bad.len()));
        }
    }
    let report = is_representation_singular(model, &state.q, SINGULARITY_TOL);
    if report.singular {
        return Err(Error::Singular(format!(
            "cannot linearize pose prediction (det(JJ^T) = {:.3e})",
            report.det
        )));
    }
    let (jac, pose) = jacobian_and_pose(model, &state.q);
    let j_act = jac.select_columns(&actuated);
    let q_act = DVector::from_iterator(k, actuated.iter().map(|&i| state.q[i]));
    let qdot_prev_act = DVector::from_iterator(k, actuated.iter().map(|&i| state.qdot_prev[i]));
    let drift = &j_act * &qdot_prev_act;
    let mut offsets = Vec::with_capacity(n);
    for i in 1..=n {
        let mut c = DVector::from_iterator(6, pose.error_from(&pose_refs[i - 1]).iter().copied());
        c += &drift * (i as f64 * t);
        if let Some(p) = preview {
            // exogenous DOFs follow the preview instead of being held
            let target = &p[i - 1];
            for col in 0..m {
                if !model.actuated_by_mpc[col] {
                    let dq = target[col] - state.q[col];
                    if dq != 0.0 {
                        c += jac.column(col) * dq;
                    }
                }
            }
        }
        offsets.push(c);
    }
    Ok(Linearization {
        actuated,
        j_act,
        offsets,
        q_act,
        qdot_prev_act,
    })
}

/// Builds `S, G, H, w` for the tracking problem at `state`.
///
/// `pose_refs[i]` is the reference at step `j+i+1`. Non-actuated DOFs are
/// held at their current value over the horizon.
pub fn assemble_qp(
    model: &RobotModel,
    state: &ConfigurationState,
    pose_refs: &[Pose],
    weights: &PomptcWeights,
    horizon: &HorizonMeta,
) -> Result<QpAssembly> {
    assemble_qp_with_preview(model, state, pose_refs, weights, horizon, None)
}

/// As [`assemble_qp`], with the scripted future configurations of the
/// non-actuated DOFs (`preview[i]` at step `j+i+1`, full m-vectors).
pub fn assemble_qp_with_preview(
    model: &RobotModel,
    state: &ConfigurationState,
    pose_refs: &[Pose],
    weights: &PomptcWeights,
    horizon: &HorizonMeta,
    preview: Option<&[DVector<f64>]>,
) -> Result<QpAssembly> {
    let lin = linearize(model, state, pose_refs, weights, horizon, preview)?;
    let HorizonMeta { t, n, nu } = *horizon;
    let k = lin.actuated.len();
    let dim = k * nu;

    let jcj = lin.j_act.tr_mul(&(&weights.c_pose * &lin.j_act));
    let mut s = DMatrix::zeros(dim, dim);
    let mut g = DVector::zeros(dim);
    let mut constant = 0.0;

    // tracking term: e_i = c_i + J_a sum_{k<min(i,Nu)} (i-k) t z_k
    for i in 1..=n {
        let c = &lin.offsets[i - 1];
        let cc = &weights.c_pose * c;
        constant += c.dot(&cc);
        let jcc = lin.j_act.tr_mul(&cc);
        let reach = i.min(nu);
        for a in 0..reach {
            let wa = (i - a) as f64 * t;
            let mut ga = g.rows_mut(a * k, k);
            ga += &jcc * (2.0 * wa);
            for b in 0..reach {
                let wb = (i - b) as f64 * t;
                let mut block = s.view_mut((a * k, b * k), (k, k));
                block += &jcj * (2.0 * wa * wb);
            }
        }
    }

    // velocity term: v_i = qdot_prev + sum_{k<=i} z_k, i = 0..Nu-1
    let b1v = &weights.b_vel * &lin.qdot_prev_act;
    for i in 0..nu {
        constant += lin.qdot_prev_act.dot(&b1v);
        for a in 0..=i {
            let mut ga = g.rows_mut(a * k, k);
            ga += &b1v * 2.0;
            for b in 0..=i {
                let mut block = s.view_mut((a * k, b * k), (k, k));
                block += &weights.b_vel * 2.0;
            }
        }
    }

    // increment term
    for a in 0..nu {
        let mut block = s.view_mut((a * k, a * k), (k, k));
        block += &weights.b_acc * 2.0;
    }
    s = (&s + s.transpose()) * 0.5;

    let layout = ConstraintLayout { k, n, nu };
    let (h, mut w) = box_constraints(model, &lin, &layout, t);

    let certificate = braking_certificate(model, &lin, nu, t);
    let hz = &h * &certificate;
    let residual = &hz - &w;
    let mut relaxations = Vec::new();
    for row in 0..residual.len() {
        if residual[row] > 0.0 {
            w[row] = hz[row];
            relaxations.push(RowRelaxation {
                row,
                slack: residual[row],
            });
            if layout.is_position_row(row) {
                debug!("feasibility guard relaxed position row {row} by {:.3e}", residual[row]);
            } else {
                debug!(
                    "feasibility guard relaxed velocity row {row} by {:.3e} (state outside velocity limits)",
                    residual[row]
                );
            }
        }
    }

    let problem = QpProblem::new(s, g, h, w)?.with_horizon(*horizon);
    Ok(QpAssembly {
        problem,
        constant,
        certificate,
        relaxations,
    })
}

fn box_constraints(
    model: &RobotModel,
    lin: &Linearization,
    layout: &ConstraintLayout,
    t: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let ConstraintLayout { k, n, nu } = *layout;
    let lim = &model.limits;
    let mut h = DMatrix::zeros(layout.rows(), k * nu);
    let mut w = DVector::zeros(layout.rows());
    for (a, &dof) in lin.actuated.iter().enumerate() {
        let q0 = lin.q_act[a];
        let v0 = lin.qdot_prev_act[a];
        for i in 1..=n {
            let base = q0 + i as f64 * t * v0;
            let (ru, rl) = (layout.pos_upper(i - 1, a), layout.pos_lower(i - 1, a));
            for kk in 0..i.min(nu) {
                let coef = (i - kk) as f64 * t;
                h[(ru, kk * k + a)] = coef;
                h[(rl, kk * k + a)] = -coef;
            }
            w[ru] = lim.q_upper[dof] - base;
            w[rl] = base - lim.q_lower[dof];
        }
        for i in 0..nu {
            let (ru, rl) = (layout.vel_upper(i, a), layout.vel_lower(i, a));
            for kk in 0..=i {
                h[(ru, kk * k + a)] = 1.0;
                h[(rl, kk * k + a)] = -1.0;
            }
            w[ru] = lim.qd_upper[dof] - v0;
            w[rl] = v0 - lim.qd_lower[dof];
            let (au, al) = (layout.acc_upper(i, a), layout.acc_lower(i, a));
            h[(au, i * k + a)] = 1.0;
            h[(al, i * k + a)] = -1.0;
            w[au] = t * lim.qdd_upper[dof];
            w[al] = -t * lim.qdd_lower[dof];
        }
    }
    (h, w)
}

/// Per-joint maximal braking within the increment bounds; satisfies the
/// velocity and increment rows whenever the current velocity allows it.
fn braking_certificate(model: &RobotModel, lin: &Linearization, nu: usize, t: f64) -> DVector<f64> {
    let k = lin.actuated.len();
    let mut z = DVector::zeros(k * nu);
    for (a, &dof) in lin.actuated.iter().enumerate() {
        let lo = t * model.limits.qdd_lower[dof];
        let hi = t * model.limits.qdd_upper[dof];
        let mut v = lin.qdot_prev_act[a];
        for i in 0..nu {
            let d = (-v).clamp(lo, hi);
            z[i * k + a] = d;
            v += d;
        }
    }
    z
}

/// Literal evaluation of the tracking, velocity and increment sums with the
/// same linearized pose prediction as [`assemble_qp`].
pub fn direct_cost(
    model: &RobotModel,
    state: &ConfigurationState,
    pose_refs: &[Pose],
    weights: &PomptcWeights,
    horizon: &HorizonMeta,
    z: &DVector<f64>,
) -> Result<f64> {
    direct_cost_with_preview(model, state, pose_refs, weights, horizon, None, z)
}

pub fn direct_cost_with_preview(
    model: &RobotModel,
    state: &ConfigurationState,
    pose_refs: &[Pose],
    weights: &PomptcWeights,
    horizon: &HorizonMeta,
    preview: Option<&[DVector<f64>]>,
    z: &DVector<f64>,
) -> Result<f64> {
    let lin = linearize(model, state, pose_refs, weights, horizon, preview)?;
    let HorizonMeta { t, n, nu } = *horizon;
    let k = lin.actuated.len();
    if z.len() != k * nu {
        return Err(Error::dimension("z", k * nu, z.len()));
    }
    let delta_v = DMatrix::from_fn(nu, k, |i, a| z[i * k + a]);
    let pred = crate::kinematics::predict_joint_trajectory(&lin.q_act, &lin.qdot_prev_act, &delta_v, t, n)?;
    let mut cost = 0.0;
    for i in 1..=n {
        let dq = pred.angles.row(i - 1).transpose() - &lin.q_act;
        let drift = &lin.j_act * &lin.qdot_prev_act * (i as f64 * t);
        // offsets already contain the drift of q_dot(j-1); remove it so the
        // prediction supplies the full displacement
        let e = &lin.offsets[i - 1] - drift + &lin.j_act * dq;
        cost += e.dot(&(&weights.c_pose * &e));
    }
    for i in 0..nu {
        let v = pred.velocities.row(i).transpose();
        cost += v.dot(&(&weights.b_vel * &v));
        let d = delta_v.row(i).transpose();
        cost += d.dot(&(&weights.b_acc * &d));
    }
    Ok(cost)
}

/// First m'-block of `z_star`, scattered into an m-vector.
pub fn extract_first_increment(z_star: &DVector<f64>, model: &RobotModel) -> DVector<f64> {
    let actuated = model.actuated_indices();
    let k = actuated.len();
    assert!(
        k > 0 && z_star.len() >= k && z_star.len() % k == 0,
        "z_star length {} is not a multiple of the actuated count {k}",
        z_star.len()
    );
    let mut out = DVector::zeros(model.dof());
    for (a, &dof) in actuated.iter().enumerate() {
        out[dof] = z_star[a];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::forward_kinematics;
    use crate::model::builtin_planar_two_link;
    use approx::assert_relative_eq;

    fn planar_state(q1: f64, q2: f64) -> ConfigurationState {
        let mut q = DVector::zeros(8);
        q[6] = q1;
        q[7] = q2;
        ConfigurationState::at_rest(q)
    }

    fn planar_weights(c: f64, b1: f64, b2: f64) -> PomptcWeights {
        PomptcWeights::diagonal([c, c, 0.0, 0.0, 0.0, 0.0], b1, b2, 2).unwrap()
    }

    #[test]
    fn increment_term_alone_gives_twice_identity() {
        let model = builtin_planar_two_link();
        let state = planar_state(0.3, 1.0);
        let horizon = HorizonMeta { t: 0.01, n: 3, nu: 2 };
        let refs = vec![forward_kinematics(&model, &state.q); 3];
        let asm = assemble_qp(&model, &state, &refs, &planar_weights(0.0, 0.0, 1.0), &horizon).unwrap();
        assert_relative_eq!(asm.problem.s, DMatrix::identity(4, 4) * 2.0);
        assert_eq!(asm.problem.g, DVector::zeros(4));
    }

    #[test]
    fn on_reference_at_rest_has_zero_linear_term() {
        let model = builtin_planar_two_link();
        let state = planar_state(0.3, 1.0);
        let horizon = HorizonMeta { t: 0.01, n: 5, nu: 5 };
        let refs = vec![forward_kinematics(&model, &state.q); 5];
        let weights = planar_weights(5e4, 1.0, 20.0);
        let asm = assemble_qp(&model, &state, &refs, &weights, &horizon).unwrap();
        assert!(asm.problem.g.amax() < 1e-12);
        let z0 = DVector::zeros(10);
        assert_eq!(direct_cost(&model, &state, &refs, &weights, &horizon, &z0).unwrap(), 0.0);
        assert!(asm.relaxations.is_empty());
    }

    #[test]
    fn direct_cost_of_increment_norm() {
        let model = builtin_planar_two_link();
        let state = planar_state(0.3, 1.0);
        let horizon = HorizonMeta { t: 0.01, n: 3, nu: 3 };
        let refs = vec![forward_kinematics(&model, &state.q); 3];
        let z = DVector::from_fn(6, |i, _| 0.1 * i as f64 - 0.2);
        let cost = direct_cost(&model, &state, &refs, &planar_weights(0.0, 0.0, 1.0), &horizon, &z).unwrap();
        assert_relative_eq!(cost, z.norm_squared(), epsilon = 1e-15);
    }

    #[test]
    fn first_increment_is_first_block() {
        let model = builtin_planar_two_link();
        let z = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = extract_first_increment(&z, &model);
        assert_eq!(d.len(), 8);
        assert_eq!((d[6], d[7]), (1.0, 2.0));
        assert_eq!(d.rows(0, 6).amax(), 0.0);
        let d1 = extract_first_increment(&z.rows(0, 2).into_owned(), &model);
        assert_eq!(d1, d);
        assert_eq!(extract_first_increment(&DVector::zeros(6), &model), DVector::zeros(8));
    }

    #[test]
    fn stretched_arm_is_rejected() {
        let model = builtin_planar_two_link();
        let state = planar_state(0.3, 0.0);
        let horizon = HorizonMeta { t: 0.01, n: 2, nu: 2 };
        let refs = vec![forward_kinematics(&model, &state.q); 2];
        let err = assemble_qp(&model, &state, &refs, &planar_weights(1.0, 1.0, 1.0), &horizon).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }

    #[test]
    fn short_reference_is_rejected() {
        let model = builtin_planar_two_link();
        let state = planar_state(0.3, 1.0);
        let horizon = HorizonMeta { t: 0.01, n: 4, nu: 2 };
        let refs = vec![forward_kinematics(&model, &state.q); 3];
        let err = assemble_qp(&model, &state, &refs, &planar_weights(1.0, 1.0, 1.0), &horizon).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn guard_relaxes_position_rows_near_limit() {
        let model = builtin_planar_two_link();
        let mut state = planar_state(2.999, 1.0);
        // moving outward at the velocity limit right below the position limit
        state.qdot_prev[6] = 3.0;
        state.qdot[6] = 3.0;
        let horizon = HorizonMeta { t: 0.01, n: 5, nu: 5 };
        let refs = vec![forward_kinematics(&model, &state.q); 5];
        let asm = assemble_qp(&model, &state, &refs, &planar_weights(1.0, 1.0, 1.0), &horizon).unwrap();
        assert!(!asm.relaxations.is_empty());
        let layout = ConstraintLayout { k: 2, n: 5, nu: 5 };
        assert!(asm.relaxations.iter().all(|r| layout.is_position_row(r.row)));
        assert!(asm.problem.max_violation(&asm.certificate) <= 0.0);
    }

    #[test]
    fn weights_must_be_definite() {
        assert!(PomptcWeights::diagonal([1.0; 6], 1.0, 0.0, 2).is_err());
        assert!(PomptcWeights::diagonal([-1.0, 1.0, 1.0, 1.0, 1.0, 1.0], 1.0, 1.0, 2).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(PomptcWeights::new(DMatrix::identity(6, 6), asym, DMatrix::identity(2, 2)).is_err());
    }
}
