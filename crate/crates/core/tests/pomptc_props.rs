use mmtrack::kinematics::{forward_kinematics, predict_joint_trajectory, ConfigurationState, Pose};
use mmtrack::model::{builtin_panda_on_base, RobotModel, PANDA_HOME};
use mmtrack::pomptc::{assemble_qp, PomptcWeights, QpAssembly};
use mmtrack::qp::HorizonMeta;
use mmtrack::qp_oracle::solve_exact;
use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector3};
use proptest::prelude::*;

const T: f64 = 0.01;

struct Case {
    model: RobotModel,
    state: ConfigurationState,
    refs: Vec<Pose>,
    horizon: HorizonMeta,
    weights: PomptcWeights,
}

fn case(arm_offset: &[f64], qd: &[f64], shift: &[f64], n: usize, nu: usize) -> Case {
    let model = builtin_panda_on_base();
    let mut q = DVector::zeros(13);
    let mut v = DVector::zeros(13);
    for i in 0..7 {
        q[6 + i] = PANDA_HOME[i] + arm_offset[i];
        v[6 + i] = qd[i];
    }
    let pose = forward_kinematics(&model, &q);
    let refs = (1..=n)
        .map(|i| {
            let mut p = pose;
            p.position += Vector3::new(shift[0], shift[1], shift[2]) * i as f64;
            p.orientation += Vector3::new(shift[3], shift[4], shift[5]) * i as f64;
            p
        })
        .collect();
    Case {
        weights: PomptcWeights::diagonal([50000.0; 6], 1.0, 20.0, 7).unwrap(),
        state: ConfigurationState::new(q, v.clone(), v).unwrap(),
        model,
        refs,
        horizon: HorizonMeta { t: T, n, nu },
    }
}

fn assemble(c: &Case) -> QpAssembly {
    assemble_qp(&c.model, &c.state, &c.refs, &c.weights, &c.horizon).unwrap()
}

/// Largest excess of the rolled-out angles, velocities and increment rates
/// over the actuated joint limits.
fn rollout_excess(c: &Case, z: &DVector<f64>) -> f64 {
    let (k, nu) = (7, c.horizon.nu);
    let q = c.state.q.rows(6, k).into_owned();
    let v = c.state.qdot_prev.rows(6, k).into_owned();
    let dv = DMatrix::from_row_slice(nu, k, z.as_slice());
    let pred = predict_joint_trajectory(&q, &v, &dv, T, c.horizon.n).unwrap();
    let l = &c.model.limits;
    let over = |x: f64, lo: f64, hi: f64| (lo - x).max(x - hi).max(0.0);
    let mut worst = 0.0_f64;
    for a in 0..k {
        let dof = 6 + a;
        for i in 0..c.horizon.n {
            worst = worst.max(over(pred.angles[(i, a)], l.q_lower[dof], l.q_upper[dof]));
        }
        for i in 0..nu {
            worst = worst.max(over(pred.velocities[(i, a)], l.qd_lower[dof], l.qd_upper[dof]));
            worst = worst.max(over(dv[(i, a)] / T, l.qdd_lower[dof], l.qdd_upper[dof]));
        }
    }
    worst
}

fn small() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-0.3f64..0.3, 7)
}

fn slow() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-0.5f64..0.5, 7)
}

fn shift() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-0.01f64..0.01, 6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feasible_increments_respect_every_limit(
        off in small(), qd in slow(), sh in shift(), nu in 1usize..5, extra in 0usize..3,
        dir in proptest::collection::vec(-1.0f64..1.0, 28), frac in 0.0f64..1.0,
    ) {
        let c = case(&off, &qd, &sh, nu + extra, nu);
        let asm = assemble(&c);
        prop_assume!(asm.relaxations.is_empty());
        let p = &asm.problem;
        let d = DVector::from_iterator(7 * nu, dir.iter().copied().take(7 * nu));
        let hd = &p.h * &d;
        let reach = (0..p.n_constraints())
            .filter(|&i| hd[i] > 0.0)
            .map(|i| p.w[i] / hd[i])
            .fold(f64::INFINITY, f64::min);
        let z = d * (frac * reach.min(1e3));
        prop_assert!(p.max_violation(&z) <= 1e-12);
        prop_assert!(rollout_excess(&c, &z) <= 1e-9);
    }

    #[test]
    fn violated_limits_show_up_in_the_rows(
        off in small(), qd in slow(), sh in shift(), nu in 1usize..5,
        z in proptest::collection::vec(-0.5f64..0.5, 28),
    ) {
        let c = case(&off, &qd, &sh, nu + 1, nu);
        let asm = assemble(&c);
        prop_assume!(asm.relaxations.is_empty());
        let z = DVector::from_iterator(7 * nu, z.into_iter().take(7 * nu));
        let excess = rollout_excess(&c, &z);
        let rows = asm.problem.max_violation(&z);
        prop_assert!(rows >= excess * T.min(1.0) - 1e-12, "rows {rows}, rollout {excess}");
    }

    #[test]
    fn hessian_is_symmetric_positive_definite(off in small(), qd in slow(), sh in shift(), nu in 1usize..6) {
        let c = case(&off, &qd, &sh, nu, nu);
        let s = &assemble(&c).problem.s;
        prop_assert!((s - s.transpose()).amax() <= 1e-12 * s.amax());
        let eig = SymmetricEigen::new(s.clone()).eigenvalues;
        prop_assert!(eig.min() > 0.0);
    }

    #[test]
    fn rigid_translation_leaves_problem_unchanged(
        off in small(), qd in slow(), sh in shift(), nu in 1usize..4,
        d in proptest::collection::vec(-0.5f64..0.5, 3),
    ) {
        let c = case(&off, &qd, &sh, nu + 1, nu);
        let mut moved = case(&off, &qd, &sh, nu + 1, nu);
        let d = Vector3::new(d[0], d[1], d[2]);
        for k in 0..3 {
            moved.state.q[k] += d[k];
        }
        for r in &mut moved.refs {
            r.position += d;
        }
        let (a, b) = (assemble(&c), assemble(&moved));
        prop_assert!((&a.problem.s - &b.problem.s).amax() <= 1e-12 * a.problem.s.amax());
        let (za, zb) = (solve_exact(&a.problem).unwrap().z, solve_exact(&b.problem).unwrap().z);
        prop_assert!((&za - &zb).amax() <= 1e-9 * (1.0 + za.amax()), "{za} vs {zb}");
    }
}
