use mmtrack::kinematics::{base_pose, forward_kinematics, geometric_jacobian, predict_joint_trajectory, rotation_zyx, wrap_angle};
use mmtrack::model::{builtin_panda_on_base, PANDA_Q_LOWER, PANDA_Q_UPPER};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn panda_q(base: &[f64], arm: &[f64]) -> DVector<f64> {
    DVector::from_iterator(13, base.iter().chain(arm.iter()).copied())
}

fn arm_strategy() -> impl Strategy<Value = Vec<f64>> {
    (0..7)
        .map(|i| PANDA_Q_LOWER[i]..PANDA_Q_UPPER[i])
        .collect::<Vec<_>>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn jacobian_vector_product_matches_directional_difference(
        base in proptest::collection::vec(-0.8f64..0.8, 6),
        arm in arm_strategy(),
        u in proptest::collection::vec(-1.0f64..1.0, 13),
    ) {
        let model = builtin_panda_on_base();
        let q = panda_q(&base, &arm);
        let u = DVector::from_vec(u);
        let pose = forward_kinematics(&model, &q);
        prop_assume!(pose.orientation[1].cos().abs() > 0.1);
        let jv = geometric_jacobian(&model, &q) * &u;
        let eps = 1e-6;
        let (pp, pm) = (forward_kinematics(&model, &(&q + &u * eps)), forward_kinematics(&model, &(&q - &u * eps)));
        let mut fd = DVector::zeros(6);
        for k in 0..3 {
            fd[k] = (pp.position[k] - pm.position[k]) / (2.0 * eps);
            fd[3 + k] = wrap_angle(pp.orientation[k] - pm.orientation[k]) / (2.0 * eps);
        }
        prop_assert!((&jv - &fd).amax() <= 1e-6 * jv.amax().max(1.0), "J u = {jv}, fd = {fd}");
    }

    #[test]
    fn prediction_superposes(
        q in proptest::collection::vec(-2.0f64..2.0, 3),
        a in proptest::collection::vec(-1.0f64..1.0, 3),
        b in proptest::collection::vec(-1.0f64..1.0, 3),
        d1 in proptest::collection::vec(-0.5f64..0.5, 9),
        d2 in proptest::collection::vec(-0.5f64..0.5, 9),
        extra in 0usize..4,
    ) {
        let (nu, t) = (3, 0.01);
        let n = nu + extra;
        let q = DVector::from_vec(q);
        let (a, b) = (DVector::from_vec(a), DVector::from_vec(b));
        let (d1, d2) = (DMatrix::from_row_slice(nu, 3, &d1), DMatrix::from_row_slice(nu, 3, &d2));
        let zero = DVector::zeros(3);
        let both = predict_joint_trajectory(&q, &(&a + &b), &(&d1 + &d2), t, n).unwrap();
        let first = predict_joint_trajectory(&q, &a, &d1, t, n).unwrap();
        let second = predict_joint_trajectory(&zero, &b, &d2, t, n).unwrap();
        prop_assert!((&both.angles - (&first.angles + &second.angles)).amax() < 1e-12);
        prop_assert!((&both.velocities - (&first.velocities + &second.velocities)).amax() < 1e-12);
    }

    #[test]
    fn base_joints_reproduce_commanded_pose(
        base in proptest::collection::vec(-1.0f64..1.0, 6),
        arm in arm_strategy(),
    ) {
        let q = panda_q(&base, &arm);
        let pose = base_pose(&q);
        prop_assert_eq!(pose.position.as_slice(), &base[0..3]);
        prop_assert_eq!(pose.orientation.as_slice(), &base[3..6]);
        let r = rotation_zyx(base[3], base[4], base[5]);
        prop_assert!((pose.rotation() - r).amax() < 1e-15);
    }
}
