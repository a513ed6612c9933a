use mmtrack::dynamics::{dynamics_terms, forward_dynamics, DesiredState, Environment, ErrorState};
use mmtrack::model::{builtin_planar_two_link, planar_chain};
use mmtrack::nftsm::{control_torque, sliding_surface, NftsmParams};
use nalgebra::DVector;
use proptest::prelude::*;

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn sgn_pow(x: f64, p: f64) -> f64 {
    x.signum() * x.abs().powf(p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Sinusoidal disturbance, large initial error: V = s's/2 falls at every
    /// sample outside the layer where c1 |s_i|^r3 dominates the disturbance
    /// acceleration `M^-1 tau_d`.
    #[test]
    fn lyapunov_decreases_outside_the_boundary_layer(
        off in proptest::collection::vec(0.3f64..0.8, 2),
        signs in proptest::collection::vec(any::<bool>(), 2),
        amp in 0.0f64..0.03,
    ) {
        let model = builtin_planar_two_link();
        let params = NftsmParams::default();
        let env = Environment::level(&model);
        let target = v(&[0.4, 0.9]);
        let desired = DesiredState::hold(target.clone());
        let sign = |b: bool| if b { 1.0 } else { -1.0 };
        let mut q = &target + v(&[sign(signs[0]) * off[0], sign(signs[1]) * off[1]]);
        let mut qd = DVector::zeros(2);
        let zero = DVector::zeros(2);
        let dt = 1e-3;
        let mut v_prev: Option<(f64, bool)> = None;
        let mut checked = 0;
        for k in 0..3000 {
            let t = k as f64 * dt;
            let out = control_torque(&model, &q, &qd, &desired, &params, &env, false).unwrap();
            let d = &out.diagnostics;
            if !d.outside_boundary_layer() {
                break;
            }
            let tau_d = v(&[amp * (3.0 * t).sin(), -amp * (2.0 * t).cos()]);
            let m = dynamics_terms(&model, &q, &qd).m;
            let dist = m.lu().solve(&tau_d).unwrap();
            let dominated = (0..2).all(|i| params.c1 * d.s[i].abs().powf(params.r3) > dist[i].abs());
            if let Some((prev, true)) = v_prev {
                prop_assert!(d.v < prev, "V rose from {prev} to {} at t = {t}", d.v);
                checked += 1;
            }
            v_prev = Some((d.v, dominated));
            let acc = |q: &DVector<f64>, qd: &DVector<f64>| forward_dynamics(&model, q, qd, &out.tau, &tau_d, &zero).unwrap();
            let k1 = (qd.clone(), acc(&q, &qd));
            let k2 = (&qd + &k1.1 * (dt / 2.0), acc(&(&q + &k1.0 * (dt / 2.0)), &(&qd + &k1.1 * (dt / 2.0))));
            let k3 = (&qd + &k2.1 * (dt / 2.0), acc(&(&q + &k2.0 * (dt / 2.0)), &(&qd + &k2.1 * (dt / 2.0))));
            let k4 = (&qd + &k3.1 * dt, acc(&(&q + &k3.0 * dt), &(&qd + &k3.1 * dt)));
            q += (&k1.0 + &k2.0 * 2.0 + &k3.0 * 2.0 + &k4.0) * (dt / 6.0);
            qd += (&k1.1 + &k2.1 * 2.0 + &k3.1 * 2.0 + &k4.1) * (dt / 6.0);
        }
        prop_assert!(checked > 10);
    }

    /// With alpha and delta near zero the law is the classical terminal
    /// sliding-mode controller `s = e1 + beta sig(e2)^r2`.
    #[test]
    fn vanishing_alpha_and_layer_give_classical_terminal_sliding_mode(
        q in -1.5f64..1.5,
        e1 in prop_oneof![-0.5f64..-0.01, 0.01f64..0.5],
        e2 in prop_oneof![-1.0f64..-0.01, 0.01f64..1.0],
        qdd_d in -1.0f64..1.0,
        r3 in 0.5f64..1.0,
    ) {
        let model = planar_chain(&[0.6], &[1.5]);
        let params = NftsmParams { alpha: 1e-14, delta: 1e-12, r3, ..NftsmParams::default() };
        let env = Environment::level(&model);
        let desired = DesiredState { q: v(&[q - e1]), qd: v(&[0.3 - e2]), qdd: v(&[qdd_d]) };
        let (qm, qdm) = (v(&[q]), v(&[0.3]));
        let s = params.beta * sgn_pow(e2, params.r2) + e1;
        let surface = sliding_surface(&ErrorState::new(&qm, &qdm, &desired), &params)[0];
        prop_assert!((surface - s).abs() <= 1e-12);
        prop_assume!(s.abs() > 1e-6);

        let terms = dynamics_terms(&model, &qm, &qdm);
        let m = terms.m[(0, 0)];
        let f = -(terms.c[(0, 0)] * 0.3 + terms.g[0]) / m - qdd_d;
        let classical = -m
            * (f + sgn_pow(e2, 2.0 - params.r2) / (params.beta * params.r2)
                + params.c1 * sgn_pow(s, params.r3)
                + params.c2 * s);
        let tau = control_torque(&model, &qm, &qdm, &desired, &params, &env, false).unwrap().tau[0];
        prop_assert!((tau - classical).abs() <= 1e-8 * classical.abs().max(1.0), "{tau} vs {classical}");
    }
}

/// On `s = 0` the error obeys `e1' = -sig((|e1| + alpha |e1|^r1) / beta)^(1/r2)`.
fn surface_reaching_time(alpha: f64, e0: f64) -> f64 {
    let params = NftsmParams { alpha, ..NftsmParams::default() };
    let rate = |e: f64| -e.signum() * ((e.abs() + alpha * e.abs().powf(params.r1)) / params.beta).powf(1.0 / params.r2);
    let (mut e, mut t, dt) = (e0, 0.0, 1e-5);
    while e.abs() > 1e-9 {
        // the surface relation must hold along the way while outside the layer
        if e.abs() > params.delta {
            let err = ErrorState { e1: v(&[e]), e2: v(&[rate(e)]) };
            let s = sliding_surface(&err, &params)[0];
            assert!(s.abs() < 1e-12 * (1.0 + e.abs()), "s = {s} at e1 = {e}");
        }
        let k1 = rate(e);
        let k2 = rate(e + 0.5 * dt * k1);
        let k3 = rate(e + 0.5 * dt * k2);
        let k4 = rate(e + dt * k3);
        let next = e + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if next.signum() != e.signum() {
            return t + dt * e.abs() / (e - next).abs();
        }
        e = next;
        t += dt;
        assert!(t < 100.0, "no finite-time arrival");
    }
    t
}

#[test]
fn surface_dynamics_arrive_in_finite_time_faster_with_alpha() {
    let e0: f64 = 0.5;
    let r2 = NftsmParams::default().r2;
    // alpha = 0: e' = -e^(1/r2)  =>  T = e0^(1 - 1/r2) / (1 - 1/r2)
    let closed_form = e0.powf(1.0 - 1.0 / r2) / (1.0 - 1.0 / r2);
    let t0 = surface_reaching_time(0.0, e0);
    assert!((t0 - closed_form).abs() < 1e-3 * closed_form, "{t0} vs {closed_form}");
    let times: Vec<f64> = [0.5, 1.0, 2.0, 4.0].iter().map(|&a| surface_reaching_time(a, e0)).collect();
    assert!(times[0] < t0);
    for w in times.windows(2) {
        assert!(w[1] < w[0], "{times:?}");
    }
}
