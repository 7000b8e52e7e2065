use proptest::prelude::*;
use ratescale::controller::{drift, integrate_rate, DriftInput, IdlePath};
use ratescale::cost::{CostCurve, CostModel};

fn quadratic(beta: f64) -> CostModel {
    CostModel::inverse_quadratic(beta, 0.5, 3.0)
}

fn shifted_power(beta: f64, exponent: f64) -> CostModel {
    CostModel::new(
        CostCurve::InverseShifted,
        CostCurve::Power { beta, exponent },
        0.05,
        20.0,
        None,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimum_minimizes_on_grid(beta in 0.02f64..0.5, lambda in 0.2f64..1.5) {
        let model = CostModel::inverse_quadratic(beta, 0.05, 20.0);
        let res = model.solve_mu_star(lambda).unwrap();
        let obj = |mu: f64| lambda * model.g(mu) + model.h(mu);
        let best = (1..=4000)
            .map(|i| 20.0 * i as f64 / 4000.0)
            .map(obj)
            .fold(f64::INFINITY, f64::min);
        prop_assert!(res.objective_value <= best + 1e-12,
            "objective {} above grid minimum {}", res.objective_value, best);
        prop_assert!(res.first_order_residual <= 1e-9);
    }

    #[test]
    fn optimum_exceeds_lambda(beta in 0.001f64..0.02, p in 2.0f64..4.0, lambda in 0.2f64..1.5) {
        let model = shifted_power(beta, p);
        let report = model.validate_with_grid(lambda, 500).unwrap();
        prop_assume!(report.check(ratescale::cost::Assumption::Stability).passed);
        let res = model.solve_mu_star(lambda).unwrap();
        prop_assert!(res.mu_star > lambda, "mu* {} <= lambda {}", res.mu_star, lambda);
    }

    #[test]
    fn cost_monotone_in_inputs(
        s in 0.2f64..5.0,
        bump in 0.01f64..1.0,
        rates in prop::collection::vec(0.1f64..3.0, 1..20),
        idx in any::<prop::sample::Index>(),
    ) {
        let model = quadratic(0.1);
        let base = model.evaluate_cost(0.8, s, &rates).unwrap();
        // longer sojourn means slower effective rate, hence higher g
        prop_assert!(model.evaluate_cost(0.8, s + bump, &rates).unwrap() > base);
        let mut up = rates.clone();
        let k = idx.index(up.len());
        up[k] += bump;
        prop_assert!(model.evaluate_cost(0.8, s, &up).unwrap() > base);
    }

    #[test]
    fn drift_non_positive_at_top(idle in 0.0f64..1e3, m in 0.1f64..1e3) {
        let model = quadratic(0.1);
        let d = drift(&model, DriftInput { mu: model.mu_plus, idle_obs: idle, m });
        prop_assert!(d <= 0.0, "drift {} at mu_plus", d);
    }

    #[test]
    fn drift_non_negative_at_bottom(lambda in 0.2f64..1.5, frac in 0.0f64..=1.0, m in 0.1f64..1e3) {
        let model = quadratic(0.1);
        let idle = frac / lambda;
        let d = drift(&model, DriftInput { mu: model.mu_minus, idle_obs: idle, m });
        prop_assert!(d >= 0.0, "drift {} at mu_minus with I = {}", d, idle);
    }

    #[test]
    fn drift_continuous_to_zero(idle in 0.0f64..10.0) {
        let model = shifted_power(0.01, 2.0);
        let at0 = drift(&model, DriftInput { mu: 0.0, idle_obs: idle, m: 1.0 });
        let near = drift(&model, DriftInput { mu: 1e-9, idle_obs: idle, m: 1.0 });
        prop_assert!((at0 - near).abs() < 1e-7);
    }

    #[test]
    fn integration_stays_in_box(
        mu0 in 0.0f64..=3.0,
        start in 0.0f64..50.0,
        busy in any::<bool>(),
        m in 0.5f64..500.0,
    ) {
        let model = CostModel::new(
            CostCurve::InverseShifted,
            CostCurve::Power { beta: 0.05, exponent: 2.0 },
            0.05,
            3.0,
            None,
        ).unwrap();
        let mut mu = mu0;
        let mut path = if busy { IdlePath::Frozen(start) } else { IdlePath::Growing { start } };
        for _ in 0..200 {
            let step = integrate_rate(&model, mu, path, m, 0.1).unwrap();
            mu = step.rate;
            prop_assert!((0.0..=model.mu_plus).contains(&mu));
            path = path.shifted(0.1);
        }
    }
}
