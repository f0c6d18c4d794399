use ctxmarket::ces::{self, BuyerProblem, CesSpec};
use proptest::prelude::*;

fn regime() -> impl Strategy<Value = CesSpec> {
    prop_oneof![
        Just(CesSpec::Linear),
        Just(CesSpec::CobbDouglas),
        Just(CesSpec::Leontief),
        (-3.0f64..0.95).prop_filter("nonzero", |a| a.abs() > 1e-3).prop_map(|a| CesSpec::general(a).unwrap()),
    ]
}

fn problem() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
    (1usize..=6)
        .prop_flat_map(|m| (prop::collection::vec(0.05f64..5.0, m), prop::collection::vec(0.1f64..5.0, m), 0.1f64..5.0))
}

proptest! {
    #[test]
    fn demand_spends_the_budget(spec in regime(), (values, prices, budget) in problem()) {
        let x = ces::demand(&BuyerProblem::new(&values, budget, &prices).unwrap(), spec);
        let spent: f64 = x.iter().zip(&prices).map(|(x, p)| x * p).sum();
        prop_assert!((spent - budget).abs() <= 1e-10 * budget);
        prop_assert!(x.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn demand_is_linear_in_budget(spec in regime(), (values, prices, budget) in problem(), scale in 0.1f64..10.0) {
        let x = ces::demand(&BuyerProblem::new(&values, budget, &prices).unwrap(), spec);
        let y = ces::demand(&BuyerProblem::new(&values, scale * budget, &prices).unwrap(), spec);
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((scale * a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn fixed_price_utility_matches_demand(spec in regime(), (values, prices, budget) in problem()) {
        let problem = BuyerProblem::new(&values, budget, &prices).unwrap();
        let x = ces::demand(&problem, spec);
        let u = ces::utility(&values, &x, spec).unwrap();
        let best = ces::fixed_price_log_utility(&problem, spec).exp();
        prop_assert!((u - best).abs() <= 1e-8 * best);
    }

    #[test]
    fn log_utility_is_log_of_utility(spec in regime(), (values, bundle, _b) in problem()) {
        let u = ces::utility(&values, &bundle, spec).unwrap();
        let lu = ces::log_utility(&values, &bundle, spec).unwrap();
        prop_assert!((lu - u.ln()).abs() <= 1e-12 * (1.0 + lu.abs()));
    }
}

#[test]
fn named_regimes_parse() {
    for (text, spec) in [
        ("linear", CesSpec::Linear),
        ("1", CesSpec::Linear),
        ("cobb-douglas", CesSpec::CobbDouglas),
        ("0", CesSpec::CobbDouglas),
        ("leontief", CesSpec::Leontief),
    ] {
        assert_eq!(text.parse::<CesSpec>().unwrap(), spec, "{text}");
    }
    assert!("1.5".parse::<CesSpec>().is_err());
}
