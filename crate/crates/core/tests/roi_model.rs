use num_rational::Ratio;
use planloop_core::money::{DecimalInput, Exact};
use planloop_core::roi::{bundled_scenario, compute_roi, compute_roi_exact, Payback, RoiInputs};
use proptest::prelude::*;

fn q(n: i128) -> Exact {
    Ratio::from_integer(n)
}

#[test]
fn authority_a_outputs() {
    let inputs = RoiInputs::load(std::path::Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/config/roi/authorityA.toml"))).unwrap();
    assert_eq!(inputs, bundled_scenario("authorityA").unwrap());
    let out = compute_roi(&inputs);
    assert_eq!(out.annual_hours_saved.to_string(), "1000.00");
    assert_eq!(out.gross_benefit.to_string(), "40000.00");
    assert_eq!(out.net_benefit.to_string(), "20000.00");
    assert_eq!(out.payback_months.to_string(), "6.0");
    // 6000 apps x 20 docs x 30 s = 3.6e6 s = 1000 h; x £40 = £40k; less £20k
    // running cost leaves £20k, which repays £10k in half a year.
    let e = compute_roi_exact(&inputs);
    assert_eq!(e.annual_hours_saved, q(6000 * 20 * 30) / q(3600));
    assert_eq!(e.payback_months, Some(q(6)));
    let json = serde_json::to_value(&out).unwrap();
    assert_eq!(json["net_benefit"], "20000.00");
    assert_eq!(json["payback_months"], "6.0");
}

#[test]
fn unknown_fields_and_scenarios_are_rejected() {
    assert!(RoiInputs::from_toml("apps_per_year = 1\ndocs_per_app = 1\nofficer_hourly_cost = 1\nannual_system_cost = 0\none_off_cost = 0\ntraining = 5").is_err());
    assert!(bundled_scenario("authorityZ").is_none());
}

#[test]
fn costs_above_benefit_never_pay_back() {
    let mut i = bundled_scenario("authorityA").unwrap();
    i.annual_system_cost = DecimalInput(q(40_000));
    assert_eq!(compute_roi(&i).payback_months, Payback::Never);
    assert_eq!(compute_roi(&i).net_benefit.to_string(), "0.00");
}

fn inputs(apps: i128, docs: i128, secs: i128, hourly: i128, system: i128, one_off: i128) -> RoiInputs {
    RoiInputs {
        apps_per_year: DecimalInput(q(apps)),
        docs_per_app: DecimalInput(q(docs)),
        seconds_saved_per_doc: DecimalInput(q(secs)),
        officer_hourly_cost: DecimalInput(q(hourly)),
        annual_system_cost: DecimalInput(q(system)),
        one_off_cost: DecimalInput(q(one_off)),
        fte_annual_hours: DecimalInput(q(1650)),
    }
}

proptest! {
    #[test]
    fn doubling_apps_doubles_hours_and_gross(apps in 0i128..100_000, docs in 0i128..200, secs in 0i128..600, hourly in 0i128..200, system in 0i128..1_000_000) {
        let a = compute_roi_exact(&inputs(apps, docs, secs, hourly, system, 10_000));
        let b = compute_roi_exact(&inputs(2 * apps, docs, secs, hourly, system, 10_000));
        prop_assert_eq!(b.annual_hours_saved, a.annual_hours_saved * q(2));
        prop_assert_eq!(b.gross_benefit, a.gross_benefit * q(2));
        prop_assert_eq!(b.fte_unlocked, a.fte_unlocked * q(2));
    }

    #[test]
    fn net_is_non_increasing_in_system_cost(apps in 0i128..100_000, hourly in 0i128..200, c1 in 0i128..1_000_000, c2 in 0i128..1_000_000) {
        let (lo, hi) = (c1.min(c2), c1.max(c2));
        let a = compute_roi_exact(&inputs(apps, 20, 30, hourly, lo, 10_000));
        let b = compute_roi_exact(&inputs(apps, 20, 30, hourly, hi, 10_000));
        prop_assert!(b.net_benefit <= a.net_benefit);
        prop_assert!(compute_roi(&inputs(apps, 20, 30, hourly, hi, 10_000)).net_benefit.units <= compute_roi(&inputs(apps, 20, 30, hourly, lo, 10_000)).net_benefit.units);
    }
}
