use zonemarket::clearing::clear_market;
use zonemarket::scenario::{build_benchmark, ScenarioConfig};
use zonemarket_wasm::{clear, coupling_curve, revenue_curve, ClearRequest};

#[test]
fn default_request_clears_the_benchmark_at_marginal_bids() {
    let out = clear(&ClearRequest::default()).unwrap();
    let m = build_benchmark(&ScenarioConfig::benchmark()).unwrap();
    let want = clear_market(&m, None).unwrap().total_cost;
    assert!((out.total_cost - want).abs() < 1e-6);
    let accepted: f64 = out.producers.iter().map(|p| p.accepted_mw).sum();
    assert!((accepted - (2103.0 + 225.0)).abs() < 1e-6);
    assert_eq!(out.producers.len(), 8);
}

#[test]
fn request_fields_are_checked() {
    let bad = ClearRequest { demand: Some(vec![1.0]), ..Default::default() };
    assert!(clear(&bad).unwrap_err().contains("demand"));
    let infeasible = ClearRequest { demand: Some(vec![1e5, 200.0]), ..Default::default() };
    assert!(clear(&infeasible).is_err());
}

#[test]
fn revenue_curve_spans_the_price_box() {
    let c = revenue_curve(&ClearRequest::default(), 6, 9).unwrap();
    assert_eq!(c.len(), 9);
    assert_eq!(c[0].price, 8.0);
    assert_eq!(c[8].price, 100.0);
    // The dearest German producer is only needed for demand the others cannot
    // cover, so overbidding never loses volume it did not already lose.
    assert!(c.windows(2).all(|w| w[1].accepted_mw <= w[0].accepted_mw + 1e-6));
    assert!(revenue_curve(&ClearRequest::default(), 99, 3).is_err());
}

#[test]
fn coupling_curve_has_one_point_per_step() {
    let c = coupling_curve(2.0, 3, 0.04).unwrap();
    assert_eq!(c.iter().map(|p| p.c_g).collect::<Vec<_>>(), vec![0.0, 1.0, 2.0]);
    assert!(c.iter().all(|p| p.zone_costs.len() == 2 && p.zone_costs.iter().all(|v| *v > 0.0)));
}
