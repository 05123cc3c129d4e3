//! Clearing checked against an independent merit-order oracle, plus the
//! optimality certificate on every result.

#[path = "support/oracle.rs"]
mod oracle;

use std::time::Instant;

use oracle::{oracle, random_instance};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zonemarket::clearing::{clear_market, dual_objective, kkt_residual};
use zonemarket::Error;

const REL: f64 = 1e-6;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REL * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn clearing_cost_matches_merit_order_oracle_on_200_instances() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (mut feasible, mut infeasible) = (0, 0);
    for i in 0..200 {
        let m = random_instance(&mut rng);
        match (clear_market(&m, None), oracle(&m)) {
            (Ok(r), Some(best)) => {
                assert!(close(r.total_cost, best), "instance {i}: lp {} oracle {best}\n{m:?}", r.total_cost);
                feasible += 1;
            }
            (Err(Error::Infeasible), None) => infeasible += 1,
            (r, o) => panic!("instance {i}: lp {:?} oracle {o:?}\n{m:?}", r.map(|r| r.total_cost)),
        }
    }
    assert!(feasible >= 120, "only {feasible} feasible instances");
    assert!(infeasible >= 1, "generator never produced an infeasible instance");
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn every_result_is_certified_and_dual_objective_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    while checked < 300 {
        let m = random_instance(&mut rng);
        for tb in [None, Some(0)] {
            let Ok(r) = clear_market(&m, tb) else { continue };
            let k = kkt_residual(&m, &r).unwrap();
            assert!(k.within(1e-6), "{k:?}\n{m:?}");
            // The tie-break stage fixes the cost, so strong duality holds for both.
            assert!(close(dual_objective(&m, &r.duals), r.total_cost), "{m:?}");
            checked += 1;
        }
    }
}

#[test]
fn tiebreak_never_changes_the_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..200 {
        let m = random_instance(&mut rng);
        let Ok(base) = clear_market(&m, None) else { continue };
        for n in 0..m.n_producers() {
            let r = clear_market(&m, Some(n)).unwrap();
            assert!(close(r.total_cost, base.total_cost));
            assert!(r.revenue[n] <= base.revenue[n] + 1e-6 * base.total_cost.max(1.0));
        }
    }
}

#[test]
fn benchmark_clears_at_marginal_bids_with_a_certificate() {
    let cfg = zonemarket::scenario::ScenarioConfig::benchmark();
    let m = zonemarket::scenario::build_benchmark(&cfg).unwrap();
    let r = clear_market(&m, None).unwrap();
    assert!(kkt_residual(&m, &r).unwrap().within(1e-6));
    assert!(close(oracle(&m).unwrap(), r.total_cost));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cost_scales_with_prices(seed in any::<u64>(), s in 0.1f64..10.0) {
        let m = random_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        if let Ok(r) = clear_market(&m, None) {
            let mut scaled = m.clone();
            for (p, l) in scaled.producers.iter_mut().zip(&mut scaled.ladders) {
                p.price_max *= s;
                l.bids.iter_mut().for_each(|b| b.price *= s);
            }
            let rs = clear_market(&scaled, None).unwrap();
            prop_assert!(close(rs.total_cost, s * r.total_cost));
        }
    }

    #[test]
    fn more_demand_never_costs_less(seed in any::<u64>(), z in 0usize..2, extra in 0.0f64..30.0) {
        let m = random_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let z = z.min(m.n_zones() - 1);
        let mut more = m.clone();
        more.zones[z].demand += extra;
        if let (Ok(a), Ok(b)) = (clear_market(&m, None), clear_market(&more, None)) {
            prop_assert!(b.total_cost >= a.total_cost - 1e-6 * a.total_cost.max(1.0));
        }
    }

    #[test]
    fn looser_export_limits_never_cost_more(seed in any::<u64>(), extra in 0.0f64..100.0) {
        let m = random_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut loose = m.clone();
        loose.zones.iter_mut().for_each(|z| z.export_limit += extra);
        if let Ok(a) = clear_market(&m, None) {
            let b = clear_market(&loose, None).unwrap();
            prop_assert!(b.total_cost <= a.total_cost + 1e-6 * a.total_cost.max(1.0));
        }
    }
}
