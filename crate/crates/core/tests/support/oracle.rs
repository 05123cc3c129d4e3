//! Independent clearing oracle shared by the clearing tests and the
//! acceptance suite.
//!
//! With at most two zones the program collapses to one scalar: the net flow
//! `t` from zone 0 to zone 1. Each zone then buys `D_0 + t` and `D_1 - t`
//! along its own merit order, so the cost is convex piecewise linear in `t`
//! and its minimum sits at an interval end or a merit-order breakpoint. The
//! oracle enumerates all of those points.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use zonemarket::market::{Bid, BidLadder, MarketInstance, Producer, Zone};

/// At most two zones, three producers and two bids each.
pub fn random_instance(rng: &mut ChaCha8Rng) -> MarketInstance {
    let nz = rng.random_range(1..=2);
    let np = rng.random_range(1..=3);
    let mut producers = Vec::new();
    let mut ladders = Vec::new();
    for n in 0..np {
        let nb = rng.random_range(1..=2);
        // Integer prices make ties common, which is where degenerate pivots live.
        let bids: Vec<Bid> =
            (0..nb).map(|_| Bid::new(rng.random_range(5.0..100.0), rng.random_range(0..=20) as f64)).collect();
        let cap: f64 = bids.iter().map(|b| b.capacity).sum();
        let mut p = Producer::new(n, rng.random_range(0..nz), cap, 0.0, 2);
        p.price_max = 20.0;
        producers.push(p);
        ladders.push(BidLadder::new(n, bids));
    }
    let zones = (0..nz)
        .map(|z| {
            let cap: f64 = producers.iter().filter(|p| p.zone == z).map(|p| p.capacity_max).sum();
            // Up to 1.05x local capacity, so some instances need imports and a few are infeasible.
            let demand = if cap > 0.0 { rng.random_range(0.0..1.05) * cap } else { rng.random_range(0.0..60.0) };
            let core = rng.random_range(0.0..0.8) * demand.min(cap);
            let export = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..150.0) };
            Zone::new(z, format!("z{z}"), demand, export, core)
        })
        .collect();
    MarketInstance::new(zones, producers, ladders).unwrap()
}

/// Cost of buying `q` MW from `bids` cheapest first; `None` beyond capacity.
fn merit_cost(bids: &[(f64, f64)], q: f64) -> Option<f64> {
    let mut left = q;
    let mut cost = 0.0;
    for &(c, p) in bids {
        let take = left.min(c);
        cost += take * p;
        left -= take;
    }
    (left <= 1e-9 * q.max(1.0)).then_some(cost)
}

/// Least clearing cost, `None` when no acceptance meets every row.
pub fn oracle(m: &MarketInstance) -> Option<f64> {
    let nz = m.n_zones();
    let mut merit: Vec<Vec<(f64, f64)>> = vec![Vec::new(); nz];
    for (p, l) in m.producers.iter().zip(&m.ladders) {
        merit[p.zone].extend(l.bids.iter().map(|b| (b.capacity, b.price)));
    }
    for z in &mut merit {
        z.sort_by(|a, b| a.1.total_cmp(&b.1));
    }
    let d: Vec<f64> = m.zones.iter().map(|z| z.demand).collect();
    if nz == 1 {
        return merit_cost(&merit[0], d[0]);
    }
    let cap: Vec<f64> = merit.iter().map(|z| z.iter().map(|b| b.0).sum()).collect();
    let (z0, z1) = (&m.zones[0], &m.zones[1]);
    let lo = (-z1.export_limit.min(z0.demand - z0.core_portion)).max(-d[0]).max(d[1] - cap[1]);
    let hi = z0.export_limit.min(z1.demand - z1.core_portion).min(cap[0] - d[0]).min(d[1]);
    if lo > hi + 1e-9 {
        return None;
    }
    let mut cands = vec![lo, hi];
    for (z, sign) in [(0, 1.0), (1, -1.0)] {
        let mut acc = 0.0;
        for &(c, _) in &merit[z] {
            acc += c;
            // D_0 + t = acc, or D_1 - t = acc.
            cands.push(sign * (acc - d[z]));
        }
    }
    cands
        .into_iter()
        .map(|t| t.clamp(lo, hi.max(lo)))
        .filter_map(|t| Some(merit_cost(&merit[0], (d[0] + t).max(0.0))? + merit_cost(&merit[1], (d[1] - t).max(0.0))?))
        .min_by(f64::total_cmp)
}
