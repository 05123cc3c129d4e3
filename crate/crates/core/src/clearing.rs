//! The market operator's clearing program.
//!
//! Variables are the accepted fractions `x[n][k][z] ∈ [0, 1]`. Rows, all
//! written in `≤ 0` form so every multiplier is non-negative:
//!
//! * demand, one per zone: `D_z − Σ Δ x[·][·][z] ≤ 0` (multiplier `λ_z`)
//! * capacity limit, one per bid: `Σ_z x[n][k][z] − 1 ≤ 0` (`μ_{n,k}`)
//! * export, one per zone: deliveries of the zone's producers abroad minus
//!   `E_z` (`σ_z`)
//! * core, one per zone: `C_z` minus deliveries of the zone's producers at
//!   home (`δ_z`)
//!
//! The upper bound `x ≤ 1` is implied by the capacity rows, so the only bound
//! multipliers are those of `x ≥ 0`, reported as `bound_duals`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{Fractions, MarketInstance};
use crate::simplex::{self, LinearProgram, LpError, Relation};

/// Residual tolerance for KKT certificates.
pub const KKT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    Demand { zone: usize },
    Capacity { producer: usize, bid: usize },
    Export { zone: usize },
    Core { zone: usize },
}

/// `min cᵀx  s.t.  A x ≤ b,  lower ≤ x ≤ upper`.
#[derive(Debug, Clone)]
pub struct LpStandardForm {
    pub cost: Vec<f64>,
    pub matrix: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
    pub rows: Vec<RowKind>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    n_zones: usize,
    bid_offset: Vec<usize>,
}

impl LpStandardForm {
    pub fn n_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rhs.len()
    }

    /// Column of `x[n][k][z]`.
    pub fn var(&self, producer: usize, bid: usize, zone: usize) -> usize {
        (self.bid_offset[producer] + bid) * self.n_zones + zone
    }

    fn unflatten(&self, instance: &MarketInstance, v: &[f64]) -> Fractions {
        instance
            .ladders
            .iter()
            .enumerate()
            .map(|(n, l)| (0..l.len()).map(|k| (0..self.n_zones).map(|z| v[self.var(n, k, z)]).collect()).collect())
            .collect()
    }
}

/// Builds the clearing program for the instance's current ladders.
pub fn build_lp(instance: &MarketInstance) -> LpStandardForm {
    let nz = instance.n_zones();
    let mut bid_offset = Vec::with_capacity(instance.n_producers());
    let mut b = 0;
    for l in &instance.ladders {
        bid_offset.push(b);
        b += l.len();
    }
    let nv = b * nz;
    let mut form = LpStandardForm {
        cost: vec![0.0; nv],
        matrix: Vec::with_capacity(3 * nz + b),
        rhs: Vec::with_capacity(3 * nz + b),
        rows: Vec::with_capacity(3 * nz + b),
        lower: vec![0.0; nv],
        upper: vec![1.0; nv],
        n_zones: nz,
        bid_offset,
    };
    for (n, l) in instance.ladders.iter().enumerate() {
        for (k, bid) in l.bids.iter().enumerate() {
            for z in 0..nz {
                let j = form.var(n, k, z);
                form.cost[j] = bid.capacity * bid.price;
            }
        }
    }

    for (z, zone) in instance.zones.iter().enumerate() {
        let mut row = vec![0.0; nv];
        for (n, l) in instance.ladders.iter().enumerate() {
            for (k, bid) in l.bids.iter().enumerate() {
                row[form.var(n, k, z)] = -bid.capacity;
            }
        }
        form.matrix.push(row);
        form.rhs.push(-zone.demand);
        form.rows.push(RowKind::Demand { zone: z });
    }
    for (n, l) in instance.ladders.iter().enumerate() {
        for k in 0..l.len() {
            let mut row = vec![0.0; nv];
            for z in 0..nz {
                row[form.var(n, k, z)] = 1.0;
            }
            form.matrix.push(row);
            form.rhs.push(1.0);
            form.rows.push(RowKind::Capacity { producer: n, bid: k });
        }
    }
    for (z, zone) in instance.zones.iter().enumerate() {
        let mut row = vec![0.0; nv];
        for (n, l) in instance.ladders.iter().enumerate() {
            if instance.producers[n].zone != z {
                continue;
            }
            for (k, bid) in l.bids.iter().enumerate() {
                for zp in (0..nz).filter(|&zp| zp != z) {
                    row[form.var(n, k, zp)] = bid.capacity;
                }
            }
        }
        form.matrix.push(row);
        form.rhs.push(zone.export_limit);
        form.rows.push(RowKind::Export { zone: z });
    }
    for (z, zone) in instance.zones.iter().enumerate() {
        let mut row = vec![0.0; nv];
        for (n, l) in instance.ladders.iter().enumerate() {
            if instance.producers[n].zone != z {
                continue;
            }
            for (k, bid) in l.bids.iter().enumerate() {
                row[form.var(n, k, z)] = -bid.capacity;
            }
        }
        form.matrix.push(row);
        form.rhs.push(-zone.core_portion);
        form.rows.push(RowKind::Core { zone: z });
    }
    form
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Duals {
    /// `λ_z`, the zonal clearing price.
    pub demand: Vec<f64>,
    /// `μ_{n,k}`.
    pub capacity: Vec<Vec<f64>>,
    /// `σ_z`.
    pub export: Vec<f64>,
    /// `δ_z`.
    pub core: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingResult {
    pub fractions: Fractions,
    pub duals: Duals,
    /// Multipliers of `x ≥ 0`, shaped like `fractions`.
    pub bound_duals: Fractions,
    pub total_cost: f64,
    pub revenue: Vec<f64>,
}

impl ClearingResult {
    /// MW delivered to each zone, split by the supplier's zone:
    /// `flows[from][to]`.
    pub fn flows(&self, instance: &MarketInstance) -> Vec<Vec<f64>> {
        let nz = instance.n_zones();
        let mut f = vec![vec![0.0; nz]; nz];
        for (n, (l, xn)) in instance.ladders.iter().zip(&self.fractions).enumerate() {
            let from = instance.producers[n].zone;
            for (bid, xk) in l.bids.iter().zip(xn) {
                for (to, x) in xk.iter().enumerate() {
                    f[from][to] += bid.capacity * x;
                }
            }
        }
        f
    }

    /// Payments made for deliveries into each zone.
    pub fn cost_by_consumer_zone(&self, instance: &MarketInstance) -> Vec<f64> {
        let mut c = vec![0.0; instance.n_zones()];
        for (l, xn) in instance.ladders.iter().zip(&self.fractions) {
            for (bid, xk) in l.bids.iter().zip(xn) {
                for (z, x) in xk.iter().enumerate() {
                    c[z] += bid.capacity * bid.price * x;
                }
            }
        }
        c
    }

    /// Payments received by the producers of each zone.
    pub fn cost_by_supplier_zone(&self, instance: &MarketInstance) -> Vec<f64> {
        let mut c = vec![0.0; instance.n_zones()];
        for (p, r) in instance.producers.iter().zip(&self.revenue) {
            c[p.zone] += r;
        }
        c
    }
}

fn map_lp_error(e: LpError) -> Error {
    match e {
        LpError::Infeasible => Error::Infeasible,
        other => Error::Internal(format!("clearing LP: {other}")),
    }
}

fn to_program(form: &LpStandardForm, columns: &[usize], objective: Vec<f64>, equalities: &[bool]) -> LinearProgram {
    let mut lp = LinearProgram::new(objective);
    for (i, row) in form.matrix.iter().enumerate() {
        let coeffs = columns.iter().map(|&j| row[j]).collect();
        let rel = if equalities[i] { Relation::Eq } else { Relation::Le };
        lp.add(coeffs, rel, form.rhs[i]);
    }
    lp
}

struct ElasticRows {
    penalty: f64,
    demand_rows: Vec<usize>,
    core_rows: Vec<usize>,
}

/// Solves the clearing LP; with `tiebreak = Some(n)`, re-optimizes over the
/// optimal face to return a cost-optimal point that minimizes producer `n`'s
/// revenue. Multipliers come from the first stage and stay valid for every
/// point of the optimal face.
fn solve_clearing(
    instance: &MarketInstance,
    tiebreak: Option<usize>,
    elastic: Option<f64>,
    checked: bool,
) -> Result<(ClearingResult, Vec<f64>)> {
    if checked {
        instance.check()?;
    }
    if let Some(n) = tiebreak {
        if n >= instance.n_producers() {
            return Err(Error::Shape(format!("tiebreak producer {n} out of range")));
        }
    }
    let mut form = build_lp(instance);
    let nv = form.n_vars();
    let elastic = elastic.map(|penalty| {
        let demand_rows = (0..form.n_rows()).filter(|&i| matches!(form.rows[i], RowKind::Demand { .. })).collect();
        let core_rows = (0..form.n_rows()).filter(|&i| matches!(form.rows[i], RowKind::Core { .. })).collect();
        ElasticRows { penalty, demand_rows, core_rows }
    });
    // Shortfall columns are appended after the fraction columns.
    if let Some(el) = &elastic {
        for &i in el.demand_rows.iter().chain(&el.core_rows) {
            for (r, row) in form.matrix.iter_mut().enumerate() {
                row.push(if r == i { -1.0 } else { 0.0 });
            }
            form.cost.push(el.penalty);
        }
    }
    let ncols = form.cost.len();
    let all: Vec<usize> = (0..ncols).collect();
    let no_eq = vec![false; form.n_rows()];
    let stage1 = simplex::solve(&to_program(&form, &all, form.cost.clone(), &no_eq)).map_err(map_lp_error)?;

    let mut x = stage1.x.clone();
    if let Some(focal) = tiebreak {
        let face_cols: Vec<usize> =
            (0..ncols).filter(|&j| stage1.reduced_costs[j] <= 1e-9 * (1.0 + form.cost[j].abs())).collect();
        let ymax = stage1.duals.iter().fold(1.0f64, |a, y| a.max(y.abs()));
        let eq: Vec<bool> = stage1.duals.iter().map(|y| y.abs() > 1e-9 * ymax).collect();
        let objective =
            face_cols.iter().map(|&j| if j < nv && owner(&form, j) == focal { form.cost[j] } else { 0.0 }).collect();
        if let Ok(s2) = simplex::solve(&to_program(&form, &face_cols, objective, &eq)) {
            x = vec![0.0; ncols];
            for (&j, v) in face_cols.iter().zip(&s2.x) {
                x[j] = *v;
            }
        }
    }

    let lambda: Vec<f64> = stage1.duals.iter().map(|y| (-y).max(0.0)).collect();
    let mut duals = Duals {
        demand: vec![0.0; instance.n_zones()],
        capacity: instance.ladders.iter().map(|l| vec![0.0; l.len()]).collect(),
        export: vec![0.0; instance.n_zones()],
        core: vec![0.0; instance.n_zones()],
    };
    for (i, row) in form.rows.iter().enumerate() {
        match *row {
            RowKind::Demand { zone } => duals.demand[zone] = lambda[i],
            RowKind::Capacity { producer, bid } => duals.capacity[producer][bid] = lambda[i],
            RowKind::Export { zone } => duals.export[zone] = lambda[i],
            RowKind::Core { zone } => duals.core[zone] = lambda[i],
        }
    }
    let fractions = form.unflatten(instance, &x[..nv]);
    let bound = stage1.reduced_costs[..nv].iter().map(|d| d.max(0.0)).collect::<Vec<_>>();
    let bound_duals = form.unflatten(instance, &bound);
    let revenue: Vec<f64> = instance
        .ladders
        .iter()
        .zip(&fractions)
        .map(|(l, xn)| crate::market::producer_revenue(l, xn))
        .collect::<Result<_>>()?;
    let total_cost = revenue.iter().sum();
    let shortfall = x[nv..].to_vec();
    Ok((ClearingResult { fractions, duals, bound_duals, total_cost, revenue }, shortfall))
}

fn owner(form: &LpStandardForm, j: usize) -> usize {
    let bid = j / form.n_zones;
    form.bid_offset.partition_point(|&o| o <= bid) - 1
}

/// Clears the market for fixed ladders. `tiebreak` selects, among
/// cost-optimal acceptances, one that is worst for that producer.
pub fn clear_market(instance: &MarketInstance, tiebreak: Option<usize>) -> Result<ClearingResult> {
    solve_clearing(instance, tiebreak, None, true).map(|(r, _)| r)
}

/// Clearing with the demand and core rows made elastic: unmet MW are allowed
/// at `penalty` per MW. Returned shortfalls are per zone.
#[derive(Debug, Clone)]
pub struct ElasticClearing {
    pub result: ClearingResult,
    pub demand_shortfall: Vec<f64>,
    pub core_shortfall: Vec<f64>,
}

pub fn clear_market_elastic(
    instance: &MarketInstance,
    tiebreak: Option<usize>,
    penalty: f64,
) -> Result<ElasticClearing> {
    let (result, s) = solve_clearing(instance, tiebreak, Some(penalty), true)?;
    let nz = instance.n_zones();
    Ok(ElasticClearing { result, demand_shortfall: s[..nz].to_vec(), core_shortfall: s[nz..2 * nz].to_vec() })
}

/// Clearing of a residual market whose zone data may violate the load-time
/// invariants (for instance a residual core above residual demand). With
/// `penalty`, demand and core rows are elastic.
pub(crate) fn clear_residual(instance: &MarketInstance, penalty: Option<f64>) -> Result<(ClearingResult, Vec<f64>)> {
    solve_clearing(instance, Some(0), penalty, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityVerdict {
    pub condition_i: Vec<bool>,
    pub condition_ii: Vec<bool>,
    pub overall: bool,
}

/// Zone-level sufficient conditions for a strictly feasible clearing.
pub fn check_slater(instance: &MarketInstance) -> FeasibilityVerdict {
    let nz = instance.n_zones();
    let cap: Vec<f64> = (0..nz).map(|z| instance.producers_in(z).map(|p| p.capacity_max).sum()).collect();
    let demand: Vec<f64> = instance.zones.iter().map(|z| z.demand).collect();
    let condition_i: Vec<bool> = (0..nz).map(|z| cap[z] > demand[z]).collect();
    let condition_ii: Vec<bool> = (0..nz)
        .map(|z| {
            let deficit = demand[z] - cap[z];
            let surplus: f64 = (0..nz).filter(|&o| o != z).map(|o| cap[o] - demand[o]).sum();
            let imports: f64 = (0..nz).filter(|&o| o != z).map(|o| instance.zones[o].export_limit).sum();
            surplus > deficit && deficit <= imports
        })
        .collect();
    let overall = (0..nz).all(|z| condition_i[z] || condition_ii[z]);
    FeasibilityVerdict { condition_i, condition_ii, overall }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    /// Largest `|∂L/∂x[n][k][z]|`.
    pub stationarity: f64,
    /// Largest `|multiplier × constraint value|`.
    pub complementarity: f64,
    /// Largest primal constraint violation.
    pub primal: f64,
    /// Largest negative part of any multiplier.
    pub dual_sign: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.complementarity).max(self.primal).max(self.dual_sign)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

/// Evaluates the stationarity, slackness and feasibility conditions of the
/// clearing program at a given primal-dual point.
pub fn kkt_residual(instance: &MarketInstance, result: &ClearingResult) -> Result<KktResidual> {
    instance.check_fractions(&result.fractions)?;
    instance.check_fractions(&result.bound_duals)?;
    let nz = instance.n_zones();
    let d = &result.duals;
    if d.demand.len() != nz || d.export.len() != nz || d.core.len() != nz || d.capacity.len() != instance.n_producers()
    {
        return Err(Error::Shape("dual vector does not match the market".into()));
    }
    let x = &result.fractions;
    let mut stat = 0.0f64;
    let mut comp = 0.0f64;
    let mut primal = 0.0f64;
    let mut neg = 0.0f64;

    let mut supply = vec![0.0; nz];
    let mut exports = vec![0.0; nz];
    let mut core = vec![0.0; nz];
    for (n, l) in instance.ladders.iter().enumerate() {
        let home = instance.producers[n].zone;
        if d.capacity[n].len() != l.len() {
            return Err(Error::Shape(format!("capacity duals of producer {n}")));
        }
        for (k, bid) in l.bids.iter().enumerate() {
            let mu = d.capacity[n][k];
            neg = neg.max(-mu);
            let mut used = 0.0;
            for z in 0..nz {
                let xv = x[n][k][z];
                let nu = result.bound_duals[n][k][z];
                neg = neg.max(-nu);
                let mut g = bid.capacity * bid.price - d.demand[z] * bid.capacity + mu - nu;
                if z == home {
                    g -= d.core[home] * bid.capacity;
                    core[home] += bid.capacity * xv;
                } else {
                    g += d.export[home] * bid.capacity;
                    exports[home] += bid.capacity * xv;
                }
                stat = stat.max(g.abs());
                comp = comp.max((nu * xv).abs());
                primal = primal.max(-xv).max(xv - 1.0);
                supply[z] += bid.capacity * xv;
                used += xv;
            }
            primal = primal.max(used - 1.0);
            comp = comp.max((mu * (used - 1.0)).abs());
        }
    }
    for (z, zone) in instance.zones.iter().enumerate() {
        let gd = zone.demand - supply[z];
        let ge = exports[z] - zone.export_limit;
        let gc = zone.core_portion - core[z];
        primal = primal.max(gd).max(ge).max(gc);
        comp = comp.max((d.demand[z] * gd).abs()).max((d.export[z] * ge).abs()).max((d.core[z] * gc).abs());
        neg = neg.max(-d.demand[z]).max(-d.export[z]).max(-d.core[z]);
    }
    Ok(KktResidual { stationarity: stat, complementarity: comp, primal: primal.max(0.0), dual_sign: neg.max(0.0) })
}

/// Dual objective `Σ λ D − Σ μ − Σ σ E + Σ δ C`; equals the optimal cost at
/// an optimal primal-dual pair.
pub fn dual_objective(instance: &MarketInstance, duals: &Duals) -> f64 {
    let mut v = 0.0;
    for (z, zone) in instance.zones.iter().enumerate() {
        v += duals.demand[z] * zone.demand - duals.export[z] * zone.export_limit + duals.core[z] * zone.core_portion;
    }
    v - duals.capacity.iter().flatten().sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{Bid, BidLadder, Producer, Zone};
    use approx::assert_relative_eq;

    fn one_zone(demand: f64, bids: &[(f64, f64)]) -> MarketInstance {
        let zones = vec![Zone::new(0, "z", demand, 0.0, 0.0)];
        let producers = (0..bids.len()).map(|i| Producer::new(i, 0, 100.0, 1.0, 1)).collect();
        let ladders = bids.iter().enumerate().map(|(i, (c, p))| BidLadder::new(i, vec![Bid::new(*c, *p)])).collect();
        MarketInstance::new(zones, producers, ladders).unwrap()
    }

    #[test]
    fn lp_dimensions() {
        let m = one_zone(50.0, &[(100.0, 10.0)]);
        let f = build_lp(&m);
        assert_eq!(f.n_vars(), 1);
        assert_eq!(f.n_rows(), 4);

        let zones = vec![Zone::new(0, "a", 10.0, 5.0, 0.0), Zone::new(1, "b", 10.0, 5.0, 0.0)];
        let producers: Vec<Producer> = (0..8).map(|i| Producer::new(i, i % 2, 100.0, 1.0, 5)).collect();
        let ladders = producers.iter().map(|p| BidLadder::new(p.id, vec![Bid::new(20.0, 5.0); 5])).collect();
        let m = MarketInstance::new(zones, producers, ladders).unwrap();
        let f = build_lp(&m);
        assert_eq!(f.n_vars(), 80);
        assert_eq!(f.n_rows(), 3 * 2 + 40);
    }

    #[test]
    fn zero_demand_zone_clears_at_zero() {
        let m = one_zone(0.0, &[(100.0, 10.0)]);
        let r = clear_market(&m, None).unwrap();
        assert_eq!(r.total_cost, 0.0);
        assert_eq!(r.fractions[0][0][0], 0.0);
    }

    #[test]
    fn single_bid_partial_acceptance() {
        let m = one_zone(50.0, &[(100.0, 10.0)]);
        let r = clear_market(&m, None).unwrap();
        assert_relative_eq!(r.fractions[0][0][0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(r.total_cost, 500.0, epsilon = 1e-9);
        assert_relative_eq!(r.duals.demand[0], 10.0, epsilon = 1e-9);
    }

    #[test]
    fn merit_order_two_bids() {
        let m = one_zone(150.0, &[(100.0, 5.0), (100.0, 10.0)]);
        let r = clear_market(&m, None).unwrap();
        assert_relative_eq!(r.fractions[0][0][0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.fractions[1][0][0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(r.total_cost, 1000.0, epsilon = 1e-9);
        assert_relative_eq!(r.duals.demand[0], 10.0, epsilon = 1e-9);
        assert!(kkt_residual(&m, &r).unwrap().within(KKT_TOL));
    }

    #[test]
    fn supply_shortfall_is_infeasible() {
        let m = one_zone(250.0, &[(100.0, 5.0), (100.0, 10.0)]);
        assert!(matches!(clear_market(&m, None), Err(Error::Infeasible)));
    }

    #[test]
    fn pessimistic_tiebreak_hands_ties_to_others() {
        let m = one_zone(100.0, &[(100.0, 10.0), (100.0, 10.0)]);
        let r0 = clear_market(&m, Some(0)).unwrap();
        let r1 = clear_market(&m, Some(1)).unwrap();
        assert_relative_eq!(r0.revenue[0], 0.0, epsilon = 1e-9);
        assert_relative_eq!(r0.revenue[1], 1000.0, epsilon = 1e-9);
        assert_relative_eq!(r1.revenue[1], 0.0, epsilon = 1e-9);
        assert_relative_eq!(r0.total_cost, r1.total_cost, epsilon = 1e-9);
        assert!(kkt_residual(&m, &r0).unwrap().within(KKT_TOL));
        assert!(kkt_residual(&m, &r1).unwrap().within(KKT_TOL));
    }

    #[test]
    fn slater_conditions() {
        let m = one_zone(100.0, &[(100.0, 10.0)]);
        // Capacity in this fixture is the producer's cap (100) == demand.
        let v = check_slater(&m);
        assert_eq!(v.condition_i, vec![false]);
        assert_eq!(v.condition_ii, vec![false]);
        assert!(!v.overall);

        // Zone 1 has no producers but imports from zone 0.
        let zones = vec![Zone::new(0, "a", 50.0, 60.0, 0.0), Zone::new(1, "b", 40.0, 0.0, 0.0)];
        let producers = vec![Producer::new(0, 0, 100.0, 1.0, 1)];
        let ladders = vec![BidLadder::new(0, vec![Bid::new(100.0, 3.0)])];
        let m = MarketInstance::new(zones, producers, ladders).unwrap();
        let v = check_slater(&m);
        assert_eq!(v.condition_i, vec![true, false]);
        assert!(v.condition_ii[1]);
        assert!(v.overall);
        let r = clear_market(&m, None).unwrap();
        assert_relative_eq!(r.total_cost, 270.0, epsilon = 1e-9);
        assert_relative_eq!(r.flows(&m)[0][1], 40.0, epsilon = 1e-9);
    }

    #[test]
    fn slack_point_with_zero_duals() {
        let m = one_zone(50.0, &[(100.0, 10.0)]);
        let r = ClearingResult {
            fractions: vec![vec![vec![0.7]]],
            duals: Duals { demand: vec![0.0], capacity: vec![vec![0.0]], export: vec![0.0], core: vec![0.0] },
            bound_duals: vec![vec![vec![0.0]]],
            total_cost: 700.0,
            revenue: vec![700.0],
        };
        let k = kkt_residual(&m, &r).unwrap();
        assert_eq!(k.complementarity, 0.0);
        assert_eq!(k.stationarity, 1000.0);
        assert_eq!(k.primal, 0.0);
    }

    #[test]
    fn perturbed_price_breaks_stationarity() {
        let m = one_zone(150.0, &[(100.0, 5.0), (100.0, 10.0)]);
        let mut r = clear_market(&m, None).unwrap();
        r.duals.demand[0] += 1.0;
        let k = kkt_residual(&m, &r).unwrap();
        assert!(k.stationarity >= 100.0 - 1e-9);
    }

    #[test]
    fn elastic_clearing_uses_shortfall_when_cheap() {
        let m = one_zone(150.0, &[(100.0, 5.0), (100.0, 10.0)]);
        let e = clear_market_elastic(&m, None, 8.0).unwrap();
        assert_relative_eq!(e.demand_shortfall[0], 50.0, epsilon = 1e-9);
        let e = clear_market_elastic(&m, None, 1e5).unwrap();
        assert_relative_eq!(e.demand_shortfall[0], 0.0, epsilon = 1e-9);
        assert_relative_eq!(e.result.total_cost, 1000.0, epsilon = 1e-9);
    }
}
