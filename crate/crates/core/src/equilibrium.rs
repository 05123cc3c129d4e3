//! Strategic bidding equilibria.
//!
//! A producer's decision is its ladder `y_n` together with its accepted
//! fractions `x_n` and its own multipliers. Holding the opponents' fractions
//! fixed turns the market rows into residual requirements (the tracking
//! terms), and the producer's lower level becomes the clearing of that
//! residual market. Because `J_n` then depends on `w_n` alone, the sum of
//! revenues is an exact potential of the game, which is what
//! [`gauss_seidel_run`] climbs and [`potential_solve`] maximizes directly.
//!
//! [`LowerLevel::Market`] instead re-clears the whole market for every
//! candidate ladder, so opponents' acceptances react to the focal bid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clearing::{self, ClearingResult, Duals, KktResidual};
use crate::error::{Error, Result};
use crate::market::{market_cost, producer_revenue, Bid, BidLadder, Fractions, MarketInstance, Producer, Zone};

/// Residual requirements left to one producer by its opponents' accepted
/// fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingTerms {
    pub demand: Vec<f64>,
    pub export: Vec<f64>,
    pub core: Vec<f64>,
}

/// One producer's own multipliers: `λ_n[z]`, `μ_n[k]`, `σ_n`, `δ_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProducerDuals {
    pub demand: Vec<f64>,
    pub capacity: Vec<f64>,
    pub export: f64,
    pub core: f64,
}

impl ProducerDuals {
    fn from_market(duals: &Duals, producer: usize, home: usize) -> Self {
        Self {
            demand: duals.demand.clone(),
            capacity: duals.capacity[producer].clone(),
            export: duals.export[home],
            core: duals.core[home],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyProfile {
    pub ladders: Vec<BidLadder>,
    pub fractions: Fractions,
    pub revenue: Vec<f64>,
    pub duals: Vec<ProducerDuals>,
}

impl StrategyProfile {
    /// Clears the market once at the given ladders; every producer shares the
    /// resulting multipliers.
    pub fn from_ladders(instance: &MarketInstance, ladders: Vec<BidLadder>) -> Result<Self> {
        let inst = instance.with_ladders(ladders);
        inst.validate_ladders()?;
        let r = clearing::clear_market(&inst, None)?;
        Ok(Self::from_clearing(&inst, &r))
    }

    pub fn from_clearing(instance: &MarketInstance, r: &ClearingResult) -> Self {
        let duals = instance.producers.iter().map(|p| ProducerDuals::from_market(&r.duals, p.id, p.zone)).collect();
        Self { ladders: instance.ladders.clone(), fractions: r.fractions.clone(), revenue: r.revenue.clone(), duals }
    }

    /// Every producer offers its full capacity, split over its usable bids,
    /// at its marginal price.
    pub fn marginal(instance: &MarketInstance) -> Result<Self> {
        let ladders = instance.producers.iter().map(Producer::split_marginal_ladder).collect();
        Self::from_ladders(instance, ladders)
    }

    pub fn instance(&self, base: &MarketInstance) -> MarketInstance {
        base.with_ladders(self.ladders.clone())
    }
}

pub fn tracking_terms(instance: &MarketInstance, profile: &StrategyProfile, focal: usize) -> Result<TrackingTerms> {
    let inst = profile.instance(instance);
    inst.check_fractions(&profile.fractions)?;
    if focal >= inst.n_producers() {
        return Err(Error::Shape(format!("producer {focal} out of range")));
    }
    let nz = inst.n_zones();
    let mut t = TrackingTerms {
        demand: inst.zones.iter().map(|z| z.demand).collect(),
        export: inst.zones.iter().map(|z| z.export_limit).collect(),
        core: inst.zones.iter().map(|z| z.core_portion).collect(),
    };
    for (j, (l, xj)) in inst.ladders.iter().zip(&profile.fractions).enumerate() {
        if j == focal {
            continue;
        }
        let home = inst.producers[j].zone;
        for (bid, xk) in l.bids.iter().zip(xj) {
            for z in 0..nz {
                let mw = bid.capacity * xk[z];
                t.demand[z] -= mw;
                if z == home {
                    t.core[home] -= mw;
                } else {
                    t.export[home] -= mw;
                }
            }
        }
    }
    Ok(t)
}

/// How the focal producer's lower level is resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LowerLevel {
    /// Clear the residual market left by the opponents' fixed fractions.
    #[default]
    Residual,
    /// Re-clear the whole market, opponents' fractions included.
    Market,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BrConfig {
    pub coarse_points: usize,
    pub refine_points: usize,
    pub refine_passes: usize,
    pub lower: LowerLevel,
    /// Shortfall penalty `M`; when set, demand and core rows are elastic and
    /// the focal objective is the penalized revenue.
    pub penalty: Option<f64>,
}

impl Default for BrConfig {
    fn default() -> Self {
        Self { coarse_points: 16, refine_points: 8, refine_passes: 2, lower: LowerLevel::Residual, penalty: None }
    }
}

#[derive(Debug, Clone)]
struct Outcome {
    revenue: f64,
    value: f64,
    own: Vec<Vec<f64>>,
    joint: Option<(Fractions, Vec<f64>)>,
    duals: ProducerDuals,
}

struct Focal<'a> {
    instance: &'a MarketInstance,
    profile: &'a StrategyProfile,
    focal: usize,
    terms: TrackingTerms,
    cfg: BrConfig,
}

impl Focal<'_> {
    fn producer(&self) -> &Producer {
        &self.instance.producers[self.focal]
    }

    fn evaluate(&self, ladder: &BidLadder) -> Result<Option<Outcome>> {
        match self.cfg.lower {
            LowerLevel::Residual => self.evaluate_residual(ladder),
            LowerLevel::Market => self.evaluate_market(ladder),
        }
    }

    fn residual_instance(&self, ladder: &BidLadder) -> MarketInstance {
        let p = self.producer();
        let home = p.zone;
        let zones = self
            .instance
            .zones
            .iter()
            .enumerate()
            .map(|(z, zone)| Zone {
                id: z,
                name: zone.name.clone(),
                demand: self.terms.demand[z].max(0.0),
                export_limit: self.terms.export[z].max(0.0),
                core_portion: if z == home { self.terms.core[z].max(0.0) } else { 0.0 },
            })
            .collect();
        let mut solo = p.clone();
        solo.id = 0;
        MarketInstance { zones, producers: vec![solo], ladders: vec![BidLadder::new(0, ladder.bids.clone())] }
    }

    fn evaluate_residual(&self, ladder: &BidLadder) -> Result<Option<Outcome>> {
        let inst = self.residual_instance(ladder);
        let (r, shortfall) = match clearing::clear_residual(&inst, self.cfg.penalty) {
            Ok(v) => v,
            Err(Error::Infeasible) => return Ok(None),
            Err(e) => return Err(e),
        };
        let revenue = r.revenue[0];
        let value = revenue - self.cfg.penalty.unwrap_or(0.0) * shortfall.iter().sum::<f64>();
        let home = self.producer().zone;
        Ok(Some(Outcome {
            revenue,
            value,
            own: r.fractions[0].clone(),
            joint: None,
            duals: ProducerDuals::from_market(&r.duals, 0, home),
        }))
    }

    fn evaluate_market(&self, ladder: &BidLadder) -> Result<Option<Outcome>> {
        let inst = self.profile.instance(self.instance).with_ladder(self.focal, ladder.clone());
        let (r, shortfall) = match self.cfg.penalty {
            None => match clearing::clear_market(&inst, Some(self.focal)) {
                Ok(r) => (r, Vec::new()),
                Err(Error::Infeasible) => return Ok(None),
                Err(e) => return Err(e),
            },
            Some(m) => {
                let e = clearing::clear_market_elastic(&inst, Some(self.focal), m)?;
                let s = e.demand_shortfall.iter().chain(&e.core_shortfall).copied().collect();
                (e.result, s)
            }
        };
        let revenue = r.revenue[self.focal];
        let value = revenue - self.cfg.penalty.unwrap_or(0.0) * shortfall.iter().sum::<f64>();
        let home = self.producer().zone;
        Ok(Some(Outcome {
            revenue,
            value,
            own: r.fractions[self.focal].clone(),
            duals: ProducerDuals::from_market(&r.duals, self.focal, home),
            joint: Some((r.fractions, r.revenue)),
        }))
    }
}

/// Normalized squared distance between two ladders of equal length, with
/// prices scaled by `π̄` and capacities by `Δ̄`.
fn ladder_sq_distance(a: &BidLadder, b: &BidLadder, p: &Producer) -> f64 {
    if a.len() != b.len() {
        return 2.0 * a.len().max(b.len()) as f64;
    }
    a.bids
        .iter()
        .zip(&b.bids)
        .map(|(u, v)| {
            let dp = (u.price - v.price) / p.price_max.max(f64::MIN_POSITIVE);
            let dc = (u.capacity - v.capacity) / p.capacity_max.max(f64::MIN_POSITIVE);
            dp * dp + dc * dc
        })
        .sum()
}

fn ladder_max_distance(a: &BidLadder, b: &BidLadder, p: &Producer) -> f64 {
    if a.len() != b.len() {
        return 1.0;
    }
    a.bids.iter().zip(&b.bids).fold(0.0f64, |m, (u, v)| {
        let dp = (u.price - v.price).abs() / p.price_max.max(f64::MIN_POSITIVE);
        let dc = (u.capacity - v.capacity).abs() / p.capacity_max.max(f64::MIN_POSITIVE);
        m.max(dp).max(dc)
    })
}

/// Grid of `m` points spanning `[lo, hi]`, geometric when `lo > 0`.
fn axis_grid(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    if hi <= lo || m < 2 {
        return vec![lo];
    }
    (0..m)
        .map(|i| {
            let t = i as f64 / (m - 1) as f64;
            if i == m - 1 {
                hi
            } else if lo > 0.0 {
                lo * (hi / lo).powf(t)
            } else {
                lo + (hi - lo) * t
            }
        })
        .collect()
}

/// Spacing of the coarse grid around `v`.
fn axis_spacing(lo: f64, hi: f64, m: usize, v: f64) -> f64 {
    if hi <= lo || m < 2 {
        return 0.0;
    }
    if lo > 0.0 {
        v.max(lo) * ((hi / lo).powf(1.0 / (m - 1) as f64) - 1.0)
    } else {
        (hi - lo) / (m - 1) as f64
    }
}

#[derive(Debug, Clone, Copy)]
enum Coord {
    AllPrices,
    Price(usize),
    Capacity(usize),
}

fn coord_range(ladder: &BidLadder, p: &Producer, c: Coord) -> (f64, f64) {
    match c {
        Coord::AllPrices | Coord::Price(_) => (p.price_min, p.price_max),
        Coord::Capacity(k) => {
            let others: f64 = ladder.bids.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, b)| b.capacity).sum();
            (p.capacity_min, (p.capacity_max - others).max(p.capacity_min))
        }
    }
}

fn coord_value(ladder: &BidLadder, c: Coord) -> f64 {
    match c {
        Coord::AllPrices => ladder.mean_price(),
        Coord::Price(k) => ladder.bids[k].price,
        Coord::Capacity(k) => ladder.bids[k].capacity,
    }
}

fn with_coord(ladder: &BidLadder, c: Coord, v: f64) -> BidLadder {
    let mut l = ladder.clone();
    match c {
        Coord::AllPrices => l.bids.iter_mut().for_each(|b| b.price = v),
        Coord::Price(k) => l.bids[k].price = v,
        Coord::Capacity(k) => l.bids[k].capacity = v,
    }
    l
}

struct Search<'a> {
    focal: Focal<'a>,
    /// Proximal weight `τ` and anchor ladder.
    prox: Option<(f64, &'a BidLadder)>,
}

impl Search<'_> {
    fn score(&self, ladder: &BidLadder, o: &Outcome) -> f64 {
        match self.prox {
            None => o.value,
            Some((tau, anchor)) => {
                let p = self.focal.producer();
                o.value - tau * p.capacity_max * p.price_max * ladder_sq_distance(ladder, anchor, p)
            }
        }
    }

    fn try_candidates(
        &self,
        best: &mut (BidLadder, Option<Outcome>, f64),
        c: Coord,
        values: impl Iterator<Item = f64>,
    ) -> Result<bool> {
        let p = self.focal.producer();
        let tol = 1e-12 * (1.0 + p.capacity_max * p.price_max);
        let mut improved = false;
        let base = best.0.clone();
        for v in values {
            let cand = with_coord(&base, c, v);
            if !crate::market::validate_ladder(&cand, p).is_empty() {
                continue;
            }
            if let Some(o) = self.focal.evaluate(&cand)? {
                let s = self.score(&cand, &o);
                if s > best.2 + tol {
                    *best = (cand, Some(o), s);
                    improved = true;
                }
            }
        }
        Ok(improved)
    }

    fn run(&self, start: &BidLadder) -> Result<(BidLadder, Option<Outcome>)> {
        let p = self.focal.producer();
        let cfg = self.focal.cfg;
        let incumbent = self.focal.evaluate(start)?;
        let s0 = incumbent.as_ref().map_or(f64::NEG_INFINITY, |o| self.score(start, o));
        let mut best = (start.clone(), incumbent, s0);
        let k = start.len();
        let mut coords = vec![Coord::AllPrices];
        for j in 0..k {
            coords.push(Coord::Price(j));
            coords.push(Coord::Capacity(j));
        }
        const CYCLES: usize = 3;
        for _ in 0..CYCLES {
            let mut any = false;
            for &c in &coords {
                let (lo, hi) = coord_range(&best.0, p, c);
                any |= self.try_candidates(&mut best, c, axis_grid(lo, hi, cfg.coarse_points).into_iter())?;
            }
            if !any {
                break;
            }
        }
        for pass in 1..=cfg.refine_passes {
            let half = cfg.refine_points / 2;
            for _ in 0..CYCLES {
                let mut any = false;
                for &c in &coords {
                    let (lo, hi) = coord_range(&best.0, p, c);
                    let v = coord_value(&best.0, c);
                    let h = axis_spacing(lo, hi, cfg.coarse_points, v) / 4f64.powi(pass as i32);
                    if h <= 0.0 {
                        continue;
                    }
                    let vals = (1..=half).flat_map(|j| [v - j as f64 * h, v + j as f64 * h]).map(|u| u.clamp(lo, hi));
                    any |= self.try_candidates(&mut best, c, vals)?;
                }
                if !any {
                    break;
                }
            }
        }
        Ok((best.0, best.1))
    }
}

/// Ladder shape the search starts from: the producer's current ladder when it
/// has the usable number of bids, otherwise an even split at the current
/// mean price.
fn search_start(p: &Producer, current: &BidLadder) -> BidLadder {
    if current.len() == p.usable_bids() && crate::market::validate_ladder(current, p).is_empty() {
        current.clone()
    } else {
        let mut l = p.split_marginal_ladder();
        if !current.is_empty() {
            let price = current.mean_price().clamp(p.price_min, p.price_max);
            l.bids.iter_mut().for_each(|b| b.price = price);
        }
        l
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestResponse {
    pub ladder: BidLadder,
    pub revenue: f64,
    /// Revenue net of the shortfall penalty when one is configured.
    pub value: f64,
    pub fractions: Vec<Vec<f64>>,
    pub duals: ProducerDuals,
}

fn respond(
    instance: &MarketInstance,
    profile: &StrategyProfile,
    focal: usize,
    cfg: BrConfig,
    prox: Option<(f64, &BidLadder)>,
) -> Result<(BestResponse, Option<(Fractions, Vec<f64>)>)> {
    let terms = tracking_terms(instance, profile, focal)?;
    let f = Focal { instance, profile, focal, terms, cfg };
    let p = f.producer().clone();
    let start = search_start(&p, &profile.ladders[focal]);
    let search = Search { focal: f, prox };
    let (mut ladder, mut outcome) = search.run(&start)?;
    if prox.is_none() && outcome.as_ref().is_some_and(|o| o.revenue <= 0.0) {
        let minimal = BidLadder::new(p.id, vec![Bid::new(p.capacity_min.max(0.0), p.price_min)]);
        if let Some(o) = search.focal.evaluate(&minimal)? {
            if o.value >= outcome.as_ref().map_or(f64::NEG_INFINITY, |b| b.value) {
                ladder = minimal;
                outcome = Some(o);
            }
        }
    }
    let o = outcome.ok_or(Error::Infeasible)?;
    Ok((BestResponse { ladder, revenue: o.revenue, value: o.value, fractions: o.own, duals: o.duals }, o.joint))
}

/// Best ladder for `focal` against the opponents in `profile`, found by
/// coordinate pattern search over a common-price axis and every bid's price
/// and capacity. When no ladder earns anything, a single floor-capacity bid
/// at the marginal price is returned.
pub fn best_response(
    instance: &MarketInstance,
    profile: &StrategyProfile,
    focal: usize,
    cfg: &BrConfig,
) -> Result<BestResponse> {
    respond(instance, profile, focal, *cfg, None).map(|(b, _)| b)
}

/// Revenue of `focal` under the current profile, re-resolved through the
/// configured lower level.
fn current_value(instance: &MarketInstance, profile: &StrategyProfile, focal: usize, cfg: BrConfig) -> Result<f64> {
    let terms = tracking_terms(instance, profile, focal)?;
    let f = Focal { instance, profile, focal, terms, cfg };
    Ok(f.evaluate(&profile.ladders[focal])?.map_or(f64::NEG_INFINITY, |o| o.value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProducerOrder {
    #[default]
    Ascending,
    /// A fresh seeded permutation every sweep.
    Shuffled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GsConfig {
    pub epsilon: f64,
    pub max_sweeps: usize,
    pub tau0: f64,
    pub tau_factor: f64,
    pub tau_floor: f64,
    pub order: ProducerOrder,
    pub seed: u64,
    pub br: BrConfig,
}

impl Default for GsConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            max_sweeps: 100,
            tau0: 1.0,
            tau_factor: 0.5,
            tau_floor: 1e-3,
            order: ProducerOrder::Ascending,
            seed: 0,
            br: BrConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub sweep: usize,
    pub potential: f64,
    pub distance: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxSweeps,
    /// Single-shot solve with no iteration count.
    Solved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub method: String,
    pub profile: StrategyProfile,
    pub potential_value: f64,
    /// Best unilateral improvement found per producer, without regularization.
    pub br_gap: Vec<f64>,
    /// Improvement the search could have missed at a regularized fixed point.
    pub br_bound: Vec<f64>,
    pub vgne_gap: f64,
    pub sweeps: usize,
    pub stop: StopReason,
    pub trace: Vec<SweepRecord>,
    /// KKT residual of the shared clearing, when one exists.
    pub kkt: Option<KktResidual>,
    /// Largest complementarity or feasibility violation left by the
    /// penalized ascent before the final exact clearing.
    pub penalty_residual: Option<f64>,
    /// Whether `K_n ≥ Z/3` holds for every producer; the penalized and exact
    /// games coincide only under this hypothesis.
    pub penalized_equivalence_hypothesis: bool,
}

impl EquilibriumReport {
    pub fn converged(&self) -> bool {
        self.stop != StopReason::MaxSweeps
    }

    pub fn certified(&self) -> bool {
        self.br_gap.iter().zip(&self.br_bound).all(|(g, b)| g <= b)
    }
}

fn equivalence_hypothesis(instance: &MarketInstance) -> bool {
    let z = instance.n_zones() as f64;
    instance.producers.iter().all(|p| 3.0 * p.max_bids as f64 >= z)
}

pub fn potential_value(instance: &MarketInstance, profile: &StrategyProfile) -> Result<f64> {
    market_cost(&profile.instance(instance), &profile.fractions)
}

/// Revenue of each producer minus `M_n` times the total demand and core
/// shortfall of the profile's fractions.
pub fn penalized_objective(
    instance: &MarketInstance,
    profile: &StrategyProfile,
    penalties: &[f64],
) -> Result<Vec<f64>> {
    let inst = profile.instance(instance);
    inst.check_fractions(&profile.fractions)?;
    if penalties.len() != inst.n_producers() {
        return Err(Error::Shape(format!("{} penalties for {} producers", penalties.len(), inst.n_producers())));
    }
    let nz = inst.n_zones();
    let mut supply = vec![0.0; nz];
    let mut home = vec![0.0; nz];
    for (n, (l, xn)) in inst.ladders.iter().zip(&profile.fractions).enumerate() {
        let h = inst.producers[n].zone;
        for (bid, xk) in l.bids.iter().zip(xn) {
            for z in 0..nz {
                supply[z] += bid.capacity * xk[z];
            }
            home[h] += bid.capacity * xk[h];
        }
    }
    let violation: f64 = inst
        .zones
        .iter()
        .enumerate()
        .map(|(z, zone)| (zone.demand - supply[z]).max(0.0) + (zone.core_portion - home[z]).max(0.0))
        .sum();
    inst.ladders
        .iter()
        .zip(&profile.fractions)
        .zip(penalties)
        .map(|((l, xn), m)| Ok(producer_revenue(l, xn)? - m * violation))
        .collect()
}

/// Largest disagreement between two producers' zonal prices.
pub fn vgne_gap(report: &EquilibriumReport) -> f64 {
    duals_spread(&report.profile.duals)
}

fn duals_spread(duals: &[ProducerDuals]) -> f64 {
    let nz = duals.first().map_or(0, |d| d.demand.len());
    (0..nz)
        .map(|z| {
            let (lo, hi) = duals
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d.demand[z]), hi.max(d.demand[z])));
            if hi >= lo {
                hi - lo
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

fn apply_response(profile: &mut StrategyProfile, n: usize, br: BestResponse, joint: Option<(Fractions, Vec<f64>)>) {
    profile.ladders[n] = br.ladder;
    profile.duals[n] = br.duals;
    match joint {
        Some((x, rev)) => {
            profile.fractions = x;
            profile.revenue = rev;
        }
        None => {
            profile.fractions[n] = br.fractions;
            profile.revenue[n] = br.revenue;
        }
    }
}

fn br_gaps(instance: &MarketInstance, profile: &StrategyProfile, cfg: BrConfig) -> Result<Vec<f64>> {
    (0..instance.n_producers())
        .map(|n| {
            let now = current_value(instance, profile, n, cfg)?;
            let br = best_response(instance, profile, n, &cfg)?;
            Ok((br.value - now).max(0.0))
        })
        .collect()
}

/// Sweeps the producers in order, replacing each ladder by its regularized
/// best response, until no ladder moves by more than `ε` (max-norm on
/// normalized prices and capacities) or `max_sweeps` is reached.
pub fn gauss_seidel_run(
    instance: &MarketInstance,
    start: &StrategyProfile,
    cfg: &GsConfig,
) -> Result<EquilibriumReport> {
    let mut profile = start.clone();
    let inst0 = profile.instance(instance);
    inst0.validate_ladders()?;
    inst0.check_fractions(&profile.fractions)?;
    let np = instance.n_producers();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::new();
    let mut stop = StopReason::MaxSweeps;
    let mut tau = cfg.tau0;
    for sweep in 0..cfg.max_sweeps {
        tau = (cfg.tau0 * cfg.tau_factor.powi(sweep as i32)).max(cfg.tau_floor);
        let before = profile.ladders.clone();
        let mut order: Vec<usize> = (0..np).collect();
        if cfg.order == ProducerOrder::Shuffled {
            for i in (1..np).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
        }
        for &n in &order {
            let anchor = profile.ladders[n].clone();
            let (br, joint) = respond(instance, &profile, n, cfg.br, Some((tau, &anchor)))?;
            apply_response(&mut profile, n, br, joint);
        }
        let distance = (0..np)
            .map(|n| ladder_max_distance(&before[n], &profile.ladders[n], &instance.producers[n]))
            .fold(0.0, f64::max);
        trace.push(SweepRecord { sweep: sweep + 1, potential: potential_value(instance, &profile)?, distance, tau });
        if distance <= cfg.epsilon {
            stop = StopReason::Converged;
            break;
        }
    }
    let unregularized = BrConfig { ..cfg.br };
    let br_gap = br_gaps(instance, &profile, unregularized)?;
    let br_bound = instance
        .producers
        .iter()
        .map(|p| {
            let scale = p.capacity_max * p.price_max;
            tau * scale * 2.0 * p.usable_bids() as f64 + 1e-6 * scale
        })
        .collect();
    let potential = potential_value(instance, &profile)?;
    let kkt = match cfg.br.lower {
        LowerLevel::Market => clearing::clear_market(&profile.instance(instance), None)
            .ok()
            .and_then(|r| clearing::kkt_residual(&profile.instance(instance), &r).ok()),
        LowerLevel::Residual => None,
    };
    let vgne = duals_spread(&profile.duals);
    Ok(EquilibriumReport {
        method: "gauss-seidel".into(),
        sweeps: trace.len(),
        profile,
        potential_value: potential,
        br_gap,
        br_bound,
        vgne_gap: vgne,
        stop,
        trace,
        kkt,
        penalty_residual: None,
        penalized_equivalence_hypothesis: equivalence_hypothesis(instance),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PotentialConfig {
    pub starts: usize,
    /// Continuation schedule for the penalty weight.
    pub penalties: Vec<f64>,
    pub inner_iterations: usize,
    pub seed: u64,
    pub br: BrConfig,
}

impl Default for PotentialConfig {
    fn default() -> Self {
        Self {
            starts: 4,
            penalties: vec![1e1, 1e2, 1e3, 1e4, 1e5],
            inner_iterations: 200,
            seed: 0,
            br: BrConfig::default(),
        }
    }
}

/// Variable layout of the joint penalized program: bid prices and
/// capacities, fractions, then `λ`, `μ`, `σ`, `δ`.
struct Joint<'a> {
    inst: &'a MarketInstance,
    /// `(producer, bid)` per flattened bid.
    bids: Vec<(usize, usize)>,
    nz: usize,
    p_scale: f64,
    m_scale: f64,
    obj_scale: f64,
}

impl<'a> Joint<'a> {
    fn new(inst: &'a MarketInstance) -> Self {
        let bids = inst.ladders.iter().enumerate().flat_map(|(n, l)| (0..l.len()).map(move |k| (n, k))).collect();
        let p_scale = inst.producers.iter().map(|p| p.price_max).fold(1e-9, f64::max);
        let m_scale = inst
            .zones
            .iter()
            .map(|z| z.demand)
            .chain(inst.producers.iter().map(|p| p.capacity_max))
            .fold(1.0, f64::max);
        let obj_scale = p_scale * inst.zones.iter().map(|z| z.demand).sum::<f64>().max(m_scale);
        Self { inst, bids, nz: inst.n_zones(), p_scale, m_scale, obj_scale }
    }

    fn nb(&self) -> usize {
        self.bids.len()
    }
    fn o_pi(&self) -> usize {
        0
    }
    fn o_dl(&self) -> usize {
        self.nb()
    }
    fn o_x(&self) -> usize {
        2 * self.nb()
    }
    fn o_lam(&self) -> usize {
        2 * self.nb() + self.nb() * self.nz
    }
    fn o_mu(&self) -> usize {
        self.o_lam() + self.nz
    }
    fn o_sig(&self) -> usize {
        self.o_mu() + self.nb()
    }
    fn o_del(&self) -> usize {
        self.o_sig() + self.nz
    }
    fn len(&self) -> usize {
        self.o_del() + self.nz
    }

    fn scales(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.len()];
        let nb = self.nb();
        s[..nb].fill(self.p_scale);
        s[nb..2 * nb].fill(self.m_scale);
        s[self.o_x()..self.o_lam()].fill(1.0);
        s[self.o_lam()..self.o_mu()].fill(self.p_scale);
        s[self.o_mu()..self.o_sig()].fill(self.p_scale * self.m_scale);
        s[self.o_sig()..].fill(self.p_scale);
        s
    }

    fn pack(&self, ladders: &[BidLadder], r: Option<&ClearingResult>) -> Vec<f64> {
        let mut v = vec![0.0; self.len()];
        for (b, &(n, k)) in self.bids.iter().enumerate() {
            v[self.o_pi() + b] = ladders[n].bids[k].price;
            v[self.o_dl() + b] = ladders[n].bids[k].capacity;
            if let Some(r) = r {
                for z in 0..self.nz {
                    v[self.o_x() + b * self.nz + z] = r.fractions[n][k][z];
                }
                v[self.o_mu() + b] = r.duals.capacity[n][k];
            }
        }
        if let Some(r) = r {
            for z in 0..self.nz {
                v[self.o_lam() + z] = r.duals.demand[z];
                v[self.o_sig() + z] = r.duals.export[z];
                v[self.o_del() + z] = r.duals.core[z];
            }
        }
        v
    }

    fn ladders(&self, v: &[f64]) -> Vec<BidLadder> {
        let mut out: Vec<BidLadder> = self.inst.producers.iter().map(|p| BidLadder::new(p.id, Vec::new())).collect();
        for (b, &(n, _)) in self.bids.iter().enumerate() {
            out[n].bids.push(Bid::new(v[self.o_dl() + b], v[self.o_pi() + b]));
        }
        out
    }

    fn project(&self, v: &mut [f64]) {
        let nb = self.nb();
        for (b, &(n, _)) in self.bids.iter().enumerate() {
            let p = &self.inst.producers[n];
            v[b] = v[b].clamp(p.price_min, p.price_max);
        }
        let mut start = 0;
        for (n, l) in self.inst.ladders.iter().enumerate() {
            let p = &self.inst.producers[n];
            let r = nb + start..nb + start + l.len();
            project_capped_box(&mut v[r], p.capacity_min, p.capacity_max, p.capacity_max);
            start += l.len();
        }
        for b in 0..nb {
            let r = self.o_x() + b * self.nz..self.o_x() + (b + 1) * self.nz;
            project_capped_box(&mut v[r], 0.0, 1.0, 1.0);
        }
        for x in &mut v[self.o_lam()..] {
            *x = x.max(0.0);
        }
    }

    /// Scaled potential minus `rho` times the complementarity penalty, its
    /// gradient, and the largest raw violation.
    fn eval(&self, v: &[f64], rho: f64, grad: &mut [f64]) -> (f64, f64) {
        let nz = self.nz;
        let nb = self.nb();
        let zones = &self.inst.zones;
        let home = |b: usize| self.inst.producers[self.bids[b].0].zone;
        let a = 1.0 / (self.m_scale * self.m_scale);
        let c = 1.0 / (self.p_scale * self.m_scale).powi(2);
        let x = |b: usize, z: usize| v[self.o_x() + b * nz + z];
        let pi = |b: usize| v[self.o_pi() + b];
        let dl = |b: usize| v[self.o_dl() + b];
        let lam = |z: usize| v[self.o_lam() + z];
        let sig = |z: usize| v[self.o_sig() + z];
        let del = |z: usize| v[self.o_del() + z];
        grad.fill(0.0);
        let mut gp = vec![0.0; v.len()];

        let mut supply = vec![0.0; nz];
        let mut export = vec![0.0; nz];
        let mut core = vec![0.0; nz];
        let mut obj = 0.0;
        for b in 0..nb {
            let h = home(b);
            let mut xs = 0.0;
            for z in 0..nz {
                let mw = dl(b) * x(b, z);
                supply[z] += mw;
                if z == h {
                    core[h] += mw;
                } else {
                    export[h] += mw;
                }
                xs += x(b, z);
            }
            obj += pi(b) * dl(b) * xs;
            grad[self.o_pi() + b] += dl(b) * xs / self.obj_scale;
            grad[self.o_dl() + b] += pi(b) * xs / self.obj_scale;
            for z in 0..nz {
                grad[self.o_x() + b * nz + z] += pi(b) * dl(b) / self.obj_scale;
            }
        }
        let mut pen = 0.0;
        let mut worst = 0.0f64;
        let mut w_dem = vec![0.0; nz];
        let mut w_exp = vec![0.0; nz];
        let mut w_core = vec![0.0; nz];
        for z in 0..nz {
            let terms = [
                (zones[z].demand - supply[z], lam(z), self.o_lam() + z, &mut w_dem[z]),
                (export[z] - zones[z].export_limit, sig(z), self.o_sig() + z, &mut w_exp[z]),
                (zones[z].core_portion - core[z], del(z), self.o_del() + z, &mut w_core[z]),
            ];
            for (s, m, idx, w) in terms {
                let sp = s.max(0.0);
                pen += a * sp * sp + c * (m * s).powi(2);
                worst = worst.max(sp).max((m * s).abs() / self.p_scale);
                *w = 2.0 * a * sp + 2.0 * c * m * m * s;
                gp[idx] += 2.0 * c * m * s * s;
            }
        }
        for b in 0..nb {
            let h = home(b);
            let mu = v[self.o_mu() + b];
            let u: f64 = (0..nz).map(|z| x(b, z)).sum::<f64>() - 1.0;
            pen += c * (mu * u).powi(2);
            worst = worst.max((mu * u).abs() / self.p_scale);
            gp[self.o_mu() + b] += 2.0 * c * mu * u * u;
            for z in 0..nz {
                let xi = self.o_x() + b * nz + z;
                let xv = x(b, z);
                gp[xi] += 2.0 * c * mu * mu * u;
                // Demand, export and core rows.
                gp[self.o_dl() + b] -= w_dem[z] * xv;
                gp[xi] -= w_dem[z] * dl(b);
                if z == h {
                    gp[self.o_dl() + b] -= w_core[h] * xv;
                    gp[xi] -= w_core[h] * dl(b);
                } else {
                    gp[self.o_dl() + b] += w_exp[h] * xv;
                    gp[xi] += w_exp[h] * dl(b);
                }
                // Stationarity g ≥ 0 and x·g = 0.
                let shift = if z == h { -del(h) } else { sig(h) };
                let coef = pi(b) - lam(z) + shift;
                let g = dl(b) * coef + mu;
                let gm = g.min(0.0);
                pen += c * (gm * gm + (xv * g).powi(2));
                worst = worst.max(-gm / self.p_scale).max((xv * g).abs() / self.p_scale);
                let wg = 2.0 * c * gm + 2.0 * c * xv * xv * g;
                gp[xi] += 2.0 * c * xv * g * g;
                gp[self.o_dl() + b] += wg * coef;
                gp[self.o_pi() + b] += wg * dl(b);
                gp[self.o_lam() + z] -= wg * dl(b);
                if z == h {
                    gp[self.o_del() + h] -= wg * dl(b);
                } else {
                    gp[self.o_sig() + h] += wg * dl(b);
                }
                gp[self.o_mu() + b] += wg;
            }
        }
        for (g, p) in grad.iter_mut().zip(&gp) {
            *g -= rho * p;
        }
        (obj / self.obj_scale - rho * pen, worst)
    }

    /// Projected gradient ascent with Armijo backtracking, one round per
    /// penalty weight. Returns the final point and its largest violation.
    fn ascend(&self, mut v: Vec<f64>, cfg: &PotentialConfig) -> (Vec<f64>, f64) {
        let s = self.scales();
        let n = v.len();
        let mut grad = vec![0.0; n];
        let mut g2 = vec![0.0; n];
        let mut worst = 0.0;
        self.project(&mut v);
        for &rho in &cfg.penalties {
            let mut step = 1.0;
            let (mut f, w) = self.eval(&v, rho, &mut grad);
            worst = w;
            for _ in 0..cfg.inner_iterations {
                let mut accepted = false;
                for _ in 0..40 {
                    let mut cand: Vec<f64> = (0..n).map(|i| v[i] + step * s[i] * s[i] * grad[i]).collect();
                    self.project(&mut cand);
                    let lin: f64 = (0..n).map(|i| grad[i] * (cand[i] - v[i])).sum();
                    let (fc, wc) = self.eval(&cand, rho, &mut g2);
                    if fc >= f + 1e-4 * lin && lin >= 0.0 {
                        let moved = (0..n).map(|i| ((cand[i] - v[i]) / s[i]).abs()).fold(0.0, f64::max);
                        v = cand;
                        f = fc;
                        worst = wc;
                        std::mem::swap(&mut grad, &mut g2);
                        accepted = moved > 1e-12;
                        step *= 2.0;
                        break;
                    }
                    step *= 0.5;
                }
                if !accepted {
                    break;
                }
            }
        }
        (v, worst)
    }
}

/// Euclidean-style projection onto `{lo ≤ v_i ≤ hi, Σ v_i ≤ cap}` by
/// bisection on a common downward shift.
fn project_capped_box(v: &mut [f64], lo: f64, hi: f64, cap: f64) {
    let sum_at = |v: &[f64], t: f64| v.iter().map(|x| (x - t).clamp(lo, hi)).sum::<f64>();
    if sum_at(v, 0.0) <= cap {
        v.iter_mut().for_each(|x| *x = x.clamp(lo, hi));
        return;
    }
    let (mut a, mut b) = (0.0, v.iter().map(|x| x - lo).fold(0.0, f64::max));
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if sum_at(v, m) > cap {
            a = m;
        } else {
            b = m;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x - b).clamp(lo, hi));
}

fn random_ladders(instance: &MarketInstance, rng: &mut ChaCha8Rng) -> Vec<BidLadder> {
    instance
        .producers
        .iter()
        .map(|p| {
            let k = p.usable_bids();
            let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let ws: f64 = w.iter().sum();
            let spare = p.capacity_max - k as f64 * p.capacity_min;
            let bids = w
                .iter()
                .map(|wi| {
                    let cap = p.capacity_min + spare * wi / ws;
                    Bid::new(cap.min(p.capacity_max), rng.random_range(p.price_min..=p.price_max))
                })
                .collect();
            BidLadder::new(p.id, bids)
        })
        .collect()
}

fn cap_corner(instance: &MarketInstance) -> Vec<BidLadder> {
    instance
        .producers
        .iter()
        .map(|p| {
            let mut l = p.split_marginal_ladder();
            l.bids.iter_mut().for_each(|b| b.price = p.price_max);
            l
        })
        .collect()
}

struct StartResult {
    clearing: ClearingResult,
    ladders: Vec<BidLadder>,
    residual: f64,
}

fn run_start(
    instance: &MarketInstance,
    ladders: Vec<BidLadder>,
    cfg: &PotentialConfig,
    ascend: bool,
) -> Option<StartResult> {
    let inst = instance.with_ladders(ladders.clone());
    let warm = clearing::clear_market(&inst, None).ok();
    let (ladders, residual) = if ascend {
        let joint = Joint::new(&inst);
        let v0 = joint.pack(&ladders, warm.as_ref());
        let (v, w) = joint.ascend(v0, cfg);
        (joint.ladders(&v), w)
    } else {
        (ladders, 0.0)
    };
    let inst = instance.with_ladders(ladders.clone());
    if inst.validate_ladders().is_err() {
        return None;
    }
    let clearing = clearing::clear_market(&inst, None).ok()?;
    Some(StartResult { clearing, ladders, residual })
}

#[cfg(feature = "parallel")]
fn map_starts<F>(n: usize, f: F) -> Vec<Option<StartResult>>
where
    F: Fn(usize) -> Option<StartResult> + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_starts<F>(n: usize, f: F) -> Vec<Option<StartResult>>
where
    F: Fn(usize) -> Option<StartResult>,
{
    (0..n).map(f).collect()
}

/// Maximizes the potential over ladders, fractions and one shared multiplier
/// vector. Each start runs a penalized projected ascent; its ladders are then
/// cleared exactly, and the best exact potential wins (earliest start on
/// ties). Start 0 is `start` (or marginal bidding), start 1 the price-cap
/// corner, the rest seeded random ladders. A start that is already a
/// maximizer is returned with its ladders unchanged.
pub fn potential_solve(
    instance: &MarketInstance,
    start: Option<&StrategyProfile>,
    cfg: &PotentialConfig,
) -> Result<EquilibriumReport> {
    instance.check()?;
    let first = match start {
        Some(p) => p.ladders.clone(),
        None => instance.producers.iter().map(Producer::split_marginal_ladder).collect(),
    };
    let n = cfg.starts.max(1);
    let results = map_starts(n, |i| {
        let ladders = match i {
            0 => first.clone(),
            1 => cap_corner(instance),
            _ => random_ladders(instance, &mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64))),
        };
        let plain = run_start(instance, ladders.clone(), cfg, false);
        let ascended = run_start(instance, ladders, cfg, true);
        match (plain, ascended) {
            (Some(p), Some(a)) => {
                let tol = 1e-9 * (1.0 + p.clearing.total_cost.abs());
                Some(if a.clearing.total_cost > p.clearing.total_cost + tol { a } else { p })
            }
            (p, a) => p.or(a),
        }
    });
    let mut best: Option<StartResult> = None;
    for r in results.into_iter().flatten() {
        let better = match &best {
            None => true,
            Some(b) => r.clearing.total_cost > b.clearing.total_cost + 1e-9 * (1.0 + b.clearing.total_cost.abs()),
        };
        if better {
            best = Some(r);
        }
    }
    let best = best.ok_or(Error::NoFeasiblePoint)?;
    let inst = instance.with_ladders(best.ladders.clone());
    let profile = StrategyProfile::from_clearing(&inst, &best.clearing);
    let kkt = clearing::kkt_residual(&inst, &best.clearing)?;
    let br_gap = br_gaps(instance, &profile, cfg.br)?;
    let br_bound = instance.producers.iter().map(|p| 1e-6 * p.capacity_max * p.price_max).collect();
    Ok(EquilibriumReport {
        method: "potential".into(),
        potential_value: best.clearing.total_cost,
        vgne_gap: duals_spread(&profile.duals),
        profile,
        br_gap,
        br_bound,
        sweeps: 0,
        stop: StopReason::Solved,
        trace: Vec::new(),
        kkt: Some(kkt),
        penalty_residual: Some(best.residual),
        penalized_equivalence_hypothesis: equivalence_hypothesis(instance),
    })
}
