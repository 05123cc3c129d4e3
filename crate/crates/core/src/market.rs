//! Producers, zones, bid ladders and the revenue/cost formulas every
//! algorithm in the crate shares.
//!
//! Accepted fractions are indexed `x[n][k][z]`: producer `n`, bid `k` of its
//! ladder, zone `z` the accepted capacity is delivered to.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accepted-fraction tensor `x[n][k][z]`.
pub type Fractions = Vec<Vec<Vec<f64>>>;

/// Relative slack used when checking bid bounds produced by floating-point
/// arithmetic (decoded actions, grid candidates).
pub const BOUND_TOL: f64 = 1e-9;

/// Default uniform price cap, in price units per MW.
pub const DEFAULT_PRICE_CAP: f64 = 100.0;

/// Default per-bid capacity floor, in MW.
pub const DEFAULT_CAPACITY_FLOOR: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: usize,
    pub name: String,
    /// Requested demand `D_z` (MW).
    pub demand: f64,
    /// Cap on what the zone's producers may deliver abroad, `E_z` (MW).
    pub export_limit: f64,
    /// Part of the zone's demand that its own producers must cover, `C_z` (MW).
    pub core_portion: f64,
}

impl Zone {
    pub fn new(id: usize, name: impl Into<String>, demand: f64, export_limit: f64, core_portion: f64) -> Self {
        Self { id, name: name.into(), demand, export_limit, core_portion }
    }

    fn check(&self) -> Result<()> {
        for (label, v) in
            [("demand", self.demand), ("export_limit", self.export_limit), ("core_portion", self.core_portion)]
        {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidMarket(format!("zone {}: {label} = {v} must be finite and >= 0", self.id)));
            }
        }
        if self.core_portion > self.demand {
            return Err(Error::InvalidMarket(format!(
                "zone {}: core portion {} exceeds demand {}",
                self.id, self.core_portion, self.demand
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Producer {
    pub id: usize,
    pub zone: usize,
    pub capacity_max: f64,
    /// Per-bid capacity floor.
    pub capacity_min: f64,
    /// Marginal price.
    pub price_min: f64,
    pub price_max: f64,
    pub max_bids: usize,
}

impl Producer {
    /// Producer with the default price cap and capacity floor.
    pub fn new(id: usize, zone: usize, capacity_max: f64, price_min: f64, max_bids: usize) -> Self {
        Self {
            id,
            zone,
            capacity_max,
            capacity_min: DEFAULT_CAPACITY_FLOOR.min(capacity_max),
            price_min,
            price_max: DEFAULT_PRICE_CAP.max(price_min),
            max_bids,
        }
    }

    fn check(&self) -> Result<()> {
        let ok = self.capacity_min.is_finite()
            && self.capacity_max.is_finite()
            && self.price_min.is_finite()
            && self.price_max.is_finite()
            && 0.0 <= self.capacity_min
            && self.capacity_min <= self.capacity_max
            && 0.0 <= self.price_min
            && self.price_min <= self.price_max
            && self.max_bids >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidMarket(format!("producer {} has inconsistent bounds: {self:?}", self.id)))
        }
    }

    /// Number of bids that fit under the capacity cap when each bid sits at
    /// least at the floor.
    pub fn usable_bids(&self) -> usize {
        if self.capacity_min <= 0.0 {
            return self.max_bids;
        }
        let fit = ((self.capacity_max / self.capacity_min) * (1.0 + BOUND_TOL)).floor() as usize;
        self.max_bids.min(fit).max(1)
    }

    /// Single full-capacity bid at the marginal price.
    pub fn marginal_ladder(&self) -> BidLadder {
        BidLadder::new(self.id, vec![Bid::new(self.capacity_max, self.price_min)])
    }

    /// Full capacity split evenly across the usable bids, all at the marginal
    /// price. Clears exactly like [`Producer::marginal_ladder`] but leaves room
    /// for per-bid price moves.
    pub fn split_marginal_ladder(&self) -> BidLadder {
        let k = self.usable_bids();
        let each = self.capacity_max / k as f64;
        BidLadder::new(self.id, (0..k).map(|_| Bid::new(each, self.price_min)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bid {
    /// Offered capacity `Δ_{n,k}` (MW).
    pub capacity: f64,
    /// Offered price `π_{n,k}` per MW.
    pub price: f64,
}

impl Bid {
    pub fn new(capacity: f64, price: f64) -> Self {
        Self { capacity, price }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidLadder {
    pub producer: usize,
    pub bids: Vec<Bid>,
}

impl BidLadder {
    pub fn new(producer: usize, bids: Vec<Bid>) -> Self {
        Self { producer, bids }
    }

    pub fn len(&self) -> usize {
        self.bids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bids.is_empty()
    }

    pub fn total_capacity(&self) -> f64 {
        self.bids.iter().map(|b| b.capacity).sum()
    }

    /// Unweighted mean of the bid prices, or 0 for an empty ladder.
    pub fn mean_price(&self) -> f64 {
        if self.bids.is_empty() {
            return 0.0;
        }
        self.bids.iter().map(|b| b.price).sum::<f64>() / self.bids.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LadderViolation {
    ProducerMismatch {
        ladder: usize,
        producer: usize,
    },
    TooManyBids {
        len: usize,
        max: usize,
    },
    /// Price outside `[π_min, π_max]`.
    PriceBounds {
        bid: usize,
        price: f64,
    },
    /// Capacity outside `[Δ_min, Δ_max]`.
    CapacityBounds {
        bid: usize,
        capacity: f64,
    },
    /// Total offered capacity above `Δ_max`.
    TotalCapacity {
        total: f64,
        cap: f64,
    },
}

/// Checks a ladder against its producer's bounds. An empty result means the
/// ladder is valid; violations are data, not failures.
pub fn validate_ladder(ladder: &BidLadder, producer: &Producer) -> Vec<LadderViolation> {
    let mut out = Vec::new();
    if ladder.producer != producer.id {
        out.push(LadderViolation::ProducerMismatch { ladder: ladder.producer, producer: producer.id });
    }
    if ladder.len() > producer.max_bids {
        out.push(LadderViolation::TooManyBids { len: ladder.len(), max: producer.max_bids });
    }
    let ptol = BOUND_TOL * producer.price_max.max(1.0);
    let ctol = BOUND_TOL * producer.capacity_max.max(1.0);
    for (k, bid) in ladder.bids.iter().enumerate() {
        if !(bid.price >= producer.price_min - ptol && bid.price <= producer.price_max + ptol) {
            out.push(LadderViolation::PriceBounds { bid: k, price: bid.price });
        }
        if !(bid.capacity >= producer.capacity_min - ctol && bid.capacity <= producer.capacity_max + ctol) {
            out.push(LadderViolation::CapacityBounds { bid: k, capacity: bid.capacity });
        }
    }
    let total = ladder.total_capacity();
    if total > producer.capacity_max + ctol {
        out.push(LadderViolation::TotalCapacity { total, cap: producer.capacity_max });
    }
    out
}

/// One clearing round: zones, producers and the ladder each producer submitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketInstance {
    pub zones: Vec<Zone>,
    pub producers: Vec<Producer>,
    pub ladders: Vec<BidLadder>,
}

impl MarketInstance {
    pub fn new(zones: Vec<Zone>, producers: Vec<Producer>, ladders: Vec<BidLadder>) -> Result<Self> {
        let inst = Self { zones, producers, ladders };
        inst.check()?;
        Ok(inst)
    }

    /// Structural checks: zone data, producer bounds, zone references and
    /// ladder count. Ladder contents are checked separately by
    /// [`MarketInstance::validate_ladders`].
    pub fn check(&self) -> Result<()> {
        for (i, z) in self.zones.iter().enumerate() {
            if z.id != i {
                return Err(Error::InvalidMarket(format!("zone at position {i} has id {}", z.id)));
            }
            z.check()?;
        }
        for (i, p) in self.producers.iter().enumerate() {
            if p.id != i {
                return Err(Error::InvalidMarket(format!("producer at position {i} has id {}", p.id)));
            }
            if p.zone >= self.zones.len() {
                return Err(Error::InvalidMarket(format!("producer {i} references missing zone {}", p.zone)));
            }
            p.check()?;
        }
        if self.ladders.len() != self.producers.len() {
            return Err(Error::InvalidMarket(format!(
                "{} ladders for {} producers",
                self.ladders.len(),
                self.producers.len()
            )));
        }
        Ok(())
    }

    pub fn validate_ladders(&self) -> Result<()> {
        for (ladder, producer) in self.ladders.iter().zip(&self.producers) {
            let v = validate_ladder(ladder, producer);
            if !v.is_empty() {
                return Err(Error::InvalidMarket(format!("producer {}: {v:?}", producer.id)));
            }
        }
        Ok(())
    }

    pub fn n_zones(&self) -> usize {
        self.zones.len()
    }

    pub fn n_producers(&self) -> usize {
        self.producers.len()
    }

    /// Total number of submitted bids `B`.
    pub fn n_bids(&self) -> usize {
        self.ladders.iter().map(BidLadder::len).sum()
    }

    /// Producers located in zone `z`.
    pub fn producers_in(&self, z: usize) -> impl Iterator<Item = &Producer> + '_ {
        self.producers.iter().filter(move |p| p.zone == z)
    }

    pub fn with_ladder(&self, producer: usize, ladder: BidLadder) -> Self {
        let mut out = self.clone();
        out.ladders[producer] = ladder;
        out
    }

    pub fn with_ladders(&self, ladders: Vec<BidLadder>) -> Self {
        Self { ladders, ..self.clone() }
    }

    pub fn with_demands(&self, demands: &[f64]) -> Self {
        let mut out = self.clone();
        for (z, d) in out.zones.iter_mut().zip(demands) {
            z.demand = *d;
        }
        out
    }

    /// Zero tensor shaped like this instance's ladders.
    pub fn zero_fractions(&self) -> Fractions {
        self.ladders.iter().map(|l| vec![vec![0.0; self.n_zones()]; l.len()]).collect()
    }

    pub fn check_fractions(&self, x: &Fractions) -> Result<()> {
        if x.len() != self.ladders.len() {
            return Err(Error::Shape(format!("{} producers in fractions, {} in market", x.len(), self.ladders.len())));
        }
        for (n, (xn, l)) in x.iter().zip(&self.ladders).enumerate() {
            if xn.len() != l.len() {
                return Err(Error::Shape(format!("producer {n}: {} bid rows, ladder has {}", xn.len(), l.len())));
            }
            if let Some(row) = xn.iter().find(|row| row.len() != self.n_zones()) {
                return Err(Error::Shape(format!(
                    "producer {n}: {} zone entries, market has {}",
                    row.len(),
                    self.n_zones()
                )));
            }
        }
        Ok(())
    }
}

/// Revenue `Σ_k π_k Δ_k Σ_z x[k][z]` of one producer.
pub fn producer_revenue(ladder: &BidLadder, fractions: &[Vec<f64>]) -> Result<f64> {
    if fractions.len() != ladder.len() {
        return Err(Error::Shape(format!("{} fraction rows for {} bids", fractions.len(), ladder.len())));
    }
    Ok(ladder.bids.iter().zip(fractions).map(|(bid, xz)| bid.price * bid.capacity * xz.iter().sum::<f64>()).sum())
}

/// Total payment of the market operator; identical to the sum of producer
/// revenues.
pub fn market_cost(instance: &MarketInstance, fractions: &Fractions) -> Result<f64> {
    instance.check_fractions(fractions)?;
    instance.ladders.iter().zip(fractions).map(|(l, x)| producer_revenue(l, x)).sum()
}
