//! Scenario construction: demand series, the two-zone benchmark, and the
//! export-coupling grid.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::equilibrium::{GsConfig, PotentialConfig};
use crate::error::{Error, Result};
use crate::market::{BidLadder, MarketInstance, Producer, Zone, DEFAULT_CAPACITY_FLOOR, DEFAULT_PRICE_CAP};
use crate::marl::MarlConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Daily demand per zone on a common, strictly increasing date axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandSeries {
    pub zones: Vec<String>,
    pub dates: Vec<NaiveDate>,
    /// `demand[z][t]` in MW.
    pub demand: Vec<Vec<f64>>,
    /// Calendar days missing between the first and last date.
    pub gaps: Vec<NaiveDate>,
}

impl DemandSeries {
    pub fn new(zones: Vec<String>, dates: Vec<NaiveDate>, demand: Vec<Vec<f64>>) -> Result<Self> {
        if demand.len() != zones.len() {
            return Err(Error::Scenario(format!("{} demand rows for {} zones", demand.len(), zones.len())));
        }
        if demand.iter().any(|d| d.len() != dates.len()) {
            return Err(Error::Scenario("zone series lengths differ from the date axis".into()));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Scenario("dates must be strictly increasing".into()));
        }
        if demand.iter().flatten().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Scenario("demand values must be finite and non-negative".into()));
        }
        let gaps = find_gaps(&dates);
        Ok(Self { zones, dates, demand, gaps })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn day(&self, t: usize) -> Vec<f64> {
        self.demand.iter().map(|d| d[t]).collect()
    }

    pub fn max(&self, zone: usize) -> f64 {
        self.demand[zone].iter().copied().fold(0.0, f64::max)
    }

    pub fn zone_index(&self, name: &str) -> Option<usize> {
        self.zones.iter().position(|z| z == name)
    }

    pub fn date_index(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    /// Joins single-zone series sharing one date axis.
    pub fn stack(parts: Vec<DemandSeries>) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::Scenario("no zone series to stack".into()));
        };
        let dates = first.dates.clone();
        let mut zones = Vec::new();
        let mut demand = Vec::new();
        for p in parts {
            if p.dates != dates {
                return Err(Error::Scenario("zone series use different dates".into()));
            }
            zones.extend(p.zones);
            demand.extend(p.demand);
        }
        Self::new(zones, dates, demand)
    }

    /// Summary `(min, 25th, 75th, max)` of one zone's series.
    pub fn quartiles(&self, zone: usize) -> (f64, f64, f64, f64) {
        let mut v = self.demand[zone].clone();
        v.sort_by(f64::total_cmp);
        (v[0], quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.75), v[v.len() - 1])
    }
}

fn find_gaps(dates: &[NaiveDate]) -> Vec<NaiveDate> {
    let mut gaps = Vec::new();
    for w in dates.windows(2) {
        let mut d = w[0].succ_opt();
        while let Some(day) = d {
            if day >= w[1] {
                break;
            }
            gaps.push(day);
            d = day.succ_opt();
        }
    }
    gaps
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    date: String,
    zone: String,
    demand_mw: String,
}

/// Reads `date,zone,demand_mw` rows. Zones keep their first-appearance order.
pub fn read_demand_csv(reader: impl Read) -> Result<DemandSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    if header.iter().collect::<Vec<_>>() != ["date", "zone", "demand_mw"] {
        return Err(Error::Parse { line: 1, message: "header must be `date,zone,demand_mw`".into() });
    }
    let mut zones: Vec<String> = Vec::new();
    let mut cells: Vec<BTreeMap<NaiveDate, (f64, usize)>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row: CsvRow = rec.deserialize(None).map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d")
            .map_err(|e| Error::Parse { line, message: format!("date `{}`: {e}", row.date) })?;
        let value: f64 = row
            .demand_mw
            .parse()
            .map_err(|_| Error::Parse { line, message: format!("demand `{}` is not a number", row.demand_mw) })?;
        if !value.is_finite() || value < 0.0 {
            return Err(Error::Parse { line, message: format!("demand {value} must be finite and non-negative") });
        }
        if row.zone.is_empty() {
            return Err(Error::Parse { line, message: "empty zone".into() });
        }
        let z = match zones.iter().position(|n| *n == row.zone) {
            Some(z) => z,
            None => {
                zones.push(row.zone.clone());
                cells.push(BTreeMap::new());
                zones.len() - 1
            }
        };
        if let Some((_, first)) = cells[z].insert(date, (value, line)) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate row for {} on {date} (first at line {first})", row.zone),
            });
        }
    }
    let dates: Vec<NaiveDate> = cells.first().map(|c| c.keys().copied().collect()).unwrap_or_default();
    for (z, c) in cells.iter().enumerate() {
        if c.keys().ne(dates.iter()) {
            let line = c.values().map(|v| v.1).max().unwrap_or(0);
            return Err(Error::Parse {
                line,
                message: format!("zone {} does not cover the same dates as {}", zones[z], zones[0]),
            });
        }
    }
    let demand = cells.iter().map(|c| c.values().map(|v| v.0).collect()).collect();
    DemandSeries::new(zones, dates, demand)
}

pub fn load_demand_csv(path: impl AsRef<Path>) -> Result<DemandSeries> {
    read_demand_csv(std::fs::File::open(path)?)
}

pub fn write_demand_csv_to(series: &DemandSeries, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["date", "zone", "demand_mw"]).map_err(io)?;
    for (t, date) in series.dates.iter().enumerate() {
        for (z, name) in series.zones.iter().enumerate() {
            w.write_record([date.format("%Y-%m-%d").to_string(), name.clone(), series.demand[z][t].to_string()])
                .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_demand_csv(series: &DemandSeries, path: impl AsRef<Path>) -> Result<()> {
    write_demand_csv_to(series, std::fs::File::create(path)?)
}

/// Quartile targets for a synthetic zone series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandProfile {
    pub min: f64,
    pub q25: f64,
    pub q75: f64,
    pub max: f64,
}

impl DemandProfile {
    pub fn germany() -> Self {
        Self { min: 1745.0, q25: 1898.0, q75: 1988.0, max: 2103.0 }
    }

    pub fn austria() -> Self {
        Self { min: 200.0, q25: 200.0, q75: 200.0, max: 225.0 }
    }

    fn check(&self) -> Result<()> {
        let ok = self.min >= 0.0 && self.min <= self.q25 && self.q25 <= self.q75 && self.q75 <= self.max;
        if ok && self.max.is_finite() {
            Ok(())
        } else {
            Err(Error::Scenario(format!("demand quartiles must be ordered and non-negative: {self:?}")))
        }
    }

    fn remap(&self, r: f64) -> f64 {
        let knots = [(0.0, self.min), (0.25, self.q25), (0.75, self.q75), (1.0, self.max)];
        for w in knots.windows(2) {
            let ((r0, v0), (r1, v1)) = (w[0], w[1]);
            if r <= r1 {
                return v0 + (v1 - v0) * (r - r0) / (r1 - r0);
            }
        }
        self.max
    }
}

pub const SYNTH_START: NaiveDate = match NaiveDate::from_ymd_opt(2024, 1, 1) {
    Some(d) => d,
    None => panic!("valid date"),
};

/// Seeded daily series matching the profile's quartiles. A flat middle half
/// (`q25 == q75 == min`) yields a constant base with rare spikes to `max`;
/// otherwise a weekly-and-seasonal sinusoid with noise is rank-mapped onto
/// the quartile knots.
pub fn synth_demand(name: &str, profile: &DemandProfile, days: usize, seed: u64) -> Result<DemandSeries> {
    profile.check()?;
    if days < 30 {
        return Err(Error::Scenario(format!("synthetic series needs at least 30 days, got {days}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = if profile.q75 - profile.min <= 1e-9 * profile.max.max(1.0) {
        let mut v = vec![profile.min; days];
        // At most one day in twenty spikes, and never the first quarter of
        // the ranking.
        let spikes = (days / 20).max(1);
        let mut idx: Vec<usize> = (0..days).collect();
        for i in 0..spikes {
            let j = rng.random_range(i..days);
            idx.swap(i, j);
        }
        for &i in &idx[..spikes] {
            v[i] = profile.max;
        }
        v
    } else {
        let noise = Normal::new(0.0, 0.35).map_err(|e| Error::Scenario(e.to_string()))?;
        let raw: Vec<f64> = (0..days)
            .map(|t| {
                let t = t as f64;
                (2.0 * std::f64::consts::PI * t / 365.0).cos()
                    + 0.3 * (2.0 * std::f64::consts::PI * t / 7.0).sin()
                    + noise.sample(&mut rng)
            })
            .collect();
        let mut order: Vec<usize> = (0..days).collect();
        order.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]).then(a.cmp(&b)));
        let mut v = vec![0.0; days];
        for (rank, &i) in order.iter().enumerate() {
            v[i] = profile.remap(rank as f64 / (days - 1) as f64);
        }
        v
    };
    let dates = (0..days).map(|t| SYNTH_START + Days::new(t as u64)).collect();
    DemandSeries::new(vec![name.to_string()], dates, vec![values])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneConfig {
    pub name: String,
    /// Demand used when no series is attached.
    pub demand: f64,
    pub export_limit: f64,
    #[serde(default)]
    pub core_portion: f64,
    /// Quartile targets for synthetic demand.
    #[serde(default)]
    pub synthetic: Option<DemandProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProducerConfig {
    pub zone: String,
    pub capacity: f64,
    pub price_min: f64,
    #[serde(default)]
    pub price_max: Option<f64>,
    #[serde(default)]
    pub capacity_min: Option<f64>,
    #[serde(default)]
    pub max_bids: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub max_bids: usize,
    pub capacity_floor: f64,
    pub price_cap: f64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self { max_bids: 5, capacity_floor: DEFAULT_CAPACITY_FLOOR, price_cap: DEFAULT_PRICE_CAP }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandConfig {
    /// CSV path, relative to the config file.
    #[serde(default)]
    pub csv: Option<String>,
    pub days: usize,
    pub seed: u64,
}

impl Default for DemandConfig {
    fn default() -> Self {
        Self { csv: None, days: 60, seed: 7 }
    }
}

/// Export factors: zone 0's limit is `factors[0]` times the peak demand of
/// zone 1 and vice versa.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingConfig {
    pub c_g: f64,
    pub c_a: f64,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self { c_g: 0.4, c_a: 0.04 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub market: MarketConfig,
    pub zones: Vec<ZoneConfig>,
    pub producers: Vec<ProducerConfig>,
    #[serde(default)]
    pub demand: DemandConfig,
    /// Training point of the coupling study; the benchmark itself keeps the
    /// literal export limits of `zones`.
    #[serde(default)]
    pub coupling: CouplingConfig,
    #[serde(default)]
    pub gauss_seidel: GsConfig,
    #[serde(default)]
    pub potential: PotentialConfig,
    #[serde(default)]
    pub marl: MarlConfig,
}

impl ScenarioConfig {
    /// The Germany–Austria benchmark: eight producers, five bids of at least
    /// 5 MW each, 80 MW export limits, 100 MW Austrian core portion.
    pub fn benchmark() -> Self {
        let producers = [
            ("DE", 700.0, 7.0),
            ("DE", 700.0, 7.0),
            ("AT", 150.0, 3.0),
            ("AT", 150.0, 3.0),
            ("DE", 650.0, 6.0),
            ("DE", 600.0, 5.0),
            ("DE", 850.0, 8.0),
            ("AT", 350.0, 4.0),
        ]
        .into_iter()
        .map(|(zone, capacity, price_min)| ProducerConfig {
            zone: zone.into(),
            capacity,
            price_min,
            price_max: None,
            capacity_min: None,
            max_bids: None,
        })
        .collect();
        Self {
            version: SCHEMA_VERSION,
            name: "germany-austria".into(),
            seed: 0,
            market: MarketConfig::default(),
            zones: vec![
                ZoneConfig {
                    name: "DE".into(),
                    demand: 2103.0,
                    export_limit: 80.0,
                    core_portion: 0.0,
                    synthetic: Some(DemandProfile::germany()),
                },
                ZoneConfig {
                    name: "AT".into(),
                    demand: 225.0,
                    export_limit: 80.0,
                    core_portion: 100.0,
                    synthetic: Some(DemandProfile::austria()),
                },
            ],
            producers,
            demand: DemandConfig::default(),
            coupling: CouplingConfig::default(),
            gauss_seidel: GsConfig::default(),
            potential: PotentialConfig::default(),
            marl: MarlConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Scenario(e.to_string()))
    }

    /// Stable digest of the configuration, used to tag checkpoints.
    pub fn hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::Scenario(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.version
            )));
        }
        if self.zones.is_empty() {
            return Err(Error::Scenario("at least one zone is required".into()));
        }
        for (i, z) in self.zones.iter().enumerate() {
            if self.zones[..i].iter().any(|o| o.name == z.name) {
                return Err(Error::Scenario(format!("duplicate zone name {}", z.name)));
            }
            if let Some(p) = &z.synthetic {
                p.check()?;
            }
        }
        if self.producers.iter().any(|p| self.zone_index(&p.zone).is_none()) {
            return Err(Error::Scenario("producer references an unknown zone".into()));
        }
        if self.market.max_bids == 0 {
            return Err(Error::Scenario("max_bids must be at least 1".into()));
        }
        if !(self.coupling.c_g >= 0.0 && self.coupling.c_a >= 0.0) {
            return Err(Error::Scenario("coupling factors must be non-negative".into()));
        }
        self.build_template().map(|_| ())
    }

    pub fn zone_index(&self, name: &str) -> Option<usize> {
        self.zones.iter().position(|z| z.name == name)
    }

    fn build_template(&self) -> Result<MarketInstance> {
        let zones = self
            .zones
            .iter()
            .enumerate()
            .map(|(i, z)| Zone::new(i, z.name.clone(), z.demand, z.export_limit, z.core_portion))
            .collect();
        let producers: Vec<Producer> = self
            .producers
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut prod = Producer::new(
                    i,
                    self.zone_index(&p.zone).unwrap_or(usize::MAX),
                    p.capacity,
                    p.price_min,
                    p.max_bids.unwrap_or(self.market.max_bids),
                );
                prod.price_max = p.price_max.unwrap_or(self.market.price_cap);
                prod.capacity_min = p.capacity_min.unwrap_or(self.market.capacity_floor);
                prod
            })
            .collect();
        let ladders = producers.iter().map(Producer::marginal_ladder).collect();
        let inst = MarketInstance::new(zones, producers, ladders)?;
        inst.validate_ladders()?;
        Ok(inst)
    }

    /// Demand series named by the config: the CSV when given (resolved
    /// against `base_dir`), otherwise synthetic per-zone series.
    pub fn demand_series(&self, base_dir: Option<&Path>) -> Result<DemandSeries> {
        if let Some(csv) = &self.demand.csv {
            let path = match base_dir {
                Some(b) => b.join(csv),
                None => csv.into(),
            };
            let s = load_demand_csv(path)?;
            return self.align_series(s);
        }
        let parts = self
            .zones
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let profile = z.synthetic.clone().unwrap_or(DemandProfile {
                    min: z.demand,
                    q25: z.demand,
                    q75: z.demand,
                    max: z.demand,
                });
                synth_demand(&z.name, &profile, self.demand.days, self.demand.seed.wrapping_add(i as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        DemandSeries::stack(parts)
    }

    /// Reorders a loaded series to the config's zone order.
    fn align_series(&self, s: DemandSeries) -> Result<DemandSeries> {
        let demand = self
            .zones
            .iter()
            .map(|z| {
                s.zone_index(&z.name)
                    .map(|i| s.demand[i].clone())
                    .ok_or_else(|| Error::Scenario(format!("demand file has no zone {}", z.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = DemandSeries::new(self.zones.iter().map(|z| z.name.clone()).collect(), s.dates, demand)?;
        out.gaps = s.gaps;
        Ok(out)
    }
}

/// Market template for a validated config; ladders are marginal bids.
pub fn build_benchmark(config: &ScenarioConfig) -> Result<MarketInstance> {
    config.validate()?;
    config.build_template()
}

/// Template with day `t`'s demands. A core portion above the day's demand
/// is capped at the demand.
pub fn instance_for_day(template: &MarketInstance, series: &DemandSeries, t: usize) -> Result<MarketInstance> {
    if series.zones.len() != template.n_zones() {
        return Err(Error::Shape(format!("series has {} zones, market {}", series.zones.len(), template.n_zones())));
    }
    if t >= series.len() {
        return Err(Error::Shape(format!("day {t} beyond a {}-day series", series.len())));
    }
    let mut inst = template.with_demands(&series.day(t));
    for z in &mut inst.zones {
        z.core_portion = z.core_portion.min(z.demand);
    }
    Ok(inst)
}

/// Inclusive evenly spaced range written `start:end:steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRange {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl GridRange {
    pub fn points(&self) -> Vec<f64> {
        match self.steps {
            0 => Vec::new(),
            1 => vec![self.start],
            n => (0..n).map(|i| self.start + (self.end - self.start) * i as f64 / (n - 1) as f64).collect(),
        }
    }
}

impl std::str::FromStr for GridRange {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Scenario(format!("range `{s}` is not start:end:steps"));
        match parts.as_slice() {
            [a] => {
                let v = a.trim().parse().map_err(|_| bad())?;
                Ok(Self { start: v, end: v, steps: 1 })
            }
            [a, b, n] => Ok(Self {
                start: a.trim().parse().map_err(|_| bad())?,
                end: b.trim().parse().map_err(|_| bad())?,
                steps: n.trim().parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GridMode {
    /// i-th `c_G` with i-th `c_A`; both ranges need the same step count
    /// unless one has a single point.
    #[default]
    Paired,
    /// Every combination.
    Product,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPoint {
    pub c_g: f64,
    pub c_a: f64,
    pub template: MarketInstance,
}

/// Templates with `E_0 = c_G · max D_1` and `E_1 = c_A · max D_0` for a
/// two-zone market.
pub fn coupling_grid(
    template: &MarketInstance,
    c_g: &GridRange,
    c_a: &GridRange,
    mode: GridMode,
    series: &DemandSeries,
) -> Result<Vec<CouplingPoint>> {
    if template.n_zones() != 2 || series.zones.len() != 2 {
        return Err(Error::Scenario("the coupling grid needs exactly two zones".into()));
    }
    let (gs, as_) = (c_g.points(), c_a.points());
    if gs.iter().chain(&as_).any(|c| !(*c >= 0.0)) {
        return Err(Error::Scenario("coupling factors must be non-negative".into()));
    }
    let pairs: Vec<(f64, f64)> = match mode {
        GridMode::Product => gs.iter().flat_map(|&g| as_.iter().map(move |&a| (g, a))).collect(),
        GridMode::Paired => match (gs.len(), as_.len()) {
            (n, m) if n == m => gs.iter().copied().zip(as_.iter().copied()).collect(),
            (_, 1) => gs.iter().map(|&g| (g, as_[0])).collect(),
            (1, _) => as_.iter().map(|&a| (gs[0], a)).collect(),
            (n, m) => return Err(Error::Scenario(format!("paired grid needs equal step counts, got {n} and {m}"))),
        },
    };
    let (max0, max1) = (series.max(0), series.max(1));
    Ok(pairs
        .into_iter()
        .map(|(g, a)| {
            let mut t = template.clone();
            t.zones[0].export_limit = g * max1;
            t.zones[1].export_limit = a * max0;
            CouplingPoint { c_g: g, c_a: a, template: t }
        })
        .collect())
}

/// Template at the coupling study's training point, `config.coupling`.
/// Markets without exactly two zones are returned unchanged.
pub fn training_template(
    config: &ScenarioConfig,
    template: &MarketInstance,
    series: &DemandSeries,
) -> Result<MarketInstance> {
    if template.n_zones() != 2 {
        return Ok(template.clone());
    }
    let one = |c: f64| GridRange { start: c, end: c, steps: 1 };
    let mut g =
        coupling_grid(template, &one(config.coupling.c_g), &one(config.coupling.c_a), GridMode::Paired, series)?;
    Ok(g.remove(0).template)
}

/// Single full-capacity bid at the marginal price for each producer.
pub fn marginal_ladders(template: &MarketInstance) -> Vec<BidLadder> {
    template.producers.iter().map(Producer::marginal_ladder).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clearing::check_slater;

    #[test]
    fn benchmark_has_expected_producers() {
        let m = build_benchmark(&ScenarioConfig::benchmark()).unwrap();
        assert_eq!(m.n_producers(), 8);
        let p6 = &m.producers[6];
        assert_eq!((p6.zone, p6.capacity_max, p6.price_min), (0, 850.0, 8.0));
        assert_eq!(m.zones[1].core_portion, 100.0);
        assert_eq!(m.zones[0].core_portion, 0.0);
        assert!(m.zones.iter().all(|z| z.export_limit == 80.0));
        assert!(m.producers.iter().all(|p| p.max_bids == 5 && p.capacity_min == 5.0 && p.price_max == 100.0));
        let v = check_slater(&m);
        assert_eq!(v.condition_i, vec![true, true]);
        assert!(v.overall);
    }

    #[test]
    fn bundled_config_is_the_benchmark() {
        let text = include_str!("../../../scenarios/benchmark.toml");
        assert_eq!(ScenarioConfig::from_toml(text).unwrap(), ScenarioConfig::benchmark());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ScenarioConfig::benchmark().to_toml().unwrap();
        text.push_str("\nsurprise = 1\n");
        assert!(ScenarioConfig::from_toml(&text).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = ScenarioConfig::benchmark();
        assert_eq!(ScenarioConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn core_above_demand_is_rejected() {
        let mut c = ScenarioConfig::benchmark();
        c.zones[1].core_portion = 300.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn csv_three_days_two_zones() {
        let text = "date,zone,demand_mw\n2024-01-01,DE,2000\n2024-01-01,AT,200\n2024-01-02,DE,2103\n\
                    2024-01-02,AT,225\n2024-01-03,DE,1900\n2024-01-03,AT,200\n";
        let s = read_demand_csv(text.as_bytes()).unwrap();
        assert_eq!(s.zones, vec!["DE", "AT"]);
        assert_eq!(s.demand[0].len(), 3);
        assert_eq!(s.demand[1].len(), 3);
        assert_eq!(s.max(0), 2103.0);
        assert!(s.gaps.is_empty());
    }

    #[test]
    fn csv_negative_demand_reports_line() {
        let text = "date,zone,demand_mw\n2024-01-01,DE,2000\n2024-01-02,DE,-5\n";
        match read_demand_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_gaps_are_flagged() {
        let text = "date,zone,demand_mw\n2024-01-01,DE,1\n2024-01-04,DE,2\n";
        let s = read_demand_csv(text.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.gaps.len(), 2);
    }

    #[test]
    fn csv_bad_header() {
        assert!(matches!(read_demand_csv("day,zone,mw\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn synthetic_quartiles_match_targets() {
        for (profile, name) in [(DemandProfile::germany(), "DE"), (DemandProfile::austria(), "AT")] {
            for days in [30, 60, 240] {
                let s = synth_demand(name, &profile, days, 11).unwrap();
                let (a, b, c, d) = s.quartiles(0);
                for (got, want) in [(a, profile.min), (b, profile.q25), (c, profile.q75), (d, profile.max)] {
                    assert!((got - want).abs() <= 0.02 * want, "{name} {days}: {got} vs {want}");
                }
            }
        }
        let s = synth_demand("AT", &DemandProfile::austria(), 60, 1).unwrap();
        let (_, q25, q75, _) = s.quartiles(0);
        assert_eq!((q25, q75), (200.0, 200.0));
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = synth_demand("DE", &DemandProfile::germany(), 60, 5).unwrap();
        let b = synth_demand("DE", &DemandProfile::germany(), 60, 5).unwrap();
        let c = synth_demand("DE", &DemandProfile::germany(), 60, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(synth_demand("DE", &DemandProfile::germany(), 29, 5).is_err());
    }

    #[test]
    fn coupling_grid_examples() {
        let cfg = ScenarioConfig::benchmark();
        let m = build_benchmark(&cfg).unwrap();
        let s = cfg.demand_series(None).unwrap();
        let g = coupling_grid(&m, &"2".parse().unwrap(), &"0".parse().unwrap(), GridMode::Paired, &s).unwrap();
        assert_eq!(g[0].template.zones[0].export_limit, 2.0 * s.max(1));
        assert_eq!(s.max(1), 225.0);
        assert_eq!(g[0].template.zones[0].export_limit, 450.0);
        let g = coupling_grid(&m, &"0".parse().unwrap(), &"0".parse().unwrap(), GridMode::Paired, &s).unwrap();
        assert!(g[0].template.zones.iter().all(|z| z.export_limit == 0.0));
        let g =
            coupling_grid(&m, &"0:2:11".parse().unwrap(), &"0:0.2:11".parse().unwrap(), GridMode::Paired, &s).unwrap();
        assert_eq!(g.len(), 11);
        assert!((g[2].c_g - 0.4).abs() < 1e-12 && (g[2].c_a - 0.04).abs() < 1e-12);
        let g =
            coupling_grid(&m, &"0:2:3".parse().unwrap(), &"0:0.2:2".parse().unwrap(), GridMode::Product, &s).unwrap();
        assert_eq!(g.len(), 6);
    }

    #[test]
    fn training_template_uses_the_coupling_factors() {
        let cfg = ScenarioConfig::benchmark();
        let m = build_benchmark(&cfg).unwrap();
        let s = cfg.demand_series(None).unwrap();
        let t = training_template(&cfg, &m, &s).unwrap();
        assert!((t.zones[0].export_limit - 0.4 * s.max(1)).abs() < 1e-9);
        assert!((t.zones[1].export_limit - 0.04 * s.max(0)).abs() < 1e-9);
        assert_eq!(t.producers, m.producers);
    }

    #[test]
    fn unit_grid_at_benchmark_factors_reproduces_limits() {
        // Factors that map the series peaks onto 80 MW.
        let cfg = ScenarioConfig::benchmark();
        let m = build_benchmark(&cfg).unwrap();
        let s = cfg.demand_series(None).unwrap();
        let cg = GridRange { start: 80.0 / s.max(1), end: 80.0 / s.max(1), steps: 1 };
        let ca = GridRange { start: 80.0 / s.max(0), end: 80.0 / s.max(0), steps: 1 };
        let g = coupling_grid(&m, &cg, &ca, GridMode::Paired, &s).unwrap();
        for (a, b) in g[0].template.zones.iter().zip(&m.zones) {
            assert!((a.export_limit - b.export_limit).abs() < 1e-9);
        }
    }

    #[test]
    fn day_instances_pass_slater() {
        let cfg = ScenarioConfig::benchmark();
        let m = build_benchmark(&cfg).unwrap();
        let s = cfg.demand_series(None).unwrap();
        for t in 0..s.len() {
            assert!(check_slater(&instance_for_day(&m, &s, t).unwrap()).overall);
        }
    }
}
