//! Browser bindings for the benchmark market. Every export takes and returns
//! JSON strings so the page needs no generated type glue.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;
use zonemarket::clearing::clear_market;
use zonemarket::market::{Bid, BidLadder, MarketInstance};
use zonemarket::scenario::{build_benchmark, coupling_grid, instance_for_day, GridMode, GridRange, ScenarioConfig};

/// Zone data and one bid price per producer; omitted fields keep the
/// benchmark values, omitted prices mean marginal bids.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClearRequest {
    pub demand: Option<Vec<f64>>,
    pub export_limit: Option<Vec<f64>>,
    pub core_portion: Option<Vec<f64>>,
    pub prices: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProducerOutcome {
    pub zone: String,
    pub capacity: f64,
    pub price: f64,
    pub accepted_mw: f64,
    pub revenue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClearResponse {
    pub total_cost: f64,
    /// Zonal clearing prices.
    pub prices: Vec<f64>,
    pub producers: Vec<ProducerOutcome>,
    /// `flows[from][to]` in MW.
    pub flows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub price: f64,
    pub accepted_mw: f64,
    pub revenue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingPoint {
    pub c_g: f64,
    /// Mean daily payment to each zone's producers.
    pub zone_costs: Vec<f64>,
}

fn template() -> Result<MarketInstance, String> {
    build_benchmark(&ScenarioConfig::benchmark()).map_err(|e| e.to_string())
}

fn market(req: &ClearRequest) -> Result<MarketInstance, String> {
    let mut m = template()?;
    let nz = m.n_zones();
    let fields = [(&req.demand, "demand"), (&req.export_limit, "export_limit"), (&req.core_portion, "core_portion")];
    for (v, name) in fields {
        if v.as_ref().is_some_and(|v| v.len() != nz) {
            return Err(format!("{name} needs {nz} values"));
        }
    }
    for (z, zone) in m.zones.iter_mut().enumerate() {
        if let Some(d) = &req.demand {
            zone.demand = d[z];
        }
        if let Some(e) = &req.export_limit {
            zone.export_limit = e[z];
        }
        if let Some(c) = &req.core_portion {
            zone.core_portion = c[z];
        }
    }
    if let Some(p) = &req.prices {
        if p.len() != m.n_producers() {
            return Err(format!("prices needs {} values", m.n_producers()));
        }
        let ladders = m
            .producers
            .iter()
            .zip(p)
            .map(|(pr, &price)| {
                BidLadder::new(pr.id, vec![Bid::new(pr.capacity_max, price.clamp(pr.price_min, pr.price_max))])
            })
            .collect();
        m = m.with_ladders(ladders);
    }
    m.check().map_err(|e| e.to_string())?;
    Ok(m)
}

pub fn clear(req: &ClearRequest) -> Result<ClearResponse, String> {
    let m = market(req)?;
    let r = clear_market(&m, None).map_err(|e| e.to_string())?;
    let producers = m
        .producers
        .iter()
        .zip(&m.ladders)
        .zip(&r.fractions)
        .zip(&r.revenue)
        .map(|(((p, l), x), &revenue)| ProducerOutcome {
            zone: m.zones[p.zone].name.clone(),
            capacity: l.total_capacity(),
            price: l.mean_price(),
            accepted_mw: l.bids.iter().zip(x).map(|(b, xz)| b.capacity * xz.iter().sum::<f64>()).sum(),
            revenue,
        })
        .collect();
    Ok(ClearResponse { total_cost: r.total_cost, prices: r.duals.demand.clone(), flows: r.flows(&m), producers })
}

/// Revenue of `producer` as its own bid price sweeps its admissible range,
/// everything else held at `req`.
pub fn revenue_curve(req: &ClearRequest, producer: usize, points: usize) -> Result<Vec<CurvePoint>, String> {
    let base = market(req)?;
    let p = base.producers.get(producer).ok_or_else(|| format!("no producer {producer}"))?;
    let mut prices: Vec<f64> = base.ladders.iter().map(|l| l.mean_price()).collect();
    let n = points.max(2);
    (0..n)
        .map(|i| {
            let price = p.price_min + (p.price_max - p.price_min) * i as f64 / (n - 1) as f64;
            prices[producer] = price;
            let out = clear(&ClearRequest { prices: Some(prices.clone()), ..req.clone() })?;
            let o = &out.producers[producer];
            Ok(CurvePoint { price, accepted_mw: o.accepted_mw, revenue: o.revenue })
        })
        .collect()
}

/// Mean zone costs over the synthetic demand series with marginal bids, for
/// `steps` values of the Germany-side coupling factor in `[0, c_g_max]`.
pub fn coupling_curve(c_g_max: f64, steps: usize, c_a: f64) -> Result<Vec<CouplingPoint>, String> {
    let cfg = ScenarioConfig::benchmark();
    let t = template()?;
    let series = cfg.demand_series(None).map_err(|e| e.to_string())?;
    let cg = GridRange { start: 0.0, end: c_g_max, steps: steps.max(1) };
    let ca = GridRange { start: c_a, end: c_a, steps: 1 };
    let grid = coupling_grid(&t, &cg, &ca, GridMode::Paired, &series).map_err(|e| e.to_string())?;
    grid.iter()
        .map(|pt| {
            let mut sum = vec![0.0; t.n_zones()];
            for d in 0..series.len() {
                let m = instance_for_day(&pt.template, &series, d).map_err(|e| e.to_string())?;
                let r = clear_market(&m, None).map_err(|e| e.to_string())?;
                sum.iter_mut().zip(r.cost_by_supplier_zone(&m)).for_each(|(a, c)| *a += c);
            }
            Ok(CouplingPoint { c_g: pt.c_g, zone_costs: sum.iter().map(|c| c / series.len() as f64).collect() })
        })
        .collect()
}

fn parse(json: &str) -> Result<ClearRequest, JsValue> {
    if json.trim().is_empty() {
        return Ok(ClearRequest::default());
    }
    serde_json::from_str(json).map_err(|e| JsValue::from_str(&e.to_string()))
}

fn to_js<T: Serialize>(v: Result<T, String>) -> Result<String, JsValue> {
    v.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

/// Benchmark zones and producers.
#[wasm_bindgen(js_name = benchmark)]
pub fn benchmark_js() -> Result<String, JsValue> {
    to_js(template().map(|m| serde_json::json!({ "zones": m.zones, "producers": m.producers })))
}

#[wasm_bindgen(js_name = clear)]
pub fn clear_js(request: &str) -> Result<String, JsValue> {
    to_js(clear(&parse(request)?))
}

#[wasm_bindgen(js_name = revenueCurve)]
pub fn revenue_curve_js(request: &str, producer: usize, points: usize) -> Result<String, JsValue> {
    to_js(revenue_curve(&parse(request)?, producer, points))
}

#[wasm_bindgen(js_name = couplingCurve)]
pub fn coupling_curve_js(c_g_max: f64, steps: usize, c_a: f64) -> Result<String, JsValue> {
    to_js(coupling_curve(c_g_max, steps, c_a))
}
