//! Market-level metrics and plot-data files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clearing::ClearingResult;
use crate::error::{Error, Result};
use crate::market::MarketInstance;
use crate::marl::TrainingTrace;

/// Gini index of non-negative profits: with `y` sorted ascending,
/// `G = (n + 1 − 2·Σ (n + 1 − i)·y_i / Σ y_i) / n`.
pub fn gini(profits: &[f64]) -> Result<f64> {
    if profits.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::Shape("profits must be finite and non-negative".into()));
    }
    let total: f64 = profits.iter().sum();
    if profits.is_empty() || total <= 0.0 {
        return Err(Error::ZeroTotal);
    }
    let mut y = profits.to_vec();
    y.sort_by(f64::total_cmp);
    let n = y.len() as f64;
    let weighted: f64 = y.iter().enumerate().map(|(i, v)| (n - i as f64) * v).sum();
    Ok((n + 1.0 - 2.0 * weighted / total) / n)
}

/// How a day's payments are split over zones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostAttribution {
    /// To the zone of the producer that is paid.
    #[default]
    Supplier,
    /// To the zone whose demand the accepted MW serve.
    Consumer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub days: usize,
    pub attribution: CostAttribution,
    pub zones: Vec<String>,
    /// Mean daily market cost.
    pub average_cost: f64,
    pub zone_costs: Vec<f64>,
    pub producer_profit: Vec<f64>,
    /// `None` when every producer earned nothing.
    pub gini: Option<f64>,
    pub zone_gini: Vec<Option<f64>>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Averages per-day clearings. `instances[t]` is the market that produced
/// `results[t]`.
pub fn summarize_run(
    algorithm: &str,
    instances: &[MarketInstance],
    results: &[ClearingResult],
    attribution: CostAttribution,
) -> Result<RunSummary> {
    if results.is_empty() {
        return Err(Error::Shape("no clearing results to summarize".into()));
    }
    if instances.len() != results.len() {
        return Err(Error::Shape(format!("{} instances for {} results", instances.len(), results.len())));
    }
    let first = &instances[0];
    let (nz, np) = (first.n_zones(), first.n_producers());
    let days = results.len() as f64;
    let mut zone_costs = vec![0.0; nz];
    let mut producer_profit = vec![0.0; np];
    let mut average_cost = 0.0;
    for (inst, r) in instances.iter().zip(results) {
        if inst.n_zones() != nz || inst.n_producers() != np {
            return Err(Error::Shape("days use different market layouts".into()));
        }
        let by_zone = match attribution {
            CostAttribution::Supplier => r.cost_by_supplier_zone(inst),
            CostAttribution::Consumer => r.cost_by_consumer_zone(inst),
        };
        zone_costs.iter_mut().zip(by_zone).for_each(|(a, c)| *a += c / days);
        producer_profit.iter_mut().zip(&r.revenue).for_each(|(a, v)| *a += v / days);
        average_cost += r.total_cost / days;
    }
    let zone_gini = (0..nz)
        .map(|z| {
            let v: Vec<f64> = first.producers_in(z).map(|p| producer_profit[p.id]).collect();
            gini(&v).ok()
        })
        .collect();
    Ok(RunSummary {
        algorithm: algorithm.to_string(),
        days: results.len(),
        attribution,
        zones: first.zones.iter().map(|z| z.name.clone()).collect(),
        average_cost,
        zone_costs,
        gini: gini(&producer_profit).ok(),
        producer_profit,
        zone_gini,
        metadata: BTreeMap::new(),
    })
}

/// One evaluated point of the export-coupling sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingRow {
    pub c_g: f64,
    pub c_a: f64,
    pub summary: RunSummary,
}

pub const REWARDS_FILE: &str = "rewards.csv";
pub const COSTS_FILE: &str = "costs.csv";
pub const COUPLING_FILE: &str = "coupling.csv";
pub const SUMMARY_FILE: &str = "summary.json";

fn opt(v: Option<f64>) -> String {
    v.map(|g| g.to_string()).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes the `rewards.csv` layout.
pub fn write_rewards_csv(path: &Path, traces: &[(String, &TrainingTrace)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["run", "episode", "agent", "zone", "mean_reward", "std_reward", "mean_cost"]).map_err(csv_err)?;
    for (run, t) in traces {
        for r in &t.rows {
            w.write_record([
                run.clone(),
                r.episode.to_string(),
                r.agent.to_string(),
                r.zone.to_string(),
                r.mean_reward.to_string(),
                r.std_reward.to_string(),
                r.mean_cost.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Zone columns follow the first summary; every summary must share them.
fn zone_header(summaries: &[&RunSummary]) -> Result<Vec<String>> {
    let zones = summaries.first().map(|s| s.zones.clone()).unwrap_or_default();
    if summaries.iter().any(|s| s.zones != zones) {
        return Err(Error::Shape("summaries use different zones".into()));
    }
    Ok(zones)
}

fn summary_cells(s: &RunSummary) -> Vec<String> {
    let mut row = vec![s.algorithm.clone(), s.days.to_string(), s.average_cost.to_string(), opt(s.gini)];
    row.extend(s.zone_costs.iter().map(f64::to_string));
    row.extend(s.zone_gini.iter().map(|g| opt(*g)));
    row
}

fn summary_header(zones: &[String]) -> Vec<String> {
    let mut h: Vec<String> = ["algorithm", "days", "average_cost", "gini"].map(String::from).to_vec();
    h.extend(zones.iter().map(|z| format!("cost_{z}")));
    h.extend(zones.iter().map(|z| format!("gini_{z}")));
    h
}

/// Writes the `costs.csv` layout.
pub fn write_costs_csv(path: &Path, summaries: &[RunSummary]) -> Result<()> {
    let zones = zone_header(&summaries.iter().collect::<Vec<_>>())?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(summary_header(&zones)).map_err(csv_err)?;
    for s in summaries {
        w.write_record(summary_cells(s)).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the `coupling.csv` layout.
pub fn write_coupling_csv(path: &Path, coupling: &[CouplingRow]) -> Result<()> {
    let zones = zone_header(&coupling.iter().map(|c| &c.summary).collect::<Vec<_>>())?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut h = vec!["c_g".to_string(), "c_a".to_string()];
    h.extend(summary_header(&zones));
    w.write_record(h).map_err(csv_err)?;
    for c in coupling {
        let mut row = vec![c.c_g.to_string(), c.c_a.to_string()];
        row.extend(summary_cells(&c.summary));
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    summaries: &'a [RunSummary],
    coupling: &'a [CouplingRow],
}

/// Writes the three plot-data CSVs and the summary JSON into `out`.
///
/// `rewards.csv`: `run,episode,agent,zone,mean_reward,std_reward,mean_cost`.
/// `costs.csv`: `algorithm,days,average_cost,gini,cost_<zone>…,gini_<zone>…`.
/// `coupling.csv`: `c_g,c_a` followed by the `costs.csv` columns.
pub fn emit_plot_data(
    out: &Path,
    summaries: &[RunSummary],
    traces: &[(String, &TrainingTrace)],
    coupling: &[CouplingRow],
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let files: Vec<PathBuf> =
        [REWARDS_FILE, COSTS_FILE, COUPLING_FILE, SUMMARY_FILE].iter().map(|f| out.join(f)).collect();
    write_rewards_csv(&files[0], traces)?;
    write_costs_csv(&files[1], summaries)?;
    write_coupling_csv(&files[2], coupling)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(&files[3])?);
    serde_json::to_writer_pretty(&mut f, &SummaryFile { summaries, coupling })?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(files)
}
