use std::fmt;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::Serialize;
use zonemarket::clearing::{
    self, check_slater, clear_market, kkt_residual, ClearingResult, FeasibilityVerdict, KktResidual,
};
use zonemarket::equilibrium::{
    gauss_seidel_run, potential_solve, EquilibriumReport, LowerLevel, ProducerOrder, StrategyProfile,
};
use zonemarket::market::{BidLadder, MarketInstance};
use zonemarket::marl::{self, Evaluation, PolicyBundle, RewardKind, TrainingTrace};
use zonemarket::metrics::{self, summarize_run, CostAttribution, CouplingRow, RunSummary};
use zonemarket::scenario::{
    build_benchmark, coupling_grid, instance_for_day, training_template, DemandSeries, GridMode, GridRange,
    ScenarioConfig, SYNTH_START,
};

use crate::run::RunDir;
use crate::{Attribution, Command, Common, GridArgs, Lower, Mode, Order, Reward, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Core(zonemarket::Error),
    Io(std::io::Error),
    Usage(String),
    /// The scenario fails its feasibility conditions; the run directory holds
    /// the verdict.
    Infeasible(PathBuf),
    /// Partial report written to the run directory.
    NotConverged(PathBuf),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Core(zonemarket::Error::Infeasible | zonemarket::Error::NoFeasiblePoint) => 3,
            CliError::NotConverged(_) => 4,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Infeasible(p) => write!(f, "scenario is not strictly feasible; see {}", p.display()),
            CliError::NotConverged(p) => write!(f, "no convergence; partial report in {}", p.display()),
        }
    }
}

impl From<zonemarket::Error> for CliError {
    fn from(e: zonemarket::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

struct Setup {
    cfg: ScenarioConfig,
    base: Option<PathBuf>,
    template: MarketInstance,
}

impl Setup {
    fn new(common: &Common, adjust: impl FnOnce(&mut ScenarioConfig)) -> Result<Self> {
        let (mut cfg, base) = match &common.scenario {
            Some(p) => (ScenarioConfig::load(p)?, p.parent().map(Path::to_path_buf)),
            None => (ScenarioConfig::benchmark(), None),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
            cfg.gauss_seidel.seed = s;
            cfg.potential.seed = s;
        }
        adjust(&mut cfg);
        let template = build_benchmark(&cfg)?;
        Ok(Self { cfg, base, template })
    }

    fn series(&self) -> Result<DemandSeries> {
        Ok(self.cfg.demand_series(self.base.as_deref())?)
    }

    fn run_dir(&self, common: &Common, command: &str) -> Result<RunDir> {
        Ok(RunDir::create(&common.out, common.run_dir.as_deref(), command, self.cfg.hash()?, self.cfg.seed)?)
    }

    /// The selected day's market and its date (`None` for the template).
    fn day(&self, day: &str) -> Result<(Option<NaiveDate>, MarketInstance)> {
        if day == "template" {
            return Ok((None, self.template.clone()));
        }
        let series = self.series()?;
        let t = match day.parse::<usize>() {
            Ok(i) => i,
            Err(_) => {
                let d = NaiveDate::parse_from_str(day, "%Y-%m-%d")
                    .map_err(|_| CliError::Usage(format!("--day `{day}` is neither a date nor an index")))?;
                series.date_index(d).ok_or_else(|| CliError::Usage(format!("{d} is not in the demand series")))?
            }
        };
        if t >= series.len() {
            return Err(CliError::Usage(format!("day {t} beyond the {}-day series", series.len())));
        }
        Ok((Some(series.dates[t]), instance_for_day(&self.template, &series, t)?))
    }
}

fn apply_train(cfg: &mut ScenarioConfig, t: &TrainArgs) {
    if let Some(e) = t.episodes {
        cfg.marl.episodes = e;
    }
    if let Some(s) = &t.static_producers {
        cfg.marl.static_producers = s.clone();
    }
    if let Some(r) = t.reward {
        cfg.marl.reward = match r {
            Reward::ProfitPricePenalty => RewardKind::ProfitPricePenalty,
            Reward::Profit => RewardKind::Profit,
        };
    }
}

fn attribution(a: Attribution) -> CostAttribution {
    match a {
        Attribution::Supplier => CostAttribution::Supplier,
        Attribution::Consumer => CostAttribution::Consumer,
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Clear { common, .. }
            | Command::Slater { common }
            | Command::Br { common, .. }
            | Command::Potential { common, .. }
            | Command::Train { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Sweep { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

pub fn dispatch(command: Command) -> Result<PathBuf> {
    match command.common().jobs {
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build()
                .map_err(|e| CliError::Usage(format!("--jobs: {e}")))?;
            pool.install(|| execute(command))
        }
        None => execute(command),
    }
}

fn execute(command: Command) -> Result<PathBuf> {
    match command {
        Command::Clear { common, day, ladders } => clear(&common, &day.day, ladders.as_deref()),
        Command::Slater { common } => slater(&common),
        Command::Br { common, day, max_sweeps, epsilon, order, lower } => {
            let setup = Setup::new(&common, |c| {
                let gs = &mut c.gauss_seidel;
                if let Some(m) = max_sweeps {
                    gs.max_sweeps = m;
                }
                if let Some(e) = epsilon {
                    gs.epsilon = e;
                }
                if let Some(o) = order {
                    gs.order = match o {
                        Order::Ascending => ProducerOrder::Ascending,
                        Order::Shuffled => ProducerOrder::Shuffled,
                    };
                }
                if let Some(l) = lower {
                    gs.br.lower = match l {
                        Lower::Residual => LowerLevel::Residual,
                        Lower::Market => LowerLevel::Market,
                    };
                }
            })?;
            br(&common, &setup, &day.day)
        }
        Command::Potential { common, day, starts } => {
            let setup = Setup::new(&common, |c| {
                if let Some(s) = starts {
                    c.potential.starts = s;
                }
            })?;
            potential(&common, &setup, &day.day)
        }
        Command::Train { common, train: t } => train(&common, &t),
        Command::Evaluate { common, policy, attribution: a } => evaluate(&common, &policy, attribution(a)),
        Command::Sweep { common, grid, policy, train: t, attribution: a } => {
            sweep(&common, &grid, policy.as_deref(), &t, attribution(a))
        }
        Command::Report { common, day, grid, policy, train: t, attribution: a } => {
            report(&common, &day.day, &grid, policy.as_deref(), &t, attribution(a))
        }
    }
}

#[derive(Serialize)]
struct ClearOutput<'a> {
    date: Option<NaiveDate>,
    demand: Vec<f64>,
    ladders: &'a [BidLadder],
    result: &'a ClearingResult,
    /// `flows[from][to]` in MW.
    flows: Vec<Vec<f64>>,
    kkt: KktResidual,
}

fn clear(common: &Common, day: &str, ladders: Option<&Path>) -> Result<PathBuf> {
    let setup = Setup::new(common, |_| {})?;
    let (date, mut inst) = setup.day(day)?;
    if let Some(p) = ladders {
        let l: Vec<BidLadder> = serde_json::from_str(&std::fs::read_to_string(p)?)?;
        inst = inst.with_ladders(l);
        inst.validate_ladders()?;
    }
    let r = clear_market(&inst, None)?;
    let mut run = setup.run_dir(common, "clear")?;
    run.write_json(
        "clearing.json",
        &ClearOutput {
            date,
            demand: inst.zones.iter().map(|z| z.demand).collect(),
            ladders: &inst.ladders,
            flows: r.flows(&inst),
            kkt: kkt_residual(&inst, &r)?,
            result: &r,
        },
    )?;
    Ok(run.finish()?)
}

#[derive(Serialize)]
struct DayVerdict {
    date: NaiveDate,
    verdict: FeasibilityVerdict,
}

#[derive(Serialize)]
struct SlaterOutput {
    template: FeasibilityVerdict,
    days: Vec<DayVerdict>,
    all_hold: bool,
}

fn slater(common: &Common) -> Result<PathBuf> {
    let setup = Setup::new(common, |_| {})?;
    let series = setup.series()?;
    let template = check_slater(&setup.template);
    let days = (0..series.len())
        .map(|t| {
            Ok(DayVerdict {
                date: series.dates[t],
                verdict: check_slater(&instance_for_day(&setup.template, &series, t)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let all_hold = template.overall && days.iter().all(|d| d.verdict.overall);
    let mut run = setup.run_dir(common, "slater")?;
    run.write_json("slater.json", &SlaterOutput { template, days, all_hold })?;
    let path = run.finish()?;
    if all_hold {
        Ok(path)
    } else {
        Err(CliError::Infeasible(path))
    }
}

fn write_trace_csv(path: &Path, report: &EquilibriumReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(std::io::Error::other(e)))?;
    let io = |e: csv::Error| CliError::Io(std::io::Error::other(e));
    w.write_record(["sweep", "potential", "distance", "tau"]).map_err(io)?;
    for r in &report.trace {
        w.write_record([r.sweep.to_string(), r.potential.to_string(), r.distance.to_string(), r.tau.to_string()])
            .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

fn run_gauss_seidel(setup: &Setup, inst: &MarketInstance, run: &mut RunDir) -> Result<EquilibriumReport> {
    let start = StrategyProfile::marginal(inst)?;
    let report = gauss_seidel_run(inst, &start, &setup.cfg.gauss_seidel)?;
    run.write_json("gauss_seidel.json", &report)?;
    write_trace_csv(&run.file("gauss_seidel_trace.csv"), &report)?;
    Ok(report)
}

fn br(common: &Common, setup: &Setup, day: &str) -> Result<PathBuf> {
    let (_, inst) = setup.day(day)?;
    let mut run = setup.run_dir(common, "br")?;
    let report = run_gauss_seidel(setup, &inst, &mut run)?;
    let path = run.finish()?;
    if report.converged() {
        Ok(path)
    } else {
        Err(CliError::NotConverged(path))
    }
}

fn potential(common: &Common, setup: &Setup, day: &str) -> Result<PathBuf> {
    let (_, inst) = setup.day(day)?;
    let report = potential_solve(&inst, None, &setup.cfg.potential)?;
    let mut run = setup.run_dir(common, "potential")?;
    run.write_json("potential.json", &report)?;
    Ok(run.finish()?)
}

#[derive(Serialize)]
struct AgentTrend {
    agent: usize,
    first_tenth: f64,
    last_tenth: f64,
}

#[derive(Serialize)]
struct TrainingOutput<'a> {
    seed: u64,
    episodes: usize,
    episode_costs: &'a [f64],
    episode_shortfall: &'a [f64],
    reward_trend: Vec<AgentTrend>,
}

/// Trains on the scenario's series at the coupling training point and writes
/// the checkpoint, trace CSV and training summary.
fn train_into(setup: &Setup, run: &mut RunDir) -> Result<(PolicyBundle, TrainingTrace)> {
    let series = setup.series()?;
    let template = training_template(&setup.cfg, &setup.template, &series)?;
    let (bundle, trace) = marl::train_run(&template, &series, &setup.cfg.marl, setup.cfg.seed)?;
    bundle.save(run.file("policy.json"))?;
    trace.write_csv(run.file("training_trace.csv"))?;
    let reward_trend = trace
        .reward_trend(0.1)
        .into_iter()
        .enumerate()
        .map(|(agent, (first_tenth, last_tenth))| AgentTrend { agent, first_tenth, last_tenth })
        .collect();
    run.write_json(
        "training.json",
        &TrainingOutput {
            seed: setup.cfg.seed,
            episodes: setup.cfg.marl.episodes,
            episode_costs: &trace.episode_costs,
            episode_shortfall: &trace.episode_shortfall,
            reward_trend,
        },
    )?;
    Ok((bundle, trace))
}

fn train(common: &Common, t: &TrainArgs) -> Result<PathBuf> {
    let setup = Setup::new(common, |c| apply_train(c, t))?;
    let mut run = setup.run_dir(common, "train")?;
    train_into(&setup, &mut run)?;
    Ok(run.finish()?)
}

/// Summary of an evaluation pass, with each day's market rebuilt from the
/// ladders the policy submitted.
fn summarize_eval(
    tag: &str,
    template: &MarketInstance,
    series: &DemandSeries,
    eval: &Evaluation,
    attr: CostAttribution,
) -> Result<RunSummary> {
    let instances = (0..eval.results.len())
        .map(|t| Ok(instance_for_day(template, series, t)?.with_ladders(eval.ladders[t].clone())))
        .collect::<Result<Vec<_>>>()?;
    let mut s = summarize_run(tag, &instances, &eval.results, attr)?;
    let short: f64 = eval.shortfall.iter().sum::<f64>() / eval.shortfall.len().max(1) as f64;
    s.metadata.insert("mean_shortfall_mw".into(), short.into());
    Ok(s)
}

#[derive(Serialize)]
struct EvaluationOutput<'a> {
    summary: &'a RunSummary,
    evaluation: &'a Evaluation,
}

fn write_days_csv(path: &Path, template: &MarketInstance, eval: &Evaluation) -> Result<()> {
    let io = |e: csv::Error| CliError::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut h = vec!["date".to_string(), "cost".into(), "shortfall".into()];
    h.extend(template.zones.iter().map(|z| format!("price_{}", z.name)));
    h.extend((0..template.n_producers()).map(|n| format!("revenue_{n}")));
    w.write_record(h).map_err(io)?;
    for (t, r) in eval.results.iter().enumerate() {
        let mut row = vec![eval.dates[t].to_string(), r.total_cost.to_string(), eval.shortfall[t].to_string()];
        row.extend(r.duals.demand.iter().map(f64::to_string));
        row.extend(r.revenue.iter().map(f64::to_string));
        w.write_record(row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate(common: &Common, policy: &Path, attr: CostAttribution) -> Result<PathBuf> {
    let setup = Setup::new(common, |_| {})?;
    let bundle = PolicyBundle::load(policy)?;
    let series = setup.series()?;
    let eval = marl::evaluate_policy(&bundle, &setup.template, &series)?;
    let mut run = setup.run_dir(common, "evaluate")?;
    if !eval.results.is_empty() {
        let summary = summarize_eval("marl", &setup.template, &series, &eval, attr)?;
        run.write_json("evaluation.json", &EvaluationOutput { summary: &summary, evaluation: &eval })?;
    }
    write_days_csv(&run.file("evaluation_days.csv"), &setup.template, &eval)?;
    Ok(run.finish()?)
}

fn grid_points(
    setup: &Setup,
    grid: &GridArgs,
    series: &DemandSeries,
) -> Result<Vec<zonemarket::scenario::CouplingPoint>> {
    let ca = grid.ca.unwrap_or(GridRange { start: setup.cfg.coupling.c_a, end: setup.cfg.coupling.c_a, steps: 1 });
    let mode = match grid.mode {
        Mode::Paired => GridMode::Paired,
        Mode::Product => GridMode::Product,
    };
    Ok(coupling_grid(&setup.template, &grid.cg, &ca, mode, series)?)
}

fn coupling_rows(
    bundle: &PolicyBundle,
    points: &[zonemarket::scenario::CouplingPoint],
    series: &DemandSeries,
    attr: CostAttribution,
) -> Result<Vec<CouplingRow>> {
    points
        .par_iter()
        .map(|p| {
            let eval = marl::evaluate_policy(bundle, &p.template, series)?;
            let summary = summarize_eval("marl", &p.template, series, &eval, attr)?;
            Ok(CouplingRow { c_g: p.c_g, c_a: p.c_a, summary })
        })
        .collect()
}

#[derive(Serialize)]
struct SweepOutput<'a> {
    rows: &'a [CouplingRow],
}

fn policy_for(setup: &Setup, policy: Option<&Path>, run: &mut RunDir) -> Result<(PolicyBundle, Option<TrainingTrace>)> {
    match policy {
        Some(p) => Ok((PolicyBundle::load(p)?, None)),
        None => train_into(setup, run).map(|(b, t)| (b, Some(t))),
    }
}

fn sweep(
    common: &Common,
    grid: &GridArgs,
    policy: Option<&Path>,
    t: &TrainArgs,
    attr: CostAttribution,
) -> Result<PathBuf> {
    let setup = Setup::new(common, |c| apply_train(c, t))?;
    let series = setup.series()?;
    let points = grid_points(&setup, grid, &series)?;
    let mut run = setup.run_dir(common, "sweep")?;
    let (bundle, _) = policy_for(&setup, policy, &mut run)?;
    let rows = coupling_rows(&bundle, &points, &series, attr)?;
    metrics::write_coupling_csv(&run.file(metrics::COUPLING_FILE), &rows)?;
    run.write_json("sweep.json", &SweepOutput { rows: &rows })?;
    Ok(run.finish()?)
}

/// Summary of an equilibrium profile on one market: the profile's own
/// acceptance, not a re-cleared one, so ties keep the solver's split.
fn summarize_profile(
    tag: &str,
    inst: &MarketInstance,
    report: &EquilibriumReport,
    attr: CostAttribution,
) -> Result<RunSummary> {
    let market = report.profile.instance(inst);
    let mut r = clearing::clear_market(&market, None)?;
    r.fractions = report.profile.fractions.clone();
    r.revenue = report.profile.revenue.clone();
    r.total_cost = r.revenue.iter().sum();
    let mut s = summarize_run(tag, &[market], &[r], attr)?;
    s.metadata.insert("sweeps".into(), report.sweeps.into());
    s.metadata.insert("converged".into(), report.converged().into());
    s.metadata.insert("certified".into(), report.certified().into());
    s.metadata.insert("vgne_gap".into(), report.vgne_gap.into());
    Ok(s)
}

fn one_day_series(inst: &MarketInstance, date: Option<NaiveDate>) -> Result<DemandSeries> {
    Ok(DemandSeries::new(
        inst.zones.iter().map(|z| z.name.clone()).collect(),
        vec![date.unwrap_or(SYNTH_START)],
        inst.zones.iter().map(|z| vec![z.demand]).collect(),
    )?)
}

fn report(
    common: &Common,
    day: &str,
    grid: &GridArgs,
    policy: Option<&Path>,
    t: &TrainArgs,
    attr: CostAttribution,
) -> Result<PathBuf> {
    let setup = Setup::new(common, |c| apply_train(c, t))?;
    let series = setup.series()?;
    let (date, inst) = setup.day(day)?;
    let points = grid_points(&setup, grid, &series)?;
    let mut run = setup.run_dir(common, "report")?;

    let gs = run_gauss_seidel(&setup, &inst, &mut run)?;
    let pot = potential_solve(&inst, None, &setup.cfg.potential)?;
    run.write_json("potential.json", &pot)?;

    let marginal = inst.with_ladders(inst.producers.iter().map(|p| p.marginal_ladder()).collect());
    let marginal_r = clear_market(&marginal, None)?;

    let (bundle, trace) = policy_for(&setup, policy, &mut run)?;
    let day_series = one_day_series(&inst, date)?;
    let day_template = setup.template.with_demands(&day_series.day(0));
    let marl_day = marl::evaluate_policy(&bundle, &day_template, &day_series)?;
    let marl_all = marl::evaluate_policy(&bundle, &setup.template, &series)?;

    let mut summaries = vec![
        summarize_profile("gauss_seidel", &inst, &gs, attr)?,
        summarize_profile("potential", &inst, &pot, attr)?,
        summarize_run("marginal", &[marginal], &[marginal_r], attr)?,
        summarize_eval("marl", &day_template, &day_series, &marl_day, attr)?,
        summarize_eval("marl_series", &setup.template, &series, &marl_all, attr)?,
    ];
    for s in &mut summaries {
        s.metadata.insert("seed".into(), setup.cfg.seed.into());
    }
    let rows = coupling_rows(&bundle, &points, &series, attr)?;
    let traces: Vec<(String, &TrainingTrace)> = trace.iter().map(|t| ("marl".to_string(), t)).collect();
    let files = metrics::emit_plot_data(&run.path, &summaries, &traces, &rows)?;
    run.record(&files);
    let path = run.finish()?;
    if gs.converged() {
        Ok(path)
    } else {
        Err(CliError::NotConverged(path))
    }
}
