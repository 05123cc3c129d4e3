mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use zonemarket::scenario::GridRange;

/// Zonal reserve-market clearing, bidding equilibria and multi-agent learning.
///
/// Every command writes into its own run directory: `--run-dir` when given,
/// otherwise `<out>/<command>-<timestamp>`. Each run directory holds a
/// `manifest.json` listing the files with their SHA-256 digests.
///
/// Settings come from, in decreasing precedence: command-line flags, the
/// scenario file, built-in defaults. Without `--scenario` the bundled
/// two-zone benchmark is used.
///
/// Exit codes: 0 success, 1 other failure, 2 usage error, 3 infeasible
/// scenario, 4 no convergence (partial report still written).
#[derive(Parser)]
#[command(name = "zonemarket", version, verbatim_doc_comment)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario TOML file; the bundled benchmark when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Run seed. Replaces the scenario's run, Gauss-Seidel and multi-start
    /// seeds; the demand-synthesis seed is left alone.
    #[arg(long)]
    seed: Option<u64>,
    /// Parent of the timestamped run directories.
    #[arg(long, env = "ZONEMARKET_OUT", default_value = "runs")]
    out: PathBuf,
    /// Write into exactly this directory instead of a timestamped one.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Clone)]
struct DayArg {
    /// Demand day: `template` (the scenario's zone demands), a date
    /// `YYYY-MM-DD` of the demand series, or a 0-based series index.
    #[arg(long, default_value = "template")]
    day: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    Ascending,
    Shuffled,
}

#[derive(Clone, Copy, ValueEnum)]
enum Lower {
    Residual,
    Market,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reward {
    ProfitPricePenalty,
    Profit,
}

#[derive(Clone, Copy, ValueEnum, Default)]
enum Attribution {
    #[default]
    Supplier,
    Consumer,
}

#[derive(Clone, Copy, ValueEnum, Default)]
enum Mode {
    #[default]
    Paired,
    Product,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Training episodes, each one pass over the demand series.
    #[arg(long)]
    episodes: Option<usize>,
    /// Producers that always bid full capacity at marginal price, e.g. `4,5,6,7`.
    #[arg(long = "static", value_delimiter = ',')]
    static_producers: Option<Vec<usize>>,
    /// Reward shaping: normalized revenue, optionally minus a penalty for
    /// bidding above the zone price.
    #[arg(long, value_enum)]
    reward: Option<Reward>,
}

#[derive(Args, Clone)]
struct GridArgs {
    /// Germany-side coupling factors `start:end:steps` (or one value).
    #[arg(long, default_value = "0:2:11")]
    cg: GridRange,
    /// Austria-side coupling factors; the scenario's training value when
    /// omitted.
    #[arg(long)]
    ca: Option<GridRange>,
    /// How the two ranges combine.
    #[arg(long, value_enum, default_value_t)]
    mode: Mode,
}

#[derive(Subcommand)]
enum Command {
    /// Clear one day's market.
    ///
    /// Outputs: clearing.json (accepted fractions, multipliers, revenues,
    /// inter-zone flows, KKT residual).
    #[command(verbatim_doc_comment)]
    Clear {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        day: DayArg,
        /// JSON array of bid ladders; marginal full-capacity bids when omitted.
        #[arg(long)]
        ladders: Option<PathBuf>,
    },
    /// Check the zone-level strict feasibility conditions.
    ///
    /// Outputs: slater.json (verdict for the template and for every series
    /// day). Exits 3 when any verdict fails.
    #[command(verbatim_doc_comment)]
    Slater {
        #[command(flatten)]
        common: Common,
    },
    /// Gauss-Seidel best-response dynamics from marginal bids.
    ///
    /// Outputs: gauss_seidel.json (final profile, potential, per-producer
    /// best-response gaps and certificate bounds), gauss_seidel_trace.csv
    /// (sweep,potential,distance,tau). Exits 4 when the sweep limit is hit.
    #[command(verbatim_doc_comment)]
    Br {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        day: DayArg,
        #[arg(long)]
        max_sweeps: Option<usize>,
        /// Stop once no ladder moves more than this in a sweep.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Producer order within a sweep.
        #[arg(long, value_enum)]
        order: Option<Order>,
        /// Market each producer best-responds in.
        #[arg(long, value_enum)]
        lower: Option<Lower>,
    },
    /// Joint maximization of the shared market cost over all ladders.
    ///
    /// Outputs: potential.json (best profile, potential, gaps).
    #[command(verbatim_doc_comment)]
    Potential {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        day: DayArg,
        /// Number of starts.
        #[arg(long)]
        starts: Option<usize>,
    },
    /// Train the zonal actor-critic agents on the demand series, with export
    /// limits set by the scenario's coupling factors.
    ///
    /// Outputs: policy.json (checkpoint), training_trace.csv
    /// (episode,agent,zone,mean_reward,std_reward,mean_cost), training.json
    /// (per-episode cost and shortfall, first/last 10% reward means).
    #[command(verbatim_doc_comment)]
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Greedy pass of a trained policy over the demand series.
    ///
    /// Outputs: evaluation.json (summary and per-day results),
    /// evaluation_days.csv (date,cost,shortfall,price_<zone>…,revenue_<n>…).
    #[command(verbatim_doc_comment)]
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        policy: PathBuf,
        /// Zone a payment is counted against: the supplier's or the consumer's.
        #[arg(long, value_enum, default_value_t)]
        attribution: Attribution,
    },
    /// Evaluate a trained policy over a grid of export limits.
    ///
    /// Outputs: coupling.csv (c_g,c_a,algorithm,days,average_cost,gini,
    /// cost_<zone>…,gini_<zone>…), sweep.json. Without `--policy` the agents
    /// are trained first and policy.json is written too.
    #[command(verbatim_doc_comment)]
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: GridArgs,
        /// Checkpoint written by `train`; the agents are trained first when
        /// omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
        /// Zone a payment is counted against: the supplier's or the consumer's.
        #[arg(long, value_enum, default_value_t)]
        attribution: Attribution,
    },
    /// Full comparison: equilibria on one day, learning, coupling sweep.
    ///
    /// Outputs: rewards.csv (run,episode,agent,zone,mean_reward,std_reward,
    /// mean_cost), costs.csv (one row per method), coupling.csv,
    /// summary.json, gauss_seidel.json, potential.json, policy.json.
    /// Exits 4 when Gauss-Seidel hits its sweep limit.
    #[command(verbatim_doc_comment)]
    Report {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        day: DayArg,
        #[command(flatten)]
        grid: GridArgs,
        /// Checkpoint written by `train`; the agents are trained first when
        /// omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
        /// Zone a payment is counted against: the supplier's or the consumer's.
        #[arg(long, value_enum, default_value_t)]
        attribution: Attribution,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
