//! Acceptance suite: one line per criterion. Hard criteria fail the target;
//! the two trend comparisons are soft and only reported.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zonemarket::clearing::{check_slater, clear_market, kkt_residual, ClearingResult};
use zonemarket::equilibrium::{gauss_seidel_run, potential_solve, EquilibriumReport, StrategyProfile};
use zonemarket::market::MarketInstance;
use zonemarket::marl::{self, fit_normalizer, MarlConfig, PolicyBundle, Transition};
use zonemarket::metrics::{gini, summarize_run, CostAttribution, RunSummary};
use zonemarket::scenario::{
    build_benchmark, coupling_grid, instance_for_day, training_template, DemandSeries, GridMode, GridRange,
    ScenarioConfig,
};
use zonemarket::Error;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn lp_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    for i in 0..200 {
        let m = oracle::random_instance(&mut rng);
        match (clear_market(&m, None), oracle::oracle(&m)) {
            (Ok(r), Some(best)) => {
                let rel = (r.total_cost - best).abs() / r.total_cost.abs().max(best.abs()).max(1.0);
                worst = worst.max(rel);
                if rel > 1e-6 {
                    bad.push(i);
                }
            }
            (Err(Error::Infeasible), None) => {}
            _ => bad.push(i),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        bad.is_empty() && secs < 60.0,
        format!("200 instances, worst rel {worst:.1e}, mismatches {bad:?}, {secs:.2}s"),
    )
}

fn kkt_everywhere(cfg: &ScenarioConfig, series: &DemandSeries, profiles: &[&EquilibriumReport]) -> Verdict {
    let template = build_benchmark(cfg).unwrap();
    let mut markets: Vec<MarketInstance> = vec![template.clone()];
    markets.extend((0..series.len()).map(|t| instance_for_day(&template, series, t).unwrap()));
    markets.extend(profiles.iter().map(|r| r.profile.instance(&template)));
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    markets.extend((0..200).map(|_| oracle::random_instance(&mut rng)));
    let (mut n, mut worst) = (0, 0.0f64);
    for m in &markets {
        for tb in std::iter::once(None).chain((0..m.n_producers()).map(Some)) {
            if let Ok(r) = clear_market(m, tb) {
                worst = worst.max(kkt_residual(m, &r).unwrap().max());
                n += 1;
            }
        }
    }
    verdict(worst <= 1e-6, format!("{n} clearings, worst residual {worst:.1e}"))
}

fn slater(cfg: &ScenarioConfig) -> Verdict {
    let v = check_slater(&build_benchmark(cfg).unwrap());
    verdict(v.condition_i == [true, true], format!("capacity condition per zone {:?}", v.condition_i))
}

fn gauss_seidel_ok(gs: &EquilibriumReport, secs: f64) -> Verdict {
    let monotone = gs.trace.windows(2).all(|w| w[1].potential >= w[0].potential - 1e-8);
    let ok = gs.converged() && gs.sweeps <= 100 && monotone && gs.certified() && secs < 600.0;
    verdict(
        ok,
        format!(
            "{} sweeps, converged {}, monotone {monotone}, certified {}, potential {:.1}, {secs:.1}s",
            gs.sweeps,
            gs.converged(),
            gs.certified(),
            gs.potential_value
        ),
    )
}

fn potential_ok(pot: &EquilibriumReport, gs: &EquilibriumReport) -> Verdict {
    let ok = pot.potential_value >= gs.potential_value - 1e-3 * gs.potential_value.abs() && pot.vgne_gap == 0.0;
    verdict(
        ok,
        format!(
            "potential {:.1} vs Gauss-Seidel {:.1}, vgne gap {}",
            pot.potential_value, gs.potential_value, pot.vgne_gap
        ),
    )
}

fn gini_suite() -> Verdict {
    let g = |v: &[f64]| gini(v).unwrap();
    let mut ok = g(&[5.0; 4]).abs() < 1e-12
        && (g(&[0.0, 0.0, 0.0, 9.0]) - 0.75).abs() < 1e-12
        && (g(&[1.0, 2.0, 3.0]) - 2.0 / 9.0).abs() < 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..500 {
        let n = rng.random_range(1..12);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1e4)).collect();
        let base = g(&v);
        let s = rng.random_range(1e-3..1e3);
        let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
        let mut perm = v.clone();
        perm.reverse();
        perm.rotate_left(n / 2);
        ok &= (g(&scaled) - base).abs() < 1e-12 && (g(&perm) - base).abs() < 1e-12;
    }
    verdict(ok, "reference values and 500 scale/permutation draws")
}

fn learning_trend(trace: &marl::TrainingTrace, secs: f64) -> Verdict {
    let trend = trace.reward_trend(0.1);
    let failing: Vec<usize> = trend.iter().enumerate().filter(|(_, (a, b))| b < a).map(|(i, _)| i).collect();
    let cells: Vec<String> = trend.iter().map(|(a, b)| format!("{a:.4}->{b:.4}")).collect();
    verdict(
        trend.len() == 8 && failing.is_empty() && secs < 900.0,
        format!("{secs:.0}s, first->last tenth [{}], below start {failing:?}", cells.join(" ")),
    )
}

/// The profile's own acceptance, as the report command summarizes it.
fn profile_summary(tag: &str, inst: &MarketInstance, report: &EquilibriumReport) -> RunSummary {
    let market = report.profile.instance(inst);
    let mut r = clear_market(&market, None).unwrap();
    r.fractions = report.profile.fractions.clone();
    r.revenue = report.profile.revenue.clone();
    r.total_cost = r.revenue.iter().sum();
    summarize_run(tag, &[market], &[r], CostAttribution::Supplier).unwrap()
}

fn evaluation_summary(bundle: &PolicyBundle, template: &MarketInstance, series: &DemandSeries) -> RunSummary {
    let eval = marl::evaluate_policy(bundle, template, series).unwrap();
    let markets: Vec<MarketInstance> = (0..series.len())
        .map(|t| instance_for_day(template, series, t).unwrap().with_ladders(eval.ladders[t].clone()))
        .collect();
    let results: Vec<ClearingResult> = eval.results;
    summarize_run("marl", &markets, &results, CostAttribution::Supplier).unwrap()
}

fn cost_ordering(
    bundle: &PolicyBundle,
    inst: &MarketInstance,
    gs: &EquilibriumReport,
    pot: &EquilibriumReport,
    seed: u64,
) -> Verdict {
    let day = DemandSeries::new(
        inst.zones.iter().map(|z| z.name.clone()).collect(),
        vec![zonemarket::scenario::SYNTH_START],
        inst.zones.iter().map(|z| vec![z.demand]).collect(),
    )
    .unwrap();
    let m = evaluation_summary(bundle, inst, &day);
    let (g, p) = (profile_summary("gauss_seidel", inst, gs), profile_summary("potential", inst, pot));
    let cost_ok = m.average_cost <= g.average_cost && m.average_cost <= p.average_cost;
    let gini_of = |s: &RunSummary| s.gini.unwrap_or(f64::NAN);
    let gini_ok = gini_of(&m) > gini_of(&g) && gini_of(&m) > gini_of(&p);
    verdict(
        cost_ok && gini_ok,
        format!(
            "seed {seed}: cost marl {:.1} gs {:.1} potential {:.1} ({}); gini marl {:.3} gs {:.3} potential {:.3} ({})",
            m.average_cost,
            g.average_cost,
            p.average_cost,
            if cost_ok { "ordered" } else { "not ordered" },
            gini_of(&m),
            gini_of(&g),
            gini_of(&p),
            if gini_ok { "ordered" } else { "not ordered" },
        ),
    )
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

/// Pearson correlation of the ranks; NaN when either side is constant.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    cov / (sx * sy)
}

fn coupling_trend(bundle: &PolicyBundle, cfg: &ScenarioConfig, series: &DemandSeries) -> Verdict {
    let template = build_benchmark(cfg).unwrap();
    let cg: GridRange = "0:2:11".parse().unwrap();
    let ca = GridRange { start: cfg.coupling.c_a, end: cfg.coupling.c_a, steps: 1 };
    let points = coupling_grid(&template, &cg, &ca, GridMode::Paired, series).unwrap();
    let (mut xs, mut big, mut small) = (Vec::new(), Vec::new(), Vec::new());
    for p in &points {
        let s = evaluation_summary(bundle, &p.template, series);
        xs.push(p.c_g);
        big.push(s.zone_costs[0]);
        small.push(s.zone_costs[1]);
    }
    let rho = spearman(&xs, &big);
    let mut sorted = small.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    let range = sorted[n - 1] - sorted[0];
    let stable = range <= 0.2 * median.abs();
    let fmt = |v: &[f64]| v.iter().map(|c| format!("{c:.0}")).collect::<Vec<_>>().join(" ");
    verdict(
        rho <= -0.5 && stable,
        format!(
            "seed {}: {} cost [{}] spearman {rho:.2}; {} cost [{}] range/median {:.3}",
            cfg.seed,
            template.zones[0].name,
            fmt(&big),
            template.zones[1].name,
            fmt(&small),
            range / median.abs()
        ),
    )
}

fn run_cli(args: &[&str], run_dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_zonemarket"))
        .args(args)
        .arg("--run-dir")
        .arg(run_dir)
        .output()
        .expect("spawn zonemarket")
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let policy = tmp.path().join("policy.json");
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("clear", vec!["clear".into(), "--day".into(), "3".into()]),
        ("slater", vec!["slater".into()]),
        ("br", vec!["br".into()]),
        ("potential", vec!["potential".into()]),
        ("train", vec!["train".into(), "--episodes".into(), "2".into()]),
        ("evaluate", vec!["evaluate".into(), "--policy".into(), policy.display().to_string()]),
        ("sweep", vec!["sweep".into(), "--episodes".into(), "2".into(), "--cg".into(), "0:2:3".into()]),
        ("report", vec!["report".into(), "--episodes".into(), "2".into(), "--cg".into(), "0:2:3".into()]),
    ];
    let mut differing = Vec::new();
    let mut files = 0;
    for (name, args) in &commands {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let dirs = [tmp.path().join(format!("{name}-a")), tmp.path().join(format!("{name}-b"))];
        for d in &dirs {
            let out = run_cli(&args, d);
            if !out.status.success() {
                return verdict(
                    false,
                    format!("{name} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)),
                );
            }
        }
        if *name == "train" {
            std::fs::copy(dirs[0].join("policy.json"), &policy).unwrap();
        }
        let (a, b) = (dir_bytes(&dirs[0]), dir_bytes(&dirs[1]));
        files += a.len();
        if a != b {
            differing.push(*name);
        }
    }
    verdict(
        differing.is_empty(),
        format!("{} commands run twice, {files} files compared, differing {differing:?}", commands.len()),
    )
}

fn gradient_checks() -> Verdict {
    let cfg = ScenarioConfig::benchmark();
    let template = build_benchmark(&cfg).unwrap();
    let series = cfg.demand_series(None).unwrap();
    let mc = MarlConfig { hidden: vec![3], ..MarlConfig::default() };
    let mut worst = 0.0f64;
    let mut rel = |fd: f64, an: f64| {
        let r = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
        worst = worst.max(r);
    };
    for seed in 0..20u64 {
        let b = PolicyBundle::new(&template, fit_normalizer(&template, &series, &mc), &mc, seed).unwrap();
        let agent = (seed % 8) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let za = b.critic_input_dim(agent) - b.state_dim;
        let mut v = |k: usize| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let batch: Vec<Transition> = (0..5)
            .map(|_| Transition {
                state: v(b.state_dim),
                zone_action: v(za),
                reward: v(1)[0],
                next_state: v(b.state_dim),
            })
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let l = b.agents[agent].learner.as_ref().unwrap();
        let h = 1e-6;

        let (_, cg) = b.critic_loss_grad(agent, &refs, 0.95).unwrap();
        let p = l.critic.params();
        for i in 0..p.len() {
            let f = |d: f64| {
                let mut c = b.clone();
                let mut q = p.clone();
                q[i] += d;
                c.agents[agent].learner.as_mut().unwrap().critic.set_params(&q);
                c.critic_loss(agent, &refs, 0.95).unwrap()
            };
            rel((f(h) - f(-h)) / (2.0 * h), cg[i]);
        }

        let (_, ag) = b.actor_loss_grad(agent, &refs).unwrap();
        let p = l.actor.params();
        for i in 0..p.len() {
            let f = |d: f64| {
                let mut c = b.clone();
                let mut q = p.clone();
                q[i] += d;
                c.agents[agent].learner.as_mut().unwrap().actor.set_params(&q);
                c.actor_loss(agent, &refs).unwrap()
            };
            rel((f(h) - f(-h)) / (2.0 * h), ag[i]);
        }
    }
    verdict(worst <= 1e-4, format!("20 networks, actor and critic, worst rel {worst:.1e}"))
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture` or a filter;
    // a filter that does not name this suite skips it.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }

    let cfg = ScenarioConfig::benchmark();
    let series = cfg.demand_series(None).unwrap();
    let inst = build_benchmark(&cfg).unwrap();

    let t = Instant::now();
    let gs = gauss_seidel_run(&inst, &StrategyProfile::marginal(&inst).unwrap(), &cfg.gauss_seidel).unwrap();
    let gs_secs = t.elapsed().as_secs_f64();
    let pot = potential_solve(&inst, None, &cfg.potential).unwrap();

    let t = Instant::now();
    let train_template = training_template(&cfg, &inst, &series).unwrap();
    let (bundle, trace) = marl::train_run(&train_template, &series, &cfg.marl, cfg.seed).unwrap();
    let train_secs = t.elapsed().as_secs_f64();

    let results: Vec<(u8, &str, bool, Verdict)> = vec![
        (1, "lp oracle equivalence", false, lp_oracle()),
        (2, "kkt certification", false, kkt_everywhere(&cfg, &series, &[&gs, &pot])),
        (3, "slater check on the benchmark", false, slater(&cfg)),
        (4, "gauss-seidel convergence", false, gauss_seidel_ok(&gs, gs_secs)),
        (5, "potential vs best response", false, potential_ok(&pot, &gs)),
        (6, "gini unit suite", false, gini_suite()),
        (7, "learning smoke and reward trend", false, learning_trend(&trace, train_secs)),
        (8, "cost and gini ordering", true, cost_ordering(&bundle, &inst, &gs, &pot, cfg.seed)),
        (9, "coupling sweep trend", true, coupling_trend(&bundle, &cfg, &series)),
        (10, "determinism", false, determinism()),
        (11, "gradient checks", false, gradient_checks()),
    ];

    let mut hard_failures = 0;
    for (id, name, soft, v) in &results {
        let tag = match (v.pass, soft) {
            (true, _) => "PASS",
            (false, true) => "SOFT-FAIL",
            (false, false) => "FAIL",
        };
        println!("[{tag}] {id:>2} {name}: {}", v.detail);
        hard_failures += usize::from(!v.pass && !soft);
    }
    if hard_failures > 0 {
        eprintln!("{hard_failures} hard acceptance criteria failed");
        std::process::exit(1);
    }
}
