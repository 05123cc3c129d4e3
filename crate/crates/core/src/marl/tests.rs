use super::*;
use crate::market::{validate_ladder, Zone};
use crate::scenario::{build_benchmark, ScenarioConfig};
use chrono::NaiveDate;
use proptest::prelude::*;
use rand::Rng;

fn tiny_market() -> MarketInstance {
    let zones = vec![Zone::new(0, "A", 120.0, 30.0, 0.0), Zone::new(1, "B", 60.0, 30.0, 20.0)];
    let producers =
        vec![Producer::new(0, 0, 100.0, 5.0, 2), Producer::new(1, 0, 80.0, 7.0, 2), Producer::new(2, 1, 90.0, 4.0, 2)];
    let ladders = producers.iter().map(|p| p.marginal_ladder()).collect();
    MarketInstance::new(zones, producers, ladders).unwrap()
}

fn tiny_series(days: usize) -> DemandSeries {
    let start = NaiveDate::from_ymd_opt(2024, 3, 1).unwrap();
    let dates = (0..days).map(|i| start + chrono::Days::new(i as u64)).collect();
    let a = (0..days).map(|i| 100.0 + 5.0 * (i % 4) as f64).collect();
    let b = (0..days).map(|i| 50.0 + 3.0 * (i % 3) as f64).collect();
    DemandSeries::new(vec!["A".into(), "B".into()], dates, vec![a, b]).unwrap()
}

fn small_config() -> MarlConfig {
    MarlConfig { hidden: vec![2], batch_size: 4, ..MarlConfig::default() }
}

fn bundle_with(config: &MarlConfig, seed: u64) -> PolicyBundle {
    let m = tiny_market();
    let s = tiny_series(6);
    PolicyBundle::new(&m, fit_normalizer(&m, &s, config), config, seed).unwrap()
}

fn zero(net: &mut Mlp) {
    let n = net.n_params();
    net.set_params(&vec![0.0; n]);
}

fn random_batch(b: &PolicyBundle, agent: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Transition> {
    let za = b.critic_input_dim(agent) - b.state_dim;
    let mut v = |k: usize| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    (0..n)
        .map(|_| Transition { state: v(b.state_dim), zone_action: v(za), reward: v(1)[0], next_state: v(b.state_dim) })
        .collect()
}

#[test]
fn all_ones_decodes_to_even_capped_ladder() {
    let m = build_benchmark(&ScenarioConfig::benchmark()).unwrap();
    let p = &m.producers[0];
    let ladder = decode_action(p, &vec![1.0; action_dim(p)]);
    assert_eq!(ladder.len(), 5);
    for b in &ladder.bids {
        assert!((b.capacity - 140.0).abs() < 1e-9);
        assert_eq!(b.price, 100.0);
    }
    assert!((ladder.total_capacity() - 700.0).abs() < 1e-9);
    assert!(validate_ladder(&ladder, p).is_empty());
}

#[test]
fn static_raw_clears_like_marginal_bid() {
    let m = build_benchmark(&ScenarioConfig::benchmark()).unwrap();
    for p in &m.producers {
        let l = decode_action(p, &static_raw(p));
        assert!((l.total_capacity() - p.capacity_max).abs() < 1e-9);
        assert!(l.bids.iter().all(|b| b.price == p.price_min));
    }
}

#[test]
fn random_raw_actions_decode_to_valid_ladders() {
    let m = build_benchmark(&ScenarioConfig::benchmark()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..10_000 {
        let p = &m.producers[i % m.n_producers()];
        // Include values outside [−1, 1] and exact endpoints.
        let raw: Vec<f64> = (0..action_dim(p))
            .map(|_| match rng.random_range(0..5) {
                0 => 1.0,
                1 => -1.0,
                _ => rng.random_range(-1.5..1.5),
            })
            .collect();
        let l = decode_action(p, &raw);
        assert!(validate_ladder(&l, p).is_empty(), "{raw:?} -> {l:?}");
    }
}

proptest! {
    #[test]
    fn decode_respects_bounds(raw in proptest::collection::vec(-1.0f64..=1.0, 10)) {
        let m = build_benchmark(&ScenarioConfig::benchmark()).unwrap();
        let p = &m.producers[2];
        let l = decode_action(p, &raw);
        prop_assert!(validate_ladder(&l, p).is_empty());
    }
}

#[test]
fn greedy_action_is_deterministic() {
    let mut b = bundle_with(&small_config(), 3);
    let st = EnvState {
        prev_prices: vec![10.0, 20.0],
        day: 0.2,
        demands: vec![100.0, 50.0],
        perturbation: vec![0.01, -0.02],
    };
    let a1 = b.policy_act(0, &st, false, 0.3);
    let a2 = b.policy_act(0, &st, false, 0.3);
    assert_eq!(a1, a2);
    let noisy = b.policy_act(0, &st, true, 0.3);
    assert!(noisy.raw.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(validate_ladder(&noisy.ladder, &b.agents[0].producer).is_empty());
}

#[test]
fn features_stay_in_unit_box() {
    let b = bundle_with(&small_config(), 3);
    let st =
        EnvState { prev_prices: vec![500.0, -3.0], day: 1.0, demands: vec![1e6, 0.0], perturbation: vec![0.05, -0.05] };
    let f = st.features(&b.norm);
    assert_eq!(f.len(), b.state_dim);
    assert!(f.iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn critic_sees_only_its_zone() {
    let b = bundle_with(&small_config(), 1);
    // Zone A holds producers 0 and 1 (2 bids each), zone B holds producer 2.
    assert_eq!(b.critic_input_dim(0), b.state_dim + 8);
    assert_eq!(b.critic_input_dim(1), b.state_dim + 8);
    assert_eq!(b.critic_input_dim(2), b.state_dim + 4);
    for n in 0..3 {
        assert_eq!(b.agents[n].learner.as_ref().unwrap().critic.input_dim(), b.critic_input_dim(n));
    }
    assert_eq!(b.agents[1].slot, 4);
}

#[test]
fn zero_critic_loss_examples() {
    let mut b = bundle_with(&small_config(), 2);
    for a in &mut b.agents {
        let l = a.learner.as_mut().unwrap();
        zero(&mut l.critic);
        zero(&mut l.target_critic);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut one = random_batch(&b, 0, 1, &mut rng);
    one[0].reward = 1.7;
    assert!((b.critic_loss(0, &[&one[0]], 0.9).unwrap() - 1.7f64.powi(2)).abs() < 1e-12);
    let mut two = random_batch(&b, 0, 2, &mut rng);
    two[0].reward = 1.0;
    two[1].reward = 3.0;
    let refs: Vec<&Transition> = two.iter().collect();
    assert!((b.critic_loss(0, &refs, 0.0).unwrap() - 5.0).abs() < 1e-12);

    // A critic that is the constant r is perfect when γ = 0.
    let l = b.agents[0].learner.as_mut().unwrap();
    let last = l.critic.layers.len() - 1;
    l.critic.layers[last].b[0] = 2.5;
    let mut batch = random_batch(&b, 0, 3, &mut rng);
    batch.iter_mut().for_each(|t| t.reward = 2.5);
    let refs: Vec<&Transition> = batch.iter().collect();
    assert!(b.critic_loss(0, &refs, 0.0).unwrap().abs() < 1e-15);
    assert!(b.critic_loss(0, &[], 0.0).is_err());
}

#[test]
fn constant_critic_gives_flat_actor_loss() {
    let mut b = bundle_with(&small_config(), 4);
    let l = b.agents[1].learner.as_mut().unwrap();
    zero(&mut l.critic);
    let last = l.critic.layers.len() - 1;
    l.critic.layers[last].b[0] = 0.8;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = random_batch(&b, 1, 5, &mut rng);
    let refs: Vec<&Transition> = batch.iter().collect();
    let (loss, g) = b.actor_loss_grad(1, &refs).unwrap();
    assert!((loss + 0.8).abs() < 1e-12);
    assert!(g.iter().all(|v| *v == 0.0));
}

#[test]
fn linear_critic_pushes_focal_action_up() {
    let mut b = bundle_with(&MarlConfig { hidden: vec![], ..small_config() }, 4);
    let agent = 1;
    let slot = b.state_dim + b.agents[agent].slot;
    let l = b.agents[agent].learner.as_mut().unwrap();
    zero(&mut l.critic);
    // Q = Σ of the focal agent's action coordinates.
    for j in 0..4 {
        l.critic.layers[0].w[[slot + j, 0]] = 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = random_batch(&b, agent, 6, &mut rng);
    let refs: Vec<&Transition> = batch.iter().collect();
    let (_, g) = b.actor_loss_grad(agent, &refs).unwrap();
    let actor = &b.agents[agent].learner.as_ref().unwrap().actor;
    let nb = actor.layers.last().unwrap().b.len();
    let bias = &g[g.len() - nb..];
    // Descent raises every output bias.
    assert!(bias.iter().all(|v| *v < 0.0), "{bias:?}");
    // Zone-mate actions in the buffer do not move the loss.
    let mut moved = batch.clone();
    moved.iter_mut().for_each(|t| t.zone_action[0] += 0.3);
    let refs2: Vec<&Transition> = moved.iter().collect();
    assert_eq!(b.actor_loss(agent, &refs).unwrap(), b.actor_loss(agent, &refs2).unwrap());
}

fn fd_check(f: impl Fn(&[f64]) -> f64, p: &[f64], analytic: &[f64]) {
    let h = 1e-6;
    for i in 0..p.len() {
        let mut q = p.to_vec();
        q[i] += h;
        let up = f(&q);
        q[i] -= 2.0 * h;
        let fd = (up - f(&q)) / (2.0 * h);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
        assert!(rel < 1e-4, "param {i}: fd {fd} analytic {}", analytic[i]);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..20 {
        let b = bundle_with(&small_config(), seed);
        let agent = (seed % 3) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let batch = random_batch(&b, agent, 7, &mut rng);
        let refs: Vec<&Transition> = batch.iter().collect();

        let (_, cg) = b.critic_loss_grad(agent, &refs, 0.95).unwrap();
        let p = b.agents[agent].learner.as_ref().unwrap().critic.params();
        fd_check(
            |q| {
                let mut c = b.clone();
                c.agents[agent].learner.as_mut().unwrap().critic.set_params(q);
                c.critic_loss(agent, &refs, 0.95).unwrap()
            },
            &p,
            &cg,
        );

        let (_, ag) = b.actor_loss_grad(agent, &refs).unwrap();
        let p = b.agents[agent].learner.as_ref().unwrap().actor.params();
        fd_check(
            |q| {
                let mut c = b.clone();
                c.agents[agent].learner.as_mut().unwrap().actor.set_params(q);
                c.actor_loss(agent, &refs).unwrap()
            },
            &p,
            &ag,
        );
    }
}

#[test]
fn soft_update_moves_targets() {
    let mut b = bundle_with(&small_config(), 9);
    let online = b.agents[0].learner.as_ref().unwrap().actor.params();
    let mut t = b.agents[0].learner.as_mut().unwrap();
    zero(&mut t.target_actor);
    b.soft_update(0, 0.0);
    t = b.agents[0].learner.as_mut().unwrap();
    assert!(t.target_actor.params().iter().all(|v| *v == 0.0));
    b.soft_update(0, 1.0);
    assert_eq!(b.agents[0].learner.as_ref().unwrap().target_actor.params(), online);
}

#[test]
fn static_only_run_has_flat_costs_and_marginal_evaluation() {
    let m = tiny_market();
    let s = tiny_series(5);
    let cfg = MarlConfig { episodes: 4, static_producers: vec![0, 1, 2], ..small_config() };
    let (bundle, trace) = train_run(&m, &s, &cfg, 1).unwrap();
    assert_eq!(trace.episode_costs.len(), 4);
    assert!(trace.episode_costs.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(trace.rows.len(), 12);

    let eval = evaluate_policy(&bundle, &m, &s).unwrap();
    assert_eq!(eval.results.len(), 5);
    for (t, r) in eval.results.iter().enumerate() {
        let inst = instance_for_day(&m, &s, t)
            .unwrap()
            .with_ladders(m.producers.iter().map(|p| p.marginal_ladder()).collect());
        let want = clearing::clear_market(&inst, None).unwrap().total_cost;
        assert!((r.total_cost - want).abs() < 1e-6 * (1.0 + want));
    }
}

#[test]
fn training_is_reproducible() {
    let m = tiny_market();
    let s = tiny_series(6);
    let cfg = MarlConfig { episodes: 3, ..small_config() };
    let (b1, t1) = train_run(&m, &s, &cfg, 21).unwrap();
    let (_, t2) = train_run(&m, &s, &cfg, 21).unwrap();
    assert_eq!(t1, t2);
    let (_, t3) = train_run(&m, &s, &cfg, 22).unwrap();
    assert_ne!(t1, t3);
    // Learning actually happened: the networks moved away from their start.
    let fresh = PolicyBundle::new(&m, b1.norm.clone(), &cfg, 21).unwrap();
    assert_ne!(fresh.agents[0].learner.as_ref().unwrap().actor, b1.agents[0].learner.as_ref().unwrap().actor);
    assert!(b1.agents.iter().all(|a| a.buffer.len() == 18));

    let e1 = evaluate_policy(&b1, &m, &s).unwrap();
    let e2 = evaluate_policy(&b1, &m, &s).unwrap();
    assert_eq!(e1, e2);
}

#[test]
fn empty_series_evaluates_to_empty_report() {
    let m = tiny_market();
    let b = bundle_with(&small_config(), 0);
    let empty = DemandSeries::new(vec!["A".into(), "B".into()], vec![], vec![vec![], vec![]]).unwrap();
    let e = evaluate_policy(&b, &m, &empty).unwrap();
    assert!(e.results.is_empty() && e.costs().is_empty());
    assert!(train_run(&m, &empty, &small_config(), 0).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_policy() {
    let m = tiny_market();
    let s = tiny_series(4);
    let cfg = MarlConfig { episodes: 2, ..small_config() };
    let (b, _) = train_run(&m, &s, &cfg, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.json");
    b.save(&path).unwrap();
    let back = PolicyBundle::load(&path).unwrap();
    assert_eq!(back.checkpoint(), b.checkpoint());
    assert_eq!(evaluate_policy(&back, &m, &s).unwrap(), evaluate_policy(&b, &m, &s).unwrap());

    let mut bad = b.checkpoint();
    bad.config.gamma = 0.5;
    assert!(PolicyBundle::from_checkpoint(bad).is_err());
}

#[test]
fn trace_csv_has_expected_columns() {
    let trace = TrainingTrace {
        rows: vec![TraceRow { episode: 0, agent: 1, zone: 0, mean_reward: 0.5, std_reward: 0.1, mean_cost: 10.0 }],
        episode_costs: vec![10.0],
        episode_shortfall: vec![0.0],
    };
    let mut buf = Vec::new();
    trace.write_csv_to(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "episode,agent,zone,mean_reward,std_reward,mean_cost");
    assert_eq!(text.lines().nth(1).unwrap(), "0,1,0,0.5,0.1,10");
}

#[test]
fn noise_schedule_decays_between_endpoints() {
    let c = MarlConfig { noise_start: 0.3, noise_end: 0.02, ..MarlConfig::default() };
    assert!((c.noise(0) - 0.3).abs() < 1e-12);
    assert!((c.noise(199) - 0.02).abs() < 1e-12);
    assert!(c.noise(100) < c.noise(50));
    let flat = MarlConfig::default();
    assert!((0..200).all(|e| flat.noise(e) == flat.noise_start));
}
