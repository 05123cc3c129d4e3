//! Zonal multi-agent actor-critic learning on the clearing environment.
//!
//! Each learning producer owns an actor `μ_n(s)` and a critic `Q_n(s, a(z))`
//! whose action input holds the raw actions of every producer in its own
//! zone, never those of other zones. Static producers submit one
//! full-capacity bid at marginal price; inside a zonal action they appear as
//! a constant raw vector that decodes to an equivalent ladder.

pub mod buffer;
pub mod nn;

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clearing::{self, ClearingResult};
use crate::error::{Error, Result};
use crate::market::{Bid, BidLadder, MarketInstance, Producer};
use crate::scenario::{instance_for_day, DemandSeries};

pub use buffer::ReplayBuffer;
pub use nn::{Activation, Adam, Dense, Mlp};

pub const CHECKPOINT_FORMAT: &str = "zonemarket-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Normalized revenue minus `β` times the normalized excess of the mean
    /// bid price over the zone's clearing price.
    #[default]
    ProfitPricePenalty,
    /// Normalized revenue only.
    Profit,
}

/// Starting point of the actors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActorInit {
    /// Output biases set so the initial policy bids close to full capacity
    /// at marginal price, the competitive benchmark the static producers use.
    #[default]
    Marginal,
    /// Plain Glorot weights and zero biases: mid-box bids at the start.
    Glorot,
}

/// tanh(2) ≈ 0.964, near the box corner without saturating the head.
const MARGINAL_BIAS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarlConfig {
    pub episodes: usize,
    pub hidden: Vec<usize>,
    pub actor_init: ActorInit,
    pub gamma: f64,
    pub tau_target: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Exploration noise standard deviation, decayed geometrically from
    /// `noise_start` to `noise_end` over the episodes. The default keeps it
    /// constant and small: with decay, rivals stop exploring and the rents
    /// of the marginal producers shrink late in training, and a wider noise
    /// (0.1 spans about ±5 price units) hides the 1–2 unit gaps between
    /// neighbouring marginal prices from the critic.
    pub noise_start: f64,
    pub noise_end: f64,
    /// Half-width of the uniform zonal perturbation in the observation.
    pub perturbation: f64,
    pub reward: RewardKind,
    pub beta: f64,
    /// Per-MW price of unmet demand on days the submitted ladders cannot
    /// cover.
    pub shortage_penalty: f64,
    /// Producers that always bid full capacity at marginal price.
    pub static_producers: Vec<usize>,
}

impl Default for MarlConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            hidden: vec![64, 64],
            actor_init: ActorInit::Marginal,
            gamma: 0.95,
            tau_target: 0.01,
            batch_size: 128,
            buffer_capacity: 100_000,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            noise_start: 0.05,
            noise_end: 0.05,
            perturbation: 0.05,
            reward: RewardKind::ProfitPricePenalty,
            beta: 0.1,
            shortage_penalty: 1000.0,
            static_producers: Vec::new(),
        }
    }
}

impl MarlConfig {
    fn check(&self) -> Result<()> {
        let ok = self.gamma >= 0.0
            && self.gamma < 1.0
            && (0.0..=1.0).contains(&self.tau_target)
            && self.batch_size > 0
            && self.buffer_capacity > 0
            && self.noise_start >= 0.0
            && self.noise_end >= 0.0
            && self.perturbation >= 0.0
            && self.shortage_penalty > 0.0
            && self.hidden.iter().all(|&h| h > 0);
        if ok {
            Ok(())
        } else {
            Err(Error::Scenario(format!("invalid learning configuration: {self:?}")))
        }
    }

    pub fn noise(&self, episode: usize) -> f64 {
        if self.episodes <= 1 || self.noise_start <= 0.0 || self.noise_end <= 0.0 {
            return if episode == 0 { self.noise_start } else { self.noise_end };
        }
        let t = episode as f64 / (self.episodes - 1) as f64;
        self.noise_start * (self.noise_end / self.noise_start).powf(t)
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).unwrap_or_default();
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Scales that map raw observations into `[−1, 1]`; fixed at training time
/// so a trained policy sees the same encoding on any later series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub price_scale: f64,
    pub demand_max: Vec<f64>,
    pub perturbation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub prev_prices: Vec<f64>,
    /// Day position in the series, in `[−1, 1]`.
    pub day: f64,
    pub demands: Vec<f64>,
    pub perturbation: Vec<f64>,
}

impl EnvState {
    pub fn dim(n_zones: usize) -> usize {
        3 * n_zones + 1
    }

    pub fn features(&self, norm: &Normalizer) -> Vec<f64> {
        let unit = |v: f64| v.clamp(-1.0, 1.0);
        let mut f = Vec::with_capacity(Self::dim(self.demands.len()));
        f.extend(self.prev_prices.iter().map(|p| unit(2.0 * p / norm.price_scale - 1.0)));
        f.push(unit(self.day));
        f.extend(
            self.demands
                .iter()
                .zip(&norm.demand_max)
                .map(|(d, m)| if *m > 0.0 { unit(2.0 * d / m - 1.0) } else { 0.0 }),
        );
        f.extend(
            self.perturbation.iter().map(|p| if norm.perturbation > 0.0 { unit(p / norm.perturbation) } else { 0.0 }),
        );
        f
    }
}

/// Raw action layout: `K` capacity coordinates then `K` price coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentAction {
    pub raw: Vec<f64>,
    pub ladder: BidLadder,
}

pub fn action_dim(p: &Producer) -> usize {
    2 * p.usable_bids()
}

/// Affine map of `[−1, 1]^{2K}` onto the bid box. When the capacities
/// overshoot `Δ̄`, the part of each capacity above the floor is scaled down
/// so the total lands exactly on `Δ̄`.
pub fn decode_action(p: &Producer, raw: &[f64]) -> BidLadder {
    let k = p.usable_bids();
    assert_eq!(raw.len(), 2 * k, "raw action length");
    let unit = |a: f64| (a.clamp(-1.0, 1.0) + 1.0) / 2.0;
    let floor = p.capacity_min;
    let mut caps: Vec<f64> = raw[..k].iter().map(|&a| floor + unit(a) * (p.capacity_max - floor)).collect();
    let total: f64 = caps.iter().sum();
    if total > p.capacity_max {
        let room = (p.capacity_max - k as f64 * floor).max(0.0);
        let excess = total - k as f64 * floor;
        let scale = if excess > 0.0 { room / excess } else { 0.0 };
        caps.iter_mut().for_each(|c| *c = (floor + (*c - floor) * scale).min(p.capacity_max));
        // Rounding can leave the sum a hair above the cap.
        let over = caps.iter().sum::<f64>() - p.capacity_max;
        if over > 0.0 {
            if let Some(c) = caps.iter_mut().max_by(|a, b| a.total_cmp(b)) {
                *c -= over;
            }
        }
    }
    let bids = caps
        .into_iter()
        .zip(&raw[k..])
        .map(|(c, &a)| Bid::new(c, p.price_min + unit(a) * (p.price_max - p.price_min)))
        .collect();
    BidLadder::new(p.id, bids)
}

/// Critic encoding of a static producer's bid: the raw vector whose decode
/// clears like a single full-capacity bid at marginal price.
pub fn static_raw(p: &Producer) -> Vec<f64> {
    let k = p.usable_bids();
    let mut v = vec![1.0; k];
    v.extend(std::iter::repeat_n(-1.0, k));
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Raw actions of every producer in the agent's zone, ascending id.
    pub zone_action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

#[derive(Debug, Clone)]
pub struct AgentPolicy {
    pub producer: Producer,
    /// Offset of this agent's raw action inside its zonal action.
    pub slot: usize,
    pub learner: Option<Learner>,
    pub buffer: ReplayBuffer<Transition>,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct PolicyBundle {
    pub config: MarlConfig,
    pub seed: u64,
    pub norm: Normalizer,
    pub agents: Vec<AgentPolicy>,
    /// Producer ids per zone, ascending.
    pub zone_members: Vec<Vec<usize>>,
    pub state_dim: usize,
}

fn rows(data: &[&[f64]]) -> Array2<f64> {
    let w = data.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((data.len(), w), |(i, j)| data[i][j])
}

impl PolicyBundle {
    pub fn new(template: &MarketInstance, norm: Normalizer, config: &MarlConfig, seed: u64) -> Result<Self> {
        config.check()?;
        template.check()?;
        if let Some(&bad) = config.static_producers.iter().find(|&&n| n >= template.n_producers()) {
            return Err(Error::Scenario(format!("static producer {bad} does not exist")));
        }
        let nz = template.n_zones();
        let state_dim = EnvState::dim(nz);
        let zone_members: Vec<Vec<usize>> = (0..nz).map(|z| template.producers_in(z).map(|p| p.id).collect()).collect();
        let zone_action_dim =
            |z: usize| zone_members[z].iter().map(|&m| action_dim(&template.producers[m])).sum::<usize>();
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let agents = template
            .producers
            .iter()
            .map(|p| {
                let slot = zone_members[p.zone]
                    .iter()
                    .take_while(|&&m| m != p.id)
                    .map(|&m| action_dim(&template.producers[m]))
                    .sum();
                let learner = (!config.static_producers.contains(&p.id)).then(|| {
                    let mut sizes = vec![state_dim];
                    sizes.extend(&config.hidden);
                    sizes.push(action_dim(p));
                    let mut actor = Mlp::new(&sizes, Activation::Tanh, &mut master);
                    if config.actor_init == ActorInit::Marginal {
                        let k = p.usable_bids();
                        let head = actor.layers.last_mut().expect("actor layers");
                        head.b
                            .iter_mut()
                            .enumerate()
                            .for_each(|(j, b)| *b = if j < k { MARGINAL_BIAS } else { -MARGINAL_BIAS });
                    }
                    let mut csizes = vec![state_dim + zone_action_dim(p.zone)];
                    csizes.extend(&config.hidden);
                    csizes.push(1);
                    let critic = Mlp::new(&csizes, Activation::Identity, &mut master);
                    Learner {
                        actor_opt: Adam::new(&actor, config.actor_lr),
                        critic_opt: Adam::new(&critic, config.critic_lr),
                        target_actor: actor.clone(),
                        target_critic: critic.clone(),
                        actor,
                        critic,
                    }
                });
                AgentPolicy {
                    producer: p.clone(),
                    slot,
                    learner,
                    buffer: ReplayBuffer::new(config.buffer_capacity),
                    rng: ChaCha8Rng::seed_from_u64(master.random()),
                }
            })
            .collect();
        Ok(Self { config: config.clone(), seed, norm, agents, zone_members, state_dim })
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn zone_of(&self, agent: usize) -> usize {
        self.agents[agent].producer.zone
    }

    /// Width of the critic's input for `agent`.
    pub fn critic_input_dim(&self, agent: usize) -> usize {
        self.state_dim + self.zone_action_dim(self.zone_of(agent))
    }

    fn zone_action_dim(&self, z: usize) -> usize {
        self.zone_members[z].iter().map(|&m| action_dim(&self.agents[m].producer)).sum()
    }

    pub fn is_learning(&self, agent: usize) -> bool {
        self.agents[agent].learner.is_some()
    }

    fn raw_action(&self, agent: usize, features: &[f64]) -> Vec<f64> {
        let a = &self.agents[agent];
        match &a.learner {
            None => static_raw(&a.producer),
            Some(l) => l.actor.forward(&rows(&[features])).row(0).to_vec(),
        }
    }

    /// Actor output, plus clipped Gaussian noise of standard deviation
    /// `noise` when `explore` is set.
    pub fn policy_act(&mut self, agent: usize, state: &EnvState, explore: bool, noise: f64) -> AgentAction {
        let f = state.features(&self.norm);
        let mut raw = self.raw_action(agent, &f);
        let a = &mut self.agents[agent];
        if explore && a.learner.is_some() && noise > 0.0 {
            let n = Normal::new(0.0, noise).expect("positive noise");
            raw.iter_mut().for_each(|v| *v = (*v + n.sample(&mut a.rng)).clamp(-1.0, 1.0));
        }
        let ladder = match a.learner {
            Some(_) => decode_action(&a.producer, &raw),
            None => a.producer.marginal_ladder(),
        };
        AgentAction { raw, ladder }
    }

    /// Ladder submitted by `agent` for a raw action.
    fn ladder_for(&self, agent: usize, raw: &[f64]) -> BidLadder {
        let a = &self.agents[agent];
        match a.learner {
            Some(_) => decode_action(&a.producer, raw),
            None => a.producer.marginal_ladder(),
        }
    }

    /// Zonal action at `states` from the target actors (static members use
    /// their constant raw vector).
    fn target_zone_actions(&self, zone: usize, states: &Array2<f64>) -> Array2<f64> {
        let b = states.nrows();
        let mut out = Array2::zeros((b, self.zone_action_dim(zone)));
        let mut off = 0;
        for &m in &self.zone_members[zone] {
            let a = &self.agents[m];
            let d = action_dim(&a.producer);
            match &a.learner {
                Some(l) => out.slice_mut(s![.., off..off + d]).assign(&l.target_actor.forward(states)),
                None => {
                    let raw = Array1::from(static_raw(&a.producer));
                    out.slice_mut(s![.., off..off + d]).assign(&raw.broadcast((b, d)).expect("broadcast"));
                }
            }
            off += d;
        }
        out
    }

    fn batch_arrays(&self, batch: &[&Transition]) -> (Array2<f64>, Array2<f64>, Array1<f64>, Array2<f64>) {
        let st: Vec<&[f64]> = batch.iter().map(|t| t.state.as_slice()).collect();
        let za: Vec<&[f64]> = batch.iter().map(|t| t.zone_action.as_slice()).collect();
        let nx: Vec<&[f64]> = batch.iter().map(|t| t.next_state.as_slice()).collect();
        let r = Array1::from_iter(batch.iter().map(|t| t.reward));
        (rows(&st), rows(&za), r, rows(&nx))
    }

    fn learner(&self, agent: usize) -> Result<&Learner> {
        self.agents[agent].learner.as_ref().ok_or_else(|| Error::Shape(format!("agent {agent} is static")))
    }

    fn critic_pass(&self, agent: usize, batch: &[&Transition], gamma: f64) -> Result<(f64, Vec<Dense>)> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let l = self.learner(agent)?;
        let (st, za, r, nx) = self.batch_arrays(batch);
        let na = self.target_zone_actions(self.zone_of(agent), &nx);
        let q_next = l.target_critic.forward(&ndarray::concatenate![ndarray::Axis(1), nx, na]);
        let y = &r + &(q_next.column(0).to_owned() * gamma);
        let x = ndarray::concatenate![ndarray::Axis(1), st, za];
        let cache = l.critic.forward_cache(&x);
        let diff = cache.output().column(0).to_owned() - &y;
        let n = batch.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let g = (diff * (2.0 / n)).insert_axis(ndarray::Axis(1));
        let (grads, _) = l.critic.backward(&cache, &g);
        Ok((loss, grads))
    }

    fn actor_pass(&self, agent: usize, batch: &[&Transition]) -> Result<(f64, Vec<Dense>)> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let l = self.learner(agent)?;
        let (st, mut za, _, _) = self.batch_arrays(batch);
        let slot = self.agents[agent].slot;
        let d = action_dim(&self.agents[agent].producer);
        let acache = l.actor.forward_cache(&st);
        za.slice_mut(s![.., slot..slot + d]).assign(acache.output());
        let x = ndarray::concatenate![ndarray::Axis(1), st, za];
        let ccache = l.critic.forward_cache(&x);
        let n = batch.len() as f64;
        let loss = -ccache.output().sum() / n;
        let g = Array2::from_elem((batch.len(), 1), -1.0 / n);
        let (_, gx) = l.critic.backward(&ccache, &g);
        let off = self.state_dim + slot;
        let ga = gx.slice(s![.., off..off + d]).to_owned();
        let (grads, _) = l.actor.backward(&acache, &ga);
        Ok((loss, grads))
    }

    /// Mean squared Bellman residual against detached targets from the target
    /// networks.
    pub fn critic_loss(&self, agent: usize, batch: &[&Transition], gamma: f64) -> Result<f64> {
        self.critic_pass(agent, batch, gamma).map(|(l, _)| l)
    }

    pub fn critic_loss_grad(&self, agent: usize, batch: &[&Transition], gamma: f64) -> Result<(f64, Vec<f64>)> {
        self.critic_pass(agent, batch, gamma).map(|(l, g)| (l, nn::flatten(&g)))
    }

    /// `−mean Q(s, a(z))` with this agent's slot replaced by its actor output.
    pub fn actor_loss(&self, agent: usize, batch: &[&Transition]) -> Result<f64> {
        self.actor_pass(agent, batch).map(|(l, _)| l)
    }

    pub fn actor_loss_grad(&self, agent: usize, batch: &[&Transition]) -> Result<(f64, Vec<f64>)> {
        self.actor_pass(agent, batch).map(|(l, g)| (l, nn::flatten(&g)))
    }

    pub fn soft_update(&mut self, agent: usize, tau: f64) {
        if let Some(l) = &mut self.agents[agent].learner {
            l.target_actor.soft_update_from(&l.actor, tau);
            l.target_critic.soft_update_from(&l.critic, tau);
        }
    }

    fn train_agent(&mut self, agent: usize) -> Result<()> {
        let cfg = &self.config;
        let (bs, gamma, tau) = (cfg.batch_size, cfg.gamma, cfg.tau_target);
        if self.agents[agent].learner.is_none() || self.agents[agent].buffer.len() < bs {
            return Ok(());
        }
        let mut rng = self.agents[agent].rng.clone();
        let batch: Vec<Transition> = self.agents[agent].buffer.sample(bs, &mut rng).into_iter().cloned().collect();
        self.agents[agent].rng = rng;
        let refs: Vec<&Transition> = batch.iter().collect();
        let (_, cg) = self.critic_pass(agent, &refs, gamma)?;
        {
            let l = self.agents[agent].learner.as_mut().expect("learner");
            l.critic_opt.step(&mut l.critic, &cg);
        }
        let (_, ag) = self.actor_pass(agent, &refs)?;
        {
            let l = self.agents[agent].learner.as_mut().expect("learner");
            l.actor_opt.step(&mut l.actor, &ag);
        }
        self.soft_update(agent, tau);
        Ok(())
    }

    fn check_market(&self, template: &MarketInstance) -> Result<()> {
        let same = template.n_producers() == self.agents.len()
            && template.n_zones() == self.zone_members.len()
            && template
                .producers
                .iter()
                .zip(&self.agents)
                .all(|(p, a)| p.zone == a.producer.zone && p.usable_bids() == a.producer.usable_bids());
        if same {
            Ok(())
        } else {
            Err(Error::Shape("market does not match the policy bundle".into()))
        }
    }
}

pub fn reward(kind: RewardKind, beta: f64, p: &Producer, ladder: &BidLadder, revenue: f64, zone_price: f64) -> f64 {
    let scale = (p.capacity_max * p.price_max).max(f64::MIN_POSITIVE);
    let base = revenue / scale;
    match kind {
        RewardKind::Profit => base,
        RewardKind::ProfitPricePenalty => {
            let over = (ladder.mean_price() - zone_price) / p.price_max.max(f64::MIN_POSITIVE);
            base - beta * over.max(0.0)
        }
    }
}

struct Env<'a> {
    template: &'a MarketInstance,
    series: &'a DemandSeries,
    rng: ChaCha8Rng,
    perturbation: f64,
    shortage_penalty: f64,
    prev_prices: Vec<f64>,
}

impl<'a> Env<'a> {
    fn new(template: &'a MarketInstance, series: &'a DemandSeries, seed: u64, config: &MarlConfig) -> Self {
        Self {
            template,
            series,
            rng: ChaCha8Rng::seed_from_u64(seed),
            perturbation: config.perturbation,
            shortage_penalty: config.shortage_penalty,
            prev_prices: vec![0.0; template.n_zones()],
        }
    }

    fn observe(&mut self, t: usize) -> EnvState {
        let n = self.series.len();
        let day = if n > 1 { 2.0 * (t % n) as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
        let w = self.perturbation;
        let perturbation =
            (0..self.template.n_zones()).map(|_| if w > 0.0 { self.rng.random_range(-w..=w) } else { 0.0 }).collect();
        EnvState { prev_prices: self.prev_prices.clone(), day, demands: self.series.day(t % n), perturbation }
    }

    /// Clears day `t`; ladders that withhold too much capacity leave part of
    /// the demand unmet at the shortage penalty. Returns the unmet MW.
    fn clear(&self, t: usize, ladders: Vec<BidLadder>) -> Result<(ClearingResult, f64)> {
        let inst = instance_for_day(self.template, self.series, t)?.with_ladders(ladders);
        match clearing::clear_market(&inst, None) {
            Err(Error::Infeasible) => {
                let e = clearing::clear_market_elastic(&inst, None, self.shortage_penalty)?;
                let short = e.demand_shortfall.iter().chain(&e.core_shortfall).sum();
                Ok((e.result, short))
            }
            other => other.map(|r| (r, 0.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub episode: usize,
    pub agent: usize,
    pub zone: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    /// Mean daily payment to the producers of the agent's zone.
    pub mean_cost: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
    /// Mean daily market cost per episode.
    pub episode_costs: Vec<f64>,
    /// Mean daily unmet MW per episode.
    pub episode_shortfall: Vec<f64>,
}

impl TrainingTrace {
    pub fn write_csv_to(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record(["episode", "agent", "zone", "mean_reward", "std_reward", "mean_cost"]).map_err(io)?;
        for r in &self.rows {
            out.write_record([
                r.episode.to_string(),
                r.agent.to_string(),
                r.zone.to_string(),
                r.mean_reward.to_string(),
                r.std_reward.to_string(),
                r.mean_cost.to_string(),
            ])
            .map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv_to(std::fs::File::create(path)?)
    }

    /// Per-agent mean episodic reward over the first and last `fraction` of
    /// episodes.
    pub fn reward_trend(&self, fraction: f64) -> Vec<(f64, f64)> {
        let episodes = self.rows.iter().map(|r| r.episode + 1).max().unwrap_or(0);
        let agents = self.rows.iter().map(|r| r.agent + 1).max().unwrap_or(0);
        let w = ((episodes as f64 * fraction).round() as usize).clamp(1, episodes.max(1));
        (0..agents)
            .map(|a| {
                let mean = |lo: usize, hi: usize| {
                    let v: Vec<f64> = self
                        .rows
                        .iter()
                        .filter(|r| r.agent == a && r.episode >= lo && r.episode < hi)
                        .map(|r| r.mean_reward)
                        .collect();
                    v.iter().sum::<f64>() / v.len().max(1) as f64
                };
                (mean(0, w), mean(episodes - w, episodes))
            })
            .collect()
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Normalizer fitted to a template and series.
pub fn fit_normalizer(template: &MarketInstance, series: &DemandSeries, config: &MarlConfig) -> Normalizer {
    Normalizer {
        price_scale: template.producers.iter().map(|p| p.price_max).fold(f64::MIN_POSITIVE, f64::max),
        demand_max: (0..series.zones.len()).map(|z| series.max(z)).collect(),
        perturbation: config.perturbation,
    }
}

/// Runs the zonal actor-critic loop: every episode walks the whole series
/// once; each day all agents act, the market clears, transitions are stored
/// and every learning agent takes one critic and one actor step.
pub fn train_run(
    template: &MarketInstance,
    series: &DemandSeries,
    config: &MarlConfig,
    seed: u64,
) -> Result<(PolicyBundle, TrainingTrace)> {
    if series.is_empty() {
        return Err(Error::Scenario("training needs a non-empty demand series".into()));
    }
    let norm = fit_normalizer(template, series, config);
    let mut bundle = PolicyBundle::new(template, norm, config, seed)?;
    let mut env = Env::new(template, series, seed ^ 0x5_eed0_fe57, config);
    let np = template.n_producers();
    let nz = template.n_zones();
    let mut trace = TrainingTrace::default();
    for episode in 0..config.episodes {
        let noise = config.noise(episode);
        env.prev_prices = vec![0.0; nz];
        let mut state = env.observe(0);
        let mut rewards = vec![Vec::with_capacity(series.len()); np];
        let mut zone_costs = vec![Vec::with_capacity(series.len()); nz];
        let mut costs = Vec::with_capacity(series.len());
        let mut shortfall = 0.0;
        for t in 0..series.len() {
            let actions: Vec<AgentAction> = (0..np).map(|n| bundle.policy_act(n, &state, true, noise)).collect();
            let (r, short) = env.clear(t, actions.iter().map(|a| a.ladder.clone()).collect())?;
            shortfall += short;
            env.prev_prices = r.duals.demand.clone();
            let next = env.observe(t + 1);
            let feats = state.features(&bundle.norm);
            let next_feats = next.features(&bundle.norm);
            let zone_actions: Vec<Vec<f64>> = bundle
                .zone_members
                .iter()
                .map(|m| m.iter().flat_map(|&j| actions[j].raw.iter().copied()).collect())
                .collect();
            let by_zone = r.cost_by_supplier_zone(template);
            for n in 0..np {
                let p = &template.producers[n];
                let rw =
                    reward(config.reward, config.beta, p, &actions[n].ladder, r.revenue[n], r.duals.demand[p.zone]);
                rewards[n].push(rw);
                if bundle.is_learning(n) {
                    bundle.agents[n].buffer.push(Transition {
                        state: feats.clone(),
                        zone_action: zone_actions[p.zone].clone(),
                        reward: rw,
                        next_state: next_feats.clone(),
                    });
                }
            }
            for (z, c) in by_zone.iter().enumerate() {
                zone_costs[z].push(*c);
            }
            costs.push(r.total_cost);
            for z in 0..nz {
                for i in 0..bundle.zone_members[z].len() {
                    let n = bundle.zone_members[z][i];
                    bundle.train_agent(n)?;
                }
            }
            state = next;
        }
        for n in 0..np {
            let (m, s) = mean_std(&rewards[n]);
            let zone = template.producers[n].zone;
            trace.rows.push(TraceRow {
                episode,
                agent: n,
                zone,
                mean_reward: m,
                std_reward: s,
                mean_cost: mean_std(&zone_costs[zone]).0,
            });
        }
        trace.episode_costs.push(mean_std(&costs).0);
        trace.episode_shortfall.push(shortfall / series.len() as f64);
    }
    Ok((bundle, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub dates: Vec<chrono::NaiveDate>,
    pub ladders: Vec<Vec<BidLadder>>,
    pub results: Vec<ClearingResult>,
    /// Unmet MW per day.
    pub shortfall: Vec<f64>,
}

impl Evaluation {
    pub fn costs(&self) -> Vec<f64> {
        self.results.iter().map(|r| r.total_cost).collect()
    }

    pub fn profits(&self) -> Vec<Vec<f64>> {
        self.results.iter().map(|r| r.revenue.clone()).collect()
    }

    pub fn prices(&self) -> Vec<Vec<f64>> {
        self.results.iter().map(|r| r.duals.demand.clone()).collect()
    }
}

/// One greedy pass over the series with exploration off.
pub fn evaluate_policy(bundle: &PolicyBundle, template: &MarketInstance, series: &DemandSeries) -> Result<Evaluation> {
    bundle.check_market(template)?;
    let mut eval = Evaluation { dates: Vec::new(), ladders: Vec::new(), results: Vec::new(), shortfall: Vec::new() };
    if series.is_empty() {
        return Ok(eval);
    }
    let mut env = Env::new(template, series, bundle.seed ^ 0xe7a1, &bundle.config);
    let mut state = env.observe(0);
    for t in 0..series.len() {
        let f = state.features(&bundle.norm);
        let ladders: Vec<BidLadder> =
            (0..bundle.n_agents()).map(|n| bundle.ladder_for(n, &bundle.raw_action(n, &f))).collect();
        let (r, short) = env.clear(t, ladders.clone())?;
        env.prev_prices = r.duals.demand.clone();
        state = env.observe(t + 1);
        eval.shortfall.push(short);
        eval.dates.push(series.dates[t]);
        eval.ladders.push(ladders);
        eval.results.push(r);
    }
    Ok(eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSnapshot {
    pub producer: Producer,
    pub slot: usize,
    pub learner: Option<Learner>,
}

/// Serialized bundle. Replay buffers are not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: MarlConfig,
    pub seed: u64,
    pub norm: Normalizer,
    pub zone_members: Vec<Vec<usize>>,
    pub state_dim: usize,
    pub agents: Vec<AgentSnapshot>,
}

impl PolicyBundle {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            seed: self.seed,
            norm: self.norm.clone(),
            zone_members: self.zone_members.clone(),
            state_dim: self.state_dim,
            agents: self
                .agents
                .iter()
                .map(|a| AgentSnapshot { producer: a.producer.clone(), slot: a.slot, learner: a.learner.clone() })
                .collect(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Scenario(format!("unsupported checkpoint {} v{}", c.format, c.version)));
        }
        if c.config_hash != c.config.hash() {
            return Err(Error::Scenario("checkpoint config hash mismatch".into()));
        }
        let mut master = ChaCha8Rng::seed_from_u64(c.seed);
        let agents = c
            .agents
            .into_iter()
            .map(|a| AgentPolicy {
                producer: a.producer,
                slot: a.slot,
                learner: a.learner,
                buffer: ReplayBuffer::new(c.config.buffer_capacity),
                rng: ChaCha8Rng::seed_from_u64(master.random()),
            })
            .collect();
        Ok(Self {
            config: c.config,
            seed: c.seed,
            norm: c.norm,
            agents,
            zone_members: c.zone_members,
            state_dim: c.state_dim,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &self.checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_checkpoint(serde_json::from_reader(f)?)
    }
}

#[cfg(test)]
mod tests;
