//! Training loops and the frozen-agent backtest policy.

use std::io::Write;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::replay::{ReplayBuffer, TrajectoryBuffer, Transition};
use super::state::{AugmentedState, StateSpec};
use super::{Agent, AgentConfig};
use crate::backtest::{cost_factor, drift_weights, DecisionContext, Policy};
use crate::error::{CoreError, Result};
use crate::greedy::{solve_greedy, GreedyProblem};
use crate::market::{sample_episode, MarketData};
use crate::ndybm::NdybmState;
use crate::rgan::{augment_episode, FineScale, GanPair};
use crate::risk::{D3rState, DsrState, RiskReward};

/// IPM inputs and predictions are percentage changes expressed in percent.
pub const IPM_UNITS: f64 = 100.0;

/// Steps of one training iteration, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TraceEvent {
    IpmPredict,
    Act,
    Execute,
    IpmNextPredict,
    GreedySolve,
    Store,
    PerSample,
    CriticUpdate,
    LrSync,
    ActorUpdate,
    TargetUpdate,
    SigmaAdapt,
    /// Perturbed-actor refresh after the last step of an episode.
    EpisodeEnd,
}

pub trait TrainObserver {
    fn event(&mut self, episode: usize, step: usize, ev: TraceEvent);
}

impl TrainObserver for () {
    fn event(&mut self, _: usize, _: usize, _: TraceEvent) {}
}

impl TrainObserver for Vec<(usize, usize, TraceEvent)> {
    fn event(&mut self, episode: usize, step: usize, ev: TraceEvent) {
        self.push((episode, step, ev));
    }
}

/// Data augmentation: per-asset generators and how their output is cut into
/// bars. Owns its random stream so enabling it leaves the agent's untouched.
#[derive(Debug, Clone)]
pub struct Dam {
    pub pairs: Vec<GanPair>,
    /// Synthetic bars prepended to each episode.
    pub horizon: usize,
    /// Fine steps per synthetic bar.
    pub fine_steps: usize,
    pub scale: FineScale,
    pub rng: ChaCha8Rng,
}

/// Optional modules around the agent.
#[derive(Debug, Clone, Default)]
pub struct Modules {
    pub ipm: Option<NdybmState>,
    pub dam: Option<Dam>,
    pub bcm: bool,
}

impl Modules {
    pub fn names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.ipm.is_some() {
            out.push("ipm");
        }
        if self.dam.is_some() {
            out.push("dam");
        }
        if self.bcm {
            out.push("bcm");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub episode: usize,
    pub step: usize,
    /// Unscaled reward of the step (log return, or the differential ratio).
    pub reward: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub clone_loss: f64,
    pub sigma: f64,
    pub buffer_size: usize,
}

/// A trained agent with its log and final replay contents.
#[derive(Debug, Clone)]
pub struct Trained {
    pub agent: Agent,
    pub log: Vec<TrainLogRow>,
    /// Transitions left in the replay buffer, oldest slot first.
    pub replay: Vec<Transition>,
    /// Stored trajectories of the risk-adjusted variant, oldest first.
    pub trajectories: Vec<Vec<Transition>>,
}

pub fn write_log_csv<W: Write>(rows: &[TrainLogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CoreError::io("<training log>", e))?;
    Ok(())
}

fn ipm_input(data: &MarketData, t: usize) -> Vec<f64> {
    data.hlc_changes(t).into_iter().map(|v| v * IPM_UNITS).collect()
}

fn ipm_predict(ipm: &Option<NdybmState>) -> Result<Option<Vec<f64>>> {
    ipm.as_ref().map(|s| Ok(s.predict()?.to_flat())).transpose()
}

/// One sampled (and possibly augmented) episode being played.
struct Episode {
    data: MarketData,
    first: usize,
    /// Weights held entering the current decision.
    w: Vec<f64>,
}

impl Episode {
    /// Samples a window, prepends synthetic bars when augmentation is on and
    /// warms the IPM over the bars before the first decision.
    fn start<R: Rng + ?Sized>(data: &MarketData, modules: &mut Modules, cfg: &AgentConfig, rng: &mut R) -> Result<Self> {
        let slice = sample_episode(data, cfg.episode_length, cfg.k2, rng)?;
        let first = slice.first_decision();
        let data = match &mut modules.dam {
            Some(dam) => augment_episode(&slice.data, &dam.pairs, dam.horizon, dam.fine_steps, dam.scale, &mut dam.rng)?,
            None => slice.data,
        };
        if let Some(ipm) = &mut modules.ipm {
            for s in 1..=first {
                ipm.update(&ipm_input(&data, s))?;
            }
        }
        let n = data.num_risky() + 1;
        let mut w = vec![0.0; n];
        w[0] = 1.0;
        Ok(Self { data, first, w })
    }

    fn decisions(&self) -> std::ops::Range<usize> {
        self.first..self.data.len() - 1
    }
}

/// The environment half of a step: everything up to and including the
/// expert solve.
struct Experience {
    transition: Transition,
    /// Unscaled log return.
    log_return: f64,
}

fn experience_step<O: TrainObserver + ?Sized>(
    agent: &Agent,
    ep: &mut Episode,
    t: usize,
    modules: &mut Modules,
    cost: f64,
    obs: &mut O,
    (episode, step): (usize, usize),
) -> Result<Experience> {
    let spec = agent.spec;
    if modules.ipm.is_some() {
        obs.event(episode, step, TraceEvent::IpmPredict);
    }
    let pred = ipm_predict(&modules.ipm)?;
    let state = spec.build(&ep.data, t, &ep.w, pred.as_deref())?;

    obs.event(episode, step, TraceEvent::Act);
    let action = agent.act_with(&agent.actor_perturbed, &state)?;

    obs.event(episode, step, TraceEvent::Execute);
    let u = ep.data.relative(t + 1);
    let cbar = cost_factor(&ep.w, &action, cost);
    let growth: f64 = action.iter().zip(&u).map(|(a, b)| a * b).sum();
    let log_return = (cbar * growth).ln();
    if !log_return.is_finite() {
        return Err(CoreError::NonFinite("training reward"));
    }
    let w_next = drift_weights(&action, &u)?;

    if let Some(ipm) = &mut modules.ipm {
        obs.event(episode, step, TraceEvent::IpmNextPredict);
        ipm.update(&ipm_input(&ep.data, t + 1))?;
    }
    let pred_next = ipm_predict(&modules.ipm)?;
    let next = spec.build(&ep.data, t + 1, &w_next, pred_next.as_deref())?;

    obs.event(episode, step, TraceEvent::GreedySolve);
    let problem = GreedyProblem {
        u,
        w_prev: ep.w.clone(),
        cost,
    };
    let expert = solve_greedy(&problem)?.w_star;

    ep.w = w_next;
    Ok(Experience {
        transition: Transition {
            state,
            action,
            reward: log_return,
            next,
            expert,
            problem,
        },
        log_return,
    })
}

/// Learning half shared by both variants: critic, learning-rate sync,
/// actor with cloning, targets, then noise adaptation.
fn learn<O: TrainObserver + ?Sized>(
    agent: &mut Agent,
    batch: &[&Transition],
    weights: &[f64],
    lambda: f64,
    rng: &mut ChaCha8Rng,
    obs: &mut O,
    (episode, step): (usize, usize),
) -> Result<(super::CriticStep, super::ActorStep)> {
    obs.event(episode, step, TraceEvent::CriticUpdate);
    let critic = agent.critic_update(batch, weights, rng as &mut dyn RngCore)?;
    obs.event(episode, step, TraceEvent::LrSync);
    agent.sync_lr();
    obs.event(episode, step, TraceEvent::ActorUpdate);
    let actor = agent.actor_update(batch, lambda, rng as &mut dyn RngCore)?;
    obs.event(episode, step, TraceEvent::TargetUpdate);
    agent.soft_update()?;
    obs.event(episode, step, TraceEvent::SigmaAdapt);
    let states: Vec<&AugmentedState> = batch.iter().map(|t| &t.state).collect();
    agent.adapt_noise(&states, rng)?;
    Ok((critic, actor))
}

fn check_training_data(data: &MarketData, modules: &Modules, cfg: &AgentConfig) -> Result<StateSpec> {
    cfg.validate()?;
    if data.num_risky() == 0 {
        return Err(CoreError::InsufficientData("no risky assets".into()));
    }
    if let Some(ipm) = &modules.ipm {
        if ipm.units() != 3 * data.num_risky() {
            return Err(CoreError::Invalid(format!(
                "IPM has {} units, need {}",
                ipm.units(),
                3 * data.num_risky()
            )));
        }
    }
    if let Some(dam) = &modules.dam {
        if dam.pairs.len() != data.num_risky() {
            return Err(CoreError::Invalid("one generator per risky asset is required".into()));
        }
    }
    Ok(StateSpec {
        assets: data.num_risky(),
        k2: cfg.k2,
        ipm: modules.ipm.is_some(),
        feature_scale: cfg.feature_scale,
    })
}

/// Off-policy training over `config.episodes` sampled episodes. `cost` is
/// the proportional transaction cost of the training environment.
pub fn train_ddpg<O: TrainObserver + ?Sized>(
    data: &MarketData,
    modules: &mut Modules,
    config: &AgentConfig,
    cost: f64,
    rng: &mut ChaCha8Rng,
    obs: &mut O,
) -> Result<Trained> {
    let spec = check_training_data(data, modules, config)?;
    let mut agent = Agent::new(spec, config.clone(), rng)?;
    let mut buffer = ReplayBuffer::new(config.per)?;
    let lambda = if modules.bcm { config.lambda_bcm } else { 0.0 };
    let total = config.episodes * config.episode_length;
    let mut log = Vec::new();
    let mut global = 0usize;
    for episode in 0..config.episodes {
        let mut ep = Episode::start(data, modules, config, rng)?;
        for (step, t) in ep.decisions().enumerate() {
            let at = (episode, step);
            let exp = experience_step(&agent, &mut ep, t, modules, cost, obs, at)?;
            let mut tr = exp.transition;
            tr.reward *= config.reward_scale;
            obs.event(episode, step, TraceEvent::Store);
            buffer.push(tr);

            obs.event(episode, step, TraceEvent::PerSample);
            let sample = buffer.sample(config.batch, config.per.beta(global, total), rng)?;
            let batch: Vec<Transition> = sample.indices.iter().map(|&i| buffer.get(i).clone()).collect();
            let refs: Vec<&Transition> = batch.iter().collect();
            let (critic, actor) = learn(&mut agent, &refs, &sample.weights, lambda, rng, obs, at)?;
            buffer.update_priorities(&sample.indices, &critic.td)?;
            log.push(TrainLogRow {
                episode,
                step,
                reward: exp.log_return,
                critic_loss: critic.loss,
                actor_loss: actor.policy_loss,
                clone_loss: actor.clone_loss,
                sigma: agent.noise.sigma,
                buffer_size: buffer.len(),
            });
            global += 1;
        }
        obs.event(episode, ep.decisions().len(), TraceEvent::EpisodeEnd);
        agent.refresh_perturbed(rng)?;
    }
    Ok(Trained {
        agent,
        log,
        replay: buffer.items().to_vec(),
        trajectories: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskKind {
    Dsr,
    D3r,
}

impl RiskKind {
    fn fresh(self, eta: f64) -> RiskReward {
        match self {
            RiskKind::Dsr => RiskReward::Dsr(DsrState::new(eta)),
            RiskKind::D3r => RiskReward::D3r(D3rState::new(eta)),
        }
    }
}

/// Trajectory-replay training on differential Sharpe or downside-deviation
/// rewards. One learning iteration follows each collected episode.
pub fn train_rdpg<O: TrainObserver + ?Sized>(
    data: &MarketData,
    modules: &mut Modules,
    config: &AgentConfig,
    risk: RiskKind,
    cost: f64,
    rng: &mut ChaCha8Rng,
    obs: &mut O,
) -> Result<Trained> {
    let spec = check_training_data(data, modules, config)?;
    let mut agent = Agent::new(spec, config.clone(), rng)?;
    let mut buffer = TrajectoryBuffer::new(config.per.capacity)?;
    let lambda = if modules.bcm { config.lambda_bcm } else { 0.0 };
    let mut log = Vec::new();
    for episode in 0..config.episodes {
        let mut ep = Episode::start(data, modules, config, rng)?;
        // Moving moments restart with every episode.
        let mut moments = risk.fresh(config.risk_eta);
        let mut trajectory = Vec::new();
        let mut rewards = Vec::new();
        for (step, t) in ep.decisions().enumerate() {
            let exp = experience_step(&agent, &mut ep, t, modules, cost, obs, (episode, step))?;
            let d = moments.update(exp.log_return);
            let mut tr = exp.transition;
            tr.reward = d * config.risk_reward_scale;
            trajectory.push(tr);
            rewards.push(d);
        }
        let steps = trajectory.len();
        obs.event(episode, steps, TraceEvent::Store);
        buffer.push(trajectory)?;
        obs.event(episode, steps, TraceEvent::PerSample);
        let picks = buffer.sample(config.trajectory_batch, rng)?;
        let refs: Vec<&Transition> = picks.iter().flat_map(|&k| buffer.get(k)).collect();
        let weights = vec![1.0; refs.len()];
        let (critic, actor) = learn(&mut agent, &refs, &weights, lambda, rng, obs, (episode, steps))?;
        for (step, d) in rewards.into_iter().enumerate() {
            log.push(TrainLogRow {
                episode,
                step,
                reward: d,
                critic_loss: critic.loss,
                actor_loss: actor.policy_loss,
                clone_loss: actor.clone_loss,
                sigma: agent.noise.sigma,
                buffer_size: buffer.len(),
            });
        }
        obs.event(episode, steps, TraceEvent::EpisodeEnd);
        agent.refresh_perturbed(rng)?;
    }
    Ok(Trained {
        agent,
        log,
        replay: Vec::new(),
        trajectories: (0..buffer.len()).map(|k| buffer.get(k).to_vec()).collect(),
    })
}

/// Frozen agent acting in evaluation mode while the IPM keeps learning
/// online from every bar it has not yet seen.
pub struct AgentPolicy<'a> {
    pub agent: &'a Agent,
    pub ipm: Option<NdybmState>,
    /// Bars `<= seen` have already been fed to the IPM.
    pub seen: usize,
}

impl Policy for AgentPolicy<'_> {
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Vec<f64>> {
        let t = ctx.history.t();
        if let Some(ipm) = &mut self.ipm {
            for s in self.seen + 1..=t {
                let x: Vec<f64> = ctx.history.hlc_changes_at(s)?.into_iter().map(|v| v * IPM_UNITS).collect();
                ipm.update(&x)?;
            }
        }
        self.seen = self.seen.max(t);
        let pred = ipm_predict(&self.ipm)?;
        let state = ctx.history.state(&self.agent.spec, ctx.weights, pred.as_deref())?;
        self.agent.act(&state)
    }
}
