//! DDPG actor-critic agent with prioritized replay, adaptive parameter
//! noise, target networks, IPM-augmented states and behavior cloning, plus
//! the trajectory-replay variant trained on differential risk rewards.

mod nets;
mod noise;
mod replay;
mod state;
mod train;

pub use nets::{ActorNet, CriticNet, DropoutRng, NetConfig};
pub use noise::{noise_distance, perturb, ParamNoise};
pub use replay::{PerConfig, PerSample, ReplayBuffer, SumTree, TrajectoryBuffer, Transition};
pub use state::{AugmentedState, StateBatch, StateSpec};
pub use train::{
    train_ddpg, train_rdpg, write_log_csv, AgentPolicy, Dam, Modules, RiskKind, TraceEvent, TrainLogRow,
    TrainObserver, Trained, IPM_UNITS,
};

use folio_nn::{Checkpoint, Graph, NodeId, OptimizerKind, OptimizerState, ParamRecord, ParamStore, Tensor};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub net: NetConfig,
    /// Price-tensor window length.
    pub k2: usize,
    pub feature_scale: f64,
    pub gamma: f64,
    pub tau: f64,
    pub lr_critic: f64,
    /// Actor learning rate as a fraction of the critic's.
    pub actor_lr_ratio: f64,
    pub critic_optimizer: OptimizerKind,
    pub actor_optimizer: OptimizerKind,
    /// Global-norm clip on critic gradients.
    pub critic_clip: Option<f64>,
    pub lambda_bcm: f64,
    pub reward_scale: f64,
    /// Multiplier on differential risk rewards before storage.
    pub risk_reward_scale: f64,
    /// Adaptation rate of the DSR/D3R moving moments.
    pub risk_eta: f64,
    /// Transitions per prioritized minibatch.
    pub batch: usize,
    /// Trajectories per minibatch in the risk-adjusted variant.
    pub trajectory_batch: usize,
    pub per: PerConfig,
    pub noise: ParamNoise,
    pub episode_length: usize,
    pub episodes: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            k2: 10,
            feature_scale: 10.0,
            gamma: 0.99,
            tau: 0.001,
            lr_critic: 1e-3,
            actor_lr_ratio: 0.01,
            critic_optimizer: OptimizerKind::Adam,
            actor_optimizer: OptimizerKind::Sgd,
            critic_clip: Some(5.0),
            lambda_bcm: 0.1,
            reward_scale: 1e3,
            risk_reward_scale: 1.0,
            risk_eta: 0.01,
            batch: 32,
            trajectory_batch: 4,
            per: PerConfig::default(),
            noise: ParamNoise::default(),
            episode_length: 650,
            episodes: 200,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.per.validate()?;
        self.noise.validate()?;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(CoreError::Config(format!("gamma {} not in (0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(CoreError::Config(format!("tau {} not in [0, 1]", self.tau)));
        }
        if !(self.lr_critic >= 0.0) || !(self.actor_lr_ratio >= 0.0) || !(self.lambda_bcm >= 0.0) {
            return Err(CoreError::Config("learning rates and lambda must be non-negative".into()));
        }
        if !(self.reward_scale > 0.0) || !(self.risk_reward_scale > 0.0) || !(self.risk_eta > 0.0) {
            return Err(CoreError::Config("reward scales and risk eta must be positive".into()));
        }
        if self.batch == 0 || self.trajectory_batch == 0 || self.episode_length == 0 || self.k2 == 0 {
            return Err(CoreError::Config("batch sizes, episode length and k2 must be positive".into()));
        }
        Ok(())
    }

    pub fn actor_lr(&self) -> f64 {
        self.lr_critic * self.actor_lr_ratio
    }
}

/// Result of one critic step.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticStep {
    /// `y - Q(s, a)` per batch row, before the update.
    pub td: Vec<f64>,
    pub loss: f64,
}

/// Result of one actor step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorStep {
    /// `-mean Q(s, mu(s))`.
    pub policy_loss: f64,
    /// Log-loss against the expert actions; zero when cloning is off.
    pub clone_loss: f64,
}

/// The six networks of one agent: online, target, perturbed and
/// adaptive-perturbed actors, online and target critics.
#[derive(Debug, Clone)]
pub struct Agent {
    pub spec: StateSpec,
    pub config: AgentConfig,
    pub actor: ActorNet,
    pub critic: CriticNet,
    pub actor_params: ParamStore,
    pub actor_target: ParamStore,
    pub actor_perturbed: ParamStore,
    pub actor_adaptive: ParamStore,
    pub critic_params: ParamStore,
    pub critic_target: ParamStore,
    pub critic_opt: OptimizerState,
    pub actor_opt: OptimizerState,
    pub noise: ParamNoise,
}

const CHECKPOINT_PARTS: [&str; 6] = [
    "actor",
    "actor_target",
    "actor_perturbed",
    "actor_adaptive",
    "critic",
    "critic_target",
];

#[allow(clippy::too_many_arguments)]
fn actor_step<F>(
    actor: &ActorNet,
    params: &mut ParamStore,
    opt: &mut OptimizerState,
    spec: &StateSpec,
    batch: &[&Transition],
    lambda: f64,
    rng: &mut dyn RngCore,
    q: F,
) -> Result<ActorStep>
where
    F: FnOnce(&mut Graph, &StateBatch, NodeId) -> Result<NodeId>,
{
    let states: Vec<&AugmentedState> = batch.iter().map(|t| &t.state).collect();
    let sb = spec.batch(&states)?;
    let mut g = Graph::new();
    let a = actor.forward(&mut g, params, &sb, Some(rng))?;
    let qv = q(&mut g, &sb, a)?;
    let mq = g.mean(qv)?;
    let policy = g.scale(mq, -1.0)?;
    let (loss, clone_loss) = if lambda > 0.0 {
        let expert = stack_actions(&batch.iter().map(|t| t.expert.as_slice()).collect::<Vec<_>>())?;
        let bll = g.binary_log_loss(a, expert)?;
        let cl = g.value(bll).data()[0];
        let scaled = g.scale(bll, lambda)?;
        (g.add(policy, scaled)?, cl)
    } else {
        (policy, 0.0)
    };
    let policy_loss = g.value(policy).data()[0];
    if !g.value(loss).data()[0].is_finite() {
        return Err(CoreError::NonFinite("actor loss"));
    }
    let grads = g.backward(loss)?;
    params.zero_grad();
    params.accumulate(&g, &grads);
    opt.step(params)?;
    Ok(ActorStep {
        policy_loss,
        clone_loss,
    })
}

fn stack_actions(actions: &[&[f64]]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = actions.iter().map(|a| a.to_vec()).collect();
    Ok(Tensor::from_rows(&rows)?)
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(spec: StateSpec, config: AgentConfig, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        let mut actor_params = ParamStore::new();
        let actor = ActorNet::new(&mut actor_params, &spec, &config.net, rng)?;
        let mut critic_params = ParamStore::new();
        let critic = CriticNet::new(&mut critic_params, &spec, &config.net, rng)?;
        let noise = config.noise;
        let actor_perturbed = perturb(&actor_params, noise.sigma, rng)?;
        Ok(Self {
            spec,
            actor_target: actor_params.clone(),
            actor_adaptive: actor_params.clone(),
            actor_perturbed,
            critic_target: critic_params.clone(),
            critic_opt: OptimizerState::new(config.critic_optimizer, config.lr_critic).with_clip(config.critic_clip),
            actor_opt: OptimizerState::new(config.actor_optimizer, config.actor_lr()),
            noise,
            actor,
            critic,
            actor_params,
            critic_params,
            config,
        })
    }

    /// Clean evaluation-mode action.
    pub fn act(&self, s: &AugmentedState) -> Result<Vec<f64>> {
        self.act_with(&self.actor_params, s)
    }

    pub fn act_with(&self, params: &ParamStore, s: &AugmentedState) -> Result<Vec<f64>> {
        let batch = self.spec.batch(&[s])?;
        Ok(self.actor.act(params, &batch)?.remove(0))
    }

    /// `y_i = r_i + gamma Q'(s'_i, mu'(s'_i))`.
    pub fn targets(&self, batch: &[&Transition]) -> Result<Vec<f64>> {
        let next: Vec<&AugmentedState> = batch.iter().map(|t| &t.next).collect();
        let sb = self.spec.batch(&next)?;
        let mut g = Graph::new();
        let a = self.actor.forward(&mut g, &self.actor_target, &sb, None)?;
        let q = self.critic.forward(&mut g, &self.critic_target, &sb, a, None)?;
        let q = g.value(q);
        if !q.is_finite() {
            return Err(CoreError::NonFinite("target Q"));
        }
        Ok(batch
            .iter()
            .zip(q.data())
            .map(|(t, q)| t.reward + self.config.gamma * q)
            .collect())
    }

    /// One step on the importance-weighted squared TD error.
    pub fn critic_update(&mut self, batch: &[&Transition], weights: &[f64], rng: &mut dyn RngCore) -> Result<CriticStep> {
        if batch.is_empty() || weights.len() != batch.len() {
            return Err(CoreError::Invalid("critic batch and weights must be non-empty and aligned".into()));
        }
        let y = self.targets(batch)?;
        let states: Vec<&AugmentedState> = batch.iter().map(|t| &t.state).collect();
        let sb = self.spec.batch(&states)?;
        let actions = stack_actions(&batch.iter().map(|t| t.action.as_slice()).collect::<Vec<_>>())?;
        let b = batch.len();
        let mut g = Graph::new();
        let a = g.constant(actions)?;
        let q = self.critic.forward(&mut g, &self.critic_params, &sb, a, Some(rng))?;
        let td: Vec<f64> = y.iter().zip(g.value(q).data()).map(|(y, q)| y - q).collect();
        let yc = g.constant(Tensor::matrix(b, 1, y)?)?;
        let diff = g.sub(q, yc)?;
        let sq = g.square(diff)?;
        let weighted = g.mul_const(sq, Tensor::matrix(b, 1, weights.to_vec())?)?;
        let loss = g.mean(weighted)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(CoreError::NonFinite("critic loss"));
        }
        let grads = g.backward(loss)?;
        self.critic_params.zero_grad();
        self.critic_params.accumulate(&g, &grads);
        self.critic_opt.step(&mut self.critic_params)?;
        Ok(CriticStep { td, loss: value })
    }

    /// Restores the actor/critic learning-rate ratio.
    pub fn sync_lr(&mut self) {
        self.actor_opt.set_lr(self.critic_opt.lr() * self.config.actor_lr_ratio);
    }

    /// Ascends `mean Q(s, mu(s))` with the critic held fixed, plus `lambda`
    /// times the cloning log-loss gradient, in one optimizer step.
    pub fn actor_update(&mut self, batch: &[&Transition], lambda: f64, rng: &mut dyn RngCore) -> Result<ActorStep> {
        let (critic, params) = (&self.critic, &self.critic_params);
        actor_step(
            &self.actor,
            &mut self.actor_params,
            &mut self.actor_opt,
            &self.spec,
            batch,
            lambda,
            rng,
            |g, sb, a| {
                g.freeze(params);
                critic.forward(g, params, sb, a, None)
            },
        )
    }

    /// [`actor_update`](Self::actor_update) against an arbitrary
    /// differentiable `q(graph, states, actions) -> [b, 1]`.
    pub fn actor_update_with<F>(&mut self, batch: &[&Transition], lambda: f64, rng: &mut dyn RngCore, q: F) -> Result<ActorStep>
    where
        F: FnOnce(&mut Graph, &StateBatch, NodeId) -> Result<NodeId>,
    {
        actor_step(
            &self.actor,
            &mut self.actor_params,
            &mut self.actor_opt,
            &self.spec,
            batch,
            lambda,
            rng,
            q,
        )
    }

    pub fn soft_update(&mut self) -> Result<()> {
        let tau = self.config.tau;
        self.actor_target.soft_update_from(&self.actor_params, tau)?;
        self.critic_target.soft_update_from(&self.critic_params, tau)?;
        Ok(())
    }

    /// Draws the adaptive copy, measures its action distance on `states`
    /// and adapts sigma. Returns the distance.
    pub fn adapt_noise<R: Rng + ?Sized>(&mut self, states: &[&AugmentedState], rng: &mut R) -> Result<f64> {
        self.actor_adaptive = perturb(&self.actor_params, self.noise.sigma, rng)?;
        let sb = self.spec.batch(states)?;
        let clean = self.actor.act(&self.actor_params, &sb)?;
        let noisy = self.actor.act(&self.actor_adaptive, &sb)?;
        let d = noise_distance(&clean, &noisy)?;
        self.noise.adapt(d);
        Ok(d)
    }

    /// Redraws the acting perturbed actor from the online weights.
    pub fn refresh_perturbed<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.actor_perturbed = perturb(&self.actor_params, self.noise.sigma, rng)?;
        Ok(())
    }

    /// All six networks plus the current noise scale.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let stores = [
            &self.actor_params,
            &self.actor_target,
            &self.actor_perturbed,
            &self.actor_adaptive,
            &self.critic_params,
            &self.critic_target,
        ];
        let mut ck = Checkpoint::default();
        for (name, store) in CHECKPOINT_PARTS.iter().zip(stores) {
            ck.extend(store.to_checkpoint().prefixed(&format!("{name}.")));
        }
        ck.params.push(ParamRecord {
            name: "meta.sigma".into(),
            shape: vec![1],
            values: vec![self.noise.sigma],
        });
        ck
    }

    /// Rebuilds an agent from a checkpoint written by
    /// [`to_checkpoint`](Self::to_checkpoint). Optimizer moments restart.
    pub fn from_checkpoint<R: Rng + ?Sized>(spec: StateSpec, config: AgentConfig, ck: &Checkpoint, rng: &mut R) -> Result<Self> {
        let mut agent = Self::new(spec, config, rng)?;
        let stores = [
            &mut agent.actor_params,
            &mut agent.actor_target,
            &mut agent.actor_perturbed,
            &mut agent.actor_adaptive,
            &mut agent.critic_params,
            &mut agent.critic_target,
        ];
        for (name, store) in CHECKPOINT_PARTS.iter().zip(stores) {
            store.load_checkpoint(&ck.strip_prefix(&format!("{name}.")))?;
        }
        let sigma = ck
            .params
            .iter()
            .find(|p| p.name == "meta.sigma")
            .and_then(|p| p.values.first().copied())
            .ok_or_else(|| CoreError::Invalid("checkpoint lacks meta.sigma".into()))?;
        agent.noise.sigma = sigma;
        Ok(agent)
    }
}
