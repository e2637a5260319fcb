//! Policies, Monte Carlo rollouts and the REINFORCE update.
//!
//! Two learnable policies share one parameter layout ([`GcnParams`]): the
//! graph policy runs two graph-convolution layers over the state window, and
//! the dense baseline runs the same layers on the current observation alone
//! (a one-node graph, where the normalised adjacency is exactly `[[1]]`).
//! Three fixed policies (uniform random, static, nearest-chunk oracle) bracket
//! them from below and above.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvConfig, Observation, StepResult, TrafficPattern, OBS_DIM};
use crate::error::{Error, Result};
use crate::graph::{build_state_graph, gcn_backward, gcn_forward, ForwardCache, GcnParams, StateGraph};
use crate::nncore::{argmax, log_softmax_at, sample_categorical, softmax, Matrix};
use crate::rng::Rng;

/// Stream ids reserved for per-run (not per-episode) randomness.
const INIT_STREAM: u64 = u64::MAX;
const ACTION_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    GnnReinforce,
    MlpReinforce,
    Random,
    Static,
    Oracle,
}

impl AgentKind {
    pub const ALL: [AgentKind; 5] = [
        AgentKind::GnnReinforce,
        AgentKind::MlpReinforce,
        AgentKind::Random,
        AgentKind::Static,
        AgentKind::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::GnnReinforce => "gnn-reinforce",
            AgentKind::MlpReinforce => "mlp-reinforce",
            AgentKind::Random => "random",
            AgentKind::Static => "static",
            AgentKind::Oracle => "oracle",
        }
    }

    pub fn is_learnable(self) -> bool {
        matches!(self, AgentKind::GnnReinforce | AgentKind::MlpReinforce)
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AgentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown agent `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Gnn(GcnParams),
    Mlp(GcnParams),
    Random { actions: usize },
    Static { action: usize, actions: usize },
    Oracle { chunk_size: u32, actions: usize },
}

/// Everything a policy may look at when choosing an action. Only the oracle
/// reads `required_prbs`; the learnable policies see the graph.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput<'a> {
    pub graph: &'a StateGraph,
    pub required_prbs: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionChoice {
    pub action: usize,
    pub log_prob: f64,
    pub probs: Vec<f64>,
}

/// The current observation as a one-node graph.
pub fn singleton_graph(features: &[f64]) -> Result<StateGraph> {
    StateGraph::new(Matrix::row_vector(features), [], 0)
}

impl Policy {
    pub fn new(kind: AgentKind, env: &EnvConfig, train: &TrainConfig, rng: &mut Rng) -> Policy {
        let k = env.num_chunks;
        match kind {
            AgentKind::GnnReinforce => Policy::Gnn(GcnParams::init(OBS_DIM, train.hidden_dim, k, train.init_scale, rng)),
            AgentKind::MlpReinforce => Policy::Mlp(GcnParams::init(OBS_DIM, train.hidden_dim, k, train.init_scale, rng)),
            AgentKind::Random => Policy::Random { actions: k },
            AgentKind::Static => Policy::Static {
                action: train.static_action.min(k - 1),
                actions: k,
            },
            AgentKind::Oracle => Policy::Oracle {
                chunk_size: env.chunk_size,
                actions: k,
            },
        }
    }

    pub fn kind(&self) -> AgentKind {
        match self {
            Policy::Gnn(_) => AgentKind::GnnReinforce,
            Policy::Mlp(_) => AgentKind::MlpReinforce,
            Policy::Random { .. } => AgentKind::Random,
            Policy::Static { .. } => AgentKind::Static,
            Policy::Oracle { .. } => AgentKind::Oracle,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            Policy::Gnn(p) | Policy::Mlp(p) => p.num_actions(),
            Policy::Random { actions } | Policy::Static { actions, .. } | Policy::Oracle { actions, .. } => *actions,
        }
    }

    pub fn params(&self) -> Option<&GcnParams> {
        match self {
            Policy::Gnn(p) | Policy::Mlp(p) => Some(p),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut GcnParams> {
        match self {
            Policy::Gnn(p) | Policy::Mlp(p) => Some(p),
            _ => None,
        }
    }

    /// Forward pass of a learnable policy; `None` for the fixed policies.
    pub fn forward(&self, graph: &StateGraph) -> Result<Option<(Vec<f64>, ForwardCache)>> {
        match self {
            Policy::Gnn(p) => gcn_forward(graph, p, None).map(Some),
            Policy::Mlp(p) => {
                let current = graph.node_features().row(graph.target_node());
                gcn_forward(&singleton_graph(current)?, p, None).map(Some)
            }
            _ => Ok(None),
        }
    }

    /// Action probabilities for a given input.
    pub fn probabilities(&self, input: &PolicyInput<'_>) -> Result<Vec<f64>> {
        let k = self.num_actions();
        let one_hot = |a: usize| (0..k).map(|i| if i == a { 1.0 } else { 0.0 }).collect();
        Ok(match self {
            Policy::Gnn(_) | Policy::Mlp(_) => {
                let (logits, _) = self.forward(input.graph)?.expect("learnable policy");
                softmax(&logits)?
            }
            Policy::Random { .. } => vec![1.0 / k as f64; k],
            Policy::Static { action, .. } => one_hot(*action),
            Policy::Oracle { chunk_size, .. } => one_hot(nearest_chunk(input.required_prbs, *chunk_size, k)),
        })
    }
}

fn nearest_chunk(required: u32, chunk_size: u32, actions: usize) -> usize {
    (0..actions)
        .min_by_key(|&a| (required as i64 - (a as u32 * chunk_size) as i64).unsigned_abs())
        .unwrap_or(0)
}

/// Samples (or takes the argmax of) the policy's action distribution. The
/// uniform random policy always samples.
pub fn select_action(policy: &Policy, input: &PolicyInput<'_>, rng: &mut Rng, mode: ActionMode) -> Result<ActionChoice> {
    let probs = policy.probabilities(input)?;
    let sample = mode == ActionMode::Sample || matches!(policy, Policy::Random { .. });
    let action = if sample {
        sample_categorical(&probs, rng)?
    } else {
        argmax(&probs)
    };
    let log_prob = probs[action].ln();
    Ok(ActionChoice {
        action,
        log_prob,
        probs,
    })
}

/// Discounted returns, `G_t = r_t + γ G_{t+1}`.
pub fn compute_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    out
}

#[derive(Debug, Clone)]
pub struct TraceStep {
    pub graph: StateGraph,
    pub required_prbs: u32,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeTrace {
    pub steps: Vec<TraceStep>,
}

impl EpisodeTrace {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub baseline_decay: f64,
    pub seed: u64,
    pub gradient_clip_norm: f64,
    pub hidden_dim: usize,
    /// Half-width of the uniform init for graph/dense layer weights.
    pub init_scale: f64,
    /// Action used by the static agent.
    pub static_action: usize,
    /// Fractions of `episodes` after which a policy snapshot is kept.
    pub checkpoint_fractions: Vec<f64>,
    /// Weight of the per-step policy-entropy bonus subtracted from the loss.
    pub entropy_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 1500,
            gamma: 0.0,
            learning_rate: 0.01,
            baseline_decay: 0.9,
            seed: 0,
            gradient_clip_norm: 5.0,
            hidden_dim: 16,
            init_scale: 1.0,
            static_action: 5,
            checkpoint_fractions: vec![0.0, 0.5, 1.0],
            entropy_weight: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("train.gamma must be in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config("train.baseline_decay must be in [0, 1)".into()));
        }
        if !(self.gradient_clip_norm > 0.0) {
            return Err(Error::Config("train.gradient_clip_norm must be > 0".into()));
        }
        if !(self.entropy_weight >= 0.0) {
            return Err(Error::Config("train.entropy_weight must be >= 0".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("train.hidden_dim must be > 0".into()));
        }
        if self.checkpoint_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("train.checkpoint_fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Episode counts (number of completed updates) at which to snapshot.
    pub fn checkpoint_episodes(&self) -> Vec<usize> {
        let mut marks: Vec<usize> = self
            .checkpoint_fractions
            .iter()
            .map(|f| (f * self.episodes as f64).round() as usize)
            .collect();
        marks.sort_unstable();
        marks.dedup();
        marks
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOutcome {
    pub baseline: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// One REINFORCE step on a completed episode.
///
/// The advantage is `G_t - b` with `b` the running baseline (seeded with the
/// first episode's mean return when `None`); afterwards the baseline moves to
/// `β b + (1 - β) mean(G)`. The gradient of `Σ_t -A_t ln π(a_t|s_t)` is
/// clipped to `gradient_clip_norm` and applied with plain gradient descent.
pub fn reinforce_update(policy: &mut Policy, trace: &EpisodeTrace, baseline: Option<f64>, cfg: &TrainConfig) -> Result<UpdateOutcome> {
    if trace.steps.is_empty() {
        return Err(Error::Contract("REINFORCE update on an empty trace".into()));
    }
    if policy.params().is_none() {
        return Err(Error::Contract(format!("{} has no trainable parameters", policy.kind())));
    }
    let returns = compute_returns(&trace.rewards(), cfg.gamma);
    let mean_return = returns.iter().sum::<f64>() / returns.len() as f64;
    let b = baseline.unwrap_or(mean_return);

    let params = policy.params().expect("checked above").clone();
    let mut grad = GcnParams::zeros(params.feature_dim(), params.hidden_dim(), params.num_actions());
    let mut loss = 0.0;
    for (t, (step, g_t)) in trace.steps.iter().zip(&returns).enumerate() {
        let advantage = g_t - b;
        if advantage == 0.0 && cfg.entropy_weight == 0.0 {
            continue;
        }
        let (logits, cache) = policy.forward(&step.graph)?.expect("learnable policy");
        let probs = softmax(&logits)?;
        loss -= advantage * log_softmax_at(&logits, step.action);
        let mut dlogits: Vec<f64> = probs.iter().map(|p| advantage * p).collect();
        dlogits[step.action] -= advantage;
        if cfg.entropy_weight > 0.0 {
            // dH/dz_j = -p_j (ln p_j + H)
            let logp: Vec<f64> = probs.iter().map(|&p| if p > 0.0 { p.ln() } else { 0.0 }).collect();
            let entropy: f64 = -probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
            loss -= cfg.entropy_weight * entropy;
            for ((d, p), l) in dlogits.iter_mut().zip(&probs).zip(&logp) {
                *d += cfg.entropy_weight * p * (l + entropy);
            }
        }
        let (g, _) = gcn_backward(&params, &cache, &dlogits)?;
        let flat = g.flatten();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite policy gradient at step {t}")));
        }
        for (acc, v) in grad.slices_mut().into_iter().zip(g.slices()) {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
    }

    let norm = grad.flatten().iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = if norm > cfg.gradient_clip_norm {
        cfg.gradient_clip_norm / norm
    } else {
        1.0
    };
    let target = policy.params_mut().expect("checked above");
    for (p, g) in target.slices_mut().into_iter().zip(grad.slices()) {
        for (pi, gi) in p.iter_mut().zip(g) {
            *pi -= cfg.learning_rate * scale * gi;
        }
    }
    Ok(UpdateOutcome {
        baseline: cfg.baseline_decay * b + (1.0 - cfg.baseline_decay) * mean_return,
        loss,
        grad_norm: norm,
    })
}

/// Gaussian observation noise applied before graph construction.
#[derive(Debug)]
pub struct ObservationNoise<'a> {
    pub std: f64,
    pub rng: &'a mut Rng,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub trace: EpisodeTrace,
    pub results: Vec<StepResult>,
}

impl Rollout {
    pub fn total_reward(&self) -> f64 {
        self.results.iter().map(|r| r.reward).sum()
    }

    pub fn gaps(&self) -> impl Iterator<Item = i64> + '_ {
        self.results.iter().map(|r| r.gap)
    }
}

/// Plays one episode. Each step's state graph holds the last `window_size`
/// (possibly noisy) observations.
pub fn rollout(
    policy: &Policy,
    env_cfg: &EnvConfig,
    pattern: &TrafficPattern,
    seed: u64,
    episode: u64,
    mode: ActionMode,
    rng: &mut Rng,
    mut noise: Option<ObservationNoise<'_>>,
) -> Result<Rollout> {
    let (mut obs, mut env) = Env::reset(env_cfg, pattern, seed, episode)?;
    let mut window: VecDeque<Observation> = VecDeque::with_capacity(env_cfg.window_size + 1);
    let mut trace = EpisodeTrace::default();
    let mut results = Vec::with_capacity(env_cfg.episode_steps);
    while !env.is_done() {
        let seen = match noise.as_mut() {
            Some(n) => obs.with_noise(n.std, n.rng),
            None => obs,
        };
        window.push_back(seen);
        if window.len() > env_cfg.window_size {
            window.pop_front();
        }
        let graph = build_state_graph(window.make_contiguous(), env_cfg.window_size)?;
        let required = env.current_required();
        let choice = select_action(
            policy,
            &PolicyInput {
                graph: &graph,
                required_prbs: required,
            },
            rng,
            mode,
        )?;
        let res = env.step(choice.action)?;
        obs = res.observation;
        trace.steps.push(TraceStep {
            graph,
            required_prbs: required,
            action: choice.action,
            log_prob: choice.log_prob,
            reward: res.reward,
        });
        results.push(res);
    }
    Ok(Rollout { trace, results })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub total_reward: f64,
    pub loss: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Number of updates applied when the snapshot was taken.
    pub episode: usize,
    pub policy: Policy,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub history: Vec<EpisodeRecord>,
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainOutcome {
    /// Mean total reward over the last `n` episodes (all if fewer).
    pub fn tail_mean(&self, n: usize) -> f64 {
        tail_mean(&self.history.iter().map(|h| h.total_reward).collect::<Vec<_>>(), n)
    }
}

pub fn tail_mean(values: &[f64], n: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(n)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Runs `cfg.episodes` sampled episodes, each followed by one REINFORCE
/// update for learnable agents. Fixed agents just play, which gives their
/// reward curve on the same traffic.
pub fn train(kind: AgentKind, env_cfg: &EnvConfig, pattern: &TrafficPattern, cfg: &TrainConfig) -> Result<TrainOutcome> {
    env_cfg.validate()?;
    pattern.validate()?;
    cfg.validate()?;
    let mut init_rng = Rng::stream(cfg.seed, INIT_STREAM);
    let mut action_rng = Rng::stream(cfg.seed, ACTION_STREAM);
    let mut policy = Policy::new(kind, env_cfg, cfg, &mut init_rng);
    let marks = cfg.checkpoint_episodes();
    let mut checkpoints = Vec::new();
    let mut history = Vec::with_capacity(cfg.episodes);
    let mut baseline = None;

    let snapshot = |done: usize, policy: &Policy, checkpoints: &mut Vec<Checkpoint>| {
        if marks.contains(&done) {
            checkpoints.push(Checkpoint {
                episode: done,
                policy: policy.clone(),
            });
        }
    };
    snapshot(0, &policy, &mut checkpoints);

    for episode in 0..cfg.episodes {
        let ro = rollout(
            &policy,
            env_cfg,
            pattern,
            cfg.seed,
            episode as u64,
            ActionMode::Sample,
            &mut action_rng,
            None,
        )?;
        let total_reward = ro.total_reward();
        let (loss, b) = if kind.is_learnable() {
            let out = reinforce_update(&mut policy, &ro.trace, baseline, cfg)?;
            baseline = Some(out.baseline);
            (out.loss, out.baseline)
        } else {
            (0.0, 0.0)
        };
        history.push(EpisodeRecord {
            episode,
            total_reward,
            loss,
            baseline: b,
        });
        snapshot(episode + 1, &policy, &mut checkpoints);
    }
    Ok(TrainOutcome {
        policy,
        history,
        checkpoints,
    })
}
