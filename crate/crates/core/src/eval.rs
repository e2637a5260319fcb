//! Quantitative analyses: allocation-gap CDF, accuracy, the agent reward
//! comparison and the observation-noise robustness sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{rollout, train, ActionMode, AgentKind, ObservationNoise, Policy, TrainConfig};
use crate::env::{EnvConfig, TrafficPattern};
use crate::error::{Error, Result};
use crate::graph::StateGraph;
use crate::rng::Rng;

/// Evaluation episodes draw traffic from streams disjoint from training.
const EVAL_EPISODE_BASE: u64 = 1 << 40;
const NOISE_DOMAIN: u64 = 0x4e4f_4953_45;
const EVAL_ACTION_DOMAIN: u64 = 0x4556_414c;

/// Noise levels for the robustness sweep.
pub const ROBUSTNESS_LEVELS: usize = 20;
pub const ROBUSTNESS_MAX_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Episodes per evaluation point.
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub smoothing_window: usize,
    pub noise_std: f64,
    /// Agents run by `compare`.
    pub agents: Vec<AgentKind>,
    /// Probe states used to check that explanations preserve the decision.
    pub probe_states: usize,
    /// Step of the evaluation episode whose state graph is explained.
    pub probe_step: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 20,
            seeds: vec![0, 1, 2, 3, 4],
            smoothing_window: 25,
            noise_std: 0.0,
            agents: AgentKind::ALL.to_vec(),
            probe_states: 100,
            probe_step: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("eval.episodes must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("eval.seeds must not be empty".into()));
        }
        if self.smoothing_window == 0 {
            return Err(Error::Config("eval.smoothing_window must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("eval.noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub gaps: Vec<i64>,
    pub episode_rewards: Vec<f64>,
    pub accuracy: f64,
}

impl EvalOutcome {
    pub fn mean_reward(&self) -> f64 {
        mean(&self.episode_rewards)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Fraction of steps whose gap is smaller than one chunk.
pub fn accuracy(gaps: &[i64], chunk_size: u32) -> f64 {
    if gaps.is_empty() {
        return 0.0;
    }
    let hits = gaps.iter().filter(|g| g.unsigned_abs() < chunk_size as u64).count();
    hits as f64 / gaps.len() as f64
}

/// Greedy rollouts of a frozen policy. With `noise_std > 0`, every feature
/// of every observation is perturbed before it enters the state window.
pub fn evaluate_policy(
    policy: &Policy,
    env_cfg: &EnvConfig,
    pattern: &TrafficPattern,
    episodes: usize,
    seed: u64,
    noise_std: f64,
) -> Result<EvalOutcome> {
    if episodes == 0 {
        return Err(Error::Contract("evaluation needs at least one episode".into()));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::Contract(format!("noise std must be >= 0, got {noise_std}")));
    }
    let mut gaps = Vec::with_capacity(episodes * env_cfg.episode_steps);
    let mut episode_rewards = Vec::with_capacity(episodes);
    for ep in 0..episodes as u64 {
        let mut action_rng = Rng::stream(seed ^ EVAL_ACTION_DOMAIN, ep);
        let mut noise_rng = Rng::stream(seed ^ NOISE_DOMAIN, ep);
        let noise = (noise_std > 0.0).then_some(ObservationNoise {
            std: noise_std,
            rng: &mut noise_rng,
        });
        let ro = rollout(
            policy,
            env_cfg,
            pattern,
            seed,
            EVAL_EPISODE_BASE + ep,
            ActionMode::Greedy,
            &mut action_rng,
            noise,
        )?;
        gaps.extend(ro.gaps());
        episode_rewards.push(ro.total_reward());
    }
    Ok(EvalOutcome {
        accuracy: accuracy(&gaps, env_cfg.chunk_size),
        gaps,
        episode_rewards,
    })
}

/// [`evaluate_policy`] over several traffic seeds, run concurrently and
/// concatenated in seed order.
pub fn evaluate_seeds(
    policy: &Policy,
    env_cfg: &EnvConfig,
    pattern: &TrafficPattern,
    seeds: &[u64],
    episodes: usize,
    noise_std: f64,
    jobs: usize,
) -> Result<EvalOutcome> {
    if seeds.is_empty() {
        return Err(Error::Contract("evaluation needs at least one seed".into()));
    }
    let parts = pool(jobs)?.install(|| {
        seeds
            .par_iter()
            .map(|&s| evaluate_policy(policy, env_cfg, pattern, episodes, s, noise_std))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut gaps = Vec::new();
    let mut episode_rewards = Vec::new();
    for p in parts {
        gaps.extend(p.gaps);
        episode_rewards.extend(p.episode_rewards);
    }
    Ok(EvalOutcome {
        accuracy: accuracy(&gaps, env_cfg.chunk_size),
        gaps,
        episode_rewards,
    })
}

/// State graphs of the first greedy evaluation episode, one per step. These
/// are the probe states handed to the explainer.
pub fn probe_episode(policy: &Policy, env_cfg: &EnvConfig, pattern: &TrafficPattern, seed: u64) -> Result<Vec<StateGraph>> {
    let mut action_rng = Rng::stream(seed ^ EVAL_ACTION_DOMAIN, 0);
    let ro = rollout(
        policy,
        env_cfg,
        pattern,
        seed,
        EVAL_EPISODE_BASE,
        ActionMode::Greedy,
        &mut action_rng,
        None,
    )?;
    Ok(ro.trace.steps.into_iter().map(|s| s.graph).collect())
}

/// Every other probe state, at most `count` of them.
pub fn probe_set(graphs: &[StateGraph], count: usize) -> Vec<&StateGraph> {
    graphs.iter().step_by(2).take(count).collect()
}

/// Empirical CDF of absolute gaps: `(|gap|, fraction of steps with |gap| <= value)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GapCdf {
    pub points: Vec<(u64, f64)>,
}

impl GapCdf {
    /// Fraction of gaps with `|gap| <= value`.
    pub fn at(&self, value: u64) -> f64 {
        self.points
            .iter()
            .take_while(|(v, _)| *v <= value)
            .last()
            .map_or(0.0, |(_, f)| *f)
    }

    /// Fraction of gaps with `|gap| < bound`.
    pub fn below(&self, bound: u64) -> f64 {
        match bound.checked_sub(1) {
            Some(v) => self.at(v),
            None => 0.0,
        }
    }
}

pub fn gap_cdf(gaps: &[i64]) -> Result<GapCdf> {
    if gaps.is_empty() {
        return Err(Error::Contract("gap CDF of an empty list".into()));
    }
    let mut abs: Vec<u64> = gaps.iter().map(|g| g.unsigned_abs()).collect();
    abs.sort_unstable();
    let n = abs.len();
    let mut points = Vec::new();
    let mut i = 0;
    while i < n {
        let v = abs[i];
        while i < n && abs[i] == v {
            i += 1;
        }
        points.push((v, i as f64 / n as f64));
    }
    Ok(GapCdf { points })
}

/// `n` evenly spaced values from `start` to `stop` inclusive; the last value is exactly `stop`.
pub fn linspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![start],
        _ => {
            let step = (stop - start) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { stop } else { start + i as f64 * step })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessCurve {
    pub noise_levels: Vec<f64>,
    /// Seed mean of the per-seed mean episode reward.
    pub mean_reward: Vec<f64>,
    /// Spread of the per-seed means.
    pub std_reward: Vec<f64>,
}

impl RobustnessCurve {
    /// Reward at each level relative to the noiseless level.
    pub fn relative(&self) -> Vec<f64> {
        let base = self.mean_reward.first().copied().unwrap_or(0.0);
        self.mean_reward
            .iter()
            .map(|m| if base == 0.0 { 0.0 } else { m / base })
            .collect()
    }
}

pub(crate) fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Evaluates the frozen policy at each of the 20 noise levels in
/// `linspace(0, 0.1, 20)` for every seed. Cells run on up to `jobs` threads
/// and are merged in (level, seed) order.
pub fn robustness_sweep(
    policy: &Policy,
    env_cfg: &EnvConfig,
    pattern: &TrafficPattern,
    seeds: &[u64],
    episodes: usize,
    jobs: usize,
) -> Result<RobustnessCurve> {
    if seeds.is_empty() {
        return Err(Error::Contract("robustness sweep needs at least one seed".into()));
    }
    let levels = linspace(0.0, ROBUSTNESS_MAX_STD, ROBUSTNESS_LEVELS);
    let cells: Vec<(usize, u64)> = (0..levels.len())
        .flat_map(|l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let results: Vec<f64> = pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(l, s)| evaluate_policy(policy, env_cfg, pattern, episodes, s, levels[l]).map(|o| o.mean_reward()))
            .collect::<Result<Vec<_>>>()
    })?;
    let per_level: Vec<&[f64]> = results.chunks(seeds.len()).collect();
    Ok(RobustnessCurve {
        mean_reward: per_level.iter().map(|r| mean(r)).collect(),
        std_reward: per_level.iter().map(|r| std_dev(r)).collect(),
        noise_levels: levels,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub agent: AgentKind,
    pub episode: usize,
    pub mean_reward: f64,
    pub smoothed: f64,
}

/// Trailing moving average over `window` points.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            mean(&values[lo..=i])
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    /// Trained policy per (agent, seed), in input order.
    pub policies: Vec<(AgentKind, u64, Policy)>,
}

impl Comparison {
    /// Seed-mean total reward over the last `n` training episodes of `agent`.
    pub fn tail_mean(&self, agent: AgentKind, n: usize) -> Option<f64> {
        let curve: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.agent == agent)
            .map(|r| r.mean_reward)
            .collect();
        (!curve.is_empty()).then(|| crate::agent::tail_mean(&curve, n))
    }
}

/// Trains every agent on every seed (identical traffic per seed) and reports
/// the seed-mean reward per training episode plus a smoothed copy.
pub fn compare_agents(
    agents: &[AgentKind],
    env_cfg: &EnvConfig,
    pattern: &TrafficPattern,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    smoothing_window: usize,
    jobs: usize,
) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(Error::Contract("comparison needs at least one seed".into()));
    }
    let cells: Vec<(AgentKind, u64)> = agents
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let outcomes = pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(agent, seed)| {
                let cfg = TrainConfig {
                    seed,
                    ..train_cfg.clone()
                };
                train(agent, env_cfg, pattern, &cfg)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut rows = Vec::with_capacity(agents.len() * train_cfg.episodes);
    for (ai, &agent) in agents.iter().enumerate() {
        let runs = &outcomes[ai * seeds.len()..(ai + 1) * seeds.len()];
        let curve: Vec<f64> = (0..train_cfg.episodes)
            .map(|e| mean(&runs.iter().map(|r| r.history[e].total_reward).collect::<Vec<_>>()))
            .collect();
        let smoothed = smooth(&curve, smoothing_window);
        rows.extend(curve.iter().zip(&smoothed).enumerate().map(|(episode, (&m, &s))| CompareRow {
            agent,
            episode,
            mean_reward: m,
            smoothed: s,
        }));
    }
    let policies = cells
        .into_iter()
        .zip(outcomes)
        .map(|((a, s), o)| (a, s, o.policy))
        .collect();
    Ok(Comparison { rows, policies })
}

/// Closed-form expected episode reward of the uniform policy on a known
/// required-PRB series.
pub fn uniform_policy_expected_reward(required: &[u32], env_cfg: &EnvConfig) -> f64 {
    let k = env_cfg.num_chunks;
    required
        .iter()
        .map(|&r| {
            (0..k)
                .map(|a| env_cfg.reward(r as i64 - env_cfg.allocation(a) as i64))
                .sum::<f64>()
                / k as f64
        })
        .sum()
}
