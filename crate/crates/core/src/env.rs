//! Single-UE downlink PRB allocation environment.
//!
//! Traffic is pre-generated per episode, converted to required PRBs per
//! decision step, and each action grants a whole number of PRB chunks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Features per observation.
pub const OBS_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficKind {
    /// Poisson arrivals (exponential inter-arrival times).
    PoissonA,
    /// One packet every `period_ms`.
    PeriodicB,
}

/// Piecewise-constant rate multiplier starting at `start_step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSegment(pub usize, pub f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficPattern {
    pub kind: TrafficKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_pps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_ms: Option<f64>,
    pub packet_bits: f64,
    #[serde(default)]
    pub rate_schedule: Vec<RateSegment>,
}

impl TrafficPattern {
    /// Stochastic pattern: 100 packets/s of 240 kbit, ~24 PRBs per step on average.
    pub fn default_a() -> Self {
        TrafficPattern {
            kind: TrafficKind::PoissonA,
            rate_pps: Some(100.0),
            period_ms: None,
            packet_bits: 240_000.0,
            rate_schedule: Vec::new(),
        }
    }

    /// Periodic pattern whose rate steps through 1x, 1.5x, 0.5x and 2x over an
    /// episode, so required PRBs visit 24, 36, 12 and 48.
    pub fn default_b() -> Self {
        TrafficPattern {
            kind: TrafficKind::PeriodicB,
            rate_pps: None,
            period_ms: Some(10.0),
            packet_bits: 240_000.0,
            rate_schedule: vec![
                RateSegment(0, 1.0),
                RateSegment(50, 1.5),
                RateSegment(100, 0.5),
                RateSegment(150, 2.0),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TrafficKind::PoissonA => match self.rate_pps {
                Some(r) if r > 0.0 && r.is_finite() => {}
                _ => return Err(Error::Config("traffic.rate_pps must be > 0 for poisson_a".into())),
            },
            TrafficKind::PeriodicB => match self.period_ms {
                Some(p) if p > 0.0 && p.is_finite() => {}
                _ => return Err(Error::Config("traffic.period_ms must be > 0 for periodic_b".into())),
            },
        }
        if !(self.packet_bits > 0.0 && self.packet_bits.is_finite()) {
            return Err(Error::Config("traffic.packet_bits must be > 0".into()));
        }
        if let Some(first) = self.rate_schedule.first() {
            if first.0 != 0 {
                return Err(Error::Config("traffic.rate_schedule must start at step 0".into()));
            }
        }
        for pair in self.rate_schedule.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::Config(
                    "traffic.rate_schedule start steps must be strictly increasing".into(),
                ));
            }
        }
        if self.rate_schedule.iter().any(|s| !(s.1 >= 0.0 && s.1.is_finite())) {
            return Err(Error::Config("traffic.rate_schedule multipliers must be >= 0".into()));
        }
        Ok(())
    }

    pub fn multiplier_at(&self, step: usize) -> f64 {
        self.rate_schedule
            .iter()
            .take_while(|s| s.0 <= step)
            .last()
            .map_or(1.0, |s| s.1)
    }

    /// `[start, end)` step ranges over which the multiplier is constant.
    fn segments(&self, horizon: usize) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        if self.rate_schedule.is_empty() {
            out.push((0, horizon, 1.0));
            return out;
        }
        for (i, seg) in self.rate_schedule.iter().enumerate() {
            if seg.0 >= horizon {
                break;
            }
            let end = self
                .rate_schedule
                .get(i + 1)
                .map_or(horizon, |n| n.0.min(horizon));
            out.push((seg.0, end, seg.1));
        }
        out
    }
}

/// Packets arriving in each step. Arrival processes restart at schedule
/// boundaries; for Poisson arrivals that is exact by memorylessness.
pub fn gen_packet_counts(pattern: &TrafficPattern, rng: &mut Rng, horizon_steps: usize, step_ms: f64) -> Vec<u64> {
    let mut counts = vec![0u64; horizon_steps];
    for (start, end, mult) in pattern.segments(horizon_steps) {
        if mult == 0.0 {
            continue;
        }
        match pattern.kind {
            TrafficKind::PoissonA => {
                let rate_per_ms = pattern.rate_pps.unwrap_or(0.0) * mult / 1000.0;
                let seg_len_ms = (end - start) as f64 * step_ms;
                let mut t = rng.exponential(rate_per_ms);
                while t < seg_len_ms {
                    let step = start + (t / step_ms) as usize;
                    counts[step.min(end - 1)] += 1;
                    t += rng.exponential(rate_per_ms);
                }
            }
            TrafficKind::PeriodicB => {
                // Emissions at k * period / mult from the segment start.
                let per_ms = mult / pattern.period_ms.unwrap_or(f64::INFINITY);
                let emitted_before = |ms: f64| (ms * per_ms - 1e-9).ceil().max(0.0) as u64;
                for s in start..end {
                    let a = (s - start) as f64 * step_ms;
                    let b = a + step_ms;
                    counts[s] = emitted_before(b) - emitted_before(a);
                }
            }
        }
    }
    counts
}

/// Demand in bits per step.
pub fn gen_traffic(pattern: &TrafficPattern, rng: &mut Rng, horizon_steps: usize, step_ms: f64) -> Vec<f64> {
    gen_packet_counts(pattern, rng, horizon_steps, step_ms)
        .into_iter()
        .map(|c| c as f64 * pattern.packet_bits)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub step_ms: f64,
    pub prb_total: u32,
    pub chunk_size: u32,
    pub num_chunks: usize,
    pub prb_capacity_bits: f64,
    pub episode_steps: usize,
    pub window_size: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            step_ms: 100.0,
            prb_total: 50,
            chunk_size: 5,
            num_chunks: 11,
            prb_capacity_bits: 100_000.0,
            episode_steps: 200,
            window_size: 8,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.step_ms > 0.0
            && self.prb_total > 0
            && self.chunk_size > 0
            && self.prb_capacity_bits > 0.0
            && self.episode_steps > 0
            && self.window_size > 0;
        if !positive {
            return Err(Error::Config("env values must all be positive".into()));
        }
        if self.num_chunks < 2 {
            return Err(Error::Config("env.num_chunks must be >= 2".into()));
        }
        if (self.num_chunks as u64 - 1) * self.chunk_size as u64 > self.prb_total as u64 {
            return Err(Error::Config(format!(
                "env: (num_chunks - 1) * chunk_size = {} exceeds prb_total = {}",
                (self.num_chunks - 1) * self.chunk_size as usize,
                self.prb_total
            )));
        }
        Ok(())
    }

    pub fn allocation(&self, action: usize) -> u32 {
        action as u32 * self.chunk_size
    }

    /// Reward for a signed gap: `1 - |gap| / prb_total`.
    pub fn reward(&self, gap: i64) -> f64 {
        1.0 - gap.unsigned_abs() as f64 / self.prb_total as f64
    }

    /// Action whose allocation is closest to `required` (lowest index on ties).
    pub fn nearest_chunk(&self, required: u32) -> usize {
        (0..self.num_chunks)
            .min_by_key(|&a| (required as i64 - self.allocation(a) as i64).unsigned_abs())
            .unwrap_or(0)
    }
}

/// `ceil(demand / capacity)` clipped to the PRB budget.
pub fn required_prbs(demand_bits: f64, cfg: &EnvConfig) -> u32 {
    if demand_bits <= 0.0 {
        return 0;
    }
    let prbs = (demand_bits / cfg.prb_capacity_bits).ceil();
    prbs.min(cfg.prb_total as f64) as u32
}

/// `[demand, previous allocation, previous gap, step index]`, each
/// normalised: the gap by `prb_total` (signed), the step by episode length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation(pub [f64; OBS_DIM]);

impl AsRef<[f64]> for Observation {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl Observation {
    pub fn demand(&self) -> f64 {
        self.0[0]
    }

    /// Adds i.i.d. Gaussian noise to every feature, then clips each feature
    /// back to its valid range.
    pub fn with_noise(&self, std: f64, rng: &mut Rng) -> Observation {
        if std == 0.0 {
            return *self;
        }
        let mut f = self.0;
        for v in f.iter_mut() {
            *v += rng.normal(0.0, std);
        }
        f[0] = f[0].clamp(0.0, 1.0);
        f[1] = f[1].clamp(0.0, 1.0);
        f[2] = f[2].clamp(-1.0, 1.0);
        f[3] = f[3].clamp(0.0, 1.0);
        Observation(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub gap: i64,
    pub required_prbs: u32,
    pub allocated_prbs: u32,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct Env {
    cfg: EnvConfig,
    demand_bits: Vec<f64>,
    required: Vec<u32>,
    t: usize,
    prev_alloc: u32,
    prev_gap: i64,
    done: bool,
}

impl Env {
    /// Starts an episode. Traffic comes from an independent stream keyed by
    /// `(seed, episode)`, so every agent sees the same demand for a given pair.
    pub fn reset(cfg: &EnvConfig, pattern: &TrafficPattern, seed: u64, episode: u64) -> Result<(Observation, Env)> {
        cfg.validate()?;
        pattern.validate()?;
        let mut rng = Rng::stream(seed, episode);
        let demand_bits = gen_traffic(pattern, &mut rng, cfg.episode_steps, cfg.step_ms);
        let required = demand_bits.iter().map(|&d| required_prbs(d, cfg)).collect();
        let env = Env {
            cfg: cfg.clone(),
            demand_bits,
            required,
            t: 0,
            prev_alloc: 0,
            prev_gap: 0,
            done: false,
        };
        Ok((env.observation(), env))
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn demand_bits(&self) -> &[f64] {
        &self.demand_bits
    }

    pub fn required_series(&self) -> &[u32] {
        &self.required
    }

    /// Required PRBs at the current step (0 once the episode is over).
    pub fn current_required(&self) -> u32 {
        self.required.get(self.t).copied().unwrap_or(0)
    }

    pub fn observation(&self) -> Observation {
        let total = self.cfg.prb_total as f64;
        Observation([
            self.current_required() as f64 / total,
            self.prev_alloc as f64 / total,
            self.prev_gap as f64 / total,
            self.t as f64 / self.cfg.episode_steps as f64,
        ])
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done {
            return Err(Error::Contract("step called after the episode finished".into()));
        }
        if action >= self.cfg.num_chunks {
            return Err(Error::Contract(format!(
                "action {action} out of range [0, {})",
                self.cfg.num_chunks
            )));
        }
        let required = self.required[self.t];
        let allocated = self.cfg.allocation(action);
        let gap = required as i64 - allocated as i64;
        let reward = self.cfg.reward(gap);
        self.prev_alloc = allocated;
        self.prev_gap = gap;
        self.t += 1;
        self.done = self.t >= self.cfg.episode_steps;
        Ok(StepResult {
            observation: self.observation(),
            reward,
            gap,
            required_prbs: required,
            allocated_prbs: allocated,
            done: self.done,
        })
    }
}
