//! Command-line front end. Exit codes: 0 success, 2 config or user error,
//! 3 numeric failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{Map, Value};

use crate::agent::{train, AgentKind, Policy};
use crate::config::RunConfig;
use crate::env::Env;
use crate::error::{Error, Result};
use crate::eval::{compare_agents, evaluate_seeds, gap_cdf, pool, probe_episode, probe_set, robustness_sweep};
use crate::explainer::{explain, explain_timeline, importance_report, preserves_prediction, variance};
use crate::export::{self, TimelineRow};
use crate::graph::GcnParams;
use crate::persist::{self, PolicyFile};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const POLICY_FILE: &str = "final.policy";
pub const CHECKPOINT_DIR: &str = "checkpoints";
const POLICY_EXT: &str = "policy";

#[derive(Debug, Parser)]
#[command(
    name = "prbgnn",
    version,
    about = "GCN REINFORCE agent for PRB allocation",
    after_help = "Any config field can be overridden with a dotted flag, e.g. --train.learning_rate 0.01 or --traffic a."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed (overrides `train.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one agent and write the policy, checkpoints and history.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        agent: Option<AgentKind>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Greedy evaluation of a policy: gap_cdf.csv and accuracy.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Observation noise std (overrides `eval.noise_std`).
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Edge-mask explanations for a policy file or a checkpoint directory.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Reward under 20 observation-noise levels.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Train every configured agent on every seed and tabulate reward curves.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Write one episode of generated demand.
    TrafficPreview {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Explain { common, .. }
            | Command::Robustness { common, .. }
            | Command::Compare { common, .. }
            | Command::TrafficPreview { common } => common,
        }
    }
}

impl clap::ValueEnum for AgentKind {
    fn value_variants<'a>() -> &'a [Self] {
        &AgentKind::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

const OWN_FLAGS: [&str; 8] = ["config", "out", "seed", "jobs", "agent", "episodes", "policy", "noise"];

/// Pulls `--dotted.path value` and `--dotted.path=value` pairs (plus the
/// bare `--traffic` preset) out of argv, leaving the rest for clap.
fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let key = arg.to_str().and_then(|s| s.strip_prefix("--")).map(str::to_string);
        match key {
            Some(k) if k != "--" && !OWN_FLAGS.contains(&k.split('=').next().unwrap_or("")) && (k.contains('.') || k.starts_with("traffic")) => {
                let (path, value) = match k.split_once('=') {
                    Some((p, v)) => (p.to_string(), v.to_string()),
                    None => {
                        let v = it
                            .next()
                            .ok_or_else(|| Error::Config(format!("override --{k} needs a value")))?;
                        let v = v
                            .into_string()
                            .map_err(|_| Error::Config(format!("override --{k} value is not UTF-8")))?;
                        (k, v)
                    }
                };
                overrides.push((path, value));
            }
            _ => rest.push(arg),
        }
    }
    Ok((rest, overrides))
}

/// Parses argv (program name first), runs the command, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let (rest, overrides) = match split_overrides(args) {
        Ok(x) => x,
        Err(e) => return report(&e),
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { EXIT_OK };
        }
    };
    match execute(cli.command, &overrides) {
        Ok(()) => EXIT_OK,
        Err(e) => report(&e),
    }
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_USER
    }
}

fn execute(cmd: Command, overrides: &[(String, String)]) -> Result<()> {
    let common = cmd.common();
    let mut cfg = RunConfig::load(common.config.as_deref(), overrides)?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    let jobs = common
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if jobs == 0 {
        return Err(Error::Config("--jobs must be >= 1".into()));
    }
    match cmd {
        Command::Train { agent, episodes, .. } => {
            if let Some(a) = agent {
                cfg.agent = a;
            }
            if let Some(n) = episodes {
                cfg.train.episodes = n;
            }
            cmd_train(&cfg)
        }
        Command::Evaluate { policy, noise, .. } => {
            if let Some(n) = noise {
                cfg.eval.noise_std = n;
            }
            cfg.validate()?;
            cmd_evaluate(&cfg, &policy_path(&cfg, policy), jobs)
        }
        Command::Explain { policy, .. } => {
            let target = policy.unwrap_or_else(|| cfg.out.join(CHECKPOINT_DIR));
            cmd_explain(&cfg, &target, jobs)
        }
        Command::Robustness { policy, .. } => cmd_robustness(&cfg, &policy_path(&cfg, policy), jobs),
        Command::Compare { episodes, .. } => {
            if let Some(n) = episodes {
                cfg.train.episodes = n;
            }
            cmd_compare(&cfg, jobs)
        }
        Command::TrafficPreview { .. } => cmd_traffic_preview(&cfg),
    }
}

fn policy_path(cfg: &RunConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| cfg.out.join(POLICY_FILE))
}

fn fields(pairs: impl IntoIterator<Item = (&'static str, Value)>) -> Map<String, Value> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn stage_names(n: usize, episodes: &[usize]) -> Vec<String> {
    if n == 3 {
        ["early", "mid", "post"].map(String::from).to_vec()
    } else {
        episodes.iter().map(|e| format!("ep{e}")).collect()
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let outcome = train(cfg.agent, &cfg.env, &cfg.traffic, &cfg.train)?;
    let echo = cfg.to_json_line();
    persist::save(
        &cfg.out.join(POLICY_FILE),
        &PolicyFile {
            policy: outcome.policy.clone(),
            episode: cfg.train.episodes,
            config: echo.clone(),
        },
    )?;

    let dir = cfg.out.join(CHECKPOINT_DIR);
    // Stale checkpoints from an earlier run would be picked up by `explain`.
    if let Ok(entries) = std::fs::read_dir(&dir) {
        for e in entries.flatten() {
            if e.path().extension().is_some_and(|x| x == POLICY_EXT) {
                std::fs::remove_file(e.path()).map_err(|err| Error::io(e.path(), err))?;
            }
        }
    }
    let episodes: Vec<usize> = outcome.checkpoints.iter().map(|c| c.episode).collect();
    for (c, name) in outcome.checkpoints.iter().zip(stage_names(episodes.len(), &episodes)) {
        persist::save(
            &dir.join(format!("{name}.{POLICY_EXT}")),
            &PolicyFile {
                policy: c.policy.clone(),
                episode: c.episode,
                config: echo.clone(),
            },
        )?;
    }

    export::write_atomic(&cfg.out.join("history.csv"), export::history_csv(&outcome.history).as_bytes())?;
    let tail = outcome.tail_mean(50);
    export::update_summary(
        &cfg.out,
        fields([
            ("agent", Value::from(cfg.agent.name())),
            ("final_reward_tail50", Value::from(tail)),
        ]),
    )?;
    println!("final_reward_tail50 {}", Value::from(tail));
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, path: &Path, jobs: usize) -> Result<()> {
    let policy = persist::load_for(path, &cfg.env)?.policy;
    let out = evaluate_seeds(
        &policy,
        &cfg.env,
        &cfg.traffic,
        &cfg.eval.seeds,
        cfg.eval.episodes,
        cfg.eval.noise_std,
        jobs,
    )?;
    let cdf = gap_cdf(&out.gaps)?;
    export::write_atomic(&cfg.out.join("gap_cdf.csv"), export::gap_cdf_csv(&cdf).as_bytes())?;
    let accuracy = Value::from(out.accuracy);
    export::update_summary(
        &cfg.out,
        fields([
            ("accuracy", accuracy.clone()),
            ("eval_mean_reward", Value::from(out.mean_reward())),
            ("eval_noise_std", Value::from(cfg.eval.noise_std)),
        ]),
    )?;
    // Same serialisation as summary.json, so the two agree textually.
    println!("accuracy {}", serde_json::to_string(&accuracy).expect("number serialises"));
    Ok(())
}

struct Stage {
    name: String,
    episode: usize,
    params: GcnParams,
    policy: Policy,
}

fn load_stages(cfg: &RunConfig, target: &Path) -> Result<Vec<Stage>> {
    let mut files: Vec<(String, PolicyFile)> = Vec::new();
    if target.is_dir() {
        let entries = std::fs::read_dir(target).map_err(|e| Error::io(target, e))?;
        let mut paths: Vec<PathBuf> = entries
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == POLICY_EXT))
            .collect();
        paths.sort();
        for p in paths {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            files.push((stem, persist::load_for(&p, &cfg.env)?));
        }
        if files.is_empty() {
            return Err(Error::Config(format!("no checkpoints found in {}", target.display())));
        }
    } else if target.exists() {
        let stem = target.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        files.push((stem, persist::load_for(target, &cfg.env)?));
    } else {
        return Err(Error::Config(format!("no checkpoints found: {} does not exist", target.display())));
    }
    files.sort_by_key(|(_, f)| f.episode);
    files
        .into_iter()
        .map(|(name, f)| {
            let params = f
                .policy
                .params()
                .cloned()
                .ok_or_else(|| Error::Config(format!("{name}: a {} policy has no edges to explain", f.policy.kind())))?;
            Ok(Stage {
                name,
                episode: f.episode,
                params,
                policy: f.policy,
            })
        })
        .collect()
}

fn cmd_explain(cfg: &RunConfig, target: &Path, jobs: usize) -> Result<()> {
    let stages = load_stages(cfg, target)?;
    let last = stages.last().expect("at least one stage");
    let graphs = probe_episode(&last.policy, &cfg.env, &cfg.traffic, cfg.train.seed)?;
    let probe = &graphs[cfg.eval.probe_step.min(graphs.len() - 1)];

    let params: Vec<&GcnParams> = stages.iter().map(|s| &s.params).collect();
    let masks = pool(jobs)?.install(|| explain_timeline(&params, probe, &cfg.explain))?;
    let mut timeline = Vec::with_capacity(stages.len());
    let mut last_active = 0;
    for (stage, mask) in stages.iter().zip(&masks) {
        let report = importance_report(mask, cfg.explain.zero_threshold);
        export::write_atomic(
            &cfg.out.join(format!("explain_{}.csv", stage.name)),
            export::explain_csv(&stage.name, &report).as_bytes(),
        )?;
        let imp = mask.explained_importances();
        last_active = report.iter().filter(|e| e.is_active).count();
        timeline.push(TimelineRow {
            stage: stage.name.clone(),
            episode: stage.episode,
            mean_importance: if imp.is_empty() { 0.0 } else { imp.iter().sum::<f64>() / imp.len() as f64 },
            variance: variance(&imp),
            active_edges: last_active,
            preserved: preserves_prediction(&stage.params, probe, mask)?,
        });
    }
    export::write_atomic(&cfg.out.join("explain_timeline.csv"), export::timeline_csv(&timeline).as_bytes())?;

    // Decision preservation and sparsity of the final policy over the probe set.
    let set = probe_set(&graphs, cfg.eval.probe_states);
    let per_state: Vec<(bool, usize)> = pool(jobs)?.install(|| {
        set.par_iter()
            .map(|g| {
                let m = explain(&last.params, g, &cfg.explain)?;
                let active = importance_report(&m, cfg.explain.zero_threshold)
                    .iter()
                    .filter(|e| e.is_active)
                    .count();
                Ok((preserves_prediction(&last.params, g, &m)?, active))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let n = per_state.len().max(1) as f64;
    let preservation = per_state.iter().filter(|(p, _)| *p).count() as f64 / n;
    let mean_active = per_state.iter().map(|(_, a)| *a as f64).sum::<f64>() / n;

    export::update_summary(
        &cfg.out,
        fields([
            ("active_edges", Value::from(last_active)),
            ("active_edges_probe_mean", Value::from(mean_active)),
            ("explain_preservation", Value::from(preservation)),
        ]),
    )?;
    for r in &timeline {
        println!(
            "{} (episode {}): variance {:.4}, active edges {}",
            r.stage, r.episode, r.variance, r.active_edges
        );
    }
    println!(
        "probe set: {} states, preservation {}, mean active edges {}",
        per_state.len(),
        Value::from(preservation),
        Value::from(mean_active)
    );
    Ok(())
}

fn cmd_robustness(cfg: &RunConfig, path: &Path, jobs: usize) -> Result<()> {
    let policy = persist::load_for(path, &cfg.env)?.policy;
    let curve = robustness_sweep(&policy, &cfg.env, &cfg.traffic, &cfg.eval.seeds, cfg.eval.episodes, jobs)?;
    export::write_atomic(&cfg.out.join("robustness.csv"), export::robustness_csv(&curve).as_bytes())?;
    let rel = curve.relative().last().copied().unwrap_or(0.0);
    export::update_summary(&cfg.out, fields([("robustness_relative_at_max", Value::from(rel))]))?;
    println!("robustness_relative_at_max {}", Value::from(rel));
    Ok(())
}

fn cmd_compare(cfg: &RunConfig, jobs: usize) -> Result<()> {
    if cfg.eval.agents.is_empty() {
        return Err(Error::Config("eval.agents must not be empty".into()));
    }
    let cmp = compare_agents(
        &cfg.eval.agents,
        &cfg.env,
        &cfg.traffic,
        &cfg.train,
        &cfg.eval.seeds,
        cfg.eval.smoothing_window,
        jobs,
    )?;
    export::write_atomic(&cfg.out.join("compare.csv"), export::compare_csv(&cmp.rows).as_bytes())?;
    let mut tails = Map::new();
    for &a in &cfg.eval.agents {
        let t = cmp.tail_mean(a, 50).unwrap_or(0.0);
        println!("{a} final_reward_tail50 {}", Value::from(t));
        tails.insert(a.name().to_string(), Value::from(t));
    }
    export::update_summary(&cfg.out, fields([("compare_final_reward_tail50", Value::Object(tails))]))?;
    Ok(())
}

fn cmd_traffic_preview(cfg: &RunConfig) -> Result<()> {
    let (_, env) = Env::reset(&cfg.env, &cfg.traffic, cfg.train.seed, 0)?;
    export::write_atomic(&cfg.out.join("traffic.csv"), export::traffic_csv(&env).as_bytes())?;
    println!("traffic steps {}", env.required_series().len());
    Ok(())
}
