//! Command-line front end of the `dce` binary.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset_io::{load_dataset, save_dataset};
use crate::envs::{
    env_by_name, generate_dataset, generate_mixed_dataset, reference_returns_cached, BehaviorPolicy, ContinuousEnv,
    DEFAULT_REFERENCE_EPISODES, ENV_NAMES,
};
use crate::error::DceError;
use crate::mdp::{sample_index, DiscreteDataset, TabularMdp, TabularPolicy};
use crate::oracle::{empirical_bound_check, verify_offset_with, BoundParams, BoundReport, DEFAULT_MAX_SWEEPS};
use crate::trainer::{
    evaluate, fmt_g6, normalized_score, train, write_metrics_csv, Agent, AlphaMode, BetaSchedule, EvalSetup,
    TrainConfig, METRICS_HEADER,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

/// Offset tolerance of `verify-tabular`.
pub const OFFSET_PASS_TOL: f64 = 1e-6;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn verify(message: impl Into<String>) -> Self {
        Self { code: EXIT_VERIFY, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DceError> for CliError {
    fn from(e: DceError) -> Self {
        let code = match e {
            DceError::NonFinite { .. } | DceError::NonFiniteGradient(_) => EXIT_NUMERIC,
            DceError::NotConverged { .. } => EXIT_VERIFY,
            _ => EXIT_USAGE,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "dce", version, about = "Offline RL with double conservative estimates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an offline dataset from a scripted behavior policy.
    GenData(GenDataArgs),
    /// Train an agent on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint's deterministic policy.
    Eval(EvalArgs),
    /// Check the penalized/unpenalized fixed-point offset on random MDPs.
    VerifyTabular(VerifyArgs),
    /// Check the sample-based error bound on random MDPs.
    BoundCheck(BoundArgs),
    /// Train once per value of β or a fixed α and merge the metrics.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Random,
    Medium,
    Expert,
    Mixed,
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(ENV_NAMES))]
    pub env: String,
    #[arg(long, value_enum)]
    pub tier: Tier,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Per-field overrides applied on top of the config file.
#[derive(Debug, Args, Serialize, Default)]
pub struct TrainOverrides {
    /// Constant β for the whole run.
    #[arg(long)]
    pub beta: Option<f64>,
    /// `start,end,step[,interval]`.
    #[arg(long)]
    pub beta_schedule: Option<String>,
    #[arg(long)]
    pub critic_mode: Option<String>,
    #[arg(long)]
    pub alpha_mode: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) -> CliResult {
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        push("beta_schedule", self.beta.map(|b| BetaSchedule::constant(b).to_string()));
        push("beta_schedule", self.beta_schedule.clone());
        push("critic_mode", self.critic_mode.clone());
        push("alpha_mode", self.alpha_mode.clone());
        push("epochs", self.epochs.map(|x| x.to_string()));
        push("steps_per_epoch", self.steps_per_epoch.map(|x| x.to_string()));
        push("batch_size", self.batch_size.map(|x| x.to_string()));
        push("seed", self.seed.map(|x| x.to_string()));
        push("tau", self.tau.map(|x| x.to_string()));
        push("gamma", self.gamma.map(|x| x.to_string()));
        push("hidden", self.hidden.clone());
        push("eval_episodes", self.eval_episodes.map(|x| x.to_string()));
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            pairs.push((k.trim().to_string(), v.to_string()));
        }
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(())
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// `key = value` config file; defaults are used for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Environment for evaluation; without it the evaluation columns are zero.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(ENV_NAMES))]
    pub env: Option<String>,
    /// Reference-return cache (default: inside the output directory).
    #[arg(long)]
    pub ref_cache: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(ENV_NAMES))]
    pub env: String,
    #[arg(long, default_value_t = 4)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reference-return cache (default: next to the checkpoint).
    #[arg(long)]
    pub ref_cache: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 10)]
    pub states: usize,
    #[arg(long, default_value_t = 4)]
    pub actions: usize,
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Number of seeds, run as `0..seeds`.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_SWEEPS)]
    pub max_sweeps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BoundArgs {
    #[arg(long, default_value_t = 10)]
    pub states: usize,
    #[arg(long, default_value_t = 4)]
    pub actions: usize,
    /// Transitions sampled per seed.
    #[arg(long, default_value_t = 50_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[arg(long = "c-r", default_value_t = 3.0)]
    pub c_r: f64,
    #[arg(long = "c-t", default_value_t = 3.0)]
    pub c_t: f64,
    #[arg(long, default_value_t = 1.0)]
    pub r_max: f64,
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_SWEEPS)]
    pub max_sweeps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Beta,
    Alpha,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values, at least two.
    #[arg(long)]
    pub values: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(ENV_NAMES))]
    pub env: Option<String>,
    #[arg(long)]
    pub ref_cache: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

/// Provenance record written next to every output.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub subcommand: &'a str,
    pub args: &'a C,
    pub resolved_config: Option<&'a TrainConfig>,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: &'static str,
    pub started_unix_secs: f64,
}

fn now_secs() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn write_manifest<C: Serialize>(path: &Path, manifest: &RunManifest<C>) -> CliResult {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| CliError::usage(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn create_parent(path: &Path) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn lookup_env(name: &str) -> CliResult<Box<dyn ContinuousEnv>> {
    env_by_name(name).ok_or_else(|| CliError::usage(format!("unknown env '{name}' (valid: {})", ENV_NAMES.join(", "))))
}

fn load_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            Ok(TrainConfig::parse(&text)?)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn references(env: &dyn ContinuousEnv, cache: &Path) -> CliResult<(f64, f64)> {
    create_parent(cache)?;
    Ok(reference_returns_cached(env, DEFAULT_REFERENCE_EPISODES, 0, cache)?)
}

pub fn run(cli: Cli) -> CliResult {
    let started = now_secs();
    match cli.command {
        Command::GenData(a) => gen_data(&a, started),
        Command::Train(a) => cmd_train(&a, started),
        Command::Eval(a) => cmd_eval(&a),
        Command::VerifyTabular(a) => verify_tabular(&a, started),
        Command::BoundCheck(a) => bound_check(&a, started),
        Command::Sweep(a) => sweep(&a, started),
    }
}

fn gen_data(a: &GenDataArgs, started: f64) -> CliResult {
    let env = lookup_env(&a.env)?;
    let data = match a.tier {
        Tier::Random => generate_dataset(env.as_ref(), &BehaviorPolicy::random(), a.n, a.seed)?,
        Tier::Medium => generate_dataset(env.as_ref(), &BehaviorPolicy::medium(), a.n, a.seed)?,
        Tier::Expert => generate_dataset(env.as_ref(), &BehaviorPolicy::expert(), a.n, a.seed)?,
        Tier::Mixed => generate_mixed_dataset(env.as_ref(), a.n, a.seed)?,
    };
    create_parent(&a.out)?;
    save_dataset(&a.out, &data)?;
    write_manifest(
        &manifest_path_for(&a.out),
        &RunManifest {
            subcommand: "gen-data",
            args: a,
            resolved_config: None,
            seed: Some(a.seed),
            inputs: vec![],
            outputs: vec![display(&a.out)],
            tool_version: env!("CARGO_PKG_VERSION"),
            started_unix_secs: started,
        },
    )?;
    println!("wrote {} transitions to {}", data.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs, started: f64) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    a.overrides.apply(&mut cfg)?;
    let data = load_dataset(&a.dataset).map_err(|e| CliError::usage(format!("{}: {e}", a.dataset.display())))?;
    if data.is_empty() {
        return Err(CliError::usage(format!("{}: dataset has no transitions", a.dataset.display())));
    }
    fs::create_dir_all(&a.out_dir)?;
    let env = a.env.as_deref().map(lookup_env).transpose()?;
    let setup = match &env {
        Some(env) => {
            let cache = a.ref_cache.clone().unwrap_or_else(|| a.out_dir.join("reference_returns.csv"));
            let (random_ref, expert_ref) = references(env.as_ref(), &cache)?;
            Some(EvalSetup { env: env.as_ref(), random_ref, expert_ref })
        }
        None => None,
    };
    let out = train(&cfg, &data, setup.as_ref())?;

    let metrics_path = a.out_dir.join("metrics.csv");
    let ckpt_path = a.out_dir.join("agent.ckpt");
    let config_path = a.out_dir.join("config.txt");
    write_metrics_csv(BufWriter::new(File::create(&metrics_path)?), &out.metrics)?;
    out.agent.save(&ckpt_path)?;
    fs::write(&config_path, cfg.to_config_string())?;
    write_manifest(
        &a.out_dir.join("manifest.json"),
        &RunManifest {
            subcommand: "train",
            args: a,
            resolved_config: Some(&cfg),
            seed: Some(cfg.seed),
            inputs: [Some(&a.dataset), a.config.as_ref()].into_iter().flatten().map(|p| display(p)).collect(),
            outputs: [&metrics_path, &ckpt_path, &config_path].iter().map(|p| display(p)).collect(),
            tool_version: env!("CARGO_PKG_VERSION"),
            started_unix_secs: started,
        },
    )?;
    if let Some(last) = out.metrics.last() {
        println!("epoch {} eval_return {} normalized_score {}", last.epoch, fmt_g6(last.eval_return), fmt_g6(last.normalized_score));
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    let env = lookup_env(&a.env)?;
    let agent = Agent::load(&a.checkpoint).map_err(|e| CliError::usage(format!("{}: {e}", a.checkpoint.display())))?;
    if agent.state_dim() != env.state_dim() || agent.action_dim() != env.action_dim() {
        return Err(CliError::usage(format!(
            "checkpoint is {}→{} but {} is {}→{}",
            agent.state_dim(),
            agent.action_dim(),
            env.name(),
            env.state_dim(),
            env.action_dim()
        )));
    }
    let cache = a
        .ref_cache
        .clone()
        .unwrap_or_else(|| a.checkpoint.with_file_name("reference_returns.csv"));
    let (random_ref, expert_ref) = references(env.as_ref(), &cache)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let ret = evaluate(&agent.policy, env.as_ref(), a.episodes, &mut rng)?;
    let score = normalized_score(ret, random_ref, expert_ref)?;
    println!("{},{}", fmt_g6(ret), fmt_g6(score));
    Ok(())
}

/// Random MDP, full-support data policy and per-seed generator.
fn tabular_problem(states: usize, actions: usize, gamma: f64, seed: u64) -> CliResult<(TabularMdp, TabularPolicy, ChaCha8Rng)> {
    if states == 0 || actions == 0 {
        return Err(CliError::usage("--states and --actions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mdp = TabularMdp::random(states, actions, gamma, &mut rng)?;
    let policy = TabularPolicy::random(states, actions, &mut rng);
    Ok((mdp, policy, rng))
}

fn verify_tabular(a: &VerifyArgs, started: f64) -> CliResult {
    if a.seeds == 0 {
        return Err(CliError::usage("--seeds must be positive"));
    }
    create_parent(&a.out)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    writeln!(w, "seed,n,state,action,q,q_star,predicted_offset,deviation")?;
    let mut failed = Vec::new();
    let mut unconverged = Vec::new();
    for seed in 0..a.seeds {
        let (mdp, policy, _) = tabular_problem(a.states, a.actions, a.gamma, seed)?;
        let report = match verify_offset_with(&mdp, &policy, a.beta, a.tau, a.tol, a.max_sweeps) {
            Ok(r) => r,
            Err(DceError::NotConverged { sweeps, residual }) => {
                println!("seed {seed}: no convergence after {sweeps} sweeps (residual {residual:e})");
                unconverged.push(seed);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        for p in report.per_pair.iter().filter(|p| p.in_support) {
            writeln!(
                w,
                "{seed},{},{},{},{:.12e},{:.12e},{:.12e},{:.6e}",
                report.n, p.state, p.action, p.q, p.q_star, report.predicted_offset, p.deviation
            )?;
        }
        let pass = report.max_abs_deviation < OFFSET_PASS_TOL;
        println!(
            "seed {seed}: n={} predicted_offset={:.9} max_abs_deviation={:.3e} {}",
            report.n,
            report.predicted_offset,
            report.max_abs_deviation,
            if pass { "pass" } else { "FAIL" }
        );
        if !pass {
            failed.push(seed);
        }
    }
    w.flush()?;
    write_manifest(
        &manifest_path_for(&a.out),
        &RunManifest {
            subcommand: "verify-tabular",
            args: a,
            resolved_config: None,
            seed: None,
            inputs: vec![],
            outputs: vec![display(&a.out)],
            tool_version: env!("CARGO_PKG_VERSION"),
            started_unix_secs: started,
        },
    )?;
    if !unconverged.is_empty() {
        return Err(CliError::verify(format!("no convergence for seeds {unconverged:?}")));
    }
    if !failed.is_empty() {
        return Err(CliError::verify(format!("offset deviation ≥ {OFFSET_PASS_TOL:e} for seeds {failed:?}")));
    }
    Ok(())
}

/// `samples` i.i.d. transitions with `s` uniform and `a ∼ policy(s)`.
fn sample_tabular_data(mdp: &TabularMdp, policy: &TabularPolicy, samples: usize, rng: &mut ChaCha8Rng) -> DiscreteDataset {
    let uniform = vec![1.0 / mdp.n_states() as f64; mdp.n_states()];
    let mut data = DiscreteDataset::new(mdp.n_states(), mdp.n_actions());
    for _ in 0..samples {
        let s = sample_index(&uniform, rng);
        let a = sample_index(policy.probs(s), rng);
        let sp = sample_index(mdp.transition_row(s, a), rng);
        data.record(s, a, mdp.reward(s, a), sp);
    }
    data
}

fn bound_check(a: &BoundArgs, started: f64) -> CliResult {
    if a.seeds == 0 || a.samples == 0 {
        return Err(CliError::usage("--seeds and --samples must be positive"));
    }
    create_parent(&a.out)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    writeln!(w, "seed,{}", BoundReport::CSV_HEADER)?;
    let mut violations = 0;
    let mut unconverged = Vec::new();
    for seed in 0..a.seeds {
        let (mdp, policy, mut rng) = tabular_problem(a.states, a.actions, a.gamma, seed)?;
        let data = sample_tabular_data(&mdp, &policy, a.samples, &mut rng);
        let n = a.samples as u64;
        let params = BoundParams::from_dataset(&data, n, n, a.c_r, a.c_t, a.r_max, a.tau, a.delta)?;
        let report = match empirical_bound_check(&mdp, &data, &policy, a.beta, a.tau, &params, a.tol, a.max_sweeps) {
            Ok(r) => r,
            Err(DceError::NotConverged { sweeps, residual }) => {
                println!("seed {seed}: no convergence after {sweeps} sweeps (residual {residual:e})");
                unconverged.push(seed);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let mut body = Vec::new();
        report.write_csv(&mut body)?;
        for line in String::from_utf8_lossy(&body).lines().skip(1).filter(|l| !l.starts_with('#')) {
            writeln!(w, "{seed},{line}")?;
        }
        println!(
            "seed {seed}: n={} max_measured={:.3e} violations={}",
            report.n, report.max_measured, report.violations
        );
        violations += report.violations;
    }
    w.flush()?;
    write_manifest(
        &manifest_path_for(&a.out),
        &RunManifest {
            subcommand: "bound-check",
            args: a,
            resolved_config: None,
            seed: None,
            inputs: vec![],
            outputs: vec![display(&a.out)],
            tool_version: env!("CARGO_PKG_VERSION"),
            started_unix_secs: started,
        },
    )?;
    println!("total violations: {violations}");
    if !unconverged.is_empty() {
        return Err(CliError::verify(format!("no convergence for seeds {unconverged:?}")));
    }
    if violations > 0 {
        return Err(CliError::verify(format!("{violations} bound violations")));
    }
    Ok(())
}

fn sweep(a: &SweepArgs, started: f64) -> CliResult {
    let values = a
        .values
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| CliError::usage(format!("--values: '{v}' is not a number"))))
        .collect::<CliResult<Vec<_>>>()?;
    if values.len() < 2 {
        return Err(CliError::usage("--values needs at least two entries"));
    }
    let mut base = load_config(a.config.as_deref())?;
    a.overrides.apply(&mut base)?;
    let data = load_dataset(&a.dataset).map_err(|e| CliError::usage(format!("{}: {e}", a.dataset.display())))?;
    let env = a.env.as_deref().map(lookup_env).transpose()?;
    let setup = match &env {
        Some(env) => {
            let cache = a.ref_cache.clone().unwrap_or_else(|| a.out.with_file_name("reference_returns.csv"));
            let (random_ref, expert_ref) = references(env.as_ref(), &cache)?;
            Some(EvalSetup { env: env.as_ref(), random_ref, expert_ref })
        }
        None => None,
    };

    create_parent(&a.out)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    writeln!(w, "value,{METRICS_HEADER}")?;
    let mut worst: Option<CliError> = None;
    for &v in &values {
        let mut cfg = base.clone();
        match a.param {
            SweepParam::Beta => cfg.beta_schedule = BetaSchedule::constant(v),
            SweepParam::Alpha => cfg.alpha_mode = AlphaMode::Fixed(v),
        }
        match train(&cfg, &data, setup.as_ref()) {
            Ok(out) => {
                for row in &out.metrics {
                    writeln!(w, "{},{}", fmt_g6(v), row.csv_line())?;
                }
                if let Some(last) = out.metrics.last() {
                    println!("value {}: final alpha {} eval_return {}", fmt_g6(v), fmt_g6(last.alpha), fmt_g6(last.eval_return));
                }
            }
            Err(e) => {
                let e = CliError::from(e);
                eprintln!("value {}: {e}", fmt_g6(v));
                if worst.as_ref().is_none_or(|w| e.code > w.code) {
                    worst = Some(e);
                }
            }
        }
    }
    w.flush()?;
    write_manifest(
        &manifest_path_for(&a.out),
        &RunManifest {
            subcommand: "sweep",
            args: a,
            resolved_config: Some(&base),
            seed: Some(base.seed),
            inputs: [Some(&a.dataset), a.config.as_ref()].into_iter().flatten().map(|p| display(p)).collect(),
            outputs: vec![display(&a.out)],
            tool_version: env!("CARGO_PKG_VERSION"),
            started_unix_secs: started,
        },
    )?;
    worst.map_or(Ok(()), Err)
}
