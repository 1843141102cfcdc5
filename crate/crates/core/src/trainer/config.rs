use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{DceError, Result};
use crate::nn::adam::DEFAULT_LR;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// Learned temperature starting from `alpha_init`.
    Auto,
    Fixed(f64),
}

impl fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaMode::Auto => write!(f, "auto"),
            AlphaMode::Fixed(a) => write!(f, "fixed({a})"),
        }
    }
}

impl FromStr for AlphaMode {
    type Err = DceError;

    /// `auto`, `fixed(0.2)` or `fixed:0.2`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "auto" {
            return Ok(AlphaMode::Auto);
        }
        let inner = s
            .strip_prefix("fixed(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("fixed:"))
            .ok_or_else(|| DceError::invalid(format!("alpha_mode '{s}' is not auto, fixed(v) or fixed:v")))?;
        Ok(AlphaMode::Fixed(parse_f64("alpha_mode", inner)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticMode {
    Dce,
    NoPenalty,
    CqlVariant,
    NoV,
}

impl CriticMode {
    pub const ALL: [CriticMode; 4] = [CriticMode::Dce, CriticMode::NoPenalty, CriticMode::CqlVariant, CriticMode::NoV];

    pub fn name(self) -> &'static str {
        match self {
            CriticMode::Dce => "dce",
            CriticMode::NoPenalty => "no_penalty",
            CriticMode::CqlVariant => "cql_variant",
            CriticMode::NoV => "no_v",
        }
    }

    /// Whether the β schedule enters the critic loss.
    pub fn uses_beta(self) -> bool {
        matches!(self, CriticMode::Dce | CriticMode::CqlVariant)
    }
}

impl fmt::Display for CriticMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CriticMode {
    type Err = DceError;

    fn from_str(s: &str) -> Result<Self> {
        CriticMode::ALL.into_iter().find(|m| m.name() == s.trim()).ok_or_else(|| {
            DceError::invalid(format!("unknown critic_mode '{s}' (expected dce, no_penalty, cql_variant or no_v)"))
        })
    }
}

/// Piecewise-constant β, moved by `step` every `interval_epochs` and
/// clamped at `end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BetaSchedule {
    pub start: f64,
    pub end: f64,
    pub step: f64,
    pub interval_epochs: usize,
}

impl BetaSchedule {
    pub const DEFAULT_INTERVAL: usize = 50;

    pub fn constant(beta: f64) -> Self {
        Self { start: beta, end: beta, step: 0.0, interval_epochs: Self::DEFAULT_INTERVAL }
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.start, self.end, self.step].iter().all(|x| x.is_finite()) {
            return Err(DceError::invalid("beta schedule values must be finite"));
        }
        if self.start < 0.0 || self.end < 0.0 {
            return Err(DceError::invalid("beta must be nonnegative"));
        }
        if self.interval_epochs == 0 {
            return Err(DceError::invalid("beta interval must be at least one epoch"));
        }
        Ok(())
    }
}

impl fmt::Display for BetaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.start, self.end, self.step, self.interval_epochs)
    }
}

impl FromStr for BetaSchedule {
    type Err = DceError;

    /// `b` (constant), `start,end,step` or `start,end,step,interval`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let num = |i: usize| parse_f64("beta_schedule", parts[i]);
        let sched = match parts.len() {
            1 => BetaSchedule::constant(num(0)?),
            3 | 4 => BetaSchedule {
                start: num(0)?,
                end: num(1)?,
                step: num(2)?,
                interval_epochs: match parts.get(3) {
                    Some(v) => parse_usize("beta_schedule", v)?,
                    None => Self::DEFAULT_INTERVAL,
                },
            },
            _ => return Err(DceError::invalid(format!("beta_schedule '{s}' needs 1, 3 or 4 comma-separated values"))),
        };
        sched.validate()?;
        Ok(sched)
    }
}

/// `start − ⌊epoch/interval⌋·step`, clamped to the range spanned by
/// `start` and `end`.
pub fn beta_at(schedule: &BetaSchedule, epoch: usize) -> f64 {
    let k = (epoch / schedule.interval_epochs.max(1)) as f64;
    let raw = schedule.start - k * schedule.step;
    raw.clamp(schedule.start.min(schedule.end), schedule.start.max(schedule.end))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    /// Expectile of the V regression.
    pub tau: f64,
    pub gamma: f64,
    /// Target-network smoothing coefficient.
    pub upsilon: f64,
    pub lr_q: f64,
    pub lr_v: f64,
    pub lr_pi: f64,
    pub lr_alpha: f64,
    pub alpha_mode: AlphaMode,
    pub alpha_init: f64,
    pub beta_schedule: BetaSchedule,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub critic_mode: CriticMode,
    pub eval_episodes: usize,
    /// Evaluate every this many epochs (and after the last one).
    pub eval_interval: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Policy actions per state in the penalty expectation.
    pub penalty_samples: usize,
    /// Critic-only first half, actor-only second half.
    pub phased: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.7,
            gamma: 0.99,
            upsilon: 0.005,
            lr_q: DEFAULT_LR,
            lr_v: DEFAULT_LR,
            lr_pi: DEFAULT_LR,
            lr_alpha: DEFAULT_LR,
            alpha_mode: AlphaMode::Auto,
            alpha_init: 1.0,
            beta_schedule: BetaSchedule::constant(1.0),
            epochs: 100,
            steps_per_epoch: 100,
            batch_size: 256,
            critic_mode: CriticMode::Dce,
            eval_episodes: 4,
            eval_interval: 1,
            seed: 0,
            hidden: vec![256, 256],
            penalty_samples: 1,
            phased: false,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim().parse().map_err(|_| DceError::invalid(format!("{key}: '{v}' is not a number")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim().parse().map_err(|_| DceError::invalid(format!("{key}: '{v}' is not a nonnegative integer")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(DceError::invalid(format!("{key}: '{v}' is not a boolean"))),
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 20] = [
        "tau",
        "gamma",
        "upsilon",
        "lr_q",
        "lr_v",
        "lr_pi",
        "lr_alpha",
        "alpha_mode",
        "alpha_init",
        "beta_schedule",
        "epochs",
        "steps_per_epoch",
        "batch_size",
        "critic_mode",
        "eval_episodes",
        "eval_interval",
        "seed",
        "hidden",
        "penalty_samples",
        "phased",
    ];

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "tau" => self.tau = parse_f64(key, v)?,
            "gamma" => self.gamma = parse_f64(key, v)?,
            "upsilon" => self.upsilon = parse_f64(key, v)?,
            "lr_q" => self.lr_q = parse_f64(key, v)?,
            "lr_v" => self.lr_v = parse_f64(key, v)?,
            "lr_pi" => self.lr_pi = parse_f64(key, v)?,
            "lr_alpha" => self.lr_alpha = parse_f64(key, v)?,
            "alpha_mode" => self.alpha_mode = v.parse()?,
            "alpha_init" => self.alpha_init = parse_f64(key, v)?,
            "beta_schedule" => self.beta_schedule = v.parse()?,
            "epochs" => self.epochs = parse_usize(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse_usize(key, v)?,
            "batch_size" => self.batch_size = parse_usize(key, v)?,
            "critic_mode" => self.critic_mode = v.parse()?,
            "eval_episodes" => self.eval_episodes = parse_usize(key, v)?,
            "eval_interval" => self.eval_interval = parse_usize(key, v)?,
            "seed" => self.seed = v.parse().map_err(|_| DceError::invalid(format!("seed: '{v}' is not a u64")))?,
            "hidden" => {
                self.hidden = v.split(',').map(|h| parse_usize(key, h)).collect::<Result<_>>()?;
            }
            "penalty_samples" => self.penalty_samples = parse_usize(key, v)?,
            "phased" => self.phased = parse_bool(key, v)?,
            _ => return Err(DceError::invalid(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "tau" => self.tau.to_string(),
            "gamma" => self.gamma.to_string(),
            "upsilon" => self.upsilon.to_string(),
            "lr_q" => self.lr_q.to_string(),
            "lr_v" => self.lr_v.to_string(),
            "lr_pi" => self.lr_pi.to_string(),
            "lr_alpha" => self.lr_alpha.to_string(),
            "alpha_mode" => self.alpha_mode.to_string(),
            "alpha_init" => self.alpha_init.to_string(),
            "beta_schedule" => self.beta_schedule.to_string(),
            "epochs" => self.epochs.to_string(),
            "steps_per_epoch" => self.steps_per_epoch.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "critic_mode" => self.critic_mode.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "seed" => self.seed.to_string(),
            "hidden" => self.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "penalty_samples" => self.penalty_samples.to_string(),
            "phased" => self.phased.to_string(),
            _ => return None,
        })
    }

    /// Defaults overridden by `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DceError::invalid(format!("config line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v).map_err(|e| DceError::invalid(format!("config line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field as `key = value`, in [`TrainConfig::KEYS`] order.
    pub fn to_config_string(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("listed key"))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, x: f64| {
            if x > 0.0 && x < 1.0 {
                Ok(())
            } else {
                Err(DceError::invalid(format!("{name} = {x} must lie in (0, 1)")))
            }
        };
        open_unit("tau", self.tau)?;
        open_unit("gamma", self.gamma)?;
        open_unit("upsilon", self.upsilon)?;
        for (name, lr) in [("lr_q", self.lr_q), ("lr_v", self.lr_v), ("lr_pi", self.lr_pi), ("lr_alpha", self.lr_alpha)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(DceError::invalid(format!("{name} = {lr} must be positive")));
            }
        }
        if let AlphaMode::Fixed(a) = self.alpha_mode {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(DceError::invalid(format!("fixed alpha {a} must be finite and nonnegative")));
            }
        }
        if !(self.alpha_init > 0.0 && self.alpha_init.is_finite()) {
            return Err(DceError::invalid("alpha_init must be positive"));
        }
        self.beta_schedule.validate()?;
        if self.batch_size == 0 || self.eval_episodes == 0 || self.eval_interval == 0 || self.penalty_samples == 0 {
            return Err(DceError::invalid("batch_size, eval_episodes, eval_interval and penalty_samples must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(DceError::invalid("hidden needs at least one positive layer width"));
        }
        Ok(())
    }
}
