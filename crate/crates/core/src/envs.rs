//! Toy continuous-control environments and scripted behavior policies.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DceError, Result};
use crate::mdp::{BehaviorTag, OfflineDataset, Transition};

/// Environments are pure step functions; episodes end only at the horizon.
pub trait ContinuousEnv: Send + Sync {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_low(&self) -> Vec<f64>;
    fn action_high(&self) -> Vec<f64>;
    fn horizon(&self) -> usize;
    /// Bound on `|reward|`.
    fn r_max(&self) -> f64;
    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    /// Returns `(next_state, reward, terminal)`. Actions are clamped to the
    /// action box before use.
    fn step(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64, bool);
    /// Scripted proportional controller toward the goal.
    fn expert_action(&self, state: &[f64]) -> Vec<f64>;

    fn clamp_action(&self, action: &[f64]) -> Vec<f64> {
        let (lo, hi) = (self.action_low(), self.action_high());
        action.iter().enumerate().map(|(i, a)| a.clamp(lo[i], hi[i])).collect()
    }
}

/// `x' = clamp(x + a, −1, 1)`, reward `−|x'|`, `a ∈ [−0.2, 0.2]`, 50 steps.
#[derive(Debug, Clone, Copy, Default)]
pub struct PointReach1D;

impl ContinuousEnv for PointReach1D {
    fn name(&self) -> &'static str {
        "point1d"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn action_low(&self) -> Vec<f64> {
        vec![-0.2]
    }
    fn action_high(&self) -> Vec<f64> {
        vec![0.2]
    }
    fn horizon(&self) -> usize {
        50
    }
    fn r_max(&self) -> f64 {
        1.0
    }
    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.random_range(-1.0..1.0)]
    }
    fn step(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64, bool) {
        let a = action[0].clamp(-0.2, 0.2);
        let x = (state[0] + a).clamp(-1.0, 1.0);
        (vec![x], -x.abs(), false)
    }
    fn expert_action(&self, state: &[f64]) -> Vec<f64> {
        vec![(-state[0]).clamp(-0.2, 0.2)]
    }
}

/// Damped point mass driven toward `(0.5, 0.5)`; state `(px, py, vx, vy)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PointMass2D;

impl PointMass2D {
    pub const GOAL: [f64; 2] = [0.5, 0.5];
    pub const DT: f64 = 0.05;
}

impl ContinuousEnv for PointMass2D {
    fn name(&self) -> &'static str {
        "point2d"
    }
    fn state_dim(&self) -> usize {
        4
    }
    fn action_dim(&self) -> usize {
        2
    }
    fn action_low(&self) -> Vec<f64> {
        vec![-1.0; 2]
    }
    fn action_high(&self) -> Vec<f64> {
        vec![1.0; 2]
    }
    fn horizon(&self) -> usize {
        100
    }
    fn r_max(&self) -> f64 {
        2.0 * std::f64::consts::SQRT_2
    }
    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0, 0.0]
    }
    fn step(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64, bool) {
        let mut next = vec![0.0; 4];
        let mut dist2 = 0.0;
        for i in 0..2 {
            let a = action[i].clamp(-1.0, 1.0);
            let v = (0.95 * state[2 + i] + Self::DT * a).clamp(-0.5, 0.5);
            let p = (state[i] + Self::DT * v).clamp(-1.0, 1.0);
            next[i] = p;
            next[2 + i] = v;
            dist2 += (p - Self::GOAL[i]).powi(2);
        }
        (next, -dist2.sqrt(), false)
    }
    fn expert_action(&self, state: &[f64]) -> Vec<f64> {
        (0..2).map(|i| (4.0 * (Self::GOAL[i] - state[i]) - 2.0 * state[2 + i]).clamp(-1.0, 1.0)).collect()
    }
}

/// Diagnostic environment whose reward ignores state and action.
#[derive(Debug, Clone, Copy)]
pub struct ConstantRewardEnv {
    pub reward: f64,
    pub horizon: usize,
}

impl ContinuousEnv for ConstantRewardEnv {
    fn name(&self) -> &'static str {
        "constant"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn action_low(&self) -> Vec<f64> {
        vec![-1.0]
    }
    fn action_high(&self) -> Vec<f64> {
        vec![1.0]
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn r_max(&self) -> f64 {
        self.reward.abs()
    }
    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.random_range(-1.0..1.0)]
    }
    fn step(&self, state: &[f64], _action: &[f64]) -> (Vec<f64>, f64, bool) {
        (state.to_vec(), self.reward, false)
    }
    fn expert_action(&self, _state: &[f64]) -> Vec<f64> {
        vec![0.0]
    }
}

/// Looks up an environment by CLI name.
pub fn env_by_name(name: &str) -> Option<Box<dyn ContinuousEnv>> {
    match name {
        "point1d" => Some(Box::new(PointReach1D)),
        "point2d" => Some(Box::new(PointMass2D)),
        "constant" => Some(Box::new(ConstantRewardEnv { reward: 1.0, horizon: 50 })),
        _ => None,
    }
}

pub const ENV_NAMES: [&str; 3] = ["point1d", "point2d", "constant"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BehaviorKind {
    Random,
    Medium,
    Expert,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BehaviorPolicy {
    pub kind: BehaviorKind,
    pub noise_sigma: f64,
}

impl BehaviorPolicy {
    pub const MEDIUM_SIGMA: f64 = 0.1;

    pub fn random() -> Self {
        Self { kind: BehaviorKind::Random, noise_sigma: 0.0 }
    }

    pub fn medium() -> Self {
        Self { kind: BehaviorKind::Medium, noise_sigma: Self::MEDIUM_SIGMA }
    }

    pub fn expert() -> Self {
        Self { kind: BehaviorKind::Expert, noise_sigma: 0.0 }
    }

    pub fn tag(&self) -> BehaviorTag {
        match self.kind {
            BehaviorKind::Random => BehaviorTag::Random,
            BehaviorKind::Medium => BehaviorTag::Medium,
            BehaviorKind::Expert => BehaviorTag::Expert,
        }
    }
}

/// Random: uniform over the box. Expert: the env's controller. Medium:
/// expert plus `N(0, σ)` noise, clamped.
pub fn behavior_action(policy: &BehaviorPolicy, env: &dyn ContinuousEnv, state: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
    let (lo, hi) = (env.action_low(), env.action_high());
    match policy.kind {
        BehaviorKind::Random => (0..env.action_dim()).map(|i| rng.random_range(lo[i]..hi[i])).collect(),
        BehaviorKind::Expert => env.expert_action(state),
        BehaviorKind::Medium => {
            let base = env.expert_action(state);
            if policy.noise_sigma == 0.0 {
                return base;
            }
            let noise = Normal::new(0.0, policy.noise_sigma).expect("sigma is finite and positive");
            let noisy: Vec<f64> = base.iter().map(|a| a + noise.sample(rng)).collect();
            env.clamp_action(&noisy)
        }
    }
}

/// Rolls out behavior episodes until `n_transitions` are collected.
/// `done` marks the final step of each full-length episode.
pub fn generate_dataset(
    env: &dyn ContinuousEnv,
    policy: &BehaviorPolicy,
    n_transitions: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if n_transitions == 0 {
        return Err(DceError::invalid("n_transitions must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(n_transitions);
    let to_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
    'episodes: loop {
        let mut state = env.reset(&mut rng);
        for t in 0..env.horizon() {
            let action = behavior_action(policy, env, &state, &mut rng);
            let (next, reward, terminal) = env.step(&state, &action);
            let done = terminal || t + 1 == env.horizon();
            transitions.push(Transition {
                state: to_f32(&state),
                action: to_f32(&action),
                reward: reward as f32,
                next_state: to_f32(&next),
                done,
            });
            if transitions.len() == n_transitions {
                break 'episodes;
            }
            if done {
                break;
            }
            state = next;
        }
    }
    OfflineDataset::new(env.state_dim(), env.action_dim(), transitions, policy.tag())
}

/// Medium and expert halves concatenated, tagged [`BehaviorTag::Mixed`].
pub fn generate_mixed_dataset(env: &dyn ContinuousEnv, n_transitions: usize, seed: u64) -> Result<OfflineDataset> {
    if n_transitions < 2 {
        return Err(DceError::invalid("mixed datasets need at least 2 transitions"));
    }
    let half = n_transitions / 2;
    let medium = generate_dataset(env, &BehaviorPolicy::medium(), half, seed)?;
    let expert = generate_dataset(env, &BehaviorPolicy::expert(), n_transitions - half, seed.wrapping_add(1))?;
    medium.concat(&expert)
}

/// Undiscounted return of one episode under `act`.
pub fn rollout_return<F>(env: &dyn ContinuousEnv, rng: &mut dyn RngCore, mut act: F) -> f64
where
    F: FnMut(&[f64], &mut dyn RngCore) -> Vec<f64>,
{
    let mut state = env.reset(rng);
    let mut total = 0.0;
    for _ in 0..env.horizon() {
        let a = act(&state, rng);
        let (next, r, terminal) = env.step(&state, &a);
        total += r;
        if terminal {
            break;
        }
        state = next;
    }
    total
}

/// Mean returns of the random and expert behavior policies.
pub fn reference_returns(env: &dyn ContinuousEnv, n_episodes: usize, seed: u64) -> Result<(f64, f64)> {
    if n_episodes == 0 {
        return Err(DceError::invalid("n_episodes must be at least 1"));
    }
    let mean_return = |policy: BehaviorPolicy, seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: f64 = (0..n_episodes)
            .map(|_| rollout_return(env, &mut rng, |s, r| behavior_action(&policy, env, s, r)))
            .sum();
        total / n_episodes as f64
    };
    Ok((mean_return(BehaviorPolicy::random(), seed), mean_return(BehaviorPolicy::expert(), seed)))
}

pub const DEFAULT_REFERENCE_EPISODES: usize = 1000;

/// [`reference_returns`] memoized in a small text file of
/// `env,n_episodes,seed,random_ref,expert_ref` lines.
pub fn reference_returns_cached(
    env: &dyn ContinuousEnv,
    n_episodes: usize,
    seed: u64,
    cache: &std::path::Path,
) -> Result<(f64, f64)> {
    let key = format!("{},{},{}", env.name(), n_episodes, seed);
    let existing = std::fs::read_to_string(cache).unwrap_or_default();
    for line in existing.lines() {
        if let Some(rest) = line.strip_prefix(&key).and_then(|r| r.strip_prefix(',')) {
            let vals: Vec<f64> = rest.split(',').filter_map(|v| v.parse().ok()).collect();
            if let [random, expert] = vals[..] {
                return Ok((random, expert));
            }
        }
    }
    let (random, expert) = reference_returns(env, n_episodes, seed)?;
    let mut text = existing;
    if !text.is_empty() && !text.ends_with('\n') {
        text.push('\n');
    }
    // {:e} round-trips f64 exactly
    text.push_str(&format!("{key},{random:e},{expert:e}\n"));
    std::fs::write(cache, text)?;
    Ok((random, expert))
}
