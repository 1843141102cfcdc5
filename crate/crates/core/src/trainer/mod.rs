//! Offline actor-critic training loop, evaluation and checkpoints.

mod config;
mod metrics;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{beta_at, AlphaMode, BetaSchedule, CriticMode, TrainConfig};
pub use metrics::{fmt_g6, write_metrics_csv, MetricsRow, METRICS_HEADER};

use crate::envs::ContinuousEnv;
use crate::error::{DceError, Result};
use crate::losses::{
    alpha_loss_from_log_probs, policy_loss_sac, q_loss_cql_variant, q_loss_dce, q_loss_soft_bellman, v_loss, Batch,
};
use crate::mdp::OfflineDataset;
use crate::nn::checkpoint::{read_tensors, write_tensors, Tensor};
use crate::nn::{soft_update, AdamState, GaussianPolicyNet, Mlp};

/// Added to the training seed for evaluation rollouts.
const EVAL_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// The learned networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub policy: GaussianPolicyNet,
    pub q: Mlp,
    pub q_target: Mlp,
    pub v: Mlp,
    pub log_alpha: f64,
}

impl Agent {
    pub fn new<R: RngCore + ?Sized>(
        state_dim: usize,
        low: Vec<f64>,
        high: Vec<f64>,
        hidden: &[usize],
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let action_dim = low.len();
        let sizes = |input: usize| [&[input][..], hidden, &[1]].concat();
        let policy = GaussianPolicyNet::new(state_dim, hidden, low, high, rng)?;
        let q = Mlp::new(&sizes(state_dim + action_dim), rng)?;
        let v = Mlp::new(&sizes(state_dim), rng)?;
        Ok(Self { policy, q_target: q.clone(), q, v, log_alpha: alpha.ln() })
    }

    pub fn state_dim(&self) -> usize {
        self.policy.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.policy.action_dim()
    }

    /// Tensors: meta `[state_dim, action_dim, policy layers, Q layers,
    /// V layers, log α]`, bounds `[2, action_dim]`, then the policy, Q and V
    /// weights. The target network is not stored.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let (low, high) = self.policy.bounds();
        let meta = vec![
            self.state_dim() as f64,
            self.action_dim() as f64,
            self.policy.net().layers().len() as f64,
            self.q.layers().len() as f64,
            self.v.layers().len() as f64,
            self.log_alpha,
        ];
        let mut out = vec![Tensor::vector(meta), Tensor { dims: vec![2, low.len()], data: [low, high].concat() }];
        out.extend(self.policy.net().to_tensors());
        out.extend(self.q.to_tensors());
        out.extend(self.v.to_tensors());
        out
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let bad = |m: &str| DceError::shape(format!("checkpoint: {m}"));
        let meta = tensors.first().filter(|t| t.data.len() == 6).ok_or_else(|| bad("missing meta tensor"))?;
        let as_count = |x: f64| if x >= 0.0 && x.fract() == 0.0 { Ok(x as usize) } else { Err(bad("corrupt meta tensor")) };
        let ad = as_count(meta.data[1])?;
        let (np, nq, nv) = (as_count(meta.data[2])?, as_count(meta.data[3])?, as_count(meta.data[4])?);
        if tensors.len() != 2 + 2 * (np + nq + nv) {
            return Err(bad("tensor count does not match meta"));
        }
        let bounds = &tensors[1];
        if bounds.dims != [2, ad] {
            return Err(bad("bounds tensor has wrong shape"));
        }
        let (low, high) = bounds.data.split_at(ad);
        let rest = &tensors[2..];
        let policy_net = Mlp::from_tensors(&rest[..2 * np])?;
        let q = Mlp::from_tensors(&rest[2 * np..2 * (np + nq)])?;
        let v = Mlp::from_tensors(&rest[2 * (np + nq)..])?;
        let policy = GaussianPolicyNet::from_parts(policy_net, low.to_vec(), high.to_vec())?;
        let sd = as_count(meta.data[0])?;
        if policy.state_dim() != sd || q.in_dim() != sd + ad || v.in_dim() != sd || q.out_dim() != 1 || v.out_dim() != 1 {
            return Err(bad("network shapes disagree with meta"));
        }
        Ok(Self { policy, q_target: q.clone(), q, v, log_alpha: meta.data[5] })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensors(BufWriter::new(File::create(path)?), &self.to_tensors())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&read_tensors(BufReader::new(File::open(path)?))?)
    }
}

/// Environment plus normalization anchors used for in-training evaluation.
#[derive(Clone, Copy)]
pub struct EvalSetup<'a> {
    pub env: &'a dyn ContinuousEnv,
    pub random_ref: f64,
    pub expert_ref: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub agent: Agent,
    pub metrics: Vec<MetricsRow>,
}

/// `100·(ret − random_ref)/(expert_ref − random_ref)`.
pub fn normalized_score(ret: f64, random_ref: f64, expert_ref: f64) -> Result<f64> {
    if !expert_ref.is_finite() || !random_ref.is_finite() || expert_ref <= random_ref {
        return Err(DceError::invalid(format!("degenerate references: random {random_ref}, expert {expert_ref}")));
    }
    Ok(100.0 * (ret - random_ref) / (expert_ref - random_ref))
}

/// Mean undiscounted return of the zero-noise policy; episodes run in lockstep.
pub fn evaluate(policy: &GaussianPolicyNet, env: &dyn ContinuousEnv, n_episodes: usize, rng: &mut dyn RngCore) -> Result<f64> {
    if n_episodes == 0 {
        return Err(DceError::invalid("n_episodes must be at least 1"));
    }
    if policy.state_dim() != env.state_dim() || policy.action_dim() != env.action_dim() {
        return Err(DceError::shape(format!(
            "policy is {}→{} but {} is {}→{}",
            policy.state_dim(),
            policy.action_dim(),
            env.name(),
            env.state_dim(),
            env.action_dim()
        )));
    }
    let sd = env.state_dim();
    let mut states: Vec<Vec<f64>> = (0..n_episodes).map(|_| env.reset(rng)).collect();
    let mut live = vec![true; n_episodes];
    let mut returns = vec![0.0; n_episodes];
    for _ in 0..env.horizon() {
        let batch = Array2::from_shape_fn((n_episodes, sd), |(i, j)| states[i][j]);
        let actions = policy.mode(&batch)?;
        for i in 0..n_episodes {
            if !live[i] {
                continue;
            }
            let a = actions.row(i).to_vec();
            let (next, r, terminal) = env.step(&states[i], &a);
            returns[i] += r;
            live[i] = !terminal;
            states[i] = next;
        }
    }
    Ok(returns.iter().sum::<f64>() / n_episodes as f64)
}

/// Uniform sampling without replacement, reshuffled each epoch and
/// whenever the permutation runs out.
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), cursor: n }
    }

    fn reshuffle<R: RngCore>(&mut self, rng: &mut R) {
        self.order.shuffle(rng);
        self.cursor = 0;
    }

    fn next<R: RngCore>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        if self.cursor + size > self.order.len() {
            self.reshuffle(rng);
        }
        let out = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        out
    }
}

#[derive(Default)]
struct EpochSums {
    q_loss: f64,
    v_loss: f64,
    policy_loss: f64,
    mean_q_dataset: f64,
    mean_q_policy: f64,
    steps: usize,
}

fn symmetric_action_hull(data: &OfflineDataset) -> (Vec<f64>, Vec<f64>) {
    let high: Vec<f64> = (0..data.action_dim())
        .map(|j| {
            let m = data.transitions().iter().map(|t| (t.action[j] as f64).abs()).fold(0.0, f64::max);
            if m > 0.0 { m } else { 1.0 }
        })
        .collect();
    (high.iter().map(|h| -h).collect(), high)
}

fn with_location(e: DceError, epoch: usize, step: usize) -> DceError {
    match e {
        DceError::NonFiniteGradient(what) => DceError::NonFinite { what, epoch, step },
        other => other,
    }
}

fn finite(what: &str, x: f64, epoch: usize, step: usize) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(DceError::NonFinite { what: what.to_string(), epoch, step })
    }
}

/// Runs the offline actor-critic loop.
///
/// Each step draws one batch and, in order, updates V by expectile
/// regression onto the target Q, updates Q according to the critic mode,
/// soft-updates the target, takes one actor step and, in auto mode, one
/// temperature step. β is read from the schedule at every epoch start.
/// Without an environment the action box is the symmetric hull of the
/// dataset actions and the evaluation columns stay zero.
pub fn train(config: &TrainConfig, data: &OfflineDataset, eval: Option<&EvalSetup>) -> Result<TrainOutput> {
    config.validate()?;
    if data.is_empty() {
        return Err(DceError::invalid("dataset has no transitions"));
    }
    let (low, high) = match eval {
        Some(e) => {
            if e.env.state_dim() != data.state_dim() || e.env.action_dim() != data.action_dim() {
                return Err(DceError::shape(format!(
                    "dataset is {}→{} but {} is {}→{}",
                    data.state_dim(),
                    data.action_dim(),
                    e.env.name(),
                    e.env.state_dim(),
                    e.env.action_dim()
                )));
            }
            normalized_score(0.0, e.random_ref, e.expert_ref)?;
            (e.env.action_low(), e.env.action_high())
        }
        None => symmetric_action_hull(data),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let alpha0 = match config.alpha_mode {
        AlphaMode::Auto => config.alpha_init,
        AlphaMode::Fixed(a) => a,
    };
    // log of a zero fixed temperature is never read
    let mut agent = Agent::new(data.state_dim(), low, high, &config.hidden, alpha0.max(f64::MIN_POSITIVE), &mut rng)?;
    let mut metrics = Vec::new();
    if config.epochs == 0 || config.steps_per_epoch == 0 {
        return Ok(TrainOutput { agent, metrics });
    }

    let mut opt_q = AdamState::new(config.lr_q);
    let mut opt_v = AdamState::new(config.lr_v);
    let mut opt_pi = AdamState::new(config.lr_pi);
    let mut opt_alpha = AdamState::new(config.lr_alpha);
    let target_entropy = -(data.action_dim() as f64);
    let batch_size = config.batch_size.min(data.len());
    let mut sampler = Sampler::new(data.len());
    let mut last_eval = (0.0, 0.0);

    for epoch in 0..config.epochs {
        let beta = if config.critic_mode.uses_beta() { beta_at(&config.beta_schedule, epoch) } else { 0.0 };
        let (critic_phase, actor_phase) = if config.phased {
            let half = config.epochs.div_ceil(2);
            (epoch < half, epoch >= half)
        } else {
            (true, true)
        };
        sampler.reshuffle(&mut rng);
        let mut sums = EpochSums::default();

        for step in 0..config.steps_per_epoch {
            let loc = |e| with_location(e, epoch, step);
            let batch = Batch::from_dataset(data, &sampler.next(batch_size, &mut rng));
            let alpha = match config.alpha_mode {
                AlphaMode::Auto => agent.log_alpha.exp(),
                AlphaMode::Fixed(a) => a,
            };
            let mut mean_q_policy = None;

            if critic_phase {
                if config.critic_mode != CriticMode::NoV {
                    let out = v_loss(&batch, &agent.q_target, &agent.v, config.tau).map_err(loc)?;
                    sums.v_loss += finite("v_loss", out.value, epoch, step)?;
                    opt_v.step_mlp(&mut agent.v, out.grads.v.as_ref().expect("v grads")).map_err(loc)?;
                }
                let k = config.penalty_samples;
                let out = match config.critic_mode {
                    CriticMode::Dce | CriticMode::NoPenalty => {
                        q_loss_dce(&batch, &agent.v, &agent.q, &agent.policy, config.gamma, beta, k, &mut rng)
                    }
                    CriticMode::CqlVariant => {
                        q_loss_cql_variant(&batch, &agent.q_target, &agent.q, &agent.policy, config.gamma, beta, k, &mut rng)
                    }
                    CriticMode::NoV => {
                        q_loss_soft_bellman(&batch, &agent.q_target, &agent.q, &agent.policy, config.gamma, alpha, &mut rng)
                    }
                }
                .map_err(loc)?;
                sums.q_loss += finite("q_loss", out.value, epoch, step)?;
                sums.mean_q_dataset += out.mean_q_data.unwrap_or(0.0);
                mean_q_policy = out.mean_q_sampled;
                opt_q.step_mlp(&mut agent.q, out.grads.q.as_ref().expect("q grads")).map_err(loc)?;
                soft_update(&mut agent.q_target, &agent.q, config.upsilon)?;
            }

            if actor_phase {
                let out = policy_loss_sac(&batch.states, &agent.q, &agent.policy, alpha, &mut rng).map_err(loc)?;
                sums.policy_loss += finite("policy_loss", out.value, epoch, step)?;
                // the actor step sees the freshest critic, so prefer its estimate
                mean_q_policy = out.mean_q_sampled;
                opt_pi.step_mlp(agent.policy.net_mut(), out.grads.policy.as_ref().expect("policy grads")).map_err(loc)?;
                if config.alpha_mode == AlphaMode::Auto {
                    let lp = Array1::from_elem(1, out.mean_log_prob.expect("log-probs drawn"));
                    let a = alpha_loss_from_log_probs(&lp, agent.log_alpha, target_entropy)?;
                    finite("alpha_loss", a.value, epoch, step)?;
                    opt_alpha.step_scalar(&mut agent.log_alpha, a.grads.log_alpha.expect("alpha grad")).map_err(loc)?;
                }
            }
            sums.mean_q_policy += mean_q_policy.unwrap_or(0.0);
            sums.steps += 1;
        }

        if let Some(e) = eval {
            if (epoch + 1) % config.eval_interval == 0 || epoch + 1 == config.epochs {
                let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(EVAL_SEED_OFFSET));
                let ret = evaluate(&agent.policy, e.env, config.eval_episodes, &mut eval_rng)?;
                last_eval = (ret, normalized_score(ret, e.random_ref, e.expert_ref)?);
            }
        }
        let n = sums.steps as f64;
        let row = MetricsRow {
            epoch,
            q_loss: sums.q_loss / n,
            v_loss: sums.v_loss / n,
            policy_loss: sums.policy_loss / n,
            alpha: match config.alpha_mode {
                AlphaMode::Auto => agent.log_alpha.exp(),
                AlphaMode::Fixed(a) => a,
            },
            beta,
            mean_q_dataset: sums.mean_q_dataset / n,
            mean_q_policy: sums.mean_q_policy / n,
            eval_return: last_eval.0,
            normalized_score: last_eval.1,
        };
        if !row.all_finite() {
            return Err(DceError::NonFinite { what: "epoch metrics".into(), epoch, step: config.steps_per_epoch });
        }
        metrics.push(row);
    }
    Ok(TrainOutput { agent, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_dataset, BehaviorPolicy, ConstantRewardEnv, PointReach1D};

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            steps_per_epoch: 5,
            batch_size: 16,
            hidden: vec![8, 8],
            eval_episodes: 2,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn data() -> OfflineDataset {
        generate_dataset(&PointReach1D, &BehaviorPolicy::medium(), 200, 0).unwrap()
    }

    #[test]
    fn normalized_score_examples() {
        assert_eq!(normalized_score(-5.0, -20.0, -5.0).unwrap(), 100.0);
        assert_eq!(normalized_score(-20.0, -20.0, -5.0).unwrap(), 0.0);
        assert_eq!(normalized_score(-12.5, -20.0, -5.0).unwrap(), 50.0);
        assert!(normalized_score(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn evaluate_constant_env() {
        let env = ConstantRewardEnv { reward: 1.0, horizon: 50 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let agent = Agent::new(1, vec![-1.0], vec![1.0], &[4], 1.0, &mut rng).unwrap();
        assert_eq!(evaluate(&agent.policy, &env, 3, &mut rng).unwrap(), 50.0);
        assert_eq!(evaluate(&agent.policy, &env, 1, &mut rng).unwrap(), 50.0);
        assert!(evaluate(&agent.policy, &env, 0, &mut rng).is_err());
        let wrong = Agent::new(2, vec![-1.0], vec![1.0], &[4], 1.0, &mut rng).unwrap();
        assert!(evaluate(&wrong.policy, &env, 1, &mut rng).is_err());
    }

    #[test]
    fn zero_steps_leave_networks_untouched() {
        let cfg = TrainConfig { steps_per_epoch: 0, ..small_config() };
        let out = train(&cfg, &data(), None).unwrap();
        assert!(out.metrics.is_empty());
        let init = train(&TrainConfig { epochs: 0, ..small_config() }, &data(), None).unwrap();
        assert_eq!(out.agent, init.agent);
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let cfg = small_config();
        let a = train(&cfg, &data(), None).unwrap();
        let b = train(&cfg, &data(), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metrics.len(), 3);
        assert!(a.metrics.iter().all(MetricsRow::all_finite));
        assert_eq!(a.metrics.iter().map(|m| m.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn no_penalty_is_dce_at_zero_beta() {
        let d = data();
        let zero = TrainConfig { beta_schedule: BetaSchedule::constant(0.0), ..small_config() };
        let off = TrainConfig { critic_mode: CriticMode::NoPenalty, beta_schedule: BetaSchedule::constant(3.0), ..small_config() };
        let a = train(&zero, &d, None).unwrap();
        let b = train(&off, &d, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_mode_runs_with_evaluation() {
        let d = data();
        let env = PointReach1D;
        let setup = EvalSetup { env: &env, random_ref: -25.0, expert_ref: -3.0 };
        for mode in CriticMode::ALL {
            for phased in [false, true] {
                let cfg = TrainConfig { critic_mode: mode, phased, ..small_config() };
                let out = train(&cfg, &d, Some(&setup)).unwrap();
                assert!(out.metrics.iter().all(|m| m.all_finite() && m.alpha > 0.0), "{mode}");
                assert!(out.metrics.iter().all(|m| m.eval_return < 0.0));
            }
        }
    }

    #[test]
    fn beta_column_follows_schedule() {
        let cfg = TrainConfig {
            epochs: 4,
            steps_per_epoch: 1,
            beta_schedule: BetaSchedule { start: 2.0, end: 0.5, step: 1.0, interval_epochs: 2 },
            ..small_config()
        };
        let out = train(&cfg, &data(), None).unwrap();
        assert_eq!(out.metrics.iter().map(|m| m.beta).collect::<Vec<_>>(), vec![2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let empty = OfflineDataset::new(1, 1, vec![], crate::mdp::BehaviorTag::Custom).unwrap();
        assert!(train(&small_config(), &empty, None).is_err());
        let env = crate::envs::PointMass2D;
        let setup = EvalSetup { env: &env, random_ref: -1.0, expert_ref: 0.0 };
        assert!(matches!(train(&small_config(), &data(), Some(&setup)), Err(DceError::Shape(_))));
    }

    #[test]
    fn nan_reward_aborts_with_location() {
        let mut d = data().transitions().to_vec();
        d[0].reward = f32::NAN;
        let big = OfflineDataset::new(1, 1, d, crate::mdp::BehaviorTag::Custom).unwrap();
        let cfg = TrainConfig { batch_size: 200, ..small_config() };
        match train(&cfg, &big, None) {
            Err(DceError::NonFinite { epoch, step, .. }) => assert!(epoch < 3 && step < 5),
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let out = train(&small_config(), &data(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.ckpt");
        out.agent.save(&path).unwrap();
        let back = Agent::load(&path).unwrap();
        assert_eq!(back.policy, out.agent.policy);
        assert_eq!(back.q, out.agent.q);
        assert_eq!(back.v, out.agent.v);
        assert_eq!(back.log_alpha, out.agent.log_alpha);
        let mut tensors = out.agent.to_tensors();
        tensors.pop();
        assert!(Agent::from_tensors(&tensors).is_err());
    }
}
