//! Training objectives and their parameter gradients.
//!
//! Every loss returns its value together with the gradients of the networks
//! it is allowed to move; everything else is treated as a constant.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;

use crate::error::{DceError, Result};
use crate::mdp::OfflineDataset;
use crate::nn::{GaussianPolicyNet, Mlp, MlpGrads};

/// Column-stacked minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    /// 1.0 where the transition ends the episode.
    pub dones: Array1<f64>,
}

impl Batch {
    pub fn from_dataset(data: &OfflineDataset, indices: &[usize]) -> Self {
        let (sd, ad, n) = (data.state_dim(), data.action_dim(), indices.len());
        let mut b = Batch {
            states: Array2::zeros((n, sd)),
            actions: Array2::zeros((n, ad)),
            rewards: Array1::zeros(n),
            next_states: Array2::zeros((n, sd)),
            dones: Array1::zeros(n),
        };
        for (row, &i) in indices.iter().enumerate() {
            let t = &data.transitions()[i];
            for j in 0..sd {
                b.states[[row, j]] = t.state[j] as f64;
                b.next_states[[row, j]] = t.next_state[j] as f64;
            }
            for j in 0..ad {
                b.actions[[row, j]] = t.action[j] as f64;
            }
            b.rewards[row] = t.reward as f64;
            b.dones[row] = if t.done { 1.0 } else { 0.0 };
        }
        b
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(DceError::invalid("empty batch"));
        }
        if self.states.nrows() != n || self.actions.nrows() != n || self.next_states.nrows() != n || self.dones.len() != n {
            return Err(DceError::shape("batch columns differ in length"));
        }
        if self.states.ncols() != self.next_states.ncols() {
            return Err(DceError::shape("state and next_state widths differ"));
        }
        Ok(())
    }
}

/// `[s | a]` network input.
pub fn state_action(states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[states.view(), actions.view()]).expect("row counts checked by caller")
}

fn column(out: Array2<f64>) -> Array1<f64> {
    out.column(0).to_owned()
}

/// Gradients keyed by the network they belong to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub q: Option<MlpGrads>,
    pub v: Option<MlpGrads>,
    pub policy: Option<MlpGrads>,
    pub log_alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Gradients,
    /// Mean Q over the batch's dataset pairs, when evaluated.
    pub mean_q_data: Option<f64>,
    /// Mean Q over policy-sampled actions, when evaluated.
    pub mean_q_sampled: Option<f64>,
    /// Mean log-density of the policy samples, when drawn.
    pub mean_log_prob: Option<f64>,
}

impl LossOutput {
    fn new(value: f64, grads: Gradients) -> Self {
        Self { value, grads, mean_q_data: None, mean_q_sampled: None, mean_log_prob: None }
    }
}

/// Asymmetric squared loss `|τ − 1(u<0)|·u²`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    expectile_weight(u, tau) * u * u
}

fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u >= 0.0 {
        tau
    } else {
        1.0 - tau
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(DceError::invalid(format!("tau {tau} outside (0,1)")))
    }
}

/// Expectile regression of `V(s)` onto given Q-values (held constant).
pub fn v_loss_with_targets(states: &Array2<f64>, q_values: &Array1<f64>, v: &Mlp, tau: f64) -> Result<LossOutput> {
    check_tau(tau)?;
    let n = states.nrows();
    if n == 0 || q_values.len() != n {
        return Err(DceError::shape("V regression needs one Q target per state"));
    }
    let (pred, cache) = v.forward_cached(states)?;
    let mut value = 0.0;
    let mut upstream = Array2::zeros((n, 1));
    for b in 0..n {
        let u = q_values[b] - pred[[b, 0]];
        value += expectile_loss(u, tau);
        upstream[[b, 0]] = -2.0 * expectile_weight(u, tau) * u / n as f64;
    }
    let (g, _) = v.backward(&cache, &upstream)?;
    Ok(LossOutput::new(value / n as f64, Gradients { v: Some(g), ..Default::default() }))
}

/// Mean expectile loss of `Q_target(s,a) − V(s)`; gradients reach V only.
pub fn v_loss(batch: &Batch, q_target: &Mlp, v: &Mlp, tau: f64) -> Result<LossOutput> {
    batch.check()?;
    let q = column(q_target.forward(&state_action(&batch.states, &batch.actions))?);
    v_loss_with_targets(&batch.states, &q, v, tau)
}

/// Squared regression of `Q(s,a)` onto fixed targets plus `β` times the
/// mean of `Q` over each set of penalty actions.
pub fn q_regression_with_penalty(
    q: &Mlp,
    states: &Array2<f64>,
    actions: &Array2<f64>,
    targets: &Array1<f64>,
    penalty_actions: &[Array2<f64>],
    beta: f64,
) -> Result<LossOutput> {
    let n = states.nrows();
    if n == 0 || actions.nrows() != n || targets.len() != n {
        return Err(DceError::shape("Q regression inputs differ in length"));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(DceError::invalid(format!("penalty coefficient {beta} must be finite and nonnegative")));
    }
    let (pred, cache) = q.forward_cached(&state_action(states, actions))?;
    let mut td = 0.0;
    let mut upstream = Array2::zeros((n, 1));
    for b in 0..n {
        let delta = targets[b] - pred[[b, 0]];
        td += delta * delta;
        upstream[[b, 0]] = -2.0 * delta / n as f64;
    }
    let (mut grads, _) = q.backward(&cache, &upstream)?;
    let mut value = td / n as f64;

    let mut sampled_sum = 0.0;
    let k = penalty_actions.len();
    for pa in penalty_actions {
        let (qp, cache) = q.forward_cached(&state_action(states, pa))?;
        let mean = qp.sum() / n as f64;
        sampled_sum += mean;
        if beta > 0.0 {
            let up = Array2::from_elem((n, 1), beta / (n * k) as f64);
            grads.add_assign(&q.backward(&cache, &up)?.0);
        }
    }
    let mean_sampled = if k > 0 { sampled_sum / k as f64 } else { f64::NAN };
    if k > 0 {
        let penalty = beta * mean_sampled;
        if !penalty.is_finite() {
            return Err(DceError::NonFiniteGradient(format!("penalty term evaluated to {penalty}")));
        }
        value += penalty;
    }
    let mut out = LossOutput::new(value, Gradients { q: Some(grads), ..Default::default() });
    out.mean_q_data = Some(pred.mean().unwrap_or(0.0));
    out.mean_q_sampled = (k > 0).then_some(mean_sampled);
    Ok(out)
}

fn penalty_samples<R: Rng + ?Sized>(
    policy: &GaussianPolicyNet,
    states: &Array2<f64>,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Array2<f64>>> {
    (0..k).map(|_| policy.sample(states, rng).map(|s| s.actions)).collect()
}

/// `r + γ(1 − done)·next_value`.
pub fn bellman_targets(batch: &Batch, next_value: &Array1<f64>, gamma: f64) -> Array1<f64> {
    let mut y = batch.rewards.clone();
    for b in 0..y.len() {
        y[b] += gamma * (1.0 - batch.dones[b]) * next_value[b];
    }
    y
}

/// Squared TD error against `r + γV(s')` plus `β·E[Q(s, a')]` over
/// `penalty_samples` policy actions per state. Gradients reach Q only.
#[allow(clippy::too_many_arguments)]
pub fn q_loss_dce<R: Rng + ?Sized>(
    batch: &Batch,
    v: &Mlp,
    q: &Mlp,
    policy: &GaussianPolicyNet,
    gamma: f64,
    beta: f64,
    penalty_samples_per_state: usize,
    rng: &mut R,
) -> Result<LossOutput> {
    batch.check()?;
    let next_v = column(v.forward(&batch.next_states)?);
    let targets = bellman_targets(batch, &next_v, gamma);
    let penalty = penalty_samples(policy, &batch.states, penalty_samples_per_state, rng)?;
    q_regression_with_penalty(q, &batch.states, &batch.actions, &targets, &penalty, beta)
}

/// Penalized Q regression that bootstraps from `Q_target(s', a'')` with
/// `a'' ∼ π(·|s')` instead of a V-network. The squared term carries no ½.
#[allow(clippy::too_many_arguments)]
pub fn q_loss_cql_variant<R: Rng + ?Sized>(
    batch: &Batch,
    q_target: &Mlp,
    q: &Mlp,
    policy: &GaussianPolicyNet,
    gamma: f64,
    alpha_cql: f64,
    penalty_samples_per_state: usize,
    rng: &mut R,
) -> Result<LossOutput> {
    batch.check()?;
    let next_actions = policy.sample(&batch.next_states, rng)?.actions;
    let next_q = column(q_target.forward(&state_action(&batch.next_states, &next_actions))?);
    let targets = bellman_targets(batch, &next_q, gamma);
    let penalty = penalty_samples(policy, &batch.states, penalty_samples_per_state, rng)?;
    q_regression_with_penalty(q, &batch.states, &batch.actions, &targets, &penalty, alpha_cql)
}

/// Soft Bellman regression of plain SAC:
/// `r + γ(1 − done)(Q_target(s', a'') − α log π(a''|s'))`, no penalty.
pub fn q_loss_soft_bellman<R: Rng + ?Sized>(
    batch: &Batch,
    q_target: &Mlp,
    q: &Mlp,
    policy: &GaussianPolicyNet,
    gamma: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<LossOutput> {
    batch.check()?;
    let next = policy.sample(&batch.next_states, rng)?;
    let next_q = column(q_target.forward(&state_action(&batch.next_states, &next.actions))?);
    let soft = &next_q - &(alpha * &next.log_prob);
    let targets = bellman_targets(batch, &soft, gamma);
    q_regression_with_penalty(q, &batch.states, &batch.actions, &targets, &[], 0.0)
}

/// Reparameterized SAC actor objective `mean(α·log π(a'|s) − min_i Q_i(s,a'))`.
/// Gradients reach the policy only.
pub fn policy_loss_sac_min<R: Rng + ?Sized>(
    states: &Array2<f64>,
    critics: &[&Mlp],
    policy: &GaussianPolicyNet,
    alpha: f64,
    rng: &mut R,
) -> Result<LossOutput> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(DceError::invalid(format!("alpha {alpha} must be finite and nonnegative")));
    }
    if critics.is_empty() {
        return Err(DceError::invalid("policy loss needs at least one critic"));
    }
    let n = states.nrows();
    if n == 0 {
        return Err(DceError::invalid("empty batch"));
    }
    let sample = policy.sample(states, rng)?;
    let input = state_action(states, &sample.actions);
    let evals = critics.iter().map(|q| q.forward_cached(&input)).collect::<Result<Vec<_>>>()?;
    // per-row index of the smallest critic
    let pick: Vec<usize> = (0..n)
        .map(|b| {
            (0..evals.len()).fold(0, |best, i| if evals[i].0[[b, 0]] < evals[best].0[[b, 0]] { i } else { best })
        })
        .collect();
    let q_min: Array1<f64> = (0..n).map(|b| evals[pick[b]].0[[b, 0]]).collect();

    let ad = policy.action_dim();
    let sd = states.ncols();
    let mut d_actions = Array2::zeros((n, ad));
    for (i, (q, (_, cache))) in critics.iter().zip(&evals).enumerate() {
        let up = Array2::from_shape_fn((n, 1), |(b, _)| if pick[b] == i { -1.0 / n as f64 } else { 0.0 });
        let (_, d_input) = q.backward(cache, &up)?;
        d_actions += &d_input.slice(s![.., sd..]);
    }
    let d_log_prob = Array1::from_elem(n, alpha / n as f64);
    let grads = policy.backward(&sample, &d_actions, &d_log_prob)?;
    let value = (alpha * &sample.log_prob - &q_min).mean().unwrap_or(0.0);
    let mut out = LossOutput::new(value, Gradients { policy: Some(grads), ..Default::default() });
    out.mean_q_sampled = q_min.mean();
    out.mean_log_prob = sample.log_prob.mean();
    Ok(out)
}

pub fn policy_loss_sac<R: Rng + ?Sized>(
    states: &Array2<f64>,
    q: &Mlp,
    policy: &GaussianPolicyNet,
    alpha: f64,
    rng: &mut R,
) -> Result<LossOutput> {
    policy_loss_sac_min(states, &[q], policy, alpha, rng)
}

/// Temperature loss `−exp(log α)·mean(log π + target_entropy)` with the
/// log-densities held constant.
pub fn alpha_loss_from_log_probs(log_probs: &Array1<f64>, log_alpha: f64, target_entropy: f64) -> Result<LossOutput> {
    let mean = log_probs.mean().ok_or_else(|| DceError::invalid("empty batch"))?;
    let value = -log_alpha.exp() * (mean + target_entropy);
    // d/d(log α) of −e^{log α}·c is the value itself.
    let mut out = LossOutput::new(value, Gradients { log_alpha: Some(value), ..Default::default() });
    out.mean_log_prob = Some(mean);
    Ok(out)
}

pub fn alpha_loss<R: Rng + ?Sized>(
    states: &Array2<f64>,
    policy: &GaussianPolicyNet,
    log_alpha: f64,
    target_entropy: f64,
    rng: &mut R,
) -> Result<LossOutput> {
    let sample = policy.sample(states, rng)?;
    alpha_loss_from_log_probs(&sample.log_prob, log_alpha, target_entropy)
}
