//! Squashed-Gaussian actor.
//!
//! The network emits `[mean, raw_log_std]` per action dimension. A sample is
//! `u = mean + exp(log_std)·ε`, squashed by `tanh` and mapped affinely onto
//! the action box. The log-density is taken in action space and therefore
//! carries the `tanh` and rescaling Jacobians.

use std::f64::consts::{LN_2, PI};

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{DceError, Result};
use crate::nn::mlp::{Mlp, MlpCache, MlpGrads};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicyNet {
    net: Mlp,
    low: Vec<f64>,
    high: Vec<f64>,
}

/// A batch of reparameterized draws plus what the reverse pass needs.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub actions: Array2<f64>,
    pub log_prob: Array1<f64>,
    cache: MlpCache,
    noise: Array2<f64>,
    pre_tanh: Array2<f64>,
    std: Array2<f64>,
    /// `false` where the raw log-std was clamped.
    log_std_free: Array2<bool>,
}

/// `ln(1 − tanh²(u))`, stable for large |u|.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl GaussianPolicyNet {
    /// Trunk with the given hidden sizes and a linear `2·action_dim` head.
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        hidden: &[usize],
        low: Vec<f64>,
        high: Vec<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        let action_dim = low.len();
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * action_dim);
        Self::from_parts(Mlp::new(&sizes, rng)?, low, high)
    }

    pub fn from_parts(net: Mlp, low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.is_empty() || low.len() != high.len() {
            return Err(DceError::shape("action bounds must be non-empty and paired"));
        }
        if low.iter().zip(&high).any(|(l, h)| !l.is_finite() || !h.is_finite() || l >= h) {
            return Err(DceError::invalid("action bounds must satisfy low < high"));
        }
        if net.out_dim() != 2 * low.len() {
            return Err(DceError::shape(format!(
                "policy head emits {} values, expected {}",
                net.out_dim(),
                2 * low.len()
            )));
        }
        Ok(Self { net, low, high })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn state_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.low.len()
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.low, &self.high)
    }

    /// Draws standard-normal noise and samples one action per row.
    pub fn sample<R: Rng + ?Sized>(&self, states: &Array2<f64>, rng: &mut R) -> Result<PolicySample> {
        let noise = Array2::from_shape_fn((states.nrows(), self.action_dim()), |_| rng.sample(StandardNormal));
        self.sample_with_noise(states, noise)
    }

    /// Deterministic mode: zero noise.
    pub fn mode(&self, states: &Array2<f64>) -> Result<Array2<f64>> {
        let noise = Array2::zeros((states.nrows(), self.action_dim()));
        Ok(self.sample_with_noise(states, noise)?.actions)
    }

    pub fn sample_with_noise(&self, states: &Array2<f64>, noise: Array2<f64>) -> Result<PolicySample> {
        let ad = self.action_dim();
        if noise.dim() != (states.nrows(), ad) {
            return Err(DceError::shape("noise must be [batch, action_dim]"));
        }
        let (out, cache) = self.net.forward_cached(states)?;
        let mean = out.slice(s![.., ..ad]);
        let raw = out.slice(s![.., ad..]);
        let log_std = raw.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        let log_std_free = raw.mapv(|v| v > LOG_STD_MIN && v < LOG_STD_MAX);
        let std = log_std.mapv(f64::exp);
        let pre_tanh = &mean + &(&std * &noise);

        let batch = states.nrows();
        let mut actions = Array2::zeros((batch, ad));
        let mut log_prob = Array1::zeros(batch);
        for b in 0..batch {
            let mut lp = 0.0;
            for i in 0..ad {
                let u = pre_tanh[[b, i]];
                let half = 0.5 * (self.high[i] - self.low[i]);
                let mid = 0.5 * (self.high[i] + self.low[i]);
                actions[[b, i]] = mid + half * u.tanh();
                let e = noise[[b, i]];
                lp += -0.5 * e * e - log_std[[b, i]] - 0.5 * (2.0 * PI).ln() - half.ln() - log_one_minus_tanh_sq(u);
            }
            log_prob[b] = lp;
        }
        Ok(PolicySample { actions, log_prob, cache, noise, pre_tanh, std, log_std_free })
    }

    /// Parameter gradients of a scalar loss given its sensitivity to the
    /// sampled actions and to their log-densities, with the noise held fixed.
    pub fn backward(&self, sample: &PolicySample, d_actions: &Array2<f64>, d_log_prob: &Array1<f64>) -> Result<MlpGrads> {
        let ad = self.action_dim();
        let batch = sample.actions.nrows();
        if d_actions.dim() != (batch, ad) || d_log_prob.len() != batch {
            return Err(DceError::shape("upstream gradients do not match the sample"));
        }
        let mut upstream = Array2::zeros((batch, 2 * ad));
        for b in 0..batch {
            for i in 0..ad {
                let t = sample.pre_tanh[[b, i]].tanh();
                let half = 0.5 * (self.high[i] - self.low[i]);
                // d log π / du = 2 tanh(u); da/du = half·(1 − tanh²u)
                let d_u = d_actions[[b, i]] * half * (1.0 - t * t) + d_log_prob[b] * 2.0 * t;
                upstream[[b, i]] = d_u;
                let d_log_std = d_u * sample.std[[b, i]] * sample.noise[[b, i]] - d_log_prob[b];
                upstream[[b, ad + i]] = if sample.log_std_free[[b, i]] { d_log_std } else { 0.0 };
            }
        }
        Ok(self.net.backward(&sample.cache, &upstream)?.0)
    }

    /// Mean of `log_std` over a batch; used for diagnostics.
    pub fn mean_log_std(&self, states: &Array2<f64>) -> Result<f64> {
        let out = self.net.forward(states)?;
        let ls = out.slice(s![.., self.action_dim()..]).mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Ok(ls.mean_axis(Axis(0)).map_or(0.0, |m| m.mean().unwrap_or(0.0)))
    }
}

/// Single-state convenience wrapper around [`GaussianPolicyNet::sample`].
pub fn sample_action<R: Rng + ?Sized>(policy: &GaussianPolicyNet, state: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
    let states = Array2::from_shape_vec((1, state.len()), state.to_vec()).map_err(|e| DceError::shape(e.to_string()))?;
    let s = policy.sample(&states, rng)?;
    Ok((s.actions.row(0).to_vec(), s.log_prob[0]))
}

/// Differential entropy range of the pre-squash Gaussian allowed by the
/// log-std clamp, per action dimension: `(min, max)`.
pub fn gaussian_entropy_bounds() -> (f64, f64) {
    let h = |ls: f64| 0.5 * (2.0 * PI * std::f64::consts::E).ln() + ls;
    (h(LOG_STD_MIN), h(LOG_STD_MAX))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(low: f64, high: f64, seed: u64) -> GaussianPolicyNet {
        GaussianPolicyNet::new(1, &[16, 16], vec![low], vec![high], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_noise_is_rescaled_tanh_mean() {
        let p = policy(-0.2, 0.2, 3);
        let s = array![[0.4]];
        let mean = p.net().forward(&s).unwrap()[[0, 0]];
        let a = p.mode(&s).unwrap()[[0, 0]];
        assert!((a - 0.2 * mean.tanh()).abs() < 1e-15);
    }

    #[test]
    fn samples_stay_inside_bounds() {
        let p = policy(-0.2, 0.2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let states = Array2::from_shape_fn((512, 1), |(i, _)| -1.0 + 2.0 * i as f64 / 511.0);
        for _ in 0..4 {
            let smp = p.sample(&states, &mut rng).unwrap();
            assert!(smp.actions.iter().all(|&a| a > -0.2 && a < 0.2));
            assert!(smp.log_prob.iter().all(|lp| lp.is_finite()));
        }
    }

    #[test]
    fn stable_log_jacobian() {
        for u in [-50.0, -3.0, 0.0, 0.7, 40.0] {
            let direct = (1.0 - f64::tanh(u).powi(2)).ln();
            let stable = log_one_minus_tanh_sq(u);
            if direct.is_finite() {
                assert!((direct - stable).abs() < 1e-9, "u={u}");
            } else {
                assert!(stable.is_finite());
            }
        }
    }

    #[test]
    fn clamp_bounds_entropy() {
        let (lo, hi) = gaussian_entropy_bounds();
        let mut p = policy(-1.0, 1.0, 0);
        // force extreme raw log-std through the output bias
        let last = p.net_mut().layers_mut().last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias[1] = 100.0;
        let ls = p.mean_log_std(&array![[0.0]]).unwrap();
        assert_eq!(ls, LOG_STD_MAX);
        let h = 0.5 * (2.0 * PI * std::f64::consts::E).ln() + ls;
        assert!(h <= hi && h >= lo);
    }

    #[test]
    fn rejects_bad_bounds() {
        let net = Mlp::new(&[1, 4, 2], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(GaussianPolicyNet::from_parts(net.clone(), vec![1.0], vec![-1.0]).is_err());
        assert!(GaussianPolicyNet::from_parts(net, vec![-1.0, -1.0], vec![1.0, 1.0]).is_err());
    }
}
