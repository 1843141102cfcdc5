use crate::error::{DceError, Result};
use crate::nn::mlp::{Mlp, MlpGrads};

pub const DEFAULT_LR: f64 = 3e-4;

/// Bias-corrected Adam over a fixed list of flat parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Moments are allocated on the first call and the
    /// tensor shapes are fixed from then on.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            return Err(DceError::shape("parameter and gradient tensors differ"));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(DceError::NonFiniteGradient(format!("tensor {i}, element {j}: {}", g[j])));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(DceError::shape("optimizer state was built for different tensors"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_mlp(&mut self, net: &mut Mlp, grads: &MlpGrads) -> Result<()> {
        self.step(&mut net.param_slices_mut(), &grads.slices())
    }

    pub fn step_scalar(&mut self, param: &mut f64, grad: f64) -> Result<()> {
        let mut p = [*param];
        self.step(&mut [&mut p[..]], &[&[grad][..]])?;
        *param = p[0];
        Ok(())
    }
}
