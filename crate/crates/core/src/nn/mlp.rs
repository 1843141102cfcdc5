use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;

use crate::error::{DceError, Result};

/// Affine map `y = x · weight + bias`, weight stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Self {
        Layer { weight: Array2::zeros(self.weight.raw_dim()), bias: Array1::zeros(self.bias.len()) }
    }
}

/// Fully connected network: ReLU on hidden layers, identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Activations recorded by [`Mlp::forward_cached`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input of every layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of every hidden layer.
    hidden_pre: Vec<Array2<f64>>,
}

impl MlpCache {
    /// ReLU gate pattern of the hidden layers, `true` where the unit is active.
    pub fn active_units(&self) -> impl Iterator<Item = bool> + '_ {
        self.hidden_pre.iter().flat_map(|z| z.iter().map(|&v| v > 0.0))
    }
}

/// Parameter gradients with the same layout as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
}

impl MlpGrads {
    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weight *= k;
            l.bias *= k;
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        layer_slices(&self.layers)
    }

    /// Flattened copy in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

fn layer_slices(layers: &[Layer]) -> Vec<&[f64]> {
    layers
        .iter()
        .flat_map(|l| {
            [
                l.weight.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
        .collect()
}

impl Mlp {
    /// Uniform fan-in initialization `U(−1/√in, 1/√in)` for weights and biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(DceError::invalid(format!("bad layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-bound..bound));
                let bias = Array1::from_shape_fn(w[1], |_| rng.random_range(-bound..bound));
                Layer { weight, bias }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(DceError::invalid("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.ncols() != l.bias.len() {
                return Err(DceError::shape(format!("layer {i}: bias does not match weight columns")));
            }
            if i > 0 && layers[i - 1].weight.ncols() != l.weight.nrows() {
                return Err(DceError::shape(format!("layer {i}: input width mismatch")));
            }
        }
        // Standard layout is required for the flat parameter views.
        let layers = layers
            .into_iter()
            .map(|l| Layer { weight: l.weight.as_standard_layout().into_owned(), bias: l.bias.to_owned() })
            .collect();
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.ncols()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.in_dim()).chain(self.layers.iter().map(|l| l.weight.ncols())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        layer_slices(&self.layers)
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads { layers: self.layers.iter().map(Layer::zeros_like).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(DceError::shape(format!("input width {} but network expects {}", x.ncols(), self.in_dim())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            h = h.dot(&l.weight) + &l.bias;
            if i < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Forward pass that records what [`Mlp::backward`] needs.
    pub fn forward_cached(&self, x: &Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut hidden_pre = Vec::with_capacity(last);
        let mut h = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let z = h.dot(&l.weight) + &l.bias;
            inputs.push(h);
            if i < last {
                h = z.mapv(|v| v.max(0.0));
                hidden_pre.push(z);
            } else {
                h = z;
            }
        }
        Ok((h, MlpCache { inputs, hidden_pre }))
    }

    /// Reverse pass: parameter gradients and the gradient with respect to
    /// the network input, given `dL/d(output)`.
    pub fn backward(&self, cache: &MlpCache, upstream: &Array2<f64>) -> Result<(MlpGrads, Array2<f64>)> {
        if cache.inputs.len() != self.layers.len() || cache.hidden_pre.len() + 1 != self.layers.len() {
            return Err(DceError::shape("cache was recorded on a different network"));
        }
        let batch = cache.inputs[0].nrows();
        if upstream.nrows() != batch || upstream.ncols() != self.out_dim() {
            return Err(DceError::shape(format!(
                "upstream gradient is {:?}, expected [{batch}, {}]",
                upstream.shape(),
                self.out_dim()
            )));
        }
        for (l, x) in self.layers.iter().zip(&cache.inputs) {
            if x.ncols() != l.weight.nrows() || x.nrows() != batch {
                return Err(DceError::shape("cache was recorded on a different network"));
            }
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            // flat gradient views need standard layout
            let weight = cache.inputs[i].t().dot(&delta).as_standard_layout().into_owned();
            let bias = delta.sum_axis(Axis(0));
            grads.push(Layer { weight, bias });
            let mut back = delta.dot(&l.weight.t());
            if i > 0 {
                Zip::from(&mut back).and(&cache.hidden_pre[i - 1]).for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            delta = back;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, delta))
    }
}

/// `target ← (1 − υ)·target + υ·online`, elementwise.
pub fn soft_update(target: &mut Mlp, online: &Mlp, upsilon: f64) -> Result<()> {
    if !(upsilon > 0.0 && upsilon <= 1.0) {
        return Err(DceError::invalid(format!("smoothing coefficient {upsilon} outside (0,1]")));
    }
    if target.layer_sizes() != online.layer_sizes() {
        return Err(DceError::shape("target and online networks differ in shape"));
    }
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        Zip::from(&mut t.weight).and(&o.weight).for_each(|t, &o| *t = (1.0 - upsilon) * *t + upsilon * o);
        Zip::from(&mut t.bias).and(&o.bias).for_each(|t, &o| *t = (1.0 - upsilon) * *t + upsilon * o);
    }
    Ok(())
}
