//! Test-side oracles: an independent ReLU network evaluator, the loss
//! formulas re-derived from scratch, and a finite-difference driver.
//!
//! Perturbed losses are evaluated as exact differences `L(θ + d·e_p) − L(θ)`
//! propagated through the network in delta form, so a perturbation costs
//! work proportional to the affected units rather than a full forward pass,
//! and small differences do not cancel against large loss values.

#![allow(dead_code)]

use dce_core::losses::Batch;
use dce_core::nn::{GaussianPolicyNet, Mlp};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct ONet {
    pub sizes: Vec<usize>,
    /// Row-major `[in, out]` per layer.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Trace {
    /// Input of every layer.
    pub hs: Vec<Vec<f64>>,
    /// Pre-activation of every layer, the last one being the output.
    pub zs: Vec<Vec<f64>>,
}

impl Trace {
    pub fn out(&self) -> &[f64] {
        self.zs.last().unwrap()
    }

    pub fn gates(&self) -> impl Iterator<Item = bool> + '_ {
        self.zs[..self.zs.len() - 1].iter().flatten().map(|&z| z > 0.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Param {
    W { layer: usize, i: usize, j: usize },
    B { layer: usize, j: usize },
}

impl ONet {
    pub fn from_mlp(m: &Mlp) -> Self {
        Self {
            sizes: m.layer_sizes(),
            w: m.layers().iter().map(|l| l.weight.iter().copied().collect()).collect(),
            b: m.layers().iter().map(|l| l.bias.to_vec()).collect(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        (0..self.n_layers()).map(|l| self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1]).sum()
    }

    /// Parameter order: weights then bias, layer by layer.
    pub fn locate(&self, mut p: usize) -> Param {
        for layer in 0..self.n_layers() {
            let (n_in, n_out) = (self.sizes[layer], self.sizes[layer + 1]);
            if p < n_in * n_out {
                return Param::W { layer, i: p / n_out, j: p % n_out };
            }
            p -= n_in * n_out;
            if p < n_out {
                return Param::B { layer, j: p };
            }
            p -= n_out;
        }
        panic!("parameter index out of range");
    }

    pub fn param_mut(&mut self, p: Param) -> &mut f64 {
        match p {
            Param::W { layer, i, j } => &mut self.w[layer][i * self.sizes[layer + 1] + j],
            Param::B { layer, j } => &mut self.b[layer][j],
        }
    }

    pub fn trace(&self, x: &[f64]) -> Trace {
        assert_eq!(x.len(), self.sizes[0]);
        let nl = self.n_layers();
        let mut hs = vec![x.to_vec()];
        let mut zs = Vec::with_capacity(nl);
        for l in 0..nl {
            let n_out = self.sizes[l + 1];
            let mut z = self.b[l].clone();
            for (i, &hi) in hs[l].iter().enumerate() {
                if hi != 0.0 {
                    let row = &self.w[l][i * n_out..(i + 1) * n_out];
                    for (zj, wj) in z.iter_mut().zip(row) {
                        *zj += hi * wj;
                    }
                }
            }
            if l + 1 < nl {
                hs.push(z.iter().map(|v| v.max(0.0)).collect());
            }
            zs.push(z);
        }
        Trace { hs, zs }
    }

    pub fn out(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).out().to_vec()
    }

    /// Output change caused by a pre-activation change `dz` at `layer`;
    /// `None` if a hidden unit changes side of its ReLU kink.
    fn propagate(&self, tr: &Trace, mut layer: usize, mut dz: Vec<f64>) -> Option<Vec<f64>> {
        let nl = self.n_layers();
        loop {
            if layer == nl - 1 {
                return Some(dz);
            }
            let z = &tr.zs[layer];
            let n_out = self.sizes[layer + 2];
            let mut next = vec![0.0; n_out];
            for (k, &d) in dz.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                if (z[k] + d > 0.0) != (z[k] > 0.0) {
                    return None;
                }
                if z[k] > 0.0 {
                    let row = &self.w[layer + 1][k * n_out..(k + 1) * n_out];
                    for (nm, wm) in next.iter_mut().zip(row) {
                        *nm += d * wm;
                    }
                }
            }
            dz = next;
            layer += 1;
        }
    }

    /// `f(θ + d·e_p)(x) − f(θ)(x)` for the row recorded in `tr`.
    pub fn param_delta(&self, tr: &Trace, p: Param, d: f64) -> Option<Vec<f64>> {
        let (layer, j, dz) = match p {
            Param::W { layer, i, j } => (layer, j, d * tr.hs[layer][i]),
            Param::B { layer, j } => (layer, j, d),
        };
        let mut delta = vec![0.0; self.sizes[layer + 1]];
        delta[j] = dz;
        self.propagate(tr, layer, delta)
    }

    /// `f(x + dx) − f(x)`.
    pub fn input_delta(&self, tr: &Trace, dx: &[f64]) -> Option<Vec<f64>> {
        let n_out = self.sizes[1];
        let mut dz = vec![0.0; n_out];
        for (i, &d) in dx.iter().enumerate() {
            if d != 0.0 {
                for (zj, wj) in dz.iter_mut().zip(&self.w[0][i * n_out..(i + 1) * n_out]) {
                    *zj += d * wj;
                }
            }
        }
        self.propagate(tr, 0, dz)
    }

    /// Directional derivative along `dx` with the gate pattern of `tr` held
    /// fixed (forward mode).
    pub fn directional(&self, tr: &Trace, dx: &[f64]) -> f64 {
        let nl = self.n_layers();
        let mut t: Vec<f64> = dx.to_vec();
        for l in 0..nl {
            let n_out = self.sizes[l + 1];
            let mut next = vec![0.0; n_out];
            for (k, &d) in t.iter().enumerate() {
                if d != 0.0 {
                    for (nm, wm) in next.iter_mut().zip(&self.w[l][k * n_out..(k + 1) * n_out]) {
                        *nm += d * wm;
                    }
                }
            }
            if l + 1 < nl {
                for (v, z) in next.iter_mut().zip(&tr.zs[l]) {
                    if *z <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            t = next;
        }
        t[0]
    }
}

/// `ln cosh u`, stable for large |u|.
fn ln_cosh(u: f64) -> f64 {
    let a = u.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// `ln cosh(u + d) − ln cosh u` without cancellation.
fn ln_cosh_delta(u: f64, d: f64) -> f64 {
    let sh = (0.5 * d).sinh();
    (2.0 * sh * sh + u.tanh() * d.sinh()).ln_1p()
}

#[derive(Debug, Clone)]
pub struct OPolicy {
    pub net: ONet,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PolicyRow {
    pub trace: Trace,
    pub raw: Vec<f64>,
    pub std: Vec<f64>,
    pub eps: Vec<f64>,
    pub u: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
}

impl OPolicy {
    pub fn from_policy(p: &GaussianPolicyNet) -> Self {
        let (low, high) = p.bounds();
        Self { net: ONet::from_mlp(p.net()), low: low.to_vec(), high: high.to_vec() }
    }

    pub fn ad(&self) -> usize {
        self.low.len()
    }

    fn half(&self, i: usize) -> f64 {
        0.5 * (self.high[i] - self.low[i])
    }

    pub fn row(&self, state: &[f64], eps: &[f64]) -> PolicyRow {
        let ad = self.ad();
        let trace = self.net.trace(state);
        let out = trace.out().to_vec();
        let raw = out[ad..].to_vec();
        let std: Vec<f64> = raw.iter().map(|r| r.clamp(LOG_STD_MIN, LOG_STD_MAX).exp()).collect();
        let u: Vec<f64> = (0..ad).map(|i| out[i] + std[i] * eps[i]).collect();
        let action = (0..ad).map(|i| 0.5 * (self.high[i] + self.low[i]) + self.half(i) * u[i].tanh()).collect();
        // N(u; μ, σ) density pushed through a = mid + half·tanh(u)
        let log_prob = (0..ad)
            .map(|i| {
                -0.5 * eps[i] * eps[i] - std[i].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - self.half(i).ln()
                    + 2.0 * ln_cosh(u[i])
            })
            .sum();
        PolicyRow { trace, raw, std, eps: eps.to_vec(), u, action, log_prob }
    }

    /// `(Δaction, Δlog π)` for a change `dout` of the network output; `None`
    /// when the log-std clamp switches on or off.
    pub fn row_delta(&self, row: &PolicyRow, dout: &[f64]) -> Option<(Vec<f64>, f64)> {
        let ad = self.ad();
        let mut da = vec![0.0; ad];
        let mut dlp = 0.0;
        for i in 0..ad {
            let raw = row.raw[i];
            let inside = |r: f64| r > LOG_STD_MIN && r < LOG_STD_MAX;
            if inside(raw) != inside(raw + dout[ad + i]) {
                return None;
            }
            let dls = if inside(raw) { dout[ad + i] } else { 0.0 };
            let du = dout[i] + row.std[i] * dls.exp_m1() * row.eps[i];
            let t = row.u[i].tanh();
            let dt = du.tanh() * (1.0 - t * (row.u[i] + du).tanh());
            da[i] = self.half(i) * dt;
            dlp += -dls + 2.0 * ln_cosh_delta(row.u[i], du);
        }
        Some((da, dlp))
    }
}

pub fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    [a, b].concat()
}

/// Standard-normal draws in the order the library consumes them.
pub fn draw_noise(rng: &mut ChaCha8Rng, n: usize, ad: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..ad).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

pub fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// Squared regression onto fixed targets plus `β·mean Q` over penalty rows.
#[derive(Debug, Clone)]
pub struct QProblem {
    pub data_inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub penalty_inputs: Vec<Vec<f64>>,
    pub beta: f64,
}

impl QProblem {
    pub fn value(&self, q: &ONet) -> f64 {
        let n = self.targets.len() as f64;
        let td: f64 = self.data_inputs.iter().zip(&self.targets).map(|(x, y)| (y - q.out(x)[0]).powi(2)).sum();
        let pen = if self.penalty_inputs.is_empty() {
            0.0
        } else {
            self.beta * self.penalty_inputs.iter().map(|x| q.out(x)[0]).sum::<f64>() / self.penalty_inputs.len() as f64
        };
        td / n + pen
    }

    pub fn gates(&self, q: &ONet) -> Vec<bool> {
        self.data_inputs.iter().chain(&self.penalty_inputs).flat_map(|x| q.trace(x).gates().collect::<Vec<_>>()).collect()
    }
}

/// Cached traces of a [`QProblem`] for delta evaluation.
pub struct QDelta<'a> {
    problem: &'a QProblem,
    net: &'a ONet,
    data: Vec<Trace>,
    pen: Vec<Trace>,
}

impl<'a> QDelta<'a> {
    pub fn new(problem: &'a QProblem, net: &'a ONet) -> Self {
        let data = problem.data_inputs.iter().map(|x| net.trace(x)).collect();
        let pen = problem.penalty_inputs.iter().map(|x| net.trace(x)).collect();
        Self { problem, net, data, pen }
    }

    pub fn delta(&self, p: usize, d: f64) -> Option<f64> {
        let param = self.net.locate(p);
        let n = self.data.len() as f64;
        let mut td = 0.0;
        for (tr, y) in self.data.iter().zip(&self.problem.targets) {
            let dq = self.net.param_delta(tr, param, d)?[0];
            td += dq * dq - 2.0 * dq * (y - tr.out()[0]);
        }
        let mut pen = 0.0;
        for tr in &self.pen {
            pen += self.net.param_delta(tr, param, d)?[0];
        }
        let pen = if self.pen.is_empty() { 0.0 } else { self.problem.beta * pen / self.pen.len() as f64 };
        Some(td / n + pen)
    }
}

/// Expectile regression of `V(s)` onto fixed `Q` values.
#[derive(Debug, Clone)]
pub struct VProblem {
    pub states: Vec<Vec<f64>>,
    pub q_values: Vec<f64>,
    pub tau: f64,
}

impl VProblem {
    pub fn value(&self, v: &ONet) -> f64 {
        let n = self.states.len() as f64;
        self.states
            .iter()
            .zip(&self.q_values)
            .map(|(s, q)| {
                let u = q - v.out(s)[0];
                expectile_weight(u, self.tau) * u * u
            })
            .sum::<f64>()
            / n
    }

    pub fn gates(&self, v: &ONet) -> Vec<bool> {
        self.states
            .iter()
            .zip(&self.q_values)
            .flat_map(|(s, q)| {
                let tr = v.trace(s);
                let mut g: Vec<bool> = tr.gates().collect();
                g.push(q - tr.out()[0] < 0.0);
                g
            })
            .collect()
    }
}

pub struct VDelta<'a> {
    problem: &'a VProblem,
    net: &'a ONet,
    traces: Vec<Trace>,
}

impl<'a> VDelta<'a> {
    pub fn new(problem: &'a VProblem, net: &'a ONet) -> Self {
        let traces = problem.states.iter().map(|s| net.trace(s)).collect();
        Self { problem, net, traces }
    }

    pub fn delta(&self, p: usize, d: f64) -> Option<f64> {
        let param = self.net.locate(p);
        let mut total = 0.0;
        for (tr, q) in self.traces.iter().zip(&self.problem.q_values) {
            let dv = self.net.param_delta(tr, param, d)?[0];
            let u = q - tr.out()[0];
            if (u - dv < 0.0) != (u < 0.0) {
                return None;
            }
            total += expectile_weight(u, self.problem.tau) * (dv * dv - 2.0 * u * dv);
        }
        Some(total / self.traces.len() as f64)
    }
}

/// Reparameterized actor objective `mean(α·log π − Q(s, a))` with fixed noise.
#[derive(Debug, Clone)]
pub struct PolicyProblem {
    pub states: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
    pub alpha: f64,
}

impl PolicyProblem {
    pub fn value(&self, pol: &OPolicy, q: &ONet) -> f64 {
        let n = self.states.len() as f64;
        self.states
            .iter()
            .zip(&self.noise)
            .map(|(s, e)| {
                let r = pol.row(s, e);
                self.alpha * r.log_prob - q.out(&concat(s, &r.action))[0]
            })
            .sum::<f64>()
            / n
    }

    pub fn gates(&self, pol: &OPolicy, q: &ONet) -> Vec<bool> {
        self.states
            .iter()
            .zip(&self.noise)
            .flat_map(|(s, e)| {
                let r = pol.row(s, e);
                let mut g: Vec<bool> = r.trace.gates().collect();
                g.extend(r.raw.iter().map(|&x| x > LOG_STD_MIN && x < LOG_STD_MAX));
                g.extend(q.trace(&concat(s, &r.action)).gates());
                g
            })
            .collect()
    }
}

/// Delta evaluation of [`PolicyProblem`] for one-dimensional actions. Within
/// a segment where the critic's gate pattern is constant, `Q(s, ·)` is
/// affine, so small action changes are priced with its slope; larger ones
/// fall back to an exact delta pass through the critic.
pub struct PolicyDelta<'a> {
    problem: &'a PolicyProblem,
    pol: &'a OPolicy,
    q: &'a ONet,
    rows: Vec<PolicyRow>,
    q_traces: Vec<Trace>,
    slopes: Vec<f64>,
    half_widths: Vec<f64>,
}

impl<'a> PolicyDelta<'a> {
    pub fn new(problem: &'a PolicyProblem, pol: &'a OPolicy, q: &'a ONet) -> Self {
        assert_eq!(pol.ad(), 1, "segment pricing assumes a scalar action");
        let sd = problem.states[0].len();
        let rows: Vec<PolicyRow> = problem.states.iter().zip(&problem.noise).map(|(s, e)| pol.row(s, e)).collect();
        let q_traces: Vec<Trace> =
            problem.states.iter().zip(&rows).map(|(s, r)| q.trace(&concat(s, &r.action))).collect();
        let mut dir = vec![0.0; sd + 1];
        dir[sd] = 1.0;
        let slopes = q_traces.iter().map(|tr| q.directional(tr, &dir)).collect();
        let half_widths = q_traces
            .iter()
            .map(|tr| {
                // widest segment around the action with one gate pattern
                [1e-5, 1e-6, 1e-7, 1e-8, 1e-9]
                    .into_iter()
                    .find(|&w| {
                        let mut dx = vec![0.0; sd + 1];
                        dx[sd] = w;
                        let plus = q.input_delta(tr, &dx).is_some();
                        dx[sd] = -w;
                        plus && q.input_delta(tr, &dx).is_some()
                    })
                    .unwrap_or(0.0)
            })
            .collect();
        Self { problem, pol, q, rows, q_traces, slopes, half_widths }
    }

    pub fn delta(&self, p: usize, d: f64) -> Option<f64> {
        let param = self.pol.net.locate(p);
        let sd = self.problem.states[0].len();
        let mut total = 0.0;
        for (r, row) in self.rows.iter().enumerate() {
            let dout = self.pol.net.param_delta(&row.trace, param, d)?;
            if dout.iter().all(|&x| x == 0.0) {
                continue;
            }
            let (da, dlp) = self.pol.row_delta(row, &dout)?;
            let dq = if da[0].abs() <= self.half_widths[r] {
                self.slopes[r] * da[0]
            } else {
                let mut dx = vec![0.0; sd + 1];
                dx[sd] = da[0];
                self.q.input_delta(&self.q_traces[r], &dx)?[0]
            };
            total += self.problem.alpha * dlp - dq;
        }
        Some(total / self.rows.len() as f64)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FdStats {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel: f64,
    pub worst: Option<(usize, f64, f64)>,
}

impl FdStats {
    pub fn merge(&mut self, other: &FdStats) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences `(Δ(+h) − Δ(−h)) / 2h` for every parameter, where
/// `delta(p, d)` returns `L(θ + d·e_p) − L(θ)` or `None` at a kink.
pub fn check_all(analytic: &[f64], h: f64, floor: f64, delta: impl Fn(usize, f64) -> Option<f64>) -> FdStats {
    let mut stats = FdStats::default();
    for (p, &a) in analytic.iter().enumerate() {
        let (Some(up), Some(down)) = (delta(p, h), delta(p, -h)) else {
            stats.skipped += 1;
            continue;
        };
        let numeric = (up - down) / (2.0 * h);
        let rel = rel_error(a, numeric, floor);
        stats.checked += 1;
        if rel > stats.max_rel || stats.worst.is_none() {
            stats.max_rel = stats.max_rel.max(rel);
            stats.worst = Some((p, a, numeric));
        }
    }
    stats
}

/// Plain central differences by re-evaluating the whole loss; parameters
/// whose perturbation changes any entry of `gates` are skipped.
pub fn check_brute<N: Clone>(
    analytic: &[f64],
    h: f64,
    floor: f64,
    base: &N,
    n_params: usize,
    perturb: impl Fn(&mut N, usize, f64),
    eval: impl Fn(&N) -> (f64, Vec<bool>),
) -> FdStats {
    assert_eq!(analytic.len(), n_params);
    let base_gates = eval(base).1;
    let mut stats = FdStats::default();
    for (p, &a) in analytic.iter().enumerate() {
        let mut plus = base.clone();
        perturb(&mut plus, p, h);
        let mut minus = base.clone();
        perturb(&mut minus, p, -h);
        let (lp, gp) = eval(&plus);
        let (lm, gm) = eval(&minus);
        if gp != base_gates || gm != base_gates {
            stats.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * h);
        let rel = rel_error(a, numeric, floor);
        stats.checked += 1;
        if rel > stats.max_rel || stats.worst.is_none() {
            stats.max_rel = stats.max_rel.max(rel);
            stats.worst = Some((p, a, numeric));
        }
    }
    stats
}

/// Random batch with states in `[−1, 1]`, actions inside the policy box and
/// roughly one terminal transition in five.
pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, sd: usize, low: &[f64], high: &[f64]) -> Batch {
    let ad = low.len();
    Batch {
        states: Array2::from_shape_fn((n, sd), |_| rng.random_range(-1.0..1.0)),
        actions: Array2::from_shape_fn((n, ad), |(_, j)| rng.random_range(low[j]..high[j])),
        rewards: Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0)),
        next_states: Array2::from_shape_fn((n, sd), |_| rng.random_range(-1.0..1.0)),
        dones: Array1::from_shape_fn(n, |_| if rng.random_bool(0.2) { 1.0 } else { 0.0 }),
    }
}

pub fn masked(batch: &Batch, i: usize) -> f64 {
    1.0 - batch.dones[i]
}

/// Oracle problems for each loss, rebuilt from raw networks and the same
/// noise stream the library draws from `seed`.
pub fn dce_problem(batch: &Batch, v: &ONet, pol: &OPolicy, gamma: f64, beta: f64, seed: u64) -> QProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch.len();
    let s = rows(&batch.states);
    let a = rows(&batch.actions);
    let sp = rows(&batch.next_states);
    let noise = draw_noise(&mut rng, n, pol.ad());
    QProblem {
        data_inputs: (0..n).map(|i| concat(&s[i], &a[i])).collect(),
        targets: (0..n).map(|i| batch.rewards[i] + gamma * masked(batch, i) * v.out(&sp[i])[0]).collect(),
        penalty_inputs: (0..n).map(|i| concat(&s[i], &pol.row(&s[i], &noise[i]).action)).collect(),
        beta,
    }
}

pub fn cql_problem(batch: &Batch, q_target: &ONet, pol: &OPolicy, gamma: f64, alpha_cql: f64, seed: u64) -> QProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch.len();
    let s = rows(&batch.states);
    let a = rows(&batch.actions);
    let sp = rows(&batch.next_states);
    let next_noise = draw_noise(&mut rng, n, pol.ad());
    let pen_noise = draw_noise(&mut rng, n, pol.ad());
    QProblem {
        data_inputs: (0..n).map(|i| concat(&s[i], &a[i])).collect(),
        targets: (0..n)
            .map(|i| {
                let a2 = pol.row(&sp[i], &next_noise[i]).action;
                batch.rewards[i] + gamma * masked(batch, i) * q_target.out(&concat(&sp[i], &a2))[0]
            })
            .collect(),
        penalty_inputs: (0..n).map(|i| concat(&s[i], &pol.row(&s[i], &pen_noise[i]).action)).collect(),
        beta: alpha_cql,
    }
}

pub fn soft_problem(batch: &Batch, q_target: &ONet, pol: &OPolicy, gamma: f64, alpha: f64, seed: u64) -> QProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch.len();
    let s = rows(&batch.states);
    let a = rows(&batch.actions);
    let sp = rows(&batch.next_states);
    let next_noise = draw_noise(&mut rng, n, pol.ad());
    QProblem {
        data_inputs: (0..n).map(|i| concat(&s[i], &a[i])).collect(),
        targets: (0..n)
            .map(|i| {
                let r = pol.row(&sp[i], &next_noise[i]);
                let soft = q_target.out(&concat(&sp[i], &r.action))[0] - alpha * r.log_prob;
                batch.rewards[i] + gamma * masked(batch, i) * soft
            })
            .collect(),
        penalty_inputs: vec![],
        beta: 0.0,
    }
}

pub fn v_problem(batch: &Batch, q_target: &ONet, tau: f64) -> VProblem {
    let s = rows(&batch.states);
    let a = rows(&batch.actions);
    VProblem {
        q_values: (0..batch.len()).map(|i| q_target.out(&concat(&s[i], &a[i]))[0]).collect(),
        states: s,
        tau,
    }
}

pub fn policy_problem(states: &Array2<f64>, ad: usize, alpha: f64, seed: u64) -> PolicyProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PolicyProblem { states: rows(states), noise: draw_noise(&mut rng, states.nrows(), ad), alpha }
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

/// One finite-difference verdict per loss.
#[derive(Debug, Clone)]
pub struct LossCheck {
    pub name: &'static str,
    /// Library value against the oracle's independent evaluation.
    pub value_lib: f64,
    pub value_oracle: f64,
    pub stats: FdStats,
}

impl LossCheck {
    pub fn value_ok(&self) -> bool {
        close(self.value_lib, self.value_oracle, 1e-9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdMode {
    /// Exact deltas through cached traces.
    Incremental,
    /// Full re-evaluation of the loss for every perturbation.
    Brute,
}

#[derive(Debug, Clone)]
pub struct FdSetup {
    pub state_dim: usize,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub hidden: Vec<usize>,
    pub critic_batch: usize,
    pub policy_batch: usize,
    pub gamma: f64,
    pub beta: f64,
    pub tau: f64,
    pub alpha: f64,
    pub h: f64,
    pub floor: f64,
    pub mode: FdMode,
}

/// Builds fresh networks and a random batch from `seed`, then checks every
/// loss's analytic gradients against central differences.
pub fn run_fd_suite(setup: &FdSetup, seed: u64) -> Vec<LossCheck> {
    use dce_core::losses::{
        alpha_loss, policy_loss_sac, q_loss_cql_variant, q_loss_dce, q_loss_soft_bellman, state_action, v_loss,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sd, ad) = (setup.state_dim, setup.low.len());
    let mut sizes = vec![sd + ad];
    sizes.extend(&setup.hidden);
    sizes.push(1);
    let q = Mlp::new(&sizes, &mut rng).unwrap();
    let q_target = Mlp::new(&sizes, &mut rng).unwrap();
    sizes[0] = sd;
    let v = Mlp::new(&sizes, &mut rng).unwrap();
    let policy = GaussianPolicyNet::new(sd, &setup.hidden, setup.low.clone(), setup.high.clone(), &mut rng).unwrap();
    let batch = random_batch(&mut rng, setup.critic_batch, sd, &setup.low, &setup.high);
    let pol_states = batch.states.slice(ndarray::s![..setup.policy_batch, ..]).to_owned();
    let noise_seed = seed ^ 0x5eed;
    let lib_rng = || ChaCha8Rng::seed_from_u64(noise_seed);

    let oq = ONet::from_mlp(&q);
    let oqt = ONet::from_mlp(&q_target);
    let ov = ONet::from_mlp(&v);
    let opol = OPolicy::from_policy(&policy);
    let (h, floor) = (setup.h, setup.floor);
    let mut out = Vec::new();

    let q_check = |name: &'static str, lib: dce_core::losses::LossOutput, prob: QProblem| {
        let analytic = lib.grads.q.expect("Q gradients").flatten();
        let stats = match setup.mode {
            FdMode::Incremental => {
                let d = QDelta::new(&prob, &oq);
                check_all(&analytic, h, floor, |p, x| d.delta(p, x))
            }
            FdMode::Brute => check_brute(
                &analytic,
                h,
                floor,
                &oq,
                oq.n_params(),
                |n, p, x| *n.param_mut(n.locate(p)) += x,
                |n| (prob.value(n), prob.gates(n)),
            ),
        };
        LossCheck { name, value_lib: lib.value, value_oracle: prob.value(&oq), stats }
    };

    let lib = q_loss_dce(&batch, &v, &q, &policy, setup.gamma, setup.beta, 1, &mut lib_rng()).unwrap();
    out.push(q_check("q_loss_dce", lib, dce_problem(&batch, &ov, &opol, setup.gamma, setup.beta, noise_seed)));
    let lib = q_loss_cql_variant(&batch, &q_target, &q, &policy, setup.gamma, setup.beta, 1, &mut lib_rng()).unwrap();
    out.push(q_check("q_loss_cql_variant", lib, cql_problem(&batch, &oqt, &opol, setup.gamma, setup.beta, noise_seed)));
    let lib = q_loss_soft_bellman(&batch, &q_target, &q, &policy, setup.gamma, setup.alpha, &mut lib_rng()).unwrap();
    out.push(q_check("q_loss_soft_bellman", lib, soft_problem(&batch, &oqt, &opol, setup.gamma, setup.alpha, noise_seed)));

    let lib = v_loss(&batch, &q_target, &v, setup.tau).unwrap();
    let prob = v_problem(&batch, &oqt, setup.tau);
    let analytic = lib.grads.v.expect("V gradients").flatten();
    let stats = match setup.mode {
        FdMode::Incremental => {
            let d = VDelta::new(&prob, &ov);
            check_all(&analytic, h, floor, |p, x| d.delta(p, x))
        }
        FdMode::Brute => check_brute(
            &analytic,
            h,
            floor,
            &ov,
            ov.n_params(),
            |n, p, x| *n.param_mut(n.locate(p)) += x,
            |n| (prob.value(n), prob.gates(n)),
        ),
    };
    out.push(LossCheck { name: "v_loss", value_lib: lib.value, value_oracle: prob.value(&ov), stats });

    let lib = policy_loss_sac(&pol_states, &q, &policy, setup.alpha, &mut lib_rng()).unwrap();
    let prob = policy_problem(&pol_states, ad, setup.alpha, noise_seed);
    let analytic = lib.grads.policy.expect("policy gradients").flatten();
    let stats = match setup.mode {
        FdMode::Incremental => {
            let d = PolicyDelta::new(&prob, &opol, &oq);
            check_all(&analytic, h, floor, |p, x| d.delta(p, x))
        }
        FdMode::Brute => check_brute(
            &analytic,
            h,
            floor,
            &opol,
            opol.net.n_params(),
            |n, p, x| {
                let param = n.net.locate(p);
                *n.net.param_mut(param) += x
            },
            |n| (prob.value(n, &oq), prob.gates(n, &oq)),
        ),
    };
    out.push(LossCheck { name: "policy_loss_sac", value_lib: lib.value, value_oracle: prob.value(&opol, &oq), stats });

    // temperature: a single scalar, differenced directly
    let log_alpha = setup.alpha.ln();
    let target_entropy = -(ad as f64);
    let lib = alpha_loss(&pol_states, &policy, log_alpha, target_entropy, &mut lib_rng()).unwrap();
    let mean_lp = prob.states.iter().zip(&prob.noise).map(|(s, e)| opol.row(s, e).log_prob).sum::<f64>()
        / prob.states.len() as f64;
    let c = mean_lp + target_entropy;
    let oracle_value = -log_alpha.exp() * c;
    let stats = check_all(&[lib.grads.log_alpha.expect("log-alpha gradient")], h, floor, |_, x| {
        Some(-log_alpha.exp() * x.exp_m1() * c)
    });
    out.push(LossCheck { name: "alpha_loss", value_lib: lib.value, value_oracle: oracle_value, stats });

    // the critic inputs used above must be what the library saw
    debug_assert_eq!(state_action(&batch.states, &batch.actions).ncols(), sd + ad);
    out
}
