//! Exact dynamic programming for the penalized V/Q fixed point.
//!
//! The sweep mirrors the critic updates of the deep learner on a finite MDP:
//! `V(s)` is the τ-expectile of `Q(s,·)` under the data policy and
//! `Q(s,a) = R(s,a) + γ Σ T(s'|s,a) V(s') − β`. Starting from `V = 0`, the
//! first Q backup is sweep zero; after `n` further sweeps the penalized and
//! unpenalized tables differ on every supported pair by exactly
//! `(1 − γ^{n+1}) / (1 − γ) · β`.

use std::io::{self, Write};

use crate::error::{DceError, Result};
use crate::mdp::{empirical_mdp, DiscreteDataset, Fallback, TabularMdp, TabularPolicy};

/// Default sweep budget for the oracle entry points.
pub const DEFAULT_MAX_SWEEPS: usize = 200_000;


#[derive(Debug, Clone, PartialEq)]
pub struct ValueTables {
    n_actions: usize,
    q: Vec<f64>,
    v: Vec<f64>,
    /// Number of V sweeps performed after the initial Q backup.
    pub iterations: usize,
    /// Max-norm of the last sweep's update over both tables.
    pub residual: f64,
}

impl ValueTables {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn v(&self, s: usize) -> f64 {
        self.v[s]
    }

    pub fn q_row(&self, s: usize) -> &[f64] {
        &self.q[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn n_states(&self) -> usize {
        self.v.len()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
}

/// τ-expectile of a discrete distribution: the `m` balancing
/// `τ Σ_{v≥m} w (v − m) = (1 − τ) Σ_{v<m} w (m − v)`.
///
/// Zero-weight entries are ignored. At `τ = 0.5` the weighted mean is
/// returned directly; otherwise the root is solved exactly on the linear piece
/// of the balance that contains it.
pub fn expectile_scalar(values: &[f64], weights: &[f64], tau: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(DceError::invalid("expectile of an empty distribution"));
    }
    if values.len() != weights.len() {
        return Err(DceError::shape("values and weights differ in length"));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(DceError::invalid(format!("tau {tau} outside (0,1)")));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(DceError::invalid("weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DceError::invalid(format!("weights sum to {total}, not 1")));
    }
    Ok(expectile_unchecked(values, weights, tau))
}

fn expectile_unchecked(values: &[f64], weights: &[f64], tau: f64) -> f64 {
    if tau == 0.5 {
        return values.iter().zip(weights).map(|(v, w)| v * w).sum();
    }
    let mut pts: Vec<(f64, f64)> = values.iter().zip(weights).filter(|(_, &w)| w > 0.0).map(|(&v, &w)| (v, w)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Between consecutive support points the balance is `A − B·m`; walk the
    // pieces from the bottom until the root falls inside one.
    let (mut w_hi, mut s_hi): (f64, f64) = (pts.iter().map(|p| p.1).sum(), pts.iter().map(|p| p.0 * p.1).sum());
    let (mut w_lo, mut s_lo) = (0.0, 0.0);
    for k in 0..pts.len() {
        let (v, w) = pts[k];
        w_hi -= w;
        s_hi -= v * w;
        w_lo += w;
        s_lo += v * w;
        let a = tau * s_hi + (1.0 - tau) * s_lo;
        let b = tau * w_hi + (1.0 - tau) * w_lo;
        let m = a / b;
        let upper = pts.get(k + 1).map_or(f64::INFINITY, |p| p.0);
        if m <= upper {
            return m.clamp(v, upper.min(pts[pts.len() - 1].0));
        }
    }
    pts[pts.len() - 1].0
}

enum Stop {
    Tolerance { tol: f64, max_sweeps: usize },
    Exactly(usize),
}

fn check_inputs(mdp: &TabularMdp, policy: &TabularPolicy, beta: f64, tau: f64) -> Result<()> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(DceError::invalid(format!("beta {beta} must be finite and nonnegative")));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(DceError::invalid(format!("tau {tau} outside (0,1)")));
    }
    if policy.n_states() != mdp.n_states() {
        return Err(DceError::shape("data policy and MDP differ in state count"));
    }
    for s in 0..mdp.n_states() {
        if policy.probs(s).len() != mdp.n_actions() {
            return Err(DceError::shape(format!("data policy row {s} has wrong action count")));
        }
    }
    Ok(())
}

fn backup(mdp: &TabularMdp, v: &[f64], beta: f64, q: &mut [f64]) -> f64 {
    let (ns, na, gamma) = (mdp.n_states(), mdp.n_actions(), mdp.discount());
    let mut delta: f64 = 0.0;
    for s in 0..ns {
        for a in 0..na {
            let next: f64 = mdp.transition_row(s, a).iter().zip(v).map(|(p, v)| p * v).sum();
            let new = mdp.reward(s, a) + gamma * next - beta;
            delta = delta.max((new - q[s * na + a]).abs());
            q[s * na + a] = new;
        }
    }
    delta
}

fn sweep_until(mdp: &TabularMdp, policy: &TabularPolicy, beta: f64, tau: f64, stop: Stop) -> Result<ValueTables> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    backup(mdp, &v, beta, &mut q);
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    loop {
        match stop {
            Stop::Tolerance { tol, .. } if residual < tol => break,
            Stop::Tolerance { max_sweeps, .. } if iterations >= max_sweeps => {
                return Err(DceError::NotConverged { sweeps: iterations, residual });
            }
            Stop::Exactly(n) if iterations >= n => break,
            _ => {}
        }
        let mut dv: f64 = 0.0;
        for s in 0..ns {
            let new = expectile_unchecked(&q[s * na..(s + 1) * na], policy.probs(s), tau);
            dv = dv.max((new - v[s]).abs());
            v[s] = new;
        }
        let dq = backup(mdp, &v, beta, &mut q);
        residual = dv.max(dq);
        iterations += 1;
    }
    Ok(ValueTables { n_actions: na, q, v, iterations, residual })
}

/// Penalized fixed point: alternating expectile V sweeps and Q backups with
/// a uniform `−β` shift, until the max update falls below `tol`.
pub fn dce_fixed_point(
    mdp: &TabularMdp,
    data_policy: &TabularPolicy,
    beta: f64,
    tau: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<ValueTables> {
    check_inputs(mdp, data_policy, beta, tau)?;
    if tol.is_nan() || tol <= 0.0 {
        return Err(DceError::invalid("tolerance must be positive"));
    }
    sweep_until(mdp, data_policy, beta, tau, Stop::Tolerance { tol, max_sweeps })
}

/// Unpenalized fixed point (`Q*`, `V*`).
pub fn baseline_fixed_point(
    mdp: &TabularMdp,
    data_policy: &TabularPolicy,
    tau: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<ValueTables> {
    dce_fixed_point(mdp, data_policy, 0.0, tau, tol, max_sweeps)
}

/// Runs exactly `sweeps` V sweeps, converged or not.
pub fn fixed_sweeps(
    mdp: &TabularMdp,
    data_policy: &TabularPolicy,
    beta: f64,
    tau: f64,
    sweeps: usize,
) -> Result<ValueTables> {
    check_inputs(mdp, data_policy, beta, tau)?;
    sweep_until(mdp, data_policy, beta, tau, Stop::Exactly(sweeps))
}

/// Number of V loops to convergence; `Infinite` selects the limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loops {
    Finite(u64),
    Infinite,
}

/// `(1 − γ^{n+1}) / (1 − γ)`, or `1 / (1 − γ)` in the limit.
pub fn geometric_partial_sum(gamma: f64, n: Loops) -> f64 {
    match n {
        Loops::Finite(n) => (1.0 - gamma.powf(n as f64 + 1.0)) / (1.0 - gamma),
        Loops::Infinite => 1.0 / (1.0 - gamma),
    }
}

/// Predicted downward shift of in-support Q-values after `n` loops.
pub fn theoretical_offset(gamma: f64, beta: f64, n: Loops) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(DceError::invalid(format!("gamma {gamma} outside (0,1)")));
    }
    Ok(geometric_partial_sum(gamma, n) * beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDeviation {
    pub state: usize,
    pub action: usize,
    pub q: f64,
    pub q_star: f64,
    /// `(Q* − Q) − predicted_offset`.
    pub deviation: f64,
    pub in_support: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetReport {
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub n: usize,
    pub predicted_offset: f64,
    pub max_abs_deviation: f64,
    pub per_pair: Vec<PairDeviation>,
}

impl OffsetReport {
    pub const CSV_HEADER: &'static str = "pair,state,action,q,q_star,deviation";

    /// Pair rows (in-support only) followed by a `# summary` comment line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for (i, p) in self.per_pair.iter().enumerate().filter(|(_, p)| p.in_support) {
            writeln!(w, "{i},{},{},{:.12e},{:.12e},{:.6e}", p.state, p.action, p.q, p.q_star, p.deviation)?;
        }
        writeln!(
            w,
            "# summary beta={} gamma={} tau={} n={} predicted_offset={:.12e} max_abs_deviation={:.6e}",
            self.beta, self.gamma, self.tau, self.n, self.predicted_offset, self.max_abs_deviation
        )
    }
}

/// Checks the offset relation at τ = 0.5 with the default sweep budget.
pub fn verify_offset(mdp: &TabularMdp, data_policy: &TabularPolicy, beta: f64, tol: f64) -> Result<OffsetReport> {
    verify_offset_with(mdp, data_policy, beta, 0.5, tol, DEFAULT_MAX_SWEEPS)
}

/// Computes both fixed points and compares `Q* − Q` with the predicted
/// offset on every pair the data policy supports.
///
/// Both runs are first taken to convergence; they are then evaluated at the
/// common loop count `n = max(n_baseline, n_dce)` so the closed form applies
/// to identical iteration histories.
pub fn verify_offset_with(
    mdp: &TabularMdp,
    data_policy: &TabularPolicy,
    beta: f64,
    tau: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<OffsetReport> {
    let base = baseline_fixed_point(mdp, data_policy, tau, tol, max_sweeps)?;
    let pen = dce_fixed_point(mdp, data_policy, beta, tau, tol, max_sweeps)?;
    let n = base.iterations.max(pen.iterations);
    let base = if base.iterations == n { base } else { fixed_sweeps(mdp, data_policy, 0.0, tau, n)? };
    let pen = if pen.iterations == n { pen } else { fixed_sweeps(mdp, data_policy, beta, tau, n)? };
    let predicted = theoretical_offset(mdp.discount(), beta, Loops::Finite(n as u64))?;

    let mut per_pair = Vec::with_capacity(mdp.n_states() * mdp.n_actions());
    let mut max_dev: f64 = 0.0;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let (q, q_star) = (pen.q(s, a), base.q(s, a));
            let deviation = (q_star - q) - predicted;
            let in_support = data_policy.probs(s)[a] > 0.0;
            if in_support {
                max_dev = max_dev.max(deviation.abs());
            }
            per_pair.push(PairDeviation { state: s, action: a, q, q_star, deviation, in_support });
        }
    }
    Ok(OffsetReport {
        beta,
        gamma: mdp.discount(),
        tau,
        n,
        predicted_offset: predicted,
        max_abs_deviation: max_dev,
        per_pair,
    })
}

/// True iff an OOD action with unpenalized value `q_star_a_prime` still
/// beats the in-dataset action after both receive their respective offsets
/// (loop counts `n1` and `n`).
pub fn ood_selection_threshold(
    q_star_a: f64,
    q_star_a_prime: f64,
    n: u64,
    n1: u64,
    gamma: f64,
    beta: f64,
) -> Result<bool> {
    let lhs = theoretical_offset(gamma, beta, Loops::Finite(n))?;
    let rhs = theoretical_offset(gamma, beta, Loops::Finite(n1))?;
    Ok(q_star_a_prime > q_star_a + (lhs - rhs))
}

/// Constants of the sampling-error bound.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundParams {
    /// Penalty-action sample count `n_μ`.
    pub n_mu: u64,
    /// Dataset sample count `n_π`.
    pub n_pi: u64,
    pub c_r: f64,
    pub c_t: f64,
    pub r_max: f64,
    pub tau: f64,
    pub delta: f64,
    n_actions: usize,
    counts: Vec<u64>,
}

impl BoundParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_mu: u64,
        n_pi: u64,
        c_r: f64,
        c_t: f64,
        r_max: f64,
        tau: f64,
        delta: f64,
        counts: &[Vec<u64>],
    ) -> Result<Self> {
        if n_mu == 0 || n_pi == 0 {
            return Err(DceError::invalid("n_mu and n_pi must be positive"));
        }
        if [c_r, c_t, r_max].iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(DceError::invalid("bound constants must be finite and nonnegative"));
        }
        if !(tau > 0.0 && tau < 1.0) || !(delta > 0.0 && delta < 1.0) {
            return Err(DceError::invalid("tau and delta must lie in (0,1)"));
        }
        let n_actions = counts.first().map_or(0, Vec::len);
        if counts.iter().any(|row| row.len() != n_actions) {
            return Err(DceError::shape("ragged count table"));
        }
        Ok(Self { n_mu, n_pi, c_r, c_t, r_max, tau, delta, n_actions, counts: counts.concat() })
    }

    /// Builds parameters with counts taken from `data`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_dataset(
        data: &DiscreteDataset,
        n_mu: u64,
        n_pi: u64,
        c_r: f64,
        c_t: f64,
        r_max: f64,
        tau: f64,
        delta: f64,
    ) -> Result<Self> {
        let counts: Vec<Vec<u64>> = (0..data.n_states())
            .map(|s| (0..data.n_actions()).map(|a| data.count(s, a)).collect())
            .collect();
        Self::new(n_mu, n_pi, c_r, c_t, r_max, tau, delta, &counts)
    }

    pub fn count(&self, s: usize, a: usize) -> u64 {
        self.counts[s * self.n_actions + a]
    }
}

/// `(n_μ / n_π) · (1 − γ^{n+1}) / (1 − γ) · β`.
pub fn sampling_deviation_bound(params: &BoundParams, gamma: f64, n: u64, beta: f64) -> f64 {
    params.n_mu as f64 / params.n_pi as f64 * geometric_partial_sum(gamma, Loops::Finite(n)) * beta
}

/// `(C_r + γ C_T 2 R_max τ / (1 − γ)) / √|D(s,a)|`.
pub fn concentration_term(params: &BoundParams, gamma: f64, count: u64) -> f64 {
    (params.c_r + gamma * params.c_t * 2.0 * params.r_max * params.tau / (1.0 - gamma)) / (count as f64).sqrt()
}

/// Additive slack allowed between the sample-based and exact Q at `pair`.
pub fn full_upper_bound(params: &BoundParams, gamma: f64, n: u64, beta: f64, pair: (usize, usize)) -> Result<f64> {
    let count = params.count(pair.0, pair.1);
    if count == 0 {
        return Err(DceError::invalid(format!("pair {pair:?} has no samples; bound undefined")));
    }
    Ok(sampling_deviation_bound(params, gamma, n, beta) + concentration_term(params, gamma, count))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub state: usize,
    pub action: usize,
    pub count: u64,
    pub q_true: f64,
    pub q_hat: f64,
    pub measured: f64,
    pub penalty_bound: f64,
    pub slack: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub n: usize,
    pub max_measured: f64,
    pub violations: usize,
    pub rows: Vec<BoundRow>,
}

impl BoundReport {
    pub const CSV_HEADER: &'static str = "state,action,count,q_true,q_hat,measured,penalty_bound,slack,violated";

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{:.12e},{:.12e},{:.6e},{:.6e},{:.6e},{}",
                r.state,
                r.action,
                r.count,
                r.q_true,
                r.q_hat,
                r.measured,
                r.penalty_bound,
                r.slack,
                u8::from(r.violated)
            )?;
        }
        writeln!(w, "# summary n={} max_measured={:.6e} violations={}", self.n, self.max_measured, self.violations)
    }
}

/// Compares penalized fixed points of the true MDP and of the empirical MDP
/// estimated from `data`, pair by pair, against [`full_upper_bound`].
#[allow(clippy::too_many_arguments)]
pub fn empirical_bound_check(
    true_mdp: &TabularMdp,
    data: &DiscreteDataset,
    data_policy: &TabularPolicy,
    beta: f64,
    tau: f64,
    params: &BoundParams,
    tol: f64,
    max_sweeps: usize,
) -> Result<BoundReport> {
    if data.n_states() != true_mdp.n_states() || data.n_actions() != true_mdp.n_actions() {
        return Err(DceError::shape("dataset and MDP differ in size"));
    }
    let emp = empirical_mdp(data, Fallback::SelfLoop, true_mdp.discount())?;
    let exact = dce_fixed_point(true_mdp, data_policy, beta, tau, tol, max_sweeps)?;
    let hat = dce_fixed_point(&emp, data_policy, beta, tau, tol, max_sweeps)?;
    let gamma = true_mdp.discount();
    let n = hat.iterations;
    let penalty_bound = sampling_deviation_bound(params, gamma, n as u64, beta);

    let mut rows = Vec::new();
    for s in 0..true_mdp.n_states() {
        for a in 0..true_mdp.n_actions() {
            if data_policy.probs(s)[a] <= 0.0 {
                continue;
            }
            let count = data.count(s, a);
            if count == 0 {
                return Err(DceError::invalid(format!("in-support pair ({s},{a}) has no samples")));
            }
            let slack = full_upper_bound(params, gamma, n as u64, beta, (s, a))?;
            let measured = (hat.q(s, a) - exact.q(s, a)).abs();
            rows.push(BoundRow {
                state: s,
                action: a,
                count,
                q_true: exact.q(s, a),
                q_hat: hat.q(s, a),
                measured,
                penalty_bound,
                slack,
                violated: measured > slack,
            });
        }
    }
    Ok(BoundReport {
        n,
        max_measured: rows.iter().fold(0.0, |m, r| m.max(r.measured)),
        violations: rows.iter().filter(|r| r.violated).count(),
        rows,
    })
}
