//! Browser bindings for three small experiments: expectiles of a discrete
//! distribution, the value offset a uniform penalty induces on random tabular
//! MDPs, and piecewise-linear β schedules.
//!
//! Every export takes and returns plain numbers so the same functions run
//! natively under `cargo test`.

use dce_core::mdp::{TabularMdp, TabularPolicy};
use dce_core::oracle::{expectile_scalar, theoretical_offset, verify_offset_with, Loops, DEFAULT_MAX_SWEEPS};
use dce_core::trainer::{beta_at, BetaSchedule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// States and actions of the demo MDPs.
pub const DEMO_STATES: usize = 10;
pub const DEMO_ACTIONS: usize = 4;
const SOLVE_TOL: f64 = 1e-12;

/// Expectiles at `τ_i = (i + 1) / (points + 1)`, `i < points`. Weights are
/// normalized here; they must be nonnegative with a positive sum.
#[wasm_bindgen]
pub fn expectile_curve(values: Vec<f64>, weights: Vec<f64>, points: usize) -> Result<Vec<f64>, String> {
    if values.is_empty() || values.len() != weights.len() {
        return Err("need one weight per value".into());
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) || weights.iter().any(|w| *w < 0.0) {
        return Err("weights must be nonnegative with a positive sum".into());
    }
    let w: Vec<f64> = weights.iter().map(|x| x / total).collect();
    (0..points)
        .map(|i| {
            let tau = (i + 1) as f64 / (points + 1) as f64;
            expectile_scalar(&values, &w, tau).map_err(|e| e.to_string())
        })
        .collect()
}

/// For each β: `[predicted, mean measured, max |measured − predicted|]`,
/// flattened. The measured offset is `Q* − Q` averaged over the pairs the
/// random data policy supports.
#[wasm_bindgen]
pub fn offset_sweep(gamma: f64, betas: Vec<f64>, tau: f64, seed: u32) -> Result<Vec<f64>, String> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(format!("gamma {gamma} outside (0,1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let mdp = TabularMdp::random(DEMO_STATES, DEMO_ACTIONS, gamma, &mut rng).map_err(|e| e.to_string())?;
    let policy = TabularPolicy::random(DEMO_STATES, DEMO_ACTIONS, &mut rng);
    let mut out = Vec::with_capacity(3 * betas.len());
    for beta in betas {
        let r = verify_offset_with(&mdp, &policy, beta, tau, SOLVE_TOL, DEFAULT_MAX_SWEEPS).map_err(|e| e.to_string())?;
        let support: Vec<_> = r.per_pair.iter().filter(|p| p.in_support).collect();
        let mean = support.iter().map(|p| p.q_star - p.q).sum::<f64>() / support.len() as f64;
        out.extend([r.predicted_offset, mean, r.max_abs_deviation]);
    }
    Ok(out)
}

/// Closed-form offset after `loops` V sweeps; a negative count selects the
/// limit.
#[wasm_bindgen]
pub fn predicted_offset(gamma: f64, beta: f64, loops: i32) -> Result<f64, String> {
    let n = if loops < 0 { Loops::Infinite } else { Loops::Finite(loops as u64) };
    theoretical_offset(gamma, beta, n).map_err(|e| e.to_string())
}

/// β at every epoch in `0..epochs`.
#[wasm_bindgen]
pub fn beta_schedule_curve(start: f64, end: f64, step: f64, interval: usize, epochs: usize) -> Result<Vec<f64>, String> {
    let schedule = BetaSchedule { start, end, step, interval_epochs: interval };
    schedule.validate().map_err(|e| e.to_string())?;
    Ok((0..epochs).map(|e| beta_at(&schedule, e)).collect())
}
