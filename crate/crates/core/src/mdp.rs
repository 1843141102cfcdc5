//! Finite MDPs and offline datasets.
//!
//! [`TabularMdp`] is the index-level model consumed by the tabular oracle.
//! [`OfflineDataset`] is the continuous-control transition store consumed by
//! the trainer. Both are immutable after construction.

use rand::Rng;

use crate::error::{DceError, Result};

const PROB_TOL: f64 = 1e-9;

/// Exact finite MDP with integer states and actions.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Flattened `[s][a][s']`.
    transition: Vec<f64>,
    /// Flattened `[s][a]`.
    reward: Vec<f64>,
    discount: f64,
    initial_dist: Vec<f64>,
    terminal: Vec<bool>,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(DceError::invalid(format!("{what} has negative or non-finite entries")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(DceError::invalid(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(DceError::invalid("MDP needs at least one state and one action"));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(DceError::shape(format!(
                "transition tensor has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if reward.len() != n_states * n_actions {
            return Err(DceError::shape(format!(
                "reward tensor has {} entries, expected {}",
                reward.len(),
                n_states * n_actions
            )));
        }
        if initial_dist.len() != n_states {
            return Err(DceError::shape("initial distribution length must equal n_states"));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(DceError::invalid(format!("discount {discount} outside (0,1)")));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(DceError::invalid("rewards must be finite"));
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            check_distribution(row, &format!("T[{}][{}]", i / n_actions, i % n_actions))?;
        }
        check_distribution(&initial_dist, "initial distribution")?;
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            discount,
            initial_dist,
            terminal: vec![false; n_states],
        })
    }

    /// Marks states whose arrival ends an episode.
    pub fn with_terminal(mut self, terminal: Vec<bool>) -> Result<Self> {
        if terminal.len() != self.n_states {
            return Err(DceError::shape("terminal mask length must equal n_states"));
        }
        self.terminal = terminal;
        Ok(self)
    }

    /// Dense random MDP: rewards uniform in [0, 1), transition rows drawn
    /// from normalized uniform weights, uniform initial distribution.
    pub fn random<R: Rng + ?Sized>(
        n_states: usize,
        n_actions: usize,
        discount: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let row: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>() + 1e-3).collect();
            let sum: f64 = row.iter().sum();
            transition.extend(row.iter().map(|x| x / sum));
        }
        let reward = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
        let initial = vec![1.0 / n_states as f64; n_states];
        Self::new(n_states, n_actions, transition, reward, discount, initial)
    }

    /// Deterministic MDP given a successor table `next[s][a]` and rewards.
    pub fn deterministic(
        next: &[Vec<usize>],
        reward: &[Vec<f64>],
        discount: f64,
        initial_state: usize,
    ) -> Result<Self> {
        let n_states = next.len();
        let n_actions = next.first().map_or(0, Vec::len);
        let mut transition = vec![0.0; n_states * n_actions * n_states];
        for (s, row) in next.iter().enumerate() {
            if row.len() != n_actions {
                return Err(DceError::shape("ragged successor table"));
            }
            for (a, &sp) in row.iter().enumerate() {
                if sp >= n_states {
                    return Err(DceError::invalid(format!("successor {sp} out of range")));
                }
                transition[(s * n_actions + a) * n_states + sp] = 1.0;
            }
        }
        let reward: Vec<f64> = reward.iter().flatten().copied().collect();
        let mut initial = vec![0.0; n_states];
        if initial_state >= n_states {
            return Err(DceError::invalid("initial state out of range"));
        }
        initial[initial_state] = 1.0;
        Self::new(n_states, n_actions, transition, reward, discount, initial)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    /// Next-state distribution `T[s][a][·]`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// Largest absolute reward.
    pub fn r_max(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        if !(discount > 0.0 && discount < 1.0) {
            return Err(DceError::invalid(format!("discount {discount} outside (0,1)")));
        }
        let mut out = self.clone();
        out.discount = discount;
        Ok(out)
    }
}

/// Stationary state-to-action-distribution map over integer actions.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        for (s, row) in probs.iter().enumerate() {
            check_distribution(row, &format!("policy row {s}"))?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states] }
    }

    /// Deterministic policy selecting `actions[s]` in state `s`.
    pub fn greedy(actions: &[usize], n_actions: usize) -> Result<Self> {
        let probs = actions
            .iter()
            .map(|&a| {
                if a >= n_actions {
                    return Err(DceError::invalid(format!("action {a} out of range")));
                }
                let mut row = vec![0.0; n_actions];
                row[a] = 1.0;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { probs })
    }

    /// Full-support random policy; every action keeps probability > 0.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        let probs = (0..n_states)
            .map(|_| {
                let w: Vec<f64> = (0..n_actions).map(|_| rng.random::<f64>() + 0.05).collect();
                let sum: f64 = w.iter().sum();
                w.into_iter().map(|x| x / sum).collect()
            })
            .collect();
        Self { probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self, s: usize) -> &[f64] {
        &self.probs[s]
    }

    fn check_against(&self, mdp: &TabularMdp) -> Result<()> {
        if self.probs.len() != mdp.n_states() {
            return Err(DceError::shape(format!(
                "policy covers {} states, MDP has {}",
                self.probs.len(),
                mdp.n_states()
            )));
        }
        for (s, row) in self.probs.iter().enumerate() {
            if row.len() != mdp.n_actions() {
                return Err(DceError::invalid(format!(
                    "policy row {s} addresses {} actions, MDP has {}",
                    row.len(),
                    mdp.n_actions()
                )));
            }
        }
        Ok(())
    }
}

/// Draws an index from a discrete distribution.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave `u` just above the accumulated mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TabularStep {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub done: bool,
}

/// Rolls out one episode from the initial distribution. Stops after
/// `max_steps` or right after reaching a terminal state.
pub fn sample_episode<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    rng: &mut R,
    max_steps: usize,
) -> Result<Vec<TabularStep>> {
    if max_steps == 0 {
        return Err(DceError::invalid("max_steps must be at least 1"));
    }
    policy.check_against(mdp)?;
    let mut s = sample_index(mdp.initial_dist(), rng);
    let mut steps = Vec::with_capacity(max_steps);
    for _ in 0..max_steps {
        let a = sample_index(policy.probs(s), rng);
        let sp = sample_index(mdp.transition_row(s, a), rng);
        let done = mdp.is_terminal(sp);
        steps.push(TabularStep { state: s, action: a, reward: mdp.reward(s, a), next_state: sp, done });
        if done {
            break;
        }
        s = sp;
    }
    Ok(steps)
}

/// Per-pair visit statistics of a discrete dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDataset {
    n_states: usize,
    n_actions: usize,
    visit_counts: Vec<u64>,
    transition_counts: Vec<u64>,
    reward_sums: Vec<f64>,
}

impl DiscreteDataset {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            visit_counts: vec![0; n_states * n_actions],
            transition_counts: vec![0; n_states * n_actions * n_states],
            reward_sums: vec![0.0; n_states * n_actions],
        }
    }

    pub fn record(&mut self, s: usize, a: usize, r: f64, sp: usize) {
        let pair = s * self.n_actions + a;
        self.visit_counts[pair] += 1;
        self.transition_counts[pair * self.n_states + sp] += 1;
        self.reward_sums[pair] += r;
    }

    pub fn from_steps(n_states: usize, n_actions: usize, steps: &[TabularStep]) -> Self {
        let mut data = Self::new(n_states, n_actions);
        for st in steps {
            data.record(st.state, st.action, st.reward, st.next_state);
        }
        data
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// `|D(s,a)|`.
    pub fn count(&self, s: usize, a: usize) -> u64 {
        self.visit_counts[s * self.n_actions + a]
    }

    pub fn transition_count(&self, s: usize, a: usize, sp: usize) -> u64 {
        self.transition_counts[(s * self.n_actions + a) * self.n_states + sp]
    }

    pub fn total(&self) -> u64 {
        self.visit_counts.iter().sum()
    }

    pub fn mean_reward(&self, s: usize, a: usize) -> Option<f64> {
        let n = self.count(s, a);
        (n > 0).then(|| self.reward_sums[s * self.n_actions + a] / n as f64)
    }
}

/// How [`empirical_mdp`] fills pairs the dataset never visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fallback {
    Uniform,
    #[default]
    SelfLoop,
}

/// Maximum-likelihood MDP from counts. Unvisited pairs follow `fallback`
/// with reward 0; the initial distribution is uniform.
pub fn empirical_mdp(data: &DiscreteDataset, fallback: Fallback, discount: f64) -> Result<TabularMdp> {
    if data.total() == 0 {
        return Err(DceError::invalid("dataset holds no counts"));
    }
    let (ns, na) = (data.n_states, data.n_actions);
    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let pair = s * na + a;
            let row = &mut transition[pair * ns..(pair + 1) * ns];
            let n = data.visit_counts[pair];
            if n > 0 {
                for (sp, p) in row.iter_mut().enumerate() {
                    *p = data.transition_counts[pair * ns + sp] as f64 / n as f64;
                }
                reward[pair] = data.reward_sums[pair] / n as f64;
            } else {
                match fallback {
                    Fallback::Uniform => row.iter_mut().for_each(|p| *p = 1.0 / ns as f64),
                    Fallback::SelfLoop => row[s] = 1.0,
                }
            }
        }
    }
    TabularMdp::new(ns, na, transition, reward, discount, vec![1.0 / ns as f64; ns])
}

/// Label of the policy that produced an [`OfflineDataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BehaviorTag {
    Random,
    Medium,
    Expert,
    Mixed,
    Custom,
}

impl BehaviorTag {
    pub const ALL: [BehaviorTag; 5] = [
        BehaviorTag::Random,
        BehaviorTag::Medium,
        BehaviorTag::Expert,
        BehaviorTag::Mixed,
        BehaviorTag::Custom,
    ];

    pub fn code(self) -> u8 {
        match self {
            BehaviorTag::Random => 0,
            BehaviorTag::Medium => 1,
            BehaviorTag::Expert => 2,
            BehaviorTag::Mixed => 3,
            BehaviorTag::Custom => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            BehaviorTag::Random => "random",
            BehaviorTag::Medium => "medium",
            BehaviorTag::Expert => "expert",
            BehaviorTag::Mixed => "mixed",
            BehaviorTag::Custom => "custom",
        }
    }
}

/// One `(s, a, r, s', done)` tuple, stored at the on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f32>,
    pub action: Vec<f32>,
    pub reward: f32,
    pub next_state: Vec<f32>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    state_dim: usize,
    action_dim: usize,
    transitions: Vec<Transition>,
    behavior_tag: BehaviorTag,
}

impl OfflineDataset {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        transitions: Vec<Transition>,
        behavior_tag: BehaviorTag,
    ) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 {
            return Err(DceError::invalid("state_dim and action_dim must be positive"));
        }
        for (i, t) in transitions.iter().enumerate() {
            if t.state.len() != state_dim || t.next_state.len() != state_dim || t.action.len() != action_dim {
                return Err(DceError::shape(format!("transition {i} does not match dataset dims")));
            }
        }
        Ok(Self { state_dim, action_dim, transitions, behavior_tag })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn behavior_tag(&self) -> BehaviorTag {
        self.behavior_tag
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Appends `other` and relabels the result as [`BehaviorTag::Mixed`].
    pub fn concat(&self, other: &OfflineDataset) -> Result<Self> {
        if self.state_dim != other.state_dim || self.action_dim != other.action_dim {
            return Err(DceError::shape("cannot concatenate datasets of different dims"));
        }
        let mut transitions = self.transitions.clone();
        transitions.extend_from_slice(&other.transitions);
        Self::new(self.state_dim, self.action_dim, transitions, BehaviorTag::Mixed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub count: usize,
    pub reward_mean: f64,
    pub reward_min: f64,
    pub reward_max: f64,
    pub action_min: Vec<f64>,
    pub action_max: Vec<f64>,
}

pub fn dataset_stats(data: &OfflineDataset) -> Result<DatasetStats> {
    if data.is_empty() {
        return Err(DceError::invalid("dataset is empty"));
    }
    let mut stats = DatasetStats {
        count: data.len(),
        reward_mean: 0.0,
        reward_min: f64::INFINITY,
        reward_max: f64::NEG_INFINITY,
        action_min: vec![f64::INFINITY; data.action_dim],
        action_max: vec![f64::NEG_INFINITY; data.action_dim],
    };
    let mut sum = 0.0;
    for t in &data.transitions {
        let r = t.reward as f64;
        sum += r;
        stats.reward_min = stats.reward_min.min(r);
        stats.reward_max = stats.reward_max.max(r);
        for (i, &a) in t.action.iter().enumerate() {
            stats.action_min[i] = stats.action_min[i].min(a as f64);
            stats.action_max[i] = stats.action_max[i].max(a as f64);
        }
    }
    stats.reward_mean = sum / data.len() as f64;
    Ok(stats)
}
