//! Finite MDPs, exact dynamic-programming oracles, occupancy measures, and
//! policy divergences.
//!
//! Everything here is exact up to floating point: policy evaluation is a
//! direct linear solve of `(I - gamma * P_pi) V = r_pi`, not a sampled
//! estimate, so downstream audits can treat these values as ground truth.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_dense;

/// Row-sum tolerance for probability tensors.
pub const PROB_TOL: f64 = 1e-12;
/// Row-sum tolerance for policies (looser: policies go through optimization).
pub const POLICY_TOL: f64 = 1e-10;
/// Default probability floor applied before KL against learned policies.
pub const DEFAULT_ZETA: f64 = 1e-6;
/// Default sup-norm tolerance for value iteration.
pub const VALUE_ITER_TOL: f64 = 1e-10;

/// A finite MDP: `n_states` states, `n_actions` actions, transition tensor
/// indexed `(s, a, s')`, bounded rewards indexed `(s, a)`, discount `gamma`,
/// and an initial state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Array3<f64>,
    pub reward: Array2<f64>,
    pub r_max: f64,
    pub gamma: f64,
    pub initial_dist: Array1<f64>,
}

impl MdpSpec {
    pub fn new(
        transition: Array3<f64>,
        reward: Array2<f64>,
        r_max: f64,
        gamma: f64,
        initial_dist: Array1<f64>,
    ) -> Result<Self> {
        let (n_states, n_actions, n_next) = transition.dim();
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Config(
                "MDP must have at least one state and action".into(),
            ));
        }
        if n_next != n_states {
            return Err(Error::Argument(format!(
                "transition tensor is {n_states}x{n_actions}x{n_next}, expected last axis {n_states}"
            )));
        }
        if reward.dim() != (n_states, n_actions) {
            return Err(Error::Argument(
                "reward shape does not match transition tensor".into(),
            ));
        }
        if initial_dist.len() != n_states {
            return Err(Error::Argument(
                "initial_dist length does not match n_states".into(),
            ));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0,1), got {gamma}"
            )));
        }
        if !(r_max > 0.0) {
            return Err(Error::Config(format!(
                "r_max must be positive, got {r_max}"
            )));
        }
        let spec = Self {
            n_states,
            n_actions,
            transition,
            reward,
            r_max,
            gamma,
            initial_dist,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the probability and reward-bound invariants.
    pub fn validate(&self) -> Result<()> {
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let mut sum = 0.0;
                for s2 in 0..self.n_states {
                    let p = self.transition[[s, a, s2]];
                    if p < 0.0 {
                        return Err(Error::Domain(format!(
                            "transition({s},{a},{s2}) = {p} is negative"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(Error::Domain(format!(
                        "transition row ({s},{a}) sums to {sum}, expected 1"
                    )));
                }
                if self.reward[[s, a]].abs() > self.r_max {
                    return Err(Error::Domain(format!(
                        "reward({s},{a}) = {} exceeds r_max = {}",
                        self.reward[[s, a]],
                        self.r_max
                    )));
                }
            }
        }
        let mu_sum: f64 = self.initial_dist.sum();
        if (mu_sum - 1.0).abs() > PROB_TOL || self.initial_dist.iter().any(|&p| p < 0.0) {
            return Err(Error::Domain(format!(
                "initial_dist sums to {mu_sum}, expected 1"
            )));
        }
        Ok(())
    }

    /// Upper bound `r_max / (1 - gamma)` on any discounted value.
    pub fn value_bound(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = MdpSpecDoc {
            version: 1,
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma,
            r_max: self.r_max,
            transition: tensor_to_vec(&self.transition),
            reward: matrix_to_vec(&self.reward),
            initial_dist: self.initial_dist.to_vec(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpSpecDoc = serde_json::from_str(text)?;
        if doc.version != 1 {
            return Err(Error::Config(format!(
                "unsupported MDP document version {}",
                doc.version
            )));
        }
        let transition = tensor_from_vec(&doc.transition)?;
        let reward = matrix_from_vec(&doc.reward)?;
        let spec = Self::new(
            transition,
            reward,
            doc.r_max,
            doc.gamma,
            Array1::from(doc.initial_dist),
        )?;
        if spec.n_states != doc.n_states || spec.n_actions != doc.n_actions {
            return Err(Error::Argument(
                "declared sizes disagree with array shapes".into(),
            ));
        }
        Ok(spec)
    }
}

#[derive(Serialize, Deserialize)]
struct MdpSpecDoc {
    version: u32,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    r_max: f64,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    initial_dist: Vec<f64>,
}

pub(crate) fn matrix_to_vec(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub(crate) fn matrix_from_vec(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let nr = rows.len();
    let nc = rows.first().map(|r| r.len()).unwrap_or(0);
    if nr == 0 || nc == 0 || rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Argument("ragged or empty matrix".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((nr, nc), flat).map_err(|e| Error::Argument(e.to_string()))
}

pub(crate) fn tensor_to_vec(t: &Array3<f64>) -> Vec<Vec<Vec<f64>>> {
    let (n0, n1, n2) = t.dim();
    (0..n0)
        .map(|i| {
            (0..n1)
                .map(|j| (0..n2).map(|k| t[[i, j, k]]).collect())
                .collect()
        })
        .collect()
}

pub(crate) fn tensor_from_vec(v: &[Vec<Vec<f64>>]) -> Result<Array3<f64>> {
    let n0 = v.len();
    let n1 = v.first().map(|m| m.len()).unwrap_or(0);
    let n2 = v
        .first()
        .and_then(|m| m.first())
        .map(|r| r.len())
        .unwrap_or(0);
    if n0 == 0 || n1 == 0 || n2 == 0 {
        return Err(Error::Argument("empty tensor".into()));
    }
    let mut t = Array3::zeros((n0, n1, n2));
    for (i, m) in v.iter().enumerate() {
        if m.len() != n1 {
            return Err(Error::Argument("ragged tensor".into()));
        }
        for (j, r) in m.iter().enumerate() {
            if r.len() != n2 {
                return Err(Error::Argument("ragged tensor".into()));
            }
            for (k, &x) in r.iter().enumerate() {
                t[[i, j, k]] = x;
            }
        }
    }
    Ok(t)
}

/// A row-stochastic `|S| x |A|` action distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub probs: Array2<f64>,
}

impl TabularPolicy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        let p = Self { probs };
        p.validate(0.0)?;
        Ok(p)
    }

    /// Uniform policy over `n_actions` at every state.
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64),
        }
    }

    /// Random row-stochastic policy (Dirichlet(1) rows), reproducible by seed.
    pub fn random(n_states: usize, n_actions: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probs = Array2::zeros((n_states, n_actions));
        for s in 0..n_states {
            let mut sum = 0.0;
            for a in 0..n_actions {
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                probs[[s, a]] = -u.ln();
                sum += probs[[s, a]];
            }
            for a in 0..n_actions {
                probs[[s, a]] /= sum;
            }
        }
        Self { probs }
    }

    /// Deterministic policy: probability one on `actions[s]`.
    pub fn deterministic(n_states: usize, n_actions: usize, actions: &[usize]) -> Result<Self> {
        if actions.len() != n_states {
            return Err(Error::Argument("one action per state required".into()));
        }
        let mut probs = Array2::zeros((n_states, n_actions));
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::Argument(format!(
                    "action {a} out of range at state {s}"
                )));
            }
            probs[[s, a]] = 1.0;
        }
        Ok(Self { probs })
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    /// Checks rows sum to one and entries respect the floor `zeta`.
    pub fn validate(&self, zeta: f64) -> Result<()> {
        for (s, row) in self.probs.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > POLICY_TOL {
                return Err(Error::Domain(format!(
                    "policy row {s} sums to {sum}, expected 1"
                )));
            }
            for (a, &p) in row.iter().enumerate() {
                if p < 0.0 || (zeta > 0.0 && p + POLICY_TOL < zeta) {
                    return Err(Error::Domain(format!(
                        "policy({s},{a}) = {p} violates floor {zeta}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Clips every probability up to `zeta` and renormalizes each row.
    pub fn with_floor(&self, zeta: f64) -> Self {
        if zeta <= 0.0 {
            return self.clone();
        }
        let mut probs = self.probs.clone();
        for mut row in probs.rows_mut() {
            for p in row.iter_mut() {
                if *p < zeta {
                    *p = zeta;
                }
            }
            let sum: f64 = row.sum();
            row.mapv_inplace(|p| p / sum);
        }
        Self { probs }
    }

    /// Convex combination `w * self + (1 - w) * other`, row-stochastic by linearity.
    pub fn mix(&self, other: &Self, weight_self: f64) -> Result<Self> {
        if self.probs.dim() != other.probs.dim() {
            return Err(Error::Argument("policy shapes differ".into()));
        }
        if !(0.0..=1.0).contains(&weight_self) {
            return Err(Error::Argument(format!(
                "mix weight {weight_self} outside [0,1]"
            )));
        }
        Ok(Self {
            probs: weight_self * &self.probs + (1.0 - weight_self) * &other.probs,
        })
    }
}

/// `|S| x |A|` action-value table.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub values: Array2<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            values: Array2::zeros((n_states, n_actions)),
        }
    }

    pub fn constant(n_states: usize, n_actions: usize, v: f64) -> Self {
        Self {
            values: Array2::from_elem((n_states, n_actions), v),
        }
    }

    /// State value under `policy`: `V(s) = sum_a policy(a|s) Q(s,a)`.
    pub fn value_under(&self, policy: &TabularPolicy) -> ValueTable {
        let v = (&self.values * &policy.probs).sum_axis(ndarray::Axis(1));
        ValueTable { values: v }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// `|S|` state-value table.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub values: Array1<f64>,
}

/// Discounted state and state-action visitation distributions of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    pub state_dist: Array1<f64>,
    pub state_action_dist: Array2<f64>,
}

/// Which candidate won a vote at some state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VoteWinner {
    Behavior,
    Global,
    Local,
}

/// Divergence kind for [`divergence`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceKind {
    Kl,
    Tv,
}

/// Builds a random MDP with Dirichlet(1) transition rows, rewards uniform in
/// `[-r_max, r_max]`, and a Dirichlet(1) initial distribution. Identical
/// `(seed, sizes)` give bit-identical output.
pub fn make_random_mdp(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    r_max: f64,
    seed: u64,
) -> Result<MdpSpec> {
    if n_states < 1 || n_actions < 1 {
        return Err(Error::Config(
            "n_states and n_actions must be at least 1".into(),
        ));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!(
            "gamma must lie in (0,1), got {gamma}"
        )));
    }
    if !(r_max > 0.0) {
        return Err(Error::Config(format!(
            "r_max must be positive, got {r_max}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut transition = Array3::zeros((n_states, n_actions, n_states));
    for s in 0..n_states {
        for a in 0..n_actions {
            let mut row = vec![0.0; n_states];
            let mut sum = 0.0;
            for p in row.iter_mut() {
                // Exp(1) draws normalized: symmetric Dirichlet on the simplex.
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                *p = -u.ln();
                sum += *p;
            }
            for (s2, p) in row.iter().enumerate() {
                transition[[s, a, s2]] = p / sum;
            }
        }
    }

    let mut reward = Array2::zeros((n_states, n_actions));
    for s in 0..n_states {
        for a in 0..n_actions {
            reward[[s, a]] = rng.random_range(-r_max..=r_max);
        }
    }

    let mut mu = vec![0.0; n_states];
    let mut sum = 0.0;
    for p in mu.iter_mut() {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        *p = -u.ln();
        sum += *p;
    }
    let initial_dist = Array1::from_iter(mu.into_iter().map(|p| p / sum));

    MdpSpec::new(transition, reward, r_max, gamma, initial_dist)
}

const GRID_ACTIONS: usize = 4;
// up, down, left, right
const GRID_MOVES: [(isize, isize); GRID_ACTIONS] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

/// Builds a `width x height` gridworld with 4 moves, an absorbing goal in the
/// last cell paying `goal_reward` on every action, zero reward elsewhere, and
/// action slip: with probability `slip_prob` the chosen move is replaced by a
/// uniformly random one. Start state is cell 0; moves off the grid stay put.
pub fn make_gridworld(
    width: usize,
    height: usize,
    slip_prob: f64,
    goal_reward: f64,
    gamma: f64,
) -> Result<MdpSpec> {
    let n_states = width * height;
    if n_states < 2 {
        return Err(Error::Config("gridworld needs at least two cells".into()));
    }
    if !(0.0..1.0).contains(&slip_prob) {
        return Err(Error::Config(format!(
            "slip_prob must lie in [0,1), got {slip_prob}"
        )));
    }
    if !(goal_reward > 0.0) {
        return Err(Error::Config("goal_reward must be positive".into()));
    }
    let goal = n_states - 1;

    let step = |s: usize, a: usize| -> usize {
        let x = (s % width) as isize;
        let y = (s / width) as isize;
        let (dx, dy) = GRID_MOVES[a];
        let nx = x + dx;
        let ny = y + dy;
        if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
            s
        } else {
            (ny as usize) * width + nx as usize
        }
    };

    let mut transition = Array3::zeros((n_states, GRID_ACTIONS, n_states));
    let mut reward = Array2::zeros((n_states, GRID_ACTIONS));
    for s in 0..n_states {
        for a in 0..GRID_ACTIONS {
            if s == goal {
                transition[[s, a, goal]] = 1.0;
                reward[[s, a]] = goal_reward;
                continue;
            }
            transition[[s, a, step(s, a)]] += 1.0 - slip_prob;
            for slip in 0..GRID_ACTIONS {
                transition[[s, a, step(s, slip)]] += slip_prob / GRID_ACTIONS as f64;
            }
        }
    }

    let mut initial_dist = Array1::zeros(n_states);
    initial_dist[0] = 1.0;

    MdpSpec::new(transition, reward, goal_reward, gamma, initial_dist)
}

fn check_shapes(mdp: &MdpSpec, policy: &TabularPolicy) -> Result<()> {
    if policy.probs.dim() != (mdp.n_states, mdp.n_actions) {
        return Err(Error::Argument(format!(
            "policy shape {:?} does not match MDP ({}, {})",
            policy.probs.dim(),
            mdp.n_states,
            mdp.n_actions
        )));
    }
    Ok(())
}

/// Reward vector `r_pi(s) = sum_a pi(a|s) r(s,a)` and transition matrix
/// `P_pi(s,s') = sum_a pi(a|s) T(s,a,s')`.
fn policy_dynamics(mdp: &MdpSpec, policy: &TabularPolicy) -> (Array1<f64>, Array2<f64>) {
    let n = mdp.n_states;
    let mut r_pi = Array1::zeros(n);
    let mut p_pi = Array2::zeros((n, n));
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let w = policy.probs[[s, a]];
            if w == 0.0 {
                continue;
            }
            r_pi[s] += w * mdp.reward[[s, a]];
            for s2 in 0..n {
                p_pi[[s, s2]] += w * mdp.transition[[s, a, s2]];
            }
        }
    }
    (r_pi, p_pi)
}

/// Exact policy evaluation: solves `(I - gamma * P_pi) V = r_pi` directly and
/// derives `Q(s,a) = r(s,a) + gamma * sum_s' T(s,a,s') V(s')`. Ground truth
/// for every audit in this crate.
pub fn exact_policy_evaluation(
    mdp: &MdpSpec,
    policy: &TabularPolicy,
) -> Result<(ValueTable, QTable)> {
    check_shapes(mdp, policy)?;
    let n = mdp.n_states;
    let (r_pi, p_pi) = policy_dynamics(mdp, policy);

    let mut system = Array2::eye(n);
    system.scaled_add(-mdp.gamma, &p_pi);
    let v = solve_dense(&system, &r_pi)?;

    let mut q = Array2::zeros((n, mdp.n_actions));
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let mut next = 0.0;
            for s2 in 0..n {
                next += mdp.transition[[s, a, s2]] * v[s2];
            }
            q[[s, a]] = mdp.reward[[s, a]] + mdp.gamma * next;
        }
    }
    Ok((ValueTable { values: v }, QTable { values: q }))
}

/// Expected discounted return `J = sum_s mu0(s) V_pi(s)`.
pub fn expected_return(mdp: &MdpSpec, policy: &TabularPolicy) -> Result<f64> {
    let (v, _) = exact_policy_evaluation(mdp, policy)?;
    Ok(mdp.initial_dist.dot(&v.values))
}

/// Discounted occupancy `d_pi = (1 - gamma) * mu0^T (I - gamma * P_pi)^{-1}`,
/// normalized, with `d_pi(s, a) = d_pi(s) * pi(a|s)`.
pub fn occupancy_measure(mdp: &MdpSpec, policy: &TabularPolicy) -> Result<OccupancyMeasure> {
    check_shapes(mdp, policy)?;
    let n = mdp.n_states;
    let (_, p_pi) = policy_dynamics(mdp, policy);

    // Transposed system: (I - gamma * P_pi^T) x = mu0, d = (1 - gamma) x.
    let mut system = Array2::eye(n);
    system.scaled_add(-mdp.gamma, &p_pi.t());
    let x = solve_dense(&system, &mdp.initial_dist)?;
    let mut d = x.mapv(|v| v * (1.0 - mdp.gamma));
    let total: f64 = d.sum();
    d.mapv_inplace(|v| v / total);

    let mut sa = Array2::zeros((n, mdp.n_actions));
    for s in 0..n {
        for a in 0..mdp.n_actions {
            sa[[s, a]] = d[s] * policy.probs[[s, a]];
        }
    }
    Ok(OccupancyMeasure {
        state_dist: d,
        state_action_dist: sa,
    })
}

/// Value iteration to sup-norm residual below `tol`, then the greedy
/// deterministic policy with ties broken by lowest action index.
pub fn solve_optimal(mdp: &MdpSpec, tol: f64) -> Result<TabularPolicy> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let n = mdp.n_states;
    let mut v = Array1::zeros(n);
    // gamma^k contraction: residual below tol is guaranteed well before this cap.
    let max_iter = 1_000_000;
    for _ in 0..max_iter {
        let mut v_next = Array1::zeros(n);
        for s in 0..n {
            let mut best = f64::NEG_INFINITY;
            for a in 0..mdp.n_actions {
                let mut q = mdp.reward[[s, a]];
                for s2 in 0..n {
                    q += mdp.gamma * mdp.transition[[s, a, s2]] * v[s2];
                }
                if q > best {
                    best = q;
                }
            }
            v_next[s] = best;
        }
        let residual = v_next
            .iter()
            .zip(v.iter())
            .fold(0.0_f64, |m, (a, b): (&f64, &f64)| m.max((a - b).abs()));
        v = v_next;
        if residual < tol {
            break;
        }
    }

    let mut actions = vec![0usize; n];
    for (s, slot) in actions.iter_mut().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for a in 0..mdp.n_actions {
            let mut q = mdp.reward[[s, a]];
            for s2 in 0..n {
                q += mdp.gamma * mdp.transition[[s, a, s2]] * v[s2];
            }
            if q > best {
                best = q;
                *slot = a;
            }
        }
    }
    TabularPolicy::deterministic(n, mdp.n_actions, &actions)
}

/// Per-state divergence between two policies at `state`.
pub fn divergence_at(
    p: &TabularPolicy,
    q: &TabularPolicy,
    state: usize,
    kind: DivergenceKind,
) -> Result<f64> {
    match kind {
        DivergenceKind::Tv => {
            let mut acc = 0.0;
            for a in 0..p.n_actions() {
                acc += (p.probs[[state, a]] - q.probs[[state, a]]).abs();
            }
            Ok(0.5 * acc)
        }
        DivergenceKind::Kl => {
            let mut acc = 0.0;
            for a in 0..p.n_actions() {
                let pa = p.probs[[state, a]];
                if pa == 0.0 {
                    continue; // 0 * log 0 = 0
                }
                let qa = q.probs[[state, a]];
                if qa <= 0.0 {
                    return Err(Error::Domain(format!(
                        "KL undefined: q({a}|{state}) = 0 while p({a}|{state}) = {pa} > 0"
                    )));
                }
                acc += pa * (pa / qa).ln();
            }
            Ok(acc)
        }
    }
}

/// Expected divergence `E_{s ~ weights}[D(p(.|s), q(.|s))]`. TV uses
/// `0.5 * sum |p - q|`; KL uses `sum p log(p/q)` with `0 log 0 = 0`.
pub fn divergence(
    p: &TabularPolicy,
    q: &TabularPolicy,
    weights: &OccupancyMeasure,
    kind: DivergenceKind,
) -> Result<f64> {
    if p.probs.dim() != q.probs.dim() {
        return Err(Error::Argument("policy shapes differ".into()));
    }
    if weights.state_dist.len() != p.n_states() {
        return Err(Error::Argument(
            "weight vector length does not match policies".into(),
        ));
    }
    let mut total = 0.0;
    for s in 0..p.n_states() {
        let w = weights.state_dist[s];
        if w == 0.0 {
            continue;
        }
        total += w * divergence_at(p, q, s, kind)?;
    }
    Ok(total)
}
