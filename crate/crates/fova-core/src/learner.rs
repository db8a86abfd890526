//! Client-side training: the vote mechanism, vote-based conservative policy
//! evaluation, and advantage-weighted policy improvement, plus the optional
//! L2-on-Q anchor used in continual runs.
//!
//! Everything is tabular and deterministic: evaluation iterates an exact
//! per-entry fixed point over the empirical model, improvement ascends the
//! training objective with analytic softmax gradients.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{build_empirical_mdp, estimate_behavior_policy, Dataset, EmpiricalMdp};
use crate::error::{Error, Result};
use crate::mdp::{MdpSpec, QTable, TabularPolicy, ValueTable, VoteWinner};

/// Exponent clamp guarding `exp` against overflow on pathological inputs.
const EXP_CLAMP: f64 = 700.0;

/// Training hyperparameters shared by evaluation and improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// Conservatism weight on the vote-vs-behavior density-ratio penalty.
    pub alpha: f64,
    /// Temperature of the exponentiated-advantage reweighting.
    pub beta: f64,
    /// Weight of the projection term in the improvement objective.
    pub lambda: f64,
    /// Discount used by the learner's backups.
    pub gamma: f64,
    /// Confidence level for bound calibration.
    pub delta_conf: f64,
    /// Probability floor applied to policies.
    pub zeta: f64,
    /// Sup-norm stopping tolerance for evaluation.
    pub eval_tol: f64,
    /// Iteration cap for evaluation.
    pub eval_max_iter: usize,
    /// Gradient-ascent step count for improvement.
    pub improve_steps: usize,
    /// Initial gradient-ascent learning rate.
    pub improve_lr: f64,
    /// Weight of the L2 anchor toward the previous Q-table (0 disables it).
    pub l2_q_weight: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 5.0,
            lambda: 5.0,
            gamma: 0.95,
            delta_conf: 0.05,
            zeta: 1e-6,
            eval_tol: 1e-9,
            eval_max_iter: 5000,
            improve_steps: 150,
            improve_lr: 1.0,
            l2_q_weight: 0.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0,1), got {}",
                self.gamma
            )));
        }
        if !(self.delta_conf > 0.0 && self.delta_conf < 1.0) {
            return Err(Error::Config(format!(
                "delta_conf must lie in (0,1), got {}",
                self.delta_conf
            )));
        }
        if self.zeta < 0.0 {
            return Err(Error::Config(format!(
                "zeta must be nonnegative, got {}",
                self.zeta
            )));
        }
        if !(self.eval_tol > 0.0) {
            return Err(Error::Config(format!(
                "eval_tol must be positive, got {}",
                self.eval_tol
            )));
        }
        if self.eval_max_iter == 0 {
            return Err(Error::Config("eval_max_iter must be at least 1".into()));
        }
        if self.improve_steps == 0 {
            return Err(Error::Config("improve_steps must be at least 1".into()));
        }
        if !(self.improve_lr > 0.0) {
            return Err(Error::Config(format!(
                "improve_lr must be positive, got {}",
                self.improve_lr
            )));
        }
        if self.l2_q_weight < 0.0 {
            return Err(Error::Config(format!(
                "l2_q_weight must be nonnegative, got {}",
                self.l2_q_weight
            )));
        }
        Ok(())
    }
}

/// How the vote scores each candidate policy at a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoteMode {
    /// Score by the exact expected Q-value under each candidate.
    ExpectedQ,
    /// Draw one action per candidate and score by that action's Q-value.
    /// Samples are a deterministic function of `(sample_seed, state)`.
    SampledQ { sample_seed: u64 },
}

/// One client's training state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub data: Dataset,
    /// Smoothed, floored estimate of the logging policy.
    pub behavior: TabularPolicy,
    pub local_policy: TabularPolicy,
    pub local_q: QTable,
    /// Q-table carried over from a previous training phase, if any.
    pub prev_q: Option<QTable>,
    pub params: HyperParams,
    pub empirical: EmpiricalMdp,
}

impl ClientState {
    /// Builds a client from its dataset: estimates the behavior policy with
    /// `smoothing`, floors it at `zeta`, induces the empirical model, and
    /// starts from a uniform local policy and zero Q-table.
    pub fn from_dataset(
        data: Dataset,
        mdp_shape: &MdpSpec,
        params: HyperParams,
        smoothing: f64,
        coverage_delta: f64,
    ) -> Result<Self> {
        params.validate()?;
        let behavior =
            estimate_behavior_policy(&data, smoothing)?.with_floor(params.zeta.max(1e-12));
        let empirical = build_empirical_mdp(&data, mdp_shape, coverage_delta)?;
        let n_states = mdp_shape.n_states;
        let n_actions = mdp_shape.n_actions;
        Ok(Self {
            data,
            behavior,
            local_policy: TabularPolicy::uniform(n_states, n_actions),
            local_q: QTable::zeros(n_states, n_actions),
            prev_q: None,
            params,
            empirical,
        })
    }

    pub fn n_states(&self) -> usize {
        self.empirical.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.empirical.n_actions
    }
}

fn sample_categorical(row: ndarray::ArrayView1<f64>, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}

fn vote_rng(sample_seed: u64, state: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sample_seed ^ (state as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Selects the best of the three candidate policies at `state` by Q-value.
///
/// In `ExpectedQ` mode each candidate is scored by its exact expected
/// Q-value and the winner's full action row is returned. In `SampledQ` mode
/// one action is drawn per candidate, scored pointwise, and the returned
/// distribution is a point mass on the winning sample. Ties resolve in the
/// fixed order behavior, global, local. No new policy is trained.
pub fn vote_policy(
    state: usize,
    q: &QTable,
    local: &TabularPolicy,
    behavior: &TabularPolicy,
    global_pi: &TabularPolicy,
    mode: VoteMode,
) -> Result<(VoteWinner, Array1<f64>)> {
    let shape = q.values.dim();
    if local.probs.dim() != shape || behavior.probs.dim() != shape || global_pi.probs.dim() != shape
    {
        return Err(Error::Argument(
            "vote candidates and Q-table have mismatched shapes".into(),
        ));
    }
    if state >= shape.0 {
        return Err(Error::Argument(format!("state {state} out of range")));
    }

    let candidates = [
        (VoteWinner::Behavior, behavior),
        (VoteWinner::Global, global_pi),
        (VoteWinner::Local, local),
    ];

    match mode {
        VoteMode::ExpectedQ => {
            let mut winner = VoteWinner::Behavior;
            let mut best = f64::NEG_INFINITY;
            let mut dist = Array1::zeros(shape.1);
            for (tag, pi) in candidates {
                let score: f64 = (0..shape.1)
                    .map(|a| pi.probs[[state, a]] * q.values[[state, a]])
                    .sum();
                if score > best {
                    best = score;
                    winner = tag;
                    dist.assign(&pi.probs.row(state));
                }
            }
            Ok((winner, dist))
        }
        VoteMode::SampledQ { sample_seed } => {
            let mut rng = vote_rng(sample_seed, state);
            let mut winner = VoteWinner::Behavior;
            let mut best = f64::NEG_INFINITY;
            let mut best_action = 0;
            for (tag, pi) in candidates {
                let a = sample_categorical(pi.probs.row(state), &mut rng);
                let score = q.values[[state, a]];
                if score > best {
                    best = score;
                    winner = tag;
                    best_action = a;
                }
            }
            let mut dist = Array1::zeros(shape.1);
            dist[best_action] = 1.0;
            Ok((winner, dist))
        }
    }
}

/// The vote applied at every state, packaged as a policy.
pub fn vote_policy_full(
    q: &QTable,
    local: &TabularPolicy,
    behavior: &TabularPolicy,
    global_pi: &TabularPolicy,
    mode: VoteMode,
) -> Result<(TabularPolicy, Vec<VoteWinner>)> {
    let (n_states, n_actions) = q.values.dim();
    let mut probs = Array2::zeros((n_states, n_actions));
    let mut winners = Vec::with_capacity(n_states);
    for s in 0..n_states {
        let (winner, dist) = vote_policy(s, q, local, behavior, global_pi, mode)?;
        probs.row_mut(s).assign(&dist);
        winners.push(winner);
    }
    Ok((TabularPolicy { probs }, winners))
}

/// Density-ratio discrepancy `sum_a p(a|s) (p(a|s)/q(a|s) - 1)` at one state.
/// Nonnegative; zero exactly when the rows coincide.
pub fn d_vcql(p: &TabularPolicy, q: &TabularPolicy, state: usize) -> Result<f64> {
    if p.probs.dim() != q.probs.dim() {
        return Err(Error::Argument("policy shapes differ".into()));
    }
    let mut acc = 0.0;
    for a in 0..p.n_actions() {
        let pa = p.probs[[state, a]];
        if pa == 0.0 {
            continue;
        }
        let qa = q.probs[[state, a]];
        if qa <= 0.0 {
            return Err(Error::Domain(format!(
                "density ratio undefined: q({a}|{state}) = 0 with p({a}|{state}) = {pa} > 0"
            )));
        }
        acc += pa * (pa / qa - 1.0);
    }
    Ok(acc)
}

/// Which policy drives the conservative evaluation backup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalPolicy {
    /// The vote over (local, behavior, global), recomputed each iteration.
    Vote,
    /// The client's local policy only (vote disabled).
    LocalOnly,
}

/// How conservative evaluation terminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalStatus {
    /// Joint fixed point: the Q-table solved to tolerance and the vote
    /// recomputed from it reproduces the evaluation policy.
    Converged,
    /// The vote revisited an earlier winner configuration; the last
    /// configuration was frozen and its fixed point solved exactly.
    VoteCycled,
    /// The sweep budget ran out.
    IterationBudget,
}

/// Result of conservative policy evaluation.
#[derive(Debug, Clone)]
pub struct VcqlOutcome {
    pub q: QTable,
    /// `V(s) = E_{pi_eval(.|s)}[Q(s,.)]` under the final evaluation policy.
    pub v: ValueTable,
    /// The evaluation policy the final Q-table is consistent with.
    pub eval_policy: TabularPolicy,
    pub winners: Vec<VoteWinner>,
    pub iterations: usize,
    pub residual: f64,
    pub status: EvalStatus,
    pub converged: bool,
}

/// Conservative policy evaluation under the vote policy.
///
/// Iterates, over covered pairs only,
/// `Q(s,a) <- r_hat(s,a) + gamma * sum_s' T_hat(s,a,s') E_{pi_v(.|s')}[Q(s',.)]
///           - alpha * (pi_v(a|s)/pi_beta_hat(a|s) - 1)`,
/// recomputing the vote from the current Q-table every iteration. Uncovered
/// pairs are pinned at the pessimistic default `-r_max/(1-gamma)` so they
/// can only lower a candidate's vote score. With a positive L2 anchor weight
/// the target blends toward the previous-phase Q-table. Non-convergence at
/// the iteration cap is reported, not raised.
pub fn vcql_evaluate(
    client: &ClientState,
    global_pi: &TabularPolicy,
    mode: VoteMode,
) -> Result<VcqlOutcome> {
    vcql_evaluate_with(client, global_pi, mode, EvalPolicy::Vote)
}

/// [`vcql_evaluate`] with the evaluation policy made explicit; `LocalOnly`
/// is the vote-ablated variant used by baselines.
pub fn vcql_evaluate_with(
    client: &ClientState,
    global_pi: &TabularPolicy,
    mode: VoteMode,
    eval_policy: EvalPolicy,
) -> Result<VcqlOutcome> {
    let emp = &client.empirical;
    let params = &client.params;
    params.validate()?;
    let (n_states, n_actions) = (emp.n_states, emp.n_actions);
    let shape = (n_states, n_actions);
    if global_pi.probs.dim() != shape
        || client.behavior.probs.dim() != shape
        || client.local_policy.probs.dim() != shape
    {
        return Err(Error::Argument(
            "policy shapes do not match the empirical model".into(),
        ));
    }

    let pessimistic = -emp.r_max / (1.0 - params.gamma);
    let mut q = client.local_q.clone();
    for s in 0..n_states {
        for a in 0..n_actions {
            if !emp.covered_mask[[s, a]] {
                q.values[[s, a]] = pessimistic;
            }
        }
    }

    let anchor = params.l2_q_weight > 0.0;
    let w2 = 2.0 * params.l2_q_weight;

    let select = |q: &QTable| -> Result<(TabularPolicy, Vec<VoteWinner>)> {
        match eval_policy {
            EvalPolicy::Vote => {
                vote_policy_full(q, &client.local_policy, &client.behavior, global_pi, mode)
            }
            EvalPolicy::LocalOnly => Ok((
                client.local_policy.clone(),
                vec![VoteWinner::Local; n_states],
            )),
        }
    };

    // One synchronous sweep of the frozen-policy operator; returns the
    // sup-norm change over covered pairs.
    let sweep = |q: &mut QTable, pi_eval: &TabularPolicy| -> Result<f64> {
        let v_next = q.value_under(pi_eval);
        let mut residual: f64 = 0.0;
        let mut next_q = q.clone();
        for s in 0..n_states {
            for a in 0..n_actions {
                if !emp.covered_mask[[s, a]] {
                    continue;
                }
                let mut backup = emp.r_hat[[s, a]];
                for s2 in 0..n_states {
                    backup += params.gamma * emp.t_hat[[s, a, s2]] * v_next.values[s2];
                }
                let b = client.behavior.probs[[s, a]];
                if b <= 0.0 {
                    return Err(Error::Domain(format!(
                        "behavior({a}|{s}) = 0; apply a policy floor before evaluation"
                    )));
                }
                let penalty = params.alpha * (pi_eval.probs[[s, a]] / b - 1.0);
                let mut target = backup - penalty;
                if anchor {
                    if let Some(prev) = &client.prev_q {
                        target = (target + w2 * prev.values[[s, a]]) / (1.0 + w2);
                    }
                }
                residual = residual.max((target - q.values[[s, a]]).abs());
                next_q.values[[s, a]] = target;
            }
        }
        *q = next_q;
        Ok(residual)
    };

    // The penalty term jumps when a vote flips, so interleaving vote updates
    // with single sweeps can cycle. Instead: solve the frozen-vote fixed
    // point (an affine contraction), then refresh the vote, until the
    // winners stabilize, a configuration recurs, or the budget runs out.
    // The returned Q-table is always the solved fixed point of the returned
    // evaluation policy.
    let (mut pi_eval, mut winners) = select(&q)?;
    let mut seen: std::collections::HashSet<Vec<VoteWinner>> = std::collections::HashSet::new();
    seen.insert(winners.clone());
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let status;

    'outer: loop {
        while iterations < params.eval_max_iter {
            iterations += 1;
            residual = sweep(&mut q, &pi_eval)?;
            if residual < params.eval_tol {
                break;
            }
        }
        if residual >= params.eval_tol {
            status = EvalStatus::IterationBudget;
            break 'outer;
        }
        let (new_pi, new_winners) = select(&q)?;
        if new_winners == winners {
            status = EvalStatus::Converged;
            break 'outer;
        }
        if !seen.insert(new_winners.clone()) {
            status = EvalStatus::VoteCycled;
            break 'outer;
        }
        pi_eval = new_pi;
        winners = new_winners;
    }

    let v = q.value_under(&pi_eval);
    let converged = status == EvalStatus::Converged;
    Ok(VcqlOutcome {
        q,
        v,
        eval_policy: pi_eval,
        winners,
        iterations,
        residual,
        status,
        converged,
    })
}

/// Closed-form exponentiated-advantage reweighting of the behavior policy:
/// `pi(a|s) = behavior(a|s) exp((Q(s,a) - V(s))/beta) / Z(s)`.
///
/// The per-state max advantage is subtracted before exponentiation; the
/// normalizer is shift-covariant, so the result is exact.
pub fn awr_target(
    q: &QTable,
    v: &ValueTable,
    behavior: &TabularPolicy,
    beta: f64,
) -> Result<TabularPolicy> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    let (n_states, n_actions) = q.values.dim();
    if behavior.probs.dim() != (n_states, n_actions) || v.values.len() != n_states {
        return Err(Error::Argument(
            "awr_target inputs have mismatched shapes".into(),
        ));
    }
    let mut probs = Array2::zeros((n_states, n_actions));
    for s in 0..n_states {
        let mut max_adv = f64::NEG_INFINITY;
        for a in 0..n_actions {
            max_adv = max_adv.max(q.values[[s, a]] - v.values[s]);
        }
        let mut z = 0.0;
        for a in 0..n_actions {
            let adv = q.values[[s, a]] - v.values[s];
            let w = behavior.probs[[s, a]] * ((adv - max_adv) / beta).exp();
            probs[[s, a]] = w;
            z += w;
        }
        if !(z > 0.0) {
            return Err(Error::Domain(format!(
                "partition function vanished at state {s}"
            )));
        }
        for a in 0..n_actions {
            probs[[s, a]] /= z;
        }
    }
    Ok(TabularPolicy { probs })
}

/// Fixed ingredients of the improvement objective at one client.
#[derive(Debug, Clone)]
pub struct ImproveProblem {
    /// Dataset state weights `N(s)/|D|`.
    pub state_weights: Array1<f64>,
    /// Projection-term action weights `behavior(a|s) exp(A(s,a)/beta)`.
    pub projection_weights: Array2<f64>,
    /// The converged Q-table.
    pub q: Array2<f64>,
    /// Weight of the projection term (lambda).
    pub lambda: f64,
    /// Weight of the expected-Q term; 1 for the full objective, 0 isolates
    /// the projection term.
    pub q_term_weight: f64,
}

impl ImproveProblem {
    pub fn new(
        client: &ClientState,
        q: &QTable,
        v: &ValueTable,
        q_term_weight: f64,
    ) -> Result<Self> {
        let (n_states, n_actions) = q.values.dim();
        if v.values.len() != n_states {
            return Err(Error::Argument("value table length mismatch".into()));
        }
        let total = client.data.len() as f64;
        if total == 0.0 {
            return Err(Error::Domain(
                "improvement requires a nonempty dataset".into(),
            ));
        }
        let counts = client.data.counts_state();
        let state_weights = Array1::from_iter(counts.iter().map(|&c| c as f64 / total));
        let beta = client.params.beta;
        let mut projection_weights = Array2::zeros((n_states, n_actions));
        for s in 0..n_states {
            for a in 0..n_actions {
                let adv = q.values[[s, a]] - v.values[s];
                let e = (adv / beta).clamp(-EXP_CLAMP, EXP_CLAMP);
                projection_weights[[s, a]] = client.behavior.probs[[s, a]] * e.exp();
            }
        }
        Ok(Self {
            state_weights,
            projection_weights,
            q: q.values.clone(),
            lambda: client.params.lambda,
            q_term_weight,
        })
    }

    /// Objective value at softmax logits `z`.
    pub fn objective(&self, logits: &Array2<f64>) -> f64 {
        let probs = softmax_rows(logits);
        let log_probs = log_softmax_rows(logits);
        let (n_states, n_actions) = logits.dim();
        let mut total = 0.0;
        for s in 0..n_states {
            let w = self.state_weights[s];
            if w == 0.0 {
                continue;
            }
            let mut proj = 0.0;
            let mut expected_q = 0.0;
            for a in 0..n_actions {
                proj += self.projection_weights[[s, a]] * log_probs[[s, a]];
                expected_q += probs[[s, a]] * self.q[[s, a]];
            }
            total += w * (self.lambda * proj + self.q_term_weight * expected_q);
        }
        total
    }

    /// Analytic gradient of [`Self::objective`] with respect to the logits.
    pub fn gradient(&self, logits: &Array2<f64>) -> Array2<f64> {
        let probs = softmax_rows(logits);
        let (n_states, n_actions) = logits.dim();
        let mut grad = Array2::zeros((n_states, n_actions));
        for s in 0..n_states {
            let w = self.state_weights[s];
            if w == 0.0 {
                continue;
            }
            let proj_total: f64 = (0..n_actions)
                .map(|a| self.projection_weights[[s, a]])
                .sum();
            let q_mean: f64 = (0..n_actions).map(|a| probs[[s, a]] * self.q[[s, a]]).sum();
            for a in 0..n_actions {
                let p = probs[[s, a]];
                let proj_part = self.projection_weights[[s, a]] - p * proj_total;
                let q_part = p * (self.q[[s, a]] - q_mean);
                grad[[s, a]] = w * (self.lambda * proj_part + self.q_term_weight * q_part);
            }
        }
        grad
    }
}

pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let (n_states, n_actions) = logits.dim();
    let mut out = Array2::zeros((n_states, n_actions));
    for s in 0..n_states {
        let max = logits
            .row(s)
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        for a in 0..n_actions {
            let e = (logits[[s, a]] - max).exp();
            out[[s, a]] = e;
            z += e;
        }
        for a in 0..n_actions {
            out[[s, a]] /= z;
        }
    }
    out
}

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let (n_states, n_actions) = logits.dim();
    let mut out = Array2::zeros((n_states, n_actions));
    for s in 0..n_states {
        let max = logits
            .row(s)
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let log_z = logits
            .row(s)
            .iter()
            .map(|&v| (v - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        for a in 0..n_actions {
            out[[s, a]] = logits[[s, a]] - log_z;
        }
    }
    out
}

/// Result of one improvement run.
#[derive(Debug, Clone)]
pub struct ImproveOutcome {
    pub policy: TabularPolicy,
    pub objective: f64,
    pub steps_taken: usize,
    /// Set when backtracking could not find an ascent direction.
    pub stalled: bool,
}

/// Gradient ascent on the softmax logits of the local policy.
///
/// Each step backtracks (halving the learning rate, at most 20 times) until
/// the objective does not decrease; accepted steps are therefore monotone.
/// The returned policy has the probability floor re-imposed by clipping and
/// renormalization. If every backtrack in a step fails, the last iterate is
/// returned with `stalled` set.
pub fn awr_improve(
    client: &ClientState,
    _global_pi: &TabularPolicy,
    q: &QTable,
    v: &ValueTable,
) -> Result<ImproveOutcome> {
    awr_improve_weighted(client, q, v, 1.0)
}

/// [`awr_improve`] with an explicit weight on the expected-Q term; weight 0
/// isolates the projection term, whose optimum is the closed-form
/// reweighting checked against [`awr_target`].
pub fn awr_improve_weighted(
    client: &ClientState,
    q: &QTable,
    v: &ValueTable,
    q_term_weight: f64,
) -> Result<ImproveOutcome> {
    let params = &client.params;
    params.validate()?;
    let problem = ImproveProblem::new(client, q, v, q_term_weight)?;

    let floored = client.local_policy.with_floor(params.zeta.max(1e-12));
    let mut logits = floored.probs.mapv(f64::ln);
    let mut value = problem.objective(&logits);
    let mut lr = params.improve_lr;
    let mut stalled = false;
    let mut steps_taken = 0;

    for _ in 0..params.improve_steps {
        let grad = problem.gradient(&logits);
        let mut accepted = false;
        for _ in 0..=20 {
            let trial = &logits + &(lr * &grad);
            let trial_value = problem.objective(&trial);
            if trial_value >= value {
                logits = trial;
                value = trial_value;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            stalled = true;
            break;
        }
        steps_taken += 1;
    }

    let policy = TabularPolicy {
        probs: softmax_rows(&logits),
    }
    .with_floor(params.zeta);
    Ok(ImproveOutcome {
        policy,
        objective: value,
        steps_taken,
        stalled,
    })
}

/// Output of one local update.
#[derive(Debug, Clone)]
pub struct LocalUpdateOutcome {
    pub q: QTable,
    pub policy: TabularPolicy,
    pub eval_iterations: usize,
    pub eval_residual: f64,
    pub eval_status: EvalStatus,
    pub improve_stalled: bool,
}

/// One client round: warm-start the Q-table from the global table, run
/// conservative evaluation, then improve the local policy from the converged
/// `(Q, V)`. Stores the results back on the client and returns them.
pub fn local_update(
    client: &mut ClientState,
    global_pi: &TabularPolicy,
    global_q: &QTable,
    mode: VoteMode,
) -> Result<LocalUpdateOutcome> {
    client.local_q = global_q.clone();
    let eval = vcql_evaluate(client, global_pi, mode)?;
    let improved = awr_improve(client, global_pi, &eval.q, &eval.v)?;
    client.local_q = eval.q.clone();
    client.local_policy = improved.policy.clone();
    Ok(LocalUpdateOutcome {
        q: eval.q,
        policy: improved.policy,
        eval_iterations: eval.iterations,
        eval_residual: eval.residual,
        eval_status: eval.status,
        improve_stalled: improved.stalled,
    })
}
