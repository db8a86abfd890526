//! Closed-form bound computations and their empirical checks: the
//! conservatism threshold, return-gap terms, improvement-gap inequalities,
//! heterogeneity norms, and the per-round safety bound.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::learner::{d_vcql, vcql_evaluate, ClientState, VoteMode};
use crate::mdp::{
    exact_policy_evaluation, expected_return, matrix_from_vec, matrix_to_vec, occupancy_measure,
    MdpSpec, OccupancyMeasure, TabularPolicy,
};

/// Concentration constants and shared scalars used across the bound terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants {
    pub c_r: f64,
    pub c_t: f64,
    pub gamma: f64,
    pub r_max: f64,
    /// Confidence level; doubles as the coverage floor `|D(s,a)|/|D| >= delta`
    /// applied to pairs outside the dataset's support.
    pub delta: f64,
}

impl BoundConstants {
    pub fn validate(&self) -> Result<()> {
        if self.c_r < 0.0 || self.c_t < 0.0 {
            return Err(Error::Config(
                "concentration constants must be nonnegative".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0,1), got {}",
                self.gamma
            )));
        }
        if !(self.r_max > 0.0) {
            return Err(Error::Config("r_max must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!(
                "delta must lie in (0,1), got {}",
                self.delta
            )));
        }
        Ok(())
    }

    /// Combined reward+transition constant `c_r + 2 gamma r_max c_t / (1-gamma)`.
    pub fn combined(&self) -> f64 {
        self.c_r + 2.0 * self.gamma * self.r_max * self.c_t / (1.0 - self.gamma)
    }

    /// `sigma = 2 alpha / (delta (1-gamma))`.
    pub fn sigma(&self, alpha: f64) -> f64 {
        2.0 * alpha / (self.delta * (1.0 - self.gamma))
    }
}

/// Hoeffding-style calibration at confidence `delta`: the reward constant
/// scales the reward range `2 r_max` by `sqrt(log(2/delta)/2)`; the
/// transition constant is the L1 concentration `sqrt(2 |S| log(2/delta))`.
pub fn hoeffding_constants(delta: f64, r_max: f64, n_states: usize) -> (f64, f64) {
    let log_term = (2.0 / delta).ln();
    let c_r = 2.0 * r_max * (log_term / 2.0).sqrt();
    let c_t = (2.0 * n_states as f64 * log_term).sqrt();
    (c_r, c_t)
}

/// JSON has no infinity literal; the threshold's +inf sentinel maps to null.
mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Numeric bound terms for one audited client, serializable as JSON.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct BoundReport {
    #[serde(with = "inf_as_null")]
    pub alpha_threshold: f64,
    pub xi_tilde: f64,
    pub xi_bar: f64,
    pub xi_b: f64,
    pub sigma: f64,
    pub c_r_delta: f64,
    pub c_t_delta: f64,
    pub local_gap_lower: f64,
    pub global_gap_lower: f64,
    pub holds_empirically: HoldsFlags,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct HoldsFlags {
    pub conservatism: bool,
    pub return_gap: bool,
    pub target_improvement: bool,
    pub local_improvement: bool,
    pub safe_bound: bool,
}

/// Smallest conservatism weight that prevents overestimation w.h.p.:
/// the maximum over covered states of
/// `combined * r_max / ((1-gamma) sqrt(|D(s)|)) / D_ratio(s)` where
/// `D_ratio` is the vote-vs-behavior density-ratio discrepancy. Returns 0
/// when the concentration constants are zero (exact empirical model) and
/// `+inf` when the discrepancy vanishes at every contributing state while
/// sampling error remains.
#[allow(clippy::too_many_arguments)]
pub fn alpha_threshold(
    data: &Dataset,
    vote: &TabularPolicy,
    behavior: &TabularPolicy,
    delta_conf: f64,
    c_r: f64,
    c_t: f64,
    gamma: f64,
    r_max: f64,
) -> Result<f64> {
    let constants = BoundConstants {
        c_r,
        c_t,
        gamma,
        r_max,
        delta: delta_conf,
    };
    constants.validate()?;
    let combined = constants.combined();
    if combined == 0.0 {
        return Ok(0.0);
    }
    let state_counts = data.counts_state();
    let mut threshold: f64 = 0.0;
    let mut any_covered = false;
    for (s, &count) in state_counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        any_covered = true;
        let numer = combined * r_max / ((1.0 - gamma) * (count as f64).sqrt());
        let discrepancy = d_vcql(vote, behavior, s)?;
        let ratio = if discrepancy > 0.0 {
            numer / discrepancy
        } else {
            f64::INFINITY
        };
        threshold = threshold.max(ratio);
    }
    if !any_covered {
        return Err(Error::Domain("dataset covers no state".into()));
    }
    Ok(threshold)
}

/// Which model the conservatism check compares against.
#[derive(Debug, Clone, Copy)]
pub enum ConservatismReference<'a> {
    /// The empirical model itself: the penalty makes this hold for any
    /// nonnegative weight, a structural sanity check.
    Empirical,
    /// The true MDP: the nontrivial w.h.p. claim at `alpha >= threshold`.
    True(&'a MdpSpec),
}

#[derive(Debug, Clone)]
pub struct ConservatismAudit {
    /// States with at least one covered action, in index order.
    pub checked_states: Vec<usize>,
    /// Pass flag per checked state: `V_hat(s) <= V_ref(s) + 1e-9`.
    pub flags: Vec<bool>,
    /// Largest `V_hat(s) - V_ref(s)` over checked states.
    pub worst_violation: f64,
    pub all_pass: bool,
}

/// Runs evaluation to convergence and compares the learned state values to
/// the exact values of the final evaluation policy on the reference model.
pub fn conservatism_audit(
    client: &ClientState,
    global_pi: &TabularPolicy,
    mode: VoteMode,
    reference: ConservatismReference<'_>,
) -> Result<ConservatismAudit> {
    let outcome = vcql_evaluate(client, global_pi, mode)?;
    let v_ref = match reference {
        ConservatismReference::Empirical => {
            let uniform_init =
                ndarray::Array1::from_elem(client.n_states(), 1.0 / client.n_states() as f64);
            let model = client.empirical.as_mdp_spec(uniform_init)?;
            exact_policy_evaluation(&model, &outcome.eval_policy)?.0
        }
        ConservatismReference::True(mdp) => exact_policy_evaluation(mdp, &outcome.eval_policy)?.0,
    };

    let state_counts = client.data.counts_state();
    let mut checked_states = Vec::new();
    let mut flags = Vec::new();
    let mut worst = f64::NEG_INFINITY;
    for (s, &count) in state_counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let gap = outcome.v.values[s] - v_ref.values[s];
        checked_states.push(s);
        flags.push(gap <= 1e-9);
        worst = worst.max(gap);
    }
    let all_pass = flags.iter().all(|&f| f);
    Ok(ConservatismAudit {
        checked_states,
        flags,
        worst_violation: worst,
        all_pass,
    })
}

/// Return-gap term and whether the coverage floor was needed.
#[derive(Debug, Clone, Copy)]
pub struct XiResult {
    pub xi: f64,
    /// True when some `(s,a)` with positive policy mass had zero counts and
    /// the `delta |D|` floor stood in for its cardinality.
    pub used_delta_floor: bool,
}

/// The return-gap bound between the empirical and true model for `policy`:
///
/// `xi = 2 gamma r_max c_t/(1-gamma)^2 * E_{s~d_pi}[sqrt((1 + D_ratio(s)) |A| / |D|)]
///     + c_r/(1-gamma) * E_{(s,a)~d_pi}[1/sqrt(|D(s,a)|)]`
///
/// with the occupancy taken on the (completed) empirical model
/// `empirical_mdp` and the coverage floor `delta |D|` substituted for
/// uncovered pairs carrying policy mass.
pub fn return_gap_xi(
    data: &Dataset,
    empirical_mdp: &MdpSpec,
    policy: &TabularPolicy,
    behavior: &TabularPolicy,
    constants: &BoundConstants,
) -> Result<XiResult> {
    constants.validate()?;
    let occ = occupancy_measure(empirical_mdp, policy)?;
    let n_actions = empirical_mdp.n_actions as f64;
    let total = data.len() as f64;
    if total == 0.0 {
        return Err(Error::Domain("return gap needs a nonempty dataset".into()));
    }

    let mut transition_term = 0.0;
    for s in 0..empirical_mdp.n_states {
        let w = occ.state_dist[s];
        if w == 0.0 {
            continue;
        }
        let ratio = 1.0 + d_vcql(policy, behavior, s)?;
        transition_term += w * (ratio * n_actions / total).sqrt();
    }
    transition_term *=
        2.0 * constants.gamma * constants.r_max * constants.c_t / (1.0 - constants.gamma).powi(2);

    let mut reward_term = 0.0;
    let mut used_delta_floor = false;
    for s in 0..empirical_mdp.n_states {
        for a in 0..empirical_mdp.n_actions {
            let w = occ.state_action_dist[[s, a]];
            if w == 0.0 {
                continue;
            }
            let count = data.counts_sa[[s, a]];
            let effective = if count > 0 {
                count as f64
            } else {
                used_delta_floor = true;
                constants.delta * total
            };
            reward_term += w / effective.sqrt();
        }
    }
    reward_term *= constants.c_r / (1.0 - constants.gamma);

    Ok(XiResult {
        xi: transition_term + reward_term,
        used_delta_floor,
    })
}

/// Which improvement inequality to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapLevel {
    /// Improvement of the learned local policy:
    /// `lambda KL(target, learned) + beta KL(target, behavior) - 3 sigma
    ///  - xi_b - 2 xi_bar - xi_tilde`.
    Local,
    /// Improvement of the closed-form target:
    /// `beta KL(target, behavior) - sigma - xi_b - xi_bar`.
    Global,
}

/// Regularizer weights and the state measure for the KL terms.
#[derive(Debug, Clone, Copy)]
pub struct GapWeights<'a> {
    pub lambda: f64,
    pub beta: f64,
    pub state_weights: &'a OccupancyMeasure,
}

/// Evaluates one improvement inequality: the left side is the oracle return
/// gap `J(M, learned) - J(M, behavior)`, the right side the bound assembled
/// from `report` and the KL terms. Stores the right side back into the
/// report and returns `(lhs, rhs, holds)`.
pub fn improvement_gap(
    mdp: &MdpSpec,
    learned: &TabularPolicy,
    behavior: &TabularPolicy,
    target: &TabularPolicy,
    report: &mut BoundReport,
    level: GapLevel,
    weights: GapWeights<'_>,
) -> Result<(f64, f64, bool)> {
    let lhs = expected_return(mdp, learned)? - expected_return(mdp, behavior)?;
    let kl_target_behavior = crate::mdp::divergence(
        target,
        behavior,
        weights.state_weights,
        crate::mdp::DivergenceKind::Kl,
    )?;
    let rhs = match level {
        GapLevel::Global => {
            kl_target_behavior * weights.beta - report.sigma - report.xi_b - report.xi_bar
        }
        GapLevel::Local => {
            let kl_target_learned = crate::mdp::divergence(
                target,
                learned,
                weights.state_weights,
                crate::mdp::DivergenceKind::Kl,
            )?;
            weights.lambda * kl_target_learned + weights.beta * kl_target_behavior
                - 3.0 * report.sigma
                - report.xi_b
                - 2.0 * report.xi_bar
                - report.xi_tilde
        }
    };
    match level {
        GapLevel::Global => report.global_gap_lower = rhs,
        GapLevel::Local => report.local_gap_lower = rhs,
    }
    let holds = lhs >= rhs - 1e-12;
    Ok((lhs, rhs, holds))
}

/// Which dynamics back the heterogeneity occupancies and advantages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeterogeneityDynamics {
    /// Audit mode: the shared true MDP, isolating the formula from
    /// estimation noise.
    True,
    /// Each client's completed empirical model.
    Empirical,
}

/// Heterogeneity terms per client, serializable as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    pub h_matrices: Vec<Vec<Vec<f64>>>,
    pub h_norms: Vec<f64>,
    pub l_terms: Vec<f64>,
    pub h_terms: Vec<f64>,
    pub safe_bound: Option<f64>,
    /// True when some occupancy entry needed the floor before inversion.
    pub occupancy_floored: bool,
}

impl HeterogeneityReport {
    pub fn h_matrix(&self, k: usize) -> Result<Array2<f64>> {
        matrix_from_vec(&self.h_matrices[k])
    }
}

/// Per-client heterogeneity: with `Lambda_k = diag(d_behavior_k)` and `A_k`
/// the advantage matrix of client `k`'s behavior policy,
/// `H_k = (1/K) sum_n Lambda_k^{-1} Lambda_n A_n - A_k`, reported with its
/// Frobenius norm and the derived aggregation / mismatch scales
/// `l_k = 2 gamma max|A_k| / (1-gamma)^2` and `h_k = 2 ||H_k||_F / (1-gamma)^2`.
pub fn heterogeneity_norm(clients: &[ClientState], mdp: &MdpSpec) -> Result<HeterogeneityReport> {
    heterogeneity_norm_with(clients, mdp, HeterogeneityDynamics::True)
}

pub fn heterogeneity_norm_with(
    clients: &[ClientState],
    mdp: &MdpSpec,
    dynamics: HeterogeneityDynamics,
) -> Result<HeterogeneityReport> {
    if clients.is_empty() {
        return Err(Error::Argument(
            "heterogeneity needs at least one client".into(),
        ));
    }
    let k_total = clients.len();
    let (n_states, n_actions) = (mdp.n_states, mdp.n_actions);
    let mut occupancies = Vec::with_capacity(k_total);
    let mut advantages = Vec::with_capacity(k_total);
    let mut occupancy_floored = false;

    for client in clients {
        let model = match dynamics {
            HeterogeneityDynamics::True => mdp.clone(),
            HeterogeneityDynamics::Empirical => {
                client.empirical.as_mdp_spec(mdp.initial_dist.clone())?
            }
        };
        let occ = occupancy_measure(&model, &client.behavior)?;
        let floor = client.params.zeta.max(1e-12);
        let lam: Vec<f64> = occ
            .state_dist
            .iter()
            .map(|&d| {
                if d < floor {
                    occupancy_floored = true;
                    floor
                } else {
                    d
                }
            })
            .collect();
        let (v, q) = exact_policy_evaluation(&model, &client.behavior)?;
        let mut adv = Array2::zeros((n_states, n_actions));
        for s in 0..n_states {
            for a in 0..n_actions {
                adv[[s, a]] = q.values[[s, a]] - v.values[s];
            }
        }
        occupancies.push(lam);
        advantages.push(adv);
    }

    let mut h_matrices = Vec::with_capacity(k_total);
    let mut h_norms = Vec::with_capacity(k_total);
    let mut l_terms = Vec::with_capacity(k_total);
    let mut h_terms = Vec::with_capacity(k_total);
    let denom = (1.0 - mdp.gamma).powi(2);

    for k in 0..k_total {
        let mut h = Array2::zeros((n_states, n_actions));
        for s in 0..n_states {
            let lam_k = occupancies[k][s];
            for a in 0..n_actions {
                let mut avg = 0.0;
                for n in 0..k_total {
                    avg += occupancies[n][s] * advantages[n][[s, a]];
                }
                avg /= k_total as f64;
                h[[s, a]] = avg / lam_k - advantages[k][[s, a]];
            }
        }
        let frob = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        let max_adv = advantages[k].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        h_norms.push(frob);
        l_terms.push(2.0 * mdp.gamma * max_adv / denom);
        h_terms.push(2.0 * frob / denom);
        h_matrices.push(matrix_to_vec(&h));
    }

    Ok(HeterogeneityReport {
        h_matrices,
        h_norms,
        l_terms,
        h_terms,
        safe_bound: None,
        occupancy_floored,
    })
}

/// Per-round safety bound, strictly decreasing in both regularizers:
/// `B(lambda, beta) = mean(xi_terms) + mean(l_k tv_k)
/// + mean((l_k + h_k + 2 sigma)^2)/(8 lambda)
/// + mean((l_k + h_k + sigma)^2)/(8 beta)`.
pub fn safe_bound(
    lambda: f64,
    beta: f64,
    report: &HeterogeneityReport,
    xi_terms: &[f64],
    tv_terms: &[f64],
    sigma: f64,
) -> Result<f64> {
    if !(lambda > 0.0 && beta > 0.0) {
        return Err(Error::Config("lambda and beta must be positive".into()));
    }
    let k = report.l_terms.len();
    if xi_terms.len() != k || tv_terms.len() != k {
        return Err(Error::Argument(
            "xi and TV term vectors must have one entry per client".into(),
        ));
    }
    if sigma < 0.0 {
        return Err(Error::Config("sigma must be nonnegative".into()));
    }
    let mean = |it: Box<dyn Iterator<Item = f64> + '_>| it.sum::<f64>() / k as f64;
    let xi_mean = mean(Box::new(xi_terms.iter().copied()));
    let tv_mean = mean(Box::new(
        report
            .l_terms
            .iter()
            .zip(tv_terms.iter())
            .map(|(&l, &tv)| l * tv),
    ));
    let lam_mean = mean(Box::new(
        report
            .l_terms
            .iter()
            .zip(report.h_terms.iter())
            .map(|(&l, &h)| (l + h + 2.0 * sigma).powi(2)),
    ));
    let beta_mean = mean(Box::new(
        report
            .l_terms
            .iter()
            .zip(report.h_terms.iter())
            .map(|(&l, &h)| (l + h + sigma).powi(2)),
    ));
    Ok(xi_mean + tv_mean + lam_mean / (8.0 * lambda) + beta_mean / (8.0 * beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collect_dataset, make_behavior_policy, Transition};
    use crate::learner::{awr_target, HyperParams};
    use crate::mdp::{make_gridworld, make_random_mdp};
    use approx::assert_abs_diff_eq;

    fn client_from(
        mdp: &MdpSpec,
        behavior: &TabularPolicy,
        params: HyperParams,
        n: usize,
        seed: u64,
    ) -> ClientState {
        let data = collect_dataset(mdp, behavior, n, 100, seed).unwrap();
        ClientState::from_dataset(data, mdp, params, 0.1, 1e-9).unwrap()
    }

    #[test]
    fn alpha_threshold_zero_constants_give_zero() {
        let mdp = make_gridworld(2, 2, 0.0, 1.0, 0.9).unwrap();
        let behavior = TabularPolicy::uniform(4, 4);
        let data = collect_dataset(&mdp, &behavior, 500, 100, 3).unwrap();
        let vote = TabularPolicy::random(4, 4, 9).with_floor(1e-6);
        let t = alpha_threshold(&data, &vote, &behavior, 0.05, 0.0, 0.0, 0.9, 1.0).unwrap();
        assert_eq!(t, 0.0);
        // Vote identical to behavior with an exact model: still zero.
        let t2 = alpha_threshold(&data, &behavior, &behavior, 0.05, 0.0, 0.0, 0.9, 1.0).unwrap();
        assert_eq!(t2, 0.0);
    }

    #[test]
    fn alpha_threshold_hand_instance() {
        // |D(s)| = 100, combined * r_max/(1-gamma) = 10, discrepancy = 1 -> 1.0.
        // Single state, two actions, 100 visits; choose c_r so that
        // combined = c_r = 1 with gamma = 0.9 and r_max = 1:
        // numer = 1 * 1 / (0.1 * 10) = 1.
        let mut transitions = Vec::new();
        for i in 0..100 {
            transitions.push(Transition {
                state: 0,
                action: i % 2,
                reward: 0.0,
                next_state: 0,
            });
        }
        let data = Dataset::from_transitions(1, 2, transitions, 0.0, 0).unwrap();
        // Vote = delta(a0), behavior uniform: discrepancy = 1.
        let vote = TabularPolicy::deterministic(1, 2, &[0]).unwrap();
        let behavior = TabularPolicy::uniform(1, 2);
        let t = alpha_threshold(&data, &vote, &behavior, 0.05, 1.0, 0.0, 0.9, 1.0).unwrap();
        assert_abs_diff_eq!(t, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn alpha_threshold_infinite_when_vote_equals_behavior() {
        let mut transitions = Vec::new();
        for i in 0..50 {
            transitions.push(Transition {
                state: 0,
                action: i % 2,
                reward: 0.0,
                next_state: 0,
            });
        }
        let data = Dataset::from_transitions(1, 2, transitions, 0.0, 0).unwrap();
        let behavior = TabularPolicy::uniform(1, 2);
        let t = alpha_threshold(&data, &behavior, &behavior, 0.05, 1.0, 1.0, 0.9, 1.0).unwrap();
        assert!(t.is_infinite());
    }

    #[test]
    fn conservatism_exact_model_passes() {
        // Deterministic gridworld, full coverage, alpha = 1: V-hat must sit
        // below the exact value of the final evaluation policy.
        let mdp = make_gridworld(2, 2, 0.0, 1.0, 0.9).unwrap();
        let behavior = TabularPolicy::uniform(4, 4);
        let params = HyperParams {
            alpha: 1.0,
            gamma: 0.9,
            ..HyperParams::default()
        };
        let mut client = client_from(&mdp, &behavior, params, 4000, 5);
        assert!(client.empirical.fully_covered());
        client.local_policy = TabularPolicy::random(4, 4, 3).with_floor(1e-6);
        let global = TabularPolicy::random(4, 4, 8).with_floor(1e-6);
        let audit = conservatism_audit(
            &client,
            &global,
            VoteMode::ExpectedQ,
            ConservatismReference::True(&mdp),
        )
        .unwrap();
        assert!(audit.all_pass, "worst violation {}", audit.worst_violation);
    }

    #[test]
    fn conservatism_alpha_zero_degenerate_vote_is_exact() {
        let mdp = make_gridworld(2, 2, 0.0, 1.0, 0.9).unwrap();
        let behavior = TabularPolicy::uniform(4, 4);
        let params = HyperParams {
            alpha: 0.0,
            gamma: 0.9,
            eval_tol: 1e-12,
            eval_max_iter: 20_000,
            ..HyperParams::default()
        };
        let mut client = client_from(&mdp, &behavior, params, 4000, 6);
        client.behavior = behavior.clone();
        client.local_policy = behavior.clone();
        let audit = conservatism_audit(
            &client,
            &behavior,
            VoteMode::ExpectedQ,
            ConservatismReference::True(&mdp),
        )
        .unwrap();
        // Vote degenerates to the common policy and the model is exact, so
        // the learned value matches the true value to solver precision.
        assert!(audit.worst_violation.abs() < 1e-8);
        assert!(audit.all_pass);
    }

    #[test]
    fn xi_hand_instance() {
        // Single state, 2 actions, uniform policies, |D| = 100 with 50 per
        // action, gamma = 0.9, r_max = 1, c_r = c_t = 1:
        // term1 = (2*0.9/(0.1)^2) * sqrt(1 * 2/100) = 18/0.01... = 180*sqrt(0.02)
        // term2 = (1/0.1) * 1/sqrt(50)
        let mut transitions = Vec::new();
        for i in 0..100 {
            transitions.push(Transition {
                state: 0,
                action: i % 2,
                reward: 0.0,
                next_state: 0,
            });
        }
        let data = Dataset::from_transitions(1, 2, transitions, 0.0, 0).unwrap();
        let emp = crate::data::build_empirical_mdp(
            &data,
            &make_random_mdp(1, 2, 0.9, 1.0, 0).unwrap(),
            0.05,
        )
        .unwrap();
        let emp_mdp = emp.as_mdp_spec(ndarray::array![1.0]).unwrap();
        let uniform = TabularPolicy::uniform(1, 2);
        let constants = BoundConstants {
            c_r: 1.0,
            c_t: 1.0,
            gamma: 0.9,
            r_max: 1.0,
            delta: 0.05,
        };
        let out = return_gap_xi(&data, &emp_mdp, &uniform, &uniform, &constants).unwrap();
        let expected = (2.0 * 0.9 / 0.01) * (0.02_f64).sqrt() + 10.0 / 50.0_f64.sqrt();
        assert_abs_diff_eq!(out.xi, expected, epsilon = 1e-9);
        assert!(!out.used_delta_floor);
    }

    #[test]
    fn xi_shrinks_with_more_data() {
        let mdp = make_random_mdp(3, 2, 0.9, 1.0, 4).unwrap();
        let behavior = TabularPolicy::uniform(3, 2);
        let constants = BoundConstants {
            c_r: 1.0,
            c_t: 1.0,
            gamma: 0.9,
            r_max: 1.0,
            delta: 0.05,
        };
        let xi_at = |n: usize| -> f64 {
            let data = collect_dataset(&mdp, &behavior, n, 100, 9).unwrap();
            let emp = crate::data::build_empirical_mdp(&data, &mdp, 1e-9).unwrap();
            let emp_mdp = emp.as_mdp_spec(mdp.initial_dist.clone()).unwrap();
            return_gap_xi(&data, &emp_mdp, &behavior, &behavior, &constants)
                .unwrap()
                .xi
        };
        let coarse = xi_at(100);
        let fine = xi_at(10_000);
        assert!(fine < coarse, "xi did not shrink: {fine} vs {coarse}");
        assert!(fine < 0.2 * coarse);
    }

    #[test]
    fn improvement_gap_degenerate_equality() {
        let mdp = make_gridworld(2, 2, 0.0, 1.0, 0.9).unwrap();
        let behavior = TabularPolicy::uniform(4, 4);
        let mut report = BoundReport::default();
        let occ = occupancy_measure(&mdp, &behavior).unwrap();
        let weights = GapWeights {
            lambda: 5.0,
            beta: 5.0,
            state_weights: &occ,
        };
        let (lhs, rhs, holds) = improvement_gap(
            &mdp,
            &behavior,
            &behavior,
            &behavior,
            &mut report,
            GapLevel::Global,
            weights,
        )
        .unwrap();
        assert_abs_diff_eq!(lhs, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rhs, 0.0, epsilon = 1e-12);
        assert!(holds);
    }

    #[test]
    fn improvement_gap_expert_m2_strict() {
        // Near-expert client on the two-cell chain with a mild temperature:
        // the closed-form target strictly improves on the behavior policy.
        let mdp = make_gridworld(2, 1, 0.0, 1.0, 0.9).unwrap();
        let behavior = make_behavior_policy(&mdp, 0.9, 0).unwrap().with_floor(1e-6);
        let (v, q) = exact_policy_evaluation(&mdp, &behavior).unwrap();
        let target = awr_target(&q, &v, &behavior, 5.0).unwrap();
        let j_target = expected_return(&mdp, &target).unwrap();
        let j_behavior = expected_return(&mdp, &behavior).unwrap();
        assert!(j_target > j_behavior, "{j_target} <= {j_behavior}");
    }

    #[test]
    fn heterogeneity_identical_clients_is_zero() {
        let mdp = make_gridworld(2, 2, 0.1, 1.0, 0.9).unwrap();
        let behavior = make_behavior_policy(&mdp, 0.5, 0).unwrap();
        let params = HyperParams {
            gamma: 0.9,
            ..HyperParams::default()
        };
        let client = client_from(&mdp, &behavior, params, 800, 4);
        let clients = vec![client.clone(), client.clone(), client];
        let report = heterogeneity_norm(&clients, &mdp).unwrap();
        for &n in &report.h_norms {
            assert!(n < 1e-9, "IID federation has nonzero heterogeneity {n}");
        }
    }

    #[test]
    fn heterogeneity_single_client_is_zero() {
        let mdp = make_gridworld(2, 2, 0.1, 1.0, 0.9).unwrap();
        let behavior = make_behavior_policy(&mdp, 0.7, 0).unwrap();
        let params = HyperParams {
            gamma: 0.9,
            ..HyperParams::default()
        };
        let client = client_from(&mdp, &behavior, params, 800, 4);
        let report = heterogeneity_norm(&[client], &mdp).unwrap();
        assert!(report.h_norms[0] < 1e-12);
    }

    #[test]
    fn heterogeneity_mixed_qualities_is_positive() {
        let mdp = make_gridworld(3, 1, 0.1, 1.0, 0.9).unwrap();
        let params = HyperParams {
            gamma: 0.9,
            ..HyperParams::default()
        };
        let expert = client_from(
            &mdp,
            &make_behavior_policy(&mdp, 1.0, 0).unwrap(),
            params.clone(),
            800,
            4,
        );
        let random = client_from(
            &mdp,
            &make_behavior_policy(&mdp, 0.0, 0).unwrap(),
            params,
            800,
            5,
        );
        let report = heterogeneity_norm(&[expert, random], &mdp).unwrap();
        assert!(
            report.h_norms.iter().any(|&n| n > 1e-6),
            "{:?}",
            report.h_norms
        );
    }

    #[test]
    fn safe_bound_zero_inputs() {
        let report = HeterogeneityReport {
            h_matrices: vec![vec![vec![0.0]]],
            h_norms: vec![0.0],
            l_terms: vec![0.0],
            h_terms: vec![0.0],
            safe_bound: None,
            occupancy_floored: false,
        };
        let b = safe_bound(5.0, 5.0, &report, &[0.0], &[0.0], 0.0).unwrap();
        assert_eq!(b, 0.0);
    }

    #[test]
    fn safe_bound_lambda_term_halves() {
        let report = HeterogeneityReport {
            h_matrices: vec![vec![vec![0.0]]],
            h_norms: vec![1.0],
            l_terms: vec![2.0],
            h_terms: vec![1.0],
            safe_bound: None,
            occupancy_floored: false,
        };
        let sigma = 0.5;
        let b1 = safe_bound(1.0, 1.0, &report, &[0.0], &[0.0], sigma).unwrap();
        let b2 = safe_bound(2.0, 1.0, &report, &[0.0], &[0.0], sigma).unwrap();
        let lam_term1 = (2.0 + 1.0 + 2.0 * sigma).powi(2) / 8.0;
        assert_abs_diff_eq!(b1 - b2, lam_term1 / 2.0, epsilon = 1e-12);
        // Strictly decreasing in both arguments.
        assert!(safe_bound(10.0, 1.0, &report, &[0.0], &[0.0], sigma).unwrap() < b1);
        assert!(safe_bound(1.0, 10.0, &report, &[0.0], &[0.0], sigma).unwrap() < b1);
    }

    #[test]
    fn bound_report_serializes_with_expected_fields() {
        let report = BoundReport {
            alpha_threshold: 1.0,
            xi_tilde: 2.0,
            xi_bar: 3.0,
            xi_b: 4.0,
            sigma: 5.0,
            c_r_delta: 6.0,
            c_t_delta: 7.0,
            local_gap_lower: -1.0,
            global_gap_lower: -2.0,
            holds_empirically: HoldsFlags::default(),
        };
        let text = serde_json::to_string(&report).unwrap();
        for key in [
            "alpha_threshold",
            "xi_tilde",
            "xi_bar",
            "xi_b",
            "sigma",
            "c_r_delta",
            "c_t_delta",
            "local_gap_lower",
            "global_gap_lower",
            "holds_empirically",
        ] {
            assert!(text.contains(key), "missing {key}");
        }
    }
}
