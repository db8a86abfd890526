//! Server-side aggregation, the synchronous round loop, and the baseline /
//! ablation learners used in comparison experiments.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::learner::{
    awr_improve, awr_target, local_update, softmax_rows, vcql_evaluate_with, ClientState,
    EvalPolicy, EvalStatus, HyperParams, LocalUpdateOutcome, VoteMode,
};
use crate::mdp::{
    divergence, expected_return, occupancy_measure, DivergenceKind, MdpSpec, QTable, TabularPolicy,
};

/// Algorithm selector for training runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    /// Vote-based conservative evaluation + advantage-weighted improvement.
    Fova,
    /// Conservative evaluation under the local policy, greedy-softmax
    /// improvement, linear aggregation.
    CqlFl,
    /// Vote disabled: evaluation backs up under the local policy.
    FovaNoVote,
    /// Improvement replaced by plain Q-maximization with a behavior-KL
    /// penalty, i.e. the closed-form exponentiated reweighting alone.
    FovaNoAwr,
}

impl Algo {
    pub fn tag(&self) -> &'static str {
        match self {
            Algo::Fova => "fova",
            Algo::CqlFl => "cql-fl",
            Algo::FovaNoVote => "fova-no-vote",
            Algo::FovaNoAwr => "fova-no-awr",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "fova" => Ok(Algo::Fova),
            "cql-fl" => Ok(Algo::CqlFl),
            "fova-no-vote" => Ok(Algo::FovaNoVote),
            "fova-no-awr" => Ok(Algo::FovaNoAwr),
            other => Err(Error::Config(format!(
                "unknown algorithm `{other}` (expected fova, cql-fl, fova-no-vote, fova-no-awr)"
            ))),
        }
    }
}

/// How client updates are scheduled within a round. Results are required to
/// be bit-identical either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    Sequential,
    #[default]
    Parallel,
}

/// Server-held global state.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global_policy: TabularPolicy,
    pub global_q: QTable,
    pub round: usize,
}

impl ServerState {
    /// Symmetry-neutral start: uniform policy, zero Q-table.
    pub fn init(n_states: usize, n_actions: usize) -> Self {
        Self {
            global_policy: TabularPolicy::uniform(n_states, n_actions),
            global_q: QTable::zeros(n_states, n_actions),
            round: 0,
        }
    }
}

/// Per-round diagnostics, measured against the true MDP via the exact oracle.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: usize,
    pub j_global: f64,
    pub j_clients: Vec<f64>,
    pub j_client_mean: f64,
    pub kl_local_global: Vec<f64>,
    pub tv_local_global: Vec<f64>,
    pub wallclock: Duration,
    pub warnings: Vec<String>,
}

impl RoundMetrics {
    /// Equality of everything except the wallclock measurement.
    pub fn same_numbers(&self, other: &Self) -> bool {
        self.round == other.round
            && self.j_global == other.j_global
            && self.j_clients == other.j_clients
            && self.j_client_mean == other.j_client_mean
            && self.kl_local_global == other.kl_local_global
            && self.tv_local_global == other.tv_local_global
            && self.warnings == other.warnings
    }

    pub fn kl_mean(&self) -> f64 {
        self.kl_local_global.iter().sum::<f64>() / self.kl_local_global.len() as f64
    }

    pub fn tv_mean(&self) -> f64 {
        self.tv_local_global.iter().sum::<f64>() / self.tv_local_global.len() as f64
    }
}

/// CSV header for a `K`-client run:
/// `round,j_global,j_client_mean,j_client_0..,kl_mean,tv_mean`.
pub fn metrics_csv_header(n_clients: usize) -> String {
    let mut header = String::from("round,j_global,j_client_mean");
    for k in 0..n_clients {
        header.push_str(&format!(",j_client_{k}"));
    }
    header.push_str(",kl_mean,tv_mean");
    header
}

pub fn metrics_csv_row(m: &RoundMetrics) -> String {
    let mut row = format!("{},{},{}", m.round, m.j_global, m.j_client_mean);
    for j in &m.j_clients {
        row.push_str(&format!(",{j}"));
    }
    row.push_str(&format!(",{},{}", m.kl_mean(), m.tv_mean()));
    row
}

/// Elementwise unweighted mean of client policies and Q-tables. Rows stay
/// stochastic by convexity.
pub fn aggregate(
    policies: &[TabularPolicy],
    qtables: &[QTable],
) -> Result<(TabularPolicy, QTable)> {
    if policies.is_empty() || qtables.is_empty() {
        return Err(Error::Argument("aggregate requires nonempty inputs".into()));
    }
    if policies.len() != qtables.len() {
        return Err(Error::Argument("policy and Q-table counts differ".into()));
    }
    let shape = policies[0].probs.dim();
    for p in policies {
        if p.probs.dim() != shape {
            return Err(Error::Argument("policy shapes differ".into()));
        }
    }
    for q in qtables {
        if q.values.dim() != shape {
            return Err(Error::Argument(
                "Q-table shape differs from policies".into(),
            ));
        }
    }
    let k = policies.len() as f64;
    let mut pi_sum: Array2<f64> = Array2::zeros(shape);
    let mut q_sum: Array2<f64> = Array2::zeros(shape);
    for p in policies {
        pi_sum += &p.probs;
    }
    for q in qtables {
        q_sum += &q.values;
    }
    Ok((
        TabularPolicy { probs: pi_sum / k },
        QTable { values: q_sum / k },
    ))
}

/// One client update under the selected algorithm.
fn client_update(
    algo: Algo,
    client: &mut ClientState,
    global_pi: &TabularPolicy,
    global_q: &QTable,
    mode: VoteMode,
) -> Result<LocalUpdateOutcome> {
    match algo {
        Algo::Fova => local_update(client, global_pi, global_q, mode),
        Algo::FovaNoVote => {
            client.local_q = global_q.clone();
            let eval = vcql_evaluate_with(client, global_pi, mode, EvalPolicy::LocalOnly)?;
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
        Algo::FovaNoAwr => {
            client.local_q = global_q.clone();
            let eval = vcql_evaluate_with(client, global_pi, mode, EvalPolicy::Vote)?;
            let policy = awr_target(&eval.q, &eval.v, &client.behavior, client.params.beta)?
                .with_floor(client.params.zeta);
            client.local_q = eval.q.clone();
            client.local_policy = policy.clone();
            Ok(LocalUpdateOutcome {
                q: eval.q,
                policy,
                eval_iterations: eval.iterations,
                eval_residual: eval.residual,
                eval_status: eval.status,
                improve_stalled: false,
            })
        }
        Algo::CqlFl => {
            client.local_q = global_q.clone();
            let eval = vcql_evaluate_with(client, global_pi, mode, EvalPolicy::LocalOnly)?;
            let scaled = eval.q.values.mapv(|v| v / client.params.beta);
            let policy = TabularPolicy {
                probs: softmax_rows(&scaled),
            }
            .with_floor(client.params.zeta);
            client.local_q = eval.q.clone();
            client.local_policy = policy.clone();
            Ok(LocalUpdateOutcome {
                q: eval.q,
                policy,
                eval_iterations: eval.iterations,
                eval_residual: eval.residual,
                eval_status: eval.status,
                improve_stalled: false,
            })
        }
    }
}

/// One synchronous round: distribute the global parameters, update every
/// client, aggregate, and measure against the true MDP. Client warnings are
/// collected into the metrics, never raised.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    mdp: &MdpSpec,
    mode: VoteMode,
    algo: Algo,
    schedule: Schedule,
) -> Result<RoundMetrics> {
    if clients.is_empty() {
        return Err(Error::Argument(
            "run_round requires at least one client".into(),
        ));
    }
    let start = Instant::now();
    let global_pi = server.global_policy.clone();
    let global_q = server.global_q.clone();

    let outcomes: Vec<LocalUpdateOutcome> = match schedule {
        Schedule::Sequential => {
            let mut out = Vec::with_capacity(clients.len());
            for client in clients.iter_mut() {
                out.push(client_update(algo, client, &global_pi, &global_q, mode)?);
            }
            out
        }
        Schedule::Parallel => clients
            .par_iter_mut()
            .map(|client| client_update(algo, client, &global_pi, &global_q, mode))
            .collect::<Result<Vec<_>>>()?,
    };

    let policies: Vec<TabularPolicy> = outcomes.iter().map(|o| o.policy.clone()).collect();
    let qtables: Vec<QTable> = outcomes.iter().map(|o| o.q.clone()).collect();
    let (global_policy, global_q) = aggregate(&policies, &qtables)?;
    server.global_policy = global_policy;
    server.global_q = global_q;
    server.round += 1;

    let mut warnings = Vec::new();
    for (k, o) in outcomes.iter().enumerate() {
        match o.eval_status {
            EvalStatus::Converged => {}
            EvalStatus::VoteCycled => {
                warnings.push(format!(
                    "client {k}: vote cycled; froze last configuration at residual {:.3e}",
                    o.eval_residual
                ));
            }
            EvalStatus::IterationBudget => {
                warnings.push(format!(
                    "client {k}: evaluation stopped at residual {:.3e} after {} sweeps",
                    o.eval_residual, o.eval_iterations
                ));
            }
        }
        if o.improve_stalled {
            warnings.push(format!("client {k}: improvement backtracking exhausted"));
        }
    }

    let j_global = expected_return(mdp, &server.global_policy)?;
    let mut j_clients = Vec::with_capacity(clients.len());
    let mut kl_local_global = Vec::with_capacity(clients.len());
    let mut tv_local_global = Vec::with_capacity(clients.len());
    for client in clients.iter() {
        j_clients.push(expected_return(mdp, &client.local_policy)?);
        let weights = occupancy_measure(mdp, &client.behavior)?;
        kl_local_global.push(divergence(
            &client.local_policy,
            &server.global_policy,
            &weights,
            DivergenceKind::Kl,
        )?);
        tv_local_global.push(divergence(
            &client.local_policy,
            &server.global_policy,
            &weights,
            DivergenceKind::Tv,
        )?);
    }
    let j_client_mean = j_clients.iter().sum::<f64>() / j_clients.len() as f64;

    Ok(RoundMetrics {
        round: server.round,
        j_global,
        j_clients,
        j_client_mean,
        kl_local_global,
        tv_local_global,
        wallclock: start.elapsed(),
        warnings,
    })
}

/// Knobs for assembling clients inside a training run.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Laplace smoothing for behavior estimation.
    pub smoothing: f64,
    /// Coverage floor recorded on the empirical models.
    pub coverage_delta: f64,
    /// Initialize local policies from the estimated behavior instead of the
    /// uniform global policy.
    pub init_policy_from_behavior: bool,
    pub schedule: Schedule,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            smoothing: crate::data::DEFAULT_SMOOTHING,
            coverage_delta: 0.05,
            init_policy_from_behavior: false,
            schedule: Schedule::Parallel,
        }
    }
}

/// A finished training run: per-round metrics plus the final server and
/// client states.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub metrics: Vec<RoundMetrics>,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

pub fn build_clients(
    mdp: &MdpSpec,
    datasets: &[Dataset],
    params: &HyperParams,
    opts: &TrainOptions,
) -> Result<Vec<ClientState>> {
    if datasets.is_empty() {
        return Err(Error::Argument(
            "training requires at least one dataset".into(),
        ));
    }
    let mut clients = Vec::with_capacity(datasets.len());
    for data in datasets {
        let mut client = ClientState::from_dataset(
            data.clone(),
            mdp,
            params.clone(),
            opts.smoothing,
            opts.coverage_delta,
        )?;
        if opts.init_policy_from_behavior {
            client.local_policy = client.behavior.clone();
        }
        clients.push(client);
    }
    Ok(clients)
}

/// Runs the synchronous loop for `rounds` rounds from a uniform global
/// policy and zero global Q-table.
pub fn run_training(
    mdp: &MdpSpec,
    datasets: &[Dataset],
    params: &HyperParams,
    rounds: usize,
    mode: VoteMode,
    algo: Algo,
) -> Result<TrainingRun> {
    run_training_with(
        mdp,
        datasets,
        params,
        rounds,
        mode,
        algo,
        &TrainOptions::default(),
    )
}

pub fn run_training_with(
    mdp: &MdpSpec,
    datasets: &[Dataset],
    params: &HyperParams,
    rounds: usize,
    mode: VoteMode,
    algo: Algo,
    opts: &TrainOptions,
) -> Result<TrainingRun> {
    if rounds == 0 {
        return Err(Error::Config("rounds must be at least 1".into()));
    }
    params.validate()?;
    let mut clients = build_clients(mdp, datasets, params, opts)?;
    let mut server = ServerState::init(mdp.n_states, mdp.n_actions);
    let mut metrics = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        metrics.push(run_round(
            &mut server,
            &mut clients,
            mdp,
            mode,
            algo,
            opts.schedule,
        )?);
    }
    Ok(TrainingRun {
        metrics,
        server,
        clients,
    })
}

/// A continual run over a sequence of dataset phases, carrying `(Q_k, pi_k)`
/// and the global parameters across phase boundaries.
#[derive(Debug, Clone)]
pub struct ContinualRun {
    pub metrics: Vec<RoundMetrics>,
    pub server: ServerState,
    /// `scores[(i, j)]` for `j <= i`: return of the global policy at the end
    /// of phase `i`, evaluated on the empirical MDP pooled from phase `j`'s
    /// datasets. Upper triangle is NaN-free zero padding.
    pub scores: Array2<f64>,
}

/// Runs `rounds_per_phase` rounds on each phase's datasets in order. At each
/// phase boundary every client stores its current Q-table as the anchor for
/// the L2 regularizer and swaps in the next phase's dataset.
pub fn run_continual(
    mdp: &MdpSpec,
    phases: &[Vec<Dataset>],
    params: &HyperParams,
    rounds_per_phase: usize,
    mode: VoteMode,
    algo: Algo,
    opts: &TrainOptions,
) -> Result<ContinualRun> {
    if phases.is_empty() {
        return Err(Error::Argument(
            "continual run requires at least one phase".into(),
        ));
    }
    if rounds_per_phase == 0 {
        return Err(Error::Config("rounds must be at least 1".into()));
    }
    let n_clients = phases[0].len();
    if n_clients == 0 || phases.iter().any(|p| p.len() != n_clients) {
        return Err(Error::Argument(
            "every phase needs the same nonzero client count".into(),
        ));
    }
    params.validate()?;

    // Pooled per-phase empirical models for the score matrix.
    let mut phase_models = Vec::with_capacity(phases.len());
    for phase in phases {
        let mut transitions = Vec::new();
        for d in phase {
            transitions.extend(d.transitions.iter().copied());
        }
        let pooled = Dataset::from_transitions(mdp.n_states, mdp.n_actions, transitions, 0.0, 0)?;
        let emp = crate::data::build_empirical_mdp(&pooled, mdp, opts.coverage_delta)?;
        phase_models.push(emp.as_mdp_spec(mdp.initial_dist.clone())?);
    }

    let mut clients = build_clients(mdp, &phases[0], params, opts)?;
    let mut server = ServerState::init(mdp.n_states, mdp.n_actions);
    let mut metrics = Vec::new();
    let mut scores = Array2::zeros((phases.len(), phases.len()));

    for (phase_idx, phase) in phases.iter().enumerate() {
        if phase_idx > 0 {
            for (client, data) in clients.iter_mut().zip(phase.iter()) {
                client.prev_q = Some(client.local_q.clone());
                let behavior = crate::data::estimate_behavior_policy(data, opts.smoothing)?
                    .with_floor(params.zeta.max(1e-12));
                let empirical = crate::data::build_empirical_mdp(data, mdp, opts.coverage_delta)?;
                client.data = data.clone();
                client.behavior = behavior;
                client.empirical = empirical;
            }
        }
        for _ in 0..rounds_per_phase {
            metrics.push(run_round(
                &mut server,
                &mut clients,
                mdp,
                mode,
                algo,
                opts.schedule,
            )?);
        }
        for j in 0..=phase_idx {
            scores[[phase_idx, j]] = expected_return(&phase_models[j], &server.global_policy)?;
        }
    }

    Ok(ContinualRun {
        metrics,
        server,
        scores,
    })
}

/// JSON checkpoint of the server plus per-client `(Q_k, pi_k)` tables.
pub mod checkpoint {
    use serde::{Deserialize, Serialize};

    use super::{ClientState, ServerState};
    use crate::error::{Error, Result};
    use crate::mdp::{matrix_from_vec, matrix_to_vec, QTable, TabularPolicy};

    #[derive(Serialize, Deserialize)]
    pub struct ClientTables {
        pub policy: Vec<Vec<f64>>,
        pub q: Vec<Vec<f64>>,
    }

    #[derive(Serialize, Deserialize)]
    pub struct Checkpoint {
        pub version: u32,
        pub round: usize,
        pub global_policy: Vec<Vec<f64>>,
        pub global_q: Vec<Vec<f64>>,
        pub clients: Vec<ClientTables>,
    }

    pub fn to_json(server: &ServerState, clients: &[ClientState]) -> Result<String> {
        let doc = Checkpoint {
            version: 1,
            round: server.round,
            global_policy: matrix_to_vec(&server.global_policy.probs),
            global_q: matrix_to_vec(&server.global_q.values),
            clients: clients
                .iter()
                .map(|c| ClientTables {
                    policy: matrix_to_vec(&c.local_policy.probs),
                    q: matrix_to_vec(&c.local_q.values),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub struct Loaded {
        pub round: usize,
        pub global_policy: TabularPolicy,
        pub global_q: QTable,
        pub clients: Vec<(TabularPolicy, QTable)>,
    }

    pub fn from_json(text: &str) -> Result<Loaded> {
        let doc: Checkpoint = serde_json::from_str(text)?;
        if doc.version != 1 {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                doc.version
            )));
        }
        let mut clients = Vec::with_capacity(doc.clients.len());
        for c in &doc.clients {
            clients.push((
                TabularPolicy {
                    probs: matrix_from_vec(&c.policy)?,
                },
                QTable {
                    values: matrix_from_vec(&c.q)?,
                },
            ));
        }
        Ok(Loaded {
            round: doc.round,
            global_policy: TabularPolicy {
                probs: matrix_from_vec(&doc.global_policy)?,
            },
            global_q: QTable {
                values: matrix_from_vec(&doc.global_q)?,
            },
            clients,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collect_dataset, make_behavior_policy};
    use crate::mdp::{make_gridworld, make_random_mdp};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn quick_params(gamma: f64) -> HyperParams {
        HyperParams {
            gamma,
            eval_tol: 1e-9,
            eval_max_iter: 2000,
            improve_steps: 60,
            ..HyperParams::default()
        }
    }

    fn grid_datasets(qualities: &[f64], n: usize, seed0: u64) -> (MdpSpec, Vec<Dataset>) {
        let mdp = make_gridworld(3, 3, 0.1, 1.0, 0.95).unwrap();
        let datasets = qualities
            .iter()
            .enumerate()
            .map(|(k, &q)| {
                let behavior = make_behavior_policy(&mdp, q, seed0 + k as u64).unwrap();
                let mut d = collect_dataset(&mdp, &behavior, n, 100, seed0 + k as u64).unwrap();
                d.quality_label = q;
                d
            })
            .collect();
        (mdp, datasets)
    }

    #[test]
    fn aggregate_identical_policies_is_identity() {
        // Dyadic probabilities keep the mean exact for any K.
        let p = TabularPolicy {
            probs: array![[0.5, 0.25, 0.25], [0.125, 0.375, 0.5]],
        };
        let q = QTable {
            values: array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]],
        };
        let (pi, qt) = aggregate(
            &[p.clone(), p.clone(), p.clone()],
            &[q.clone(), q.clone(), q.clone()],
        )
        .unwrap();
        assert_eq!(pi.probs, p.probs);
        assert_eq!(qt.values, q.values);
    }

    #[test]
    fn aggregate_one_hot_rows_average_to_uniform() {
        let a = TabularPolicy::deterministic(1, 2, &[0]).unwrap();
        let b = TabularPolicy::deterministic(1, 2, &[1]).unwrap();
        let (pi, _) =
            aggregate(&[a, b], &[QTable::zeros(1, 2), QTable::constant(1, 2, 2.0)]).unwrap();
        assert_eq!(pi.probs.row(0).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn aggregate_q_entries_are_means() {
        let q0 = QTable {
            values: array![[1.0, 3.0]],
        };
        let q1 = QTable {
            values: array![[3.0, 5.0]],
        };
        let p = TabularPolicy::uniform(1, 2);
        let (_, q) = aggregate(&[p.clone(), p], &[q0, q1]).unwrap();
        assert_eq!(q.values, array![[2.0, 4.0]]);
    }

    #[test]
    fn aggregate_rejects_empty_and_mismatched() {
        assert!(aggregate(&[], &[]).is_err());
        let p2 = TabularPolicy::uniform(1, 2);
        let p3 = TabularPolicy::uniform(1, 3);
        let q = QTable::zeros(1, 2);
        assert!(aggregate(&[p2, p3], &[q.clone(), q]).is_err());
    }

    #[test]
    fn run_round_single_client_global_equals_local() {
        let (mdp, datasets) = grid_datasets(&[0.5], 400, 10);
        let run = run_training(
            &mdp,
            &datasets,
            &quick_params(0.95),
            1,
            VoteMode::ExpectedQ,
            Algo::Fova,
        )
        .unwrap();
        assert_eq!(
            run.server.global_policy.probs,
            run.clients[0].local_policy.probs
        );
    }

    #[test]
    fn run_round_identical_clients_match_global() {
        let (mdp, _) = grid_datasets(&[0.5], 400, 10);
        let behavior = make_behavior_policy(&mdp, 0.5, 3).unwrap();
        let data = collect_dataset(&mdp, &behavior, 400, 100, 3).unwrap();
        let datasets = vec![data.clone(), data.clone(), data];
        let run = run_training(
            &mdp,
            &datasets,
            &quick_params(0.95),
            1,
            VoteMode::ExpectedQ,
            Algo::Fova,
        )
        .unwrap();
        // Identical inputs give bitwise-identical client policies; the mean
        // matches them up to the rounding of the K-fold average.
        for c in &run.clients {
            assert_eq!(run.clients[0].local_policy.probs, c.local_policy.probs);
            for (g, l) in run
                .server
                .global_policy
                .probs
                .iter()
                .zip(c.local_policy.probs.iter())
            {
                assert_abs_diff_eq!(g, l, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn metrics_mean_is_recomputable() {
        let (mdp, datasets) = grid_datasets(&[1.0, 0.0], 300, 21);
        let run = run_training(
            &mdp,
            &datasets,
            &quick_params(0.95),
            2,
            VoteMode::ExpectedQ,
            Algo::Fova,
        )
        .unwrap();
        for m in &run.metrics {
            let mean = m.j_clients.iter().sum::<f64>() / m.j_clients.len() as f64;
            assert_abs_diff_eq!(m.j_client_mean, mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn history_length_equals_rounds() {
        let (mdp, datasets) = grid_datasets(&[0.5, 0.5], 200, 7);
        let run = run_training(
            &mdp,
            &datasets,
            &quick_params(0.95),
            4,
            VoteMode::ExpectedQ,
            Algo::Fova,
        )
        .unwrap();
        assert_eq!(run.metrics.len(), 4);
        assert_eq!(run.server.round, 4);
    }

    #[test]
    fn degenerate_vote_matches_no_vote_variant() {
        // With a single action every candidate policy coincides, so the vote
        // cannot matter: FOVA and the no-vote ablation agree exactly.
        let mdp = make_random_mdp(4, 1, 0.9, 1.0, 5).unwrap();
        let behavior = TabularPolicy::uniform(4, 1);
        let data = collect_dataset(&mdp, &behavior, 200, 50, 2).unwrap();
        let params = quick_params(0.9);
        let datasets = vec![data];
        let a = run_training(&mdp, &datasets, &params, 1, VoteMode::ExpectedQ, Algo::Fova).unwrap();
        let b = run_training(
            &mdp,
            &datasets,
            &params,
            1,
            VoteMode::ExpectedQ,
            Algo::FovaNoVote,
        )
        .unwrap();
        assert_eq!(a.server.global_policy.probs, b.server.global_policy.probs);
        assert_eq!(a.server.global_q.values, b.server.global_q.values);
    }

    #[test]
    fn schedule_independence_is_bitwise() {
        let (mdp, datasets) = grid_datasets(&[1.0, 0.0, 0.5], 300, 33);
        let params = quick_params(0.95);
        let seq_opts = TrainOptions {
            schedule: Schedule::Sequential,
            ..TrainOptions::default()
        };
        let seq = run_training_with(
            &mdp,
            &datasets,
            &params,
            3,
            VoteMode::ExpectedQ,
            Algo::Fova,
            &seq_opts,
        )
        .unwrap();
        let par_opts = TrainOptions {
            schedule: Schedule::Parallel,
            ..TrainOptions::default()
        };
        let par = run_training_with(
            &mdp,
            &datasets,
            &params,
            3,
            VoteMode::ExpectedQ,
            Algo::Fova,
            &par_opts,
        )
        .unwrap();
        assert_eq!(
            seq.server.global_policy.probs,
            par.server.global_policy.probs
        );
        assert_eq!(seq.server.global_q.values, par.server.global_q.values);
        assert_eq!(seq.metrics.len(), par.metrics.len());
        for (a, b) in seq.metrics.iter().zip(par.metrics.iter()) {
            assert!(a.same_numbers(b), "metrics diverged at round {}", a.round);
        }
    }

    #[test]
    fn all_algorithms_run_and_stay_stochastic() {
        let (mdp, datasets) = grid_datasets(&[1.0, 0.0], 300, 44);
        let params = quick_params(0.95);
        for algo in [Algo::Fova, Algo::CqlFl, Algo::FovaNoVote, Algo::FovaNoAwr] {
            let run = run_training(&mdp, &datasets, &params, 2, VoteMode::ExpectedQ, algo).unwrap();
            run.server.global_policy.validate(0.0).unwrap();
            for c in &run.clients {
                c.local_policy.validate(0.0).unwrap();
            }
        }
    }

    #[test]
    fn checkpoint_round_trips() {
        let (mdp, datasets) = grid_datasets(&[0.5], 200, 50);
        let run = run_training(
            &mdp,
            &datasets,
            &quick_params(0.95),
            1,
            VoteMode::ExpectedQ,
            Algo::Fova,
        )
        .unwrap();
        let text = checkpoint::to_json(&run.server, &run.clients).unwrap();
        let loaded = checkpoint::from_json(&text).unwrap();
        assert_eq!(loaded.round, 1);
        assert_eq!(loaded.global_policy.probs, run.server.global_policy.probs);
        assert_eq!(loaded.clients.len(), 1);
        assert_eq!(loaded.clients[0].0.probs, run.clients[0].local_policy.probs);
    }

    #[test]
    fn continual_scores_are_lower_triangular() {
        let (mdp, phase_a) = grid_datasets(&[0.8, 0.8], 250, 60);
        let (_, phase_b) = grid_datasets(&[0.1, 0.1], 250, 70);
        let params = quick_params(0.95);
        let run = run_continual(
            &mdp,
            &[phase_a, phase_b],
            &params,
            2,
            VoteMode::ExpectedQ,
            Algo::Fova,
            &TrainOptions::default(),
        )
        .unwrap();
        assert_eq!(run.metrics.len(), 4);
        assert_eq!(run.scores.dim(), (2, 2));
        assert_eq!(run.scores[[0, 1]], 0.0);
        assert!(run.scores[[1, 0]].is_finite());
        assert!(run.scores[[1, 1]].is_finite());
    }
}
