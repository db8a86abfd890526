//! Behavior policies of controllable quality, offline dataset logging,
//! behavior-policy and empirical-MDP estimation, and mixed-quality
//! federation assembly.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{solve_optimal, MdpSpec, TabularPolicy, VALUE_ITER_TOL};

/// Default episode horizon before restarting from the initial distribution.
pub const DEFAULT_HORIZON: usize = 100;
/// Default Laplace smoothing for behavior-policy estimation.
pub const DEFAULT_SMOOTHING: f64 = 0.1;

/// One logged step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// An offline dataset: the ordered transition log plus exact count tallies
/// `N(s,a)` and `N(s,a,s')`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub transitions: Vec<Transition>,
    pub counts_sa: Array2<u64>,
    pub counts_sas: Array3<u64>,
    pub quality_label: f64,
    pub seed: u64,
}

impl Dataset {
    pub fn from_transitions(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<Transition>,
        quality_label: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut counts_sa = Array2::zeros((n_states, n_actions));
        let mut counts_sas = Array3::zeros((n_states, n_actions, n_states));
        for (i, t) in transitions.iter().enumerate() {
            if t.state >= n_states || t.next_state >= n_states || t.action >= n_actions {
                return Err(Error::Argument(format!(
                    "transition {i} has out-of-range indices"
                )));
            }
            counts_sa[[t.state, t.action]] += 1;
            counts_sas[[t.state, t.action, t.next_state]] += 1;
        }
        Ok(Self {
            transitions,
            counts_sa,
            counts_sas,
            quality_label,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn n_states(&self) -> usize {
        self.counts_sa.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.counts_sa.ncols()
    }

    /// State visit counts `N(s) = sum_a N(s,a)`.
    pub fn counts_state(&self) -> Vec<u64> {
        (0..self.n_states())
            .map(|s| (0..self.n_actions()).map(|a| self.counts_sa[[s, a]]).sum())
            .collect()
    }

    /// Writes the line-oriented transition log: header `s,a,r,s_next`, one
    /// transition per line.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "s,a,r,s_next")?;
        for t in &self.transitions {
            writeln!(
                out,
                "{},{},{},{}",
                t.state, t.action, t.reward, t.next_state
            )?;
        }
        Ok(())
    }

    /// Reads a transition log written by [`Dataset::write_file`].
    pub fn read_file(
        path: &Path,
        n_states: usize,
        n_actions: usize,
        quality_label: f64,
        seed: u64,
    ) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != "s,a,r,s_next" {
            return Err(Error::Argument(format!(
                "{}: missing `s,a,r,s_next` header",
                path.display()
            )));
        }
        let mut transitions = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Argument(format!(
                    "{}: line {} has {} fields, expected 4",
                    path.display(),
                    i + 2,
                    fields.len()
                )));
            }
            let parse = |f: &str, what: &str| {
                f.parse::<usize>().map_err(|_| {
                    Error::Argument(format!(
                        "{}: line {}: bad {what} `{f}`",
                        path.display(),
                        i + 2
                    ))
                })
            };
            transitions.push(Transition {
                state: parse(fields[0], "state")?,
                action: parse(fields[1], "action")?,
                reward: fields[2].parse::<f64>().map_err(|_| {
                    Error::Argument(format!(
                        "{}: line {}: bad reward `{}`",
                        path.display(),
                        i + 2,
                        fields[2]
                    ))
                })?,
                next_state: parse(fields[3], "next state")?,
            });
        }
        Self::from_transitions(n_states, n_actions, transitions, quality_label, seed)
    }
}

/// Sidecar manifest stored next to each dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub quality_label: f64,
    pub seed: u64,
    pub n: usize,
    pub mdp: String,
    pub n_states: usize,
    pub n_actions: usize,
}

/// Count-based transition/reward estimates induced by a dataset, together
/// with the coverage mask and the coverage-floor check.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
    pub t_hat: Array3<f64>,
    pub r_hat: Array2<f64>,
    pub coverage_delta: f64,
    pub covered_mask: Array2<bool>,
    /// Minimum of `N(s,a) / |D|` over covered pairs.
    pub min_covered_fraction: f64,
    /// Whether `min_covered_fraction >= coverage_delta`.
    pub coverage_satisfied: bool,
}

impl EmpiricalMdp {
    pub fn is_covered(&self, s: usize, a: usize) -> bool {
        self.covered_mask[[s, a]]
    }

    /// True when every `(s,a)` pair is covered.
    pub fn fully_covered(&self) -> bool {
        self.covered_mask.iter().all(|&c| c)
    }

    /// Completes the estimated model into a full [`MdpSpec`]: uncovered
    /// `(s,a)` pairs become self-loops paying `-r_max`, the most pessimistic
    /// completion consistent with the reward bound. Covered rows are the
    /// count frequencies unchanged.
    pub fn as_mdp_spec(&self, initial_dist: ndarray::Array1<f64>) -> Result<MdpSpec> {
        let mut transition = self.t_hat.clone();
        let mut reward = self.r_hat.clone();
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                if !self.covered_mask[[s, a]] {
                    for s2 in 0..self.n_states {
                        transition[[s, a, s2]] = 0.0;
                    }
                    transition[[s, a, s]] = 1.0;
                    reward[[s, a]] = -self.r_max;
                }
            }
        }
        MdpSpec::new(transition, reward, self.r_max, self.gamma, initial_dist)
    }
}

/// Per-client dataset request inside a federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub quality: f64,
    pub n_transitions: usize,
    pub seed: u64,
}

/// A mixed-quality federation layout: `K` clients, each with a quality knob,
/// a sample budget, and an independent seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub per_client: Vec<ClientSpec>,
    pub mdp_ref: String,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::Config("federation needs at least one client".into()));
        }
        if self.per_client.len() != self.n_clients {
            return Err(Error::Config(format!(
                "per_client has {} entries, expected n_clients = {}",
                self.per_client.len(),
                self.n_clients
            )));
        }
        for (k, c) in self.per_client.iter().enumerate() {
            if !(0.0..=1.0).contains(&c.quality) {
                return Err(Error::Config(format!(
                    "client {k}: quality {} outside [0,1]",
                    c.quality
                )));
            }
            if c.n_transitions == 0 {
                return Err(Error::Config(format!(
                    "client {k}: n_transitions must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Mixes the optimal policy with the uniform policy:
/// `pi_beta = quality * pi_star + (1 - quality) * uniform`. The expected
/// return is nondecreasing in `quality`. The seed is part of the logging
/// interface but unused: the mixture itself is deterministic.
pub fn make_behavior_policy(mdp: &MdpSpec, quality: f64, _seed: u64) -> Result<TabularPolicy> {
    if !(0.0..=1.0).contains(&quality) {
        return Err(Error::Config(format!("quality {quality} outside [0,1]")));
    }
    let optimal = solve_optimal(mdp, VALUE_ITER_TOL)?;
    let uniform = TabularPolicy::uniform(mdp.n_states, mdp.n_actions);
    optimal.mix(&uniform, quality)
}

/// Rolls out episodes from the initial distribution under `behavior` until
/// `n` transitions are logged, restarting every `horizon` steps. Identical
/// seeds reproduce bit-identical datasets.
pub fn collect_dataset(
    mdp: &MdpSpec,
    behavior: &TabularPolicy,
    n: usize,
    horizon: usize,
    seed: u64,
) -> Result<Dataset> {
    collect_dataset_with_noise(mdp, behavior, n, horizon, 0.0, seed)
}

/// [`collect_dataset`] with zero-mean Gaussian reward noise of standard
/// deviation `reward_noise_std`; noisy rewards are clamped to the
/// `[-r_max, r_max]` band so logged records stay in range.
pub fn collect_dataset_with_noise(
    mdp: &MdpSpec,
    behavior: &TabularPolicy,
    n: usize,
    horizon: usize,
    reward_noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || horizon == 0 {
        return Err(Error::Config("n and horizon must be at least 1".into()));
    }
    if behavior.probs.dim() != (mdp.n_states, mdp.n_actions) {
        return Err(Error::Argument(
            "behavior policy shape does not match MDP".into(),
        ));
    }
    if reward_noise_std < 0.0 {
        return Err(Error::Config("reward_noise_std must be nonnegative".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(n);

    let sample = |row: ndarray::ArrayView1<f64>, rng: &mut ChaCha8Rng| -> usize {
        let u: f64 = rng.random::<f64>();
        let mut acc = 0.0;
        for (i, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        row.len() - 1
    };

    let gaussian = |rng: &mut ChaCha8Rng| -> f64 {
        // Box-Muller; one draw per call keeps the stream simple.
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };

    'outer: loop {
        let mut state = sample(mdp.initial_dist.view(), &mut rng);
        for _ in 0..horizon {
            let action = sample(behavior.probs.row(state), &mut rng);
            let next = sample(
                mdp.transition
                    .index_axis(ndarray::Axis(0), state)
                    .row(action),
                &mut rng,
            );
            let mut reward = mdp.reward[[state, action]];
            if reward_noise_std > 0.0 {
                reward =
                    (reward + reward_noise_std * gaussian(&mut rng)).clamp(-mdp.r_max, mdp.r_max);
            }
            transitions.push(Transition {
                state,
                action,
                reward,
                next_state: next,
            });
            if transitions.len() == n {
                break 'outer;
            }
            state = next;
        }
    }

    Dataset::from_transitions(mdp.n_states, mdp.n_actions, transitions, 0.0, seed)
}

/// Laplace-smoothed behavior estimate
/// `pi_hat(a|s) = (N(s,a) + smoothing) / (N(s) + smoothing * |A|)`;
/// unvisited states fall back to the uniform row.
pub fn estimate_behavior_policy(data: &Dataset, smoothing: f64) -> Result<TabularPolicy> {
    if smoothing < 0.0 {
        return Err(Error::Config("smoothing must be nonnegative".into()));
    }
    let (n_states, n_actions) = (data.n_states(), data.n_actions());
    let mut probs = Array2::zeros((n_states, n_actions));
    for s in 0..n_states {
        let total: u64 = (0..n_actions).map(|a| data.counts_sa[[s, a]]).sum();
        if total == 0 && smoothing == 0.0 {
            for a in 0..n_actions {
                probs[[s, a]] = 1.0 / n_actions as f64;
            }
            continue;
        }
        let denom = total as f64 + smoothing * n_actions as f64;
        for a in 0..n_actions {
            probs[[s, a]] = (data.counts_sa[[s, a]] as f64 + smoothing) / denom;
        }
    }
    Ok(TabularPolicy { probs })
}

/// Count-frequency model estimates. `t_hat(s,a,.)` and `r_hat(s,a)` are the
/// empirical frequencies and mean rewards over covered pairs; `covered_mask`
/// is true exactly where `N(s,a) >= 1`.
pub fn build_empirical_mdp(
    data: &Dataset,
    mdp_shape: &MdpSpec,
    coverage_delta: f64,
) -> Result<EmpiricalMdp> {
    if !(coverage_delta > 0.0 && coverage_delta <= 1.0) {
        return Err(Error::Config(format!(
            "coverage_delta {coverage_delta} outside (0,1]"
        )));
    }
    if data.is_empty() {
        return Err(Error::Domain(
            "cannot build an empirical model from an empty dataset".into(),
        ));
    }
    if data.n_states() != mdp_shape.n_states || data.n_actions() != mdp_shape.n_actions {
        return Err(Error::Argument(
            "dataset shape does not match MDP shape".into(),
        ));
    }
    let (n_states, n_actions) = (mdp_shape.n_states, mdp_shape.n_actions);

    let mut reward_sums = Array2::<f64>::zeros((n_states, n_actions));
    for t in &data.transitions {
        reward_sums[[t.state, t.action]] += t.reward;
    }

    let mut t_hat = Array3::zeros((n_states, n_actions, n_states));
    let mut r_hat = Array2::zeros((n_states, n_actions));
    let mut covered_mask = Array2::from_elem((n_states, n_actions), false);
    let total = data.len() as f64;
    let mut min_covered_fraction = f64::INFINITY;

    for s in 0..n_states {
        for a in 0..n_actions {
            let count = data.counts_sa[[s, a]];
            if count == 0 {
                continue;
            }
            covered_mask[[s, a]] = true;
            for s2 in 0..n_states {
                t_hat[[s, a, s2]] = data.counts_sas[[s, a, s2]] as f64 / count as f64;
            }
            r_hat[[s, a]] = reward_sums[[s, a]] / count as f64;
            min_covered_fraction = min_covered_fraction.min(count as f64 / total);
        }
    }

    let coverage_satisfied = min_covered_fraction >= coverage_delta;
    Ok(EmpiricalMdp {
        n_states,
        n_actions,
        gamma: mdp_shape.gamma,
        r_max: mdp_shape.r_max,
        t_hat,
        r_hat,
        coverage_delta,
        covered_mask,
        min_covered_fraction,
        coverage_satisfied,
    })
}

/// Generates one dataset per client from its quality-mixed behavior policy,
/// each with its own seeded stream. Quality labels are recorded on the
/// datasets.
pub fn make_federation(mdp: &MdpSpec, config: &FederationConfig) -> Result<Vec<Dataset>> {
    config.validate()?;
    let mut datasets = Vec::with_capacity(config.n_clients);
    for client in &config.per_client {
        let behavior = make_behavior_policy(mdp, client.quality, client.seed)?;
        let mut data = collect_dataset(
            mdp,
            &behavior,
            client.n_transitions,
            DEFAULT_HORIZON,
            client.seed,
        )?;
        data.quality_label = client.quality;
        datasets.push(data);
    }
    Ok(datasets)
}
