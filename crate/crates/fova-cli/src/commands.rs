//! The four subcommands: dataset generation, training, bound audits, and
//! report aggregation. All file outputs are deterministic functions of the
//! config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fova_core::audit::{
    alpha_threshold, conservatism_audit, heterogeneity_norm, hoeffding_constants, improvement_gap,
    return_gap_xi, safe_bound, BoundConstants, BoundReport, ConservatismReference, GapLevel,
    GapWeights, HeterogeneityReport,
};
use fova_core::data::{
    collect_dataset, make_behavior_policy, Dataset, DatasetManifest, DEFAULT_HORIZON,
};
use fova_core::error::{Error, Result};
use fova_core::federation::{
    build_clients, checkpoint, run_continual, run_training_with, Algo, TrainOptions,
};
use fova_core::learner::awr_target;
use fova_core::mdp::{divergence, expected_return, occupancy_measure, DivergenceKind, MdpSpec};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::metrics::{mean_std, metrics_to_csv, parse_metrics_csv, per_bwt};

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn write_string(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", parent.display()),
            ))
        })?;
    }
    std::fs::write(path, contents).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed:04}"))
}

fn client_file(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("client_{k:02}.csv"))
}

fn client_manifest_file(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("client_{k:02}.manifest.json"))
}

fn phase_dir(dir: &Path, phase: usize) -> PathBuf {
    dir.join(format!("phase_{phase:02}"))
}

/// Mixes a client's configured seed with the run seed (and phase, in
/// continual mode) so replications draw independent data. Run seed 0,
/// phase 0 reproduces the configured seed exactly.
pub fn derive_seed(base: u64, run_seed: u64, phase: usize) -> u64 {
    base ^ run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (phase as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateManifest {
    pub version: u32,
    pub mdp_ref: String,
    pub n_clients: usize,
    pub seeds: Vec<u64>,
    pub quality_labels: Vec<f64>,
    pub phases: usize,
    pub files: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn generate_one(
    mdp: &MdpSpec,
    config: &ExperimentConfig,
    dir: &Path,
    run_seed: u64,
    phase: usize,
    quality_override: Option<f64>,
    files: &mut Vec<String>,
    out_root: &Path,
) -> Result<()> {
    for (k, spec) in config.federation.per_client.iter().enumerate() {
        let quality = quality_override.unwrap_or(spec.quality);
        let seed = derive_seed(spec.seed, run_seed, phase);
        let behavior = make_behavior_policy(mdp, quality, seed)?;
        let mut data = collect_dataset(mdp, &behavior, spec.n_transitions, DEFAULT_HORIZON, seed)?;
        data.quality_label = quality;
        let path = client_file(dir, k);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        data.write_file(&path)?;
        let manifest = DatasetManifest {
            version: 1,
            quality_label: quality,
            seed,
            n: spec.n_transitions,
            mdp: config.federation.mdp_ref.clone(),
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
        };
        write_string(
            &client_manifest_file(dir, k),
            &format!("{}\n", serde_json::to_string_pretty(&manifest)?),
        )?;
        for p in [&path, &client_manifest_file(dir, k)] {
            files.push(p.strip_prefix(out_root).unwrap_or(p).display().to_string());
        }
    }
    Ok(())
}

/// Writes the MDP document, per-seed (and per-phase, in continual mode)
/// dataset files with sidecar manifests, and a top-level manifest.
pub fn cmd_generate(config: &ExperimentConfig, out: &Path) -> Result<GenerateManifest> {
    let mdp = config.mdp.build()?;
    std::fs::create_dir_all(out)?;
    write_string(&out.join("mdp.json"), &format!("{}\n", mdp.to_json()?))?;

    let mut files = vec!["mdp.json".to_string()];
    let phases = config
        .quality_schedule
        .as_ref()
        .map(|s| s.len())
        .unwrap_or(1);
    for &run_seed in &config.seeds {
        let sdir = seed_dir(out, run_seed);
        match &config.quality_schedule {
            None => generate_one(&mdp, config, &sdir, run_seed, 0, None, &mut files, out)?,
            Some(schedule) => {
                for (p, &quality) in schedule.iter().enumerate() {
                    generate_one(
                        &mdp,
                        config,
                        &phase_dir(&sdir, p),
                        run_seed,
                        p,
                        Some(quality),
                        &mut files,
                        out,
                    )?;
                }
            }
        }
    }

    let manifest = GenerateManifest {
        version: 1,
        mdp_ref: config.federation.mdp_ref.clone(),
        n_clients: config.federation.n_clients,
        seeds: config.seeds.clone(),
        quality_labels: match &config.quality_schedule {
            None => config
                .federation
                .per_client
                .iter()
                .map(|c| c.quality)
                .collect(),
            Some(schedule) => schedule.clone(),
        },
        phases,
        files,
    };
    write_string(
        &out.join("manifest.json"),
        &format!("{}\n", serde_json::to_string_pretty(&manifest)?),
    )?;
    Ok(manifest)
}

fn load_mdp(out: &Path) -> Result<MdpSpec> {
    let path = out.join("mdp.json");
    MdpSpec::from_json(&read_to_string(&path)?)
}

fn load_datasets(config: &ExperimentConfig, mdp: &MdpSpec, dir: &Path) -> Result<Vec<Dataset>> {
    let mut datasets = Vec::with_capacity(config.federation.n_clients);
    for (k, _spec) in config.federation.per_client.iter().enumerate() {
        let manifest: DatasetManifest =
            serde_json::from_str(&read_to_string(&client_manifest_file(dir, k))?)?;
        if manifest.n_states != mdp.n_states || manifest.n_actions != mdp.n_actions {
            return Err(Error::Argument(format!(
                "client {k}: dataset shape {}x{} does not match MDP {}x{}",
                manifest.n_states, manifest.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        datasets.push(Dataset::read_file(
            &client_file(dir, k),
            mdp.n_states,
            mdp.n_actions,
            manifest.quality_label,
            manifest.seed,
        )?);
    }
    Ok(datasets)
}

fn train_options(config: &ExperimentConfig) -> TrainOptions {
    TrainOptions {
        smoothing: config.smoothing(),
        coverage_delta: config.coverage_delta(),
        init_policy_from_behavior: config.init_policy_from_behavior,
        ..TrainOptions::default()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ContinualSummary {
    pub per: f64,
    pub bwt: Option<f64>,
}

/// Trains once per seed (one phase sequence per seed in continual mode),
/// emitting a metrics CSV and a checkpoint per seed. Warnings are logged to
/// stderr and never fail the run.
pub fn cmd_train(
    config: &ExperimentConfig,
    out: &Path,
    algo_override: Option<Algo>,
    rounds_override: Option<usize>,
) -> Result<()> {
    let mdp = load_mdp(out)?;
    let algo = match algo_override {
        Some(a) => a,
        None => config.algo()?,
    };
    let rounds = rounds_override.unwrap_or(config.rounds);
    if rounds == 0 {
        return Err(Error::Config("rounds: must be at least 1".into()));
    }
    let params = config.hyper_params()?;
    let mode = config.vote_mode()?;
    let opts = train_options(config);

    for &run_seed in &config.seeds {
        let sdir = seed_dir(out, run_seed);
        match &config.quality_schedule {
            None => {
                let datasets = load_datasets(config, &mdp, &sdir)?;
                let run = run_training_with(&mdp, &datasets, &params, rounds, mode, algo, &opts)?;
                for m in &run.metrics {
                    for w in &m.warnings {
                        eprintln!("seed {run_seed} round {}: {w}", m.round);
                    }
                }
                write_string(
                    &sdir.join(format!("metrics_{}.csv", algo.tag())),
                    &metrics_to_csv(&run.metrics)?,
                )?;
                write_string(
                    &sdir.join(format!("checkpoint_{}.json", algo.tag())),
                    &format!("{}\n", checkpoint::to_json(&run.server, &run.clients)?),
                )?;
            }
            Some(schedule) => {
                let mut phases = Vec::with_capacity(schedule.len());
                for p in 0..schedule.len() {
                    phases.push(load_datasets(config, &mdp, &phase_dir(&sdir, p))?);
                }
                let run = run_continual(&mdp, &phases, &params, rounds, mode, algo, &opts)?;
                for m in &run.metrics {
                    for w in &m.warnings {
                        eprintln!("seed {run_seed} round {}: {w}", m.round);
                    }
                }
                write_string(
                    &sdir.join(format!("metrics_{}.csv", algo.tag())),
                    &metrics_to_csv(&run.metrics)?,
                )?;
                let mut scores_csv = String::new();
                for i in 0..run.scores.nrows() {
                    let row: Vec<String> = (0..run.scores.ncols())
                        .map(|j| run.scores[[i, j]].to_string())
                        .collect();
                    scores_csv.push_str(&row.join(","));
                    scores_csv.push('\n');
                }
                write_string(
                    &sdir.join(format!("scores_{}.csv", algo.tag())),
                    &scores_csv,
                )?;
                let (per, bwt) = per_bwt(&run.scores)?;
                write_string(
                    &sdir.join(format!("continual_{}.json", algo.tag())),
                    &format!(
                        "{}\n",
                        serde_json::to_string_pretty(&ContinualSummary { per, bwt })?
                    ),
                )?;
            }
        }
    }
    Ok(())
}

/// Every bound and flag for one trained checkpoint: one report per client
/// plus the federation-level heterogeneity report.
pub fn cmd_audit(config: &ExperimentConfig, out: &Path, checkpoint_path: &Path) -> Result<()> {
    let mdp = load_mdp(out)?;
    let loaded = checkpoint::from_json(&read_to_string(checkpoint_path)?)?;
    let shape = (mdp.n_states, mdp.n_actions);
    if loaded.global_policy.probs.dim() != shape {
        return Err(Error::Argument(format!(
            "checkpoint shape {:?} does not match MDP {:?}",
            loaded.global_policy.probs.dim(),
            shape
        )));
    }
    if loaded.clients.len() != config.federation.n_clients {
        return Err(Error::Argument(format!(
            "checkpoint has {} clients, config expects {}",
            loaded.clients.len(),
            config.federation.n_clients
        )));
    }

    let seed_dir = checkpoint_path
        .parent()
        .ok_or_else(|| Error::Argument("checkpoint path has no parent directory".into()))?;
    // Continual checkpoints correspond to the final phase's data.
    let data_dir = match &config.quality_schedule {
        None => seed_dir.to_path_buf(),
        Some(schedule) => phase_dir(seed_dir, schedule.len() - 1),
    };
    let datasets = load_datasets(config, &mdp, &data_dir)?;

    let params = config.hyper_params()?;
    let mode = config.vote_mode()?;
    let opts = train_options(config);
    let mut clients = build_clients(&mdp, &datasets, &params, &opts)?;
    for (client, (policy, q)) in clients.iter_mut().zip(loaded.clients.iter()) {
        client.local_policy = policy.clone();
        client.local_q = q.clone();
    }

    let (c_r, c_t) = hoeffding_constants(params.delta_conf, mdp.r_max, mdp.n_states);
    let constants = BoundConstants {
        c_r,
        c_t,
        gamma: params.gamma,
        r_max: mdp.r_max,
        delta: params.delta_conf,
    };
    let sigma = constants.sigma(params.alpha);
    let global_pi = &loaded.global_policy;

    let mut reports = Vec::with_capacity(clients.len());
    let mut xi_terms = Vec::with_capacity(clients.len());
    let mut tv_terms = Vec::with_capacity(clients.len());

    for client in clients.iter_mut() {
        client.local_q = loaded.global_q.clone();
        let eval = fova_core::learner::vcql_evaluate(client, global_pi, mode)?;
        let target =
            awr_target(&eval.q, &eval.v, &client.behavior, params.beta)?.with_floor(params.zeta);
        let emp_mdp = client.empirical.as_mdp_spec(mdp.initial_dist.clone())?;

        let threshold = alpha_threshold(
            &client.data,
            &eval.eval_policy,
            &client.behavior,
            params.delta_conf,
            c_r,
            c_t,
            params.gamma,
            mdp.r_max,
        )?;
        let xi_tilde = return_gap_xi(
            &client.data,
            &emp_mdp,
            &client.local_policy,
            &client.behavior,
            &constants,
        )?;
        let xi_bar = return_gap_xi(
            &client.data,
            &emp_mdp,
            &target,
            &client.behavior,
            &constants,
        )?;
        let xi_b = return_gap_xi(
            &client.data,
            &emp_mdp,
            &client.behavior,
            &client.behavior,
            &constants,
        )?;

        let mut report = BoundReport {
            alpha_threshold: threshold,
            xi_tilde: xi_tilde.xi,
            xi_bar: xi_bar.xi,
            xi_b: xi_b.xi,
            sigma,
            c_r_delta: c_r,
            c_t_delta: c_t,
            ..BoundReport::default()
        };

        let weights = occupancy_measure(&mdp, &client.behavior)?;
        let gap_weights = GapWeights {
            lambda: params.lambda,
            beta: params.beta,
            state_weights: &weights,
        };
        let (_, _, target_improvement) = improvement_gap(
            &mdp,
            &target,
            &client.behavior,
            &target,
            &mut report,
            GapLevel::Global,
            gap_weights,
        )?;
        let (_, _, local_improvement) = improvement_gap(
            &mdp,
            &client.local_policy,
            &client.behavior,
            &target,
            &mut report,
            GapLevel::Local,
            gap_weights,
        )?;
        let conservatism =
            conservatism_audit(client, global_pi, mode, ConservatismReference::True(&mdp))?
                .all_pass;
        let j_gap = (expected_return(&emp_mdp, &client.local_policy)?
            - expected_return(&mdp, &client.local_policy)?)
        .abs();
        let return_gap = j_gap <= xi_tilde.xi;

        report.holds_empirically.conservatism = conservatism;
        report.holds_empirically.return_gap = return_gap;
        report.holds_empirically.target_improvement = target_improvement;
        report.holds_empirically.local_improvement = local_improvement;

        let xi_global = return_gap_xi(
            &client.data,
            &emp_mdp,
            global_pi,
            &client.behavior,
            &constants,
        )?;
        xi_terms.push(2.0 * xi_global.xi);
        tv_terms.push(divergence(
            &client.behavior,
            global_pi,
            &weights,
            DivergenceKind::Tv,
        )?);
        reports.push(report);
    }

    let mut het: HeterogeneityReport = heterogeneity_norm(&clients, &mdp)?;
    let bound = safe_bound(
        params.lambda,
        params.beta,
        &het,
        &xi_terms,
        &tv_terms,
        sigma,
    )?;
    het.safe_bound = Some(bound);
    let safe_ok = bound.is_finite() && bound >= 0.0;
    for report in reports.iter_mut() {
        report.holds_empirically.safe_bound = safe_ok;
    }

    let stem = checkpoint_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint");
    write_string(
        &seed_dir.join(format!("audit_bounds_{stem}.json")),
        &format!("{}\n", serde_json::to_string_pretty(&reports)?),
    )?;
    write_string(
        &seed_dir.join(format!("audit_heterogeneity_{stem}.json")),
        &format!("{}\n", serde_json::to_string_pretty(&het)?),
    )?;
    Ok(())
}

/// Aggregates per-seed metrics into mean/std curves per algorithm and a
/// cross-algorithm comparison table. Emits plot-ready CSV only.
pub fn cmd_report(out: &Path) -> Result<()> {
    let mut by_algo: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    let entries = std::fs::read_dir(out).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", out.display()),
        ))
    })?;
    let mut seed_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("seed_"))
                    .unwrap_or(false)
        })
        .collect();
    seed_dirs.sort();
    for dir in &seed_dirs {
        let files = std::fs::read_dir(dir).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", dir.display()),
            ))
        })?;
        for f in files.filter_map(|e| e.ok().map(|e| e.path())) {
            let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if let Some(tag) = name
                .strip_prefix("metrics_")
                .and_then(|n| n.strip_suffix(".csv"))
            {
                by_algo.entry(tag.to_string()).or_default().push(f.clone());
            }
        }
    }
    if by_algo.is_empty() {
        return Err(Error::Argument(format!(
            "{}: no metrics files found (expected seed_*/metrics_<algo>.csv)",
            out.display()
        )));
    }

    let mut summary = String::from("algo,seeds,final_j_global_mean,final_j_global_std\n");
    for (tag, mut files) in by_algo {
        files.sort();
        let mut jg_series = Vec::new();
        let mut jcm_series = Vec::new();
        let mut rounds = Vec::new();
        for f in &files {
            let parsed = parse_metrics_csv(&read_to_string(f)?)?;
            if rounds.is_empty() {
                rounds = parsed.rounds.clone();
            } else if rounds != parsed.rounds {
                return Err(Error::Argument(format!(
                    "{}: round indices differ across seeds",
                    f.display()
                )));
            }
            jg_series.push(parsed.j_global);
            jcm_series.push(parsed.j_client_mean);
        }
        let (jg_mean, jg_std) = mean_std(&jg_series)?;
        let (jcm_mean, jcm_std) = mean_std(&jcm_series)?;

        let mut curve =
            String::from("round,j_global_mean,j_global_std,j_client_mean_mean,j_client_mean_std\n");
        for (i, &round) in rounds.iter().enumerate() {
            curve.push_str(&format!(
                "{round},{},{},{},{}\n",
                jg_mean[i], jg_std[i], jcm_mean[i], jcm_std[i]
            ));
        }
        write_string(&out.join(format!("report_{tag}.csv")), &curve)?;

        let last = jg_mean.len() - 1;
        summary.push_str(&format!(
            "{tag},{},{},{}\n",
            jg_series.len(),
            jg_mean[last],
            jg_std[last]
        ));
    }
    write_string(&out.join("report_summary.csv"), &summary)?;
    Ok(())
}
