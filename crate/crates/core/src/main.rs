//! Pipeline driver. One subcommand per stage — data generation, model
//! training/search, policy synthesis, evaluation, reward ablation — all
//! reading the same TOML config. Every command is deterministic given
//! (--seed, config, inputs) and leaves a `*.manifest.json` sidecar next to
//! each artifact it writes.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, bad config, bad
//! input files), 2 runtime failure.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reachkit::config::ToolkitConfig;
use reachkit::dataset::Dataset;
use reachkit::dynmodel::{
    eval_metric, prepare_trajectories, rms_per_joint, search_hyperparameters, train, DynModel,
    DynSpec, EpochStats, FamilyKind, ParamFamily, PredictKind, SearchSpace, SplitPart,
};
use reachkit::env::{make_episode_list, sample_episode, EpisodeSpec, RewardConfig};
use reachkit::eval::{
    run_study, save_logs_json, save_report_json, write_episodes_csv, write_sr_csv, BackendKind,
    Controller, NullController, PlannerController, PolicyController, Protocol, StudyConfig,
};
use reachkit::icem::Planner;
use reachkit::manifest::{manifest_path, RunManifest};
use reachkit::plant::{excite, ExciteParams, Plant, TICKS_PER_SECOND};
use reachkit::ppo::{success_probe, train_ppo, write_curve_csv, EvalHook, Policy};
use reachkit::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "reachkit",
    version,
    about = "Reaching control for a 4-DoF hydraulic arm: synthetic plant, residual dynamics \
             models, PPO and iCEM controllers, transfer evaluation"
)]
struct Cli {
    /// TOML config file (omitted: the built-in desk profile).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Print one machine-readable JSON object on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    /// Position residual: q' = q + f(x).
    Dq,
    /// Velocity residual: v' = v + f(x), q' = q + dt v'.
    Dqdot,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ArchArg {
    Mlp,
    Kan,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ControllerArg {
    Ppo,
    Icem,
    Null,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    /// Roll episodes on the learned dynamics model.
    Model,
    /// Roll episodes on the synthetic plant (transfer evaluation).
    Plant,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    Fixed,
    Sequential,
}

#[derive(Subcommand)]
enum Cmd {
    /// Drive the synthetic plant with a guarded random-walk excitation and
    /// record a training dataset.
    GenerateData {
        /// Session length in minutes at 20 Hz (21 -> 25,200 rows).
        #[arg(long)]
        minutes: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Train one residual dynamics model on recorded sessions.
    TrainDynmodel {
        /// Dataset CSV (repeat the flag for several sessions).
        #[arg(long = "dataset", required = true, value_name = "FILE")]
        datasets: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = VariantArg::Dqdot)]
        variant: VariantArg,
        #[arg(long, value_enum, default_value_t = ArchArg::Mlp)]
        arch: ArchArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output model file.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Override the preset lag depth k.
        #[arg(long)]
        k: Option<usize>,
        /// Override the training unroll length.
        #[arg(long)]
        horizon: Option<usize>,
        /// Override the learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Override the batch size (snippets per update).
        #[arg(long)]
        batch: Option<usize>,
        /// Override hidden layer widths, comma-separated (e.g. 512,128).
        #[arg(long, value_name = "W,W,...")]
        hidden: Option<String>,
        /// Override the polynomial degree (kan only).
        #[arg(long)]
        degree: Option<usize>,
    },
    /// Random-search model hyperparameters and rank the trials.
    SearchDynmodel {
        #[arg(long = "dataset", required = true, value_name = "FILE")]
        datasets: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = VariantArg::Dqdot)]
        variant: VariantArg,
        #[arg(long, value_enum, default_value_t = ArchArg::Mlp)]
        arch: ArchArg,
        /// Number of sampled configurations to train and score.
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV for the ranked results.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Train a PPO reaching policy against a learned-model backend.
    TrainPpo {
        /// Dynamics model the training environments roll out.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Override total decision steps.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (policy, curve, checkpoints, manifest).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Evaluate a controller over the shared episode list and write the
    /// metrics report plus SR-matrix CSV grids.
    Eval {
        #[arg(long, value_enum)]
        controller: ControllerArg,
        #[arg(long, value_enum, default_value_t = BackendArg::Model)]
        backend: BackendArg,
        /// Dynamics model (observation windows, and rollouts for the model
        /// backend and the planner).
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Policy file (required for --controller ppo).
        #[arg(long, value_name = "FILE")]
        policy: Option<PathBuf>,
        /// Episode count (default: the config's eval.episodes).
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_enum, default_value_t = ProtocolArg::Fixed)]
        protocol: ProtocolArg,
        /// Master seed of the episode list (default: config eval.list_seed).
        #[arg(long)]
        list_seed: Option<u64>,
        /// Controller seed (planner sampling noise).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (report, logs, CSV grids, manifest).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train PPO under reward-term subsets and tabulate the comparison.
    AblateReward {
        /// Dynamics model backend for training and evaluation.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// One reward-term subset, comma- or plus-separated (tokens: pose,
        /// config, bonus, action, workspace). Repeat the flag for several
        /// rows; default is the full nine-row grid.
        #[arg(long = "flags", value_name = "SET")]
        flags: Vec<String>,
        /// Independent training seeds per subset.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Override PPO decision steps per run.
        #[arg(long)]
        steps: Option<u64>,
        /// Episode count for the per-run evaluation.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (table CSV + JSON, manifest).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code =
                matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) as u8;
            let _ = e.print();
            // help/version print successfully -> 0; anything else is a
            // validation error -> 1.
            return ExitCode::from(1 - code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::Format(_) => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => ToolkitConfig::load(path)?,
        None => {
            let c = ToolkitConfig::default();
            c.validate()?;
            c
        }
    };
    let json = cli.json;
    match cli.cmd {
        Cmd::GenerateData { minutes, seed, out } => {
            cmd_generate_data(&cfg, json, minutes, seed, &out)
        }
        Cmd::TrainDynmodel {
            datasets,
            variant,
            arch,
            seed,
            out,
            k,
            horizon,
            lr,
            batch,
            hidden,
            degree,
        } => {
            let overrides = SpecOverrides { k, horizon, lr, batch, hidden, degree };
            cmd_train_dynmodel(&cfg, json, &datasets, variant, arch, seed, &out, &overrides)
        }
        Cmd::SearchDynmodel { datasets, variant, arch, budget, seed, out } => {
            cmd_search_dynmodel(&cfg, json, &datasets, variant, arch, budget, seed, &out)
        }
        Cmd::TrainPpo { model, steps, seed, out } => {
            cmd_train_ppo(&cfg, json, &model, steps, seed, &out)
        }
        Cmd::Eval {
            controller,
            backend,
            model,
            policy,
            episodes,
            protocol,
            list_seed,
            seed,
            out,
        } => cmd_eval(
            &cfg,
            json,
            controller,
            backend,
            &model,
            policy.as_deref(),
            episodes,
            protocol,
            list_seed,
            seed,
            &out,
        ),
        Cmd::AblateReward { model, flags, seeds, steps, episodes, seed, out } => {
            cmd_ablate_reward(&cfg, json, &model, &flags, seeds, steps, episodes, seed, &out)
        }
    }
}

fn emit(json: bool, summary: serde_json::Value, human: &str) {
    use std::io::Write;
    let body = if json {
        serde_json::to_string_pretty(&summary).unwrap_or_else(|_| "{}".to_string())
    } else {
        human.to_string()
    };
    // Ignore EPIPE so `reachkit ... | head` exits quietly.
    let _ = writeln!(std::io::stdout(), "{body}");
}

fn ensure_parent_dir(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- commands

fn cmd_generate_data(
    cfg: &ToolkitConfig,
    json: bool,
    minutes: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if !minutes.is_finite() || !(minutes > 0.0) {
        return Err(Error::Config(format!("--minutes must be > 0 (got {minutes})")));
    }
    let steps = (minutes * 60.0 * TICKS_PER_SECOND as f64).round() as usize;
    if steps == 0 {
        return Err(Error::Config("--minutes rounds to zero control ticks".into()));
    }

    // Start configuration and excitation noise on separate derived streams,
    // so changing the trajectory length never shifts the start.
    let mut rng_start = ChaCha8Rng::seed_from_u64(seed);
    rng_start.set_stream(1);
    let start = sample_episode(&cfg.chain, &cfg.workspace, &mut rng_start)?;
    let mut plant = Plant::new(cfg.plant.clone(), cfg.chain.clone(), start.initial_q)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let params = ExciteParams { steps, ..cfg.excite.clone() };

    let t0 = Instant::now();
    let (ds, stats) = excite(&mut plant, &cfg.workspace, &params, &mut rng)?;
    ensure_parent_dir(out)?;
    ds.write_csv(out)?;

    let mut manifest = RunManifest::new("generate-data", cfg.snapshot());
    manifest.seed("master", seed);
    manifest.output(out)?;
    manifest.notes = serde_json::json!({
        "minutes": minutes,
        "rows": ds.len(),
        "stats": stats,
        "wall_s": t0.elapsed().as_secs_f64(),
    });
    let side = manifest.save_for(out)?;

    let summary = serde_json::json!({
        "command": "generate-data",
        "out": out.display().to_string(),
        "manifest": side.display().to_string(),
        "rows": ds.len(),
        "coverage": stats.coverage,
        "cells_visited": stats.cells_visited,
        "cells_total": stats.cells_total,
        "outside_ticks": stats.outside_ticks,
        "repaired_ticks": stats.repaired_ticks,
    });
    let human = format!(
        "wrote {} rows ({} min at {} Hz) to {}\n\
         coverage {:.1}% ({} of {} reachable cells), outside ticks {}, guard repairs {}\n\
         manifest: {}",
        ds.len(),
        minutes,
        TICKS_PER_SECOND,
        out.display(),
        stats.coverage * 100.0,
        stats.cells_visited,
        stats.cells_total,
        stats.outside_ticks,
        stats.repaired_ticks,
        side.display(),
    );
    emit(json, summary, &human);
    Ok(())
}

struct SpecOverrides {
    k: Option<usize>,
    horizon: Option<usize>,
    lr: Option<f64>,
    batch: Option<usize>,
    hidden: Option<String>,
    degree: Option<usize>,
}

fn base_spec(variant: VariantArg, arch: ArchArg) -> DynSpec {
    match (variant, arch) {
        (VariantArg::Dq, ArchArg::Mlp) => DynSpec::mlp_delta_q(),
        (VariantArg::Dq, ArchArg::Kan) => DynSpec::kan_delta_q(),
        (VariantArg::Dqdot, ArchArg::Mlp) => DynSpec::mlp_delta_qd(),
        (VariantArg::Dqdot, ArchArg::Kan) => DynSpec::kan_delta_qd(),
    }
}

fn parse_hidden(s: &str) -> Result<Vec<usize>> {
    let widths: std::result::Result<Vec<usize>, _> =
        s.split(',').map(|w| w.trim().parse::<usize>()).collect();
    let widths = widths.map_err(|e| Error::Config(format!("--hidden {s:?}: {e}")))?;
    if widths.is_empty() || widths.contains(&0) {
        return Err(Error::Config("--hidden needs a non-empty list of positive widths".into()));
    }
    Ok(widths)
}

fn apply_overrides(spec: &mut DynSpec, ov: &SpecOverrides) -> Result<()> {
    if let Some(k) = ov.k {
        spec.k = k;
    }
    if let Some(h) = ov.horizon {
        spec.horizon = h;
    }
    if let Some(lr) = ov.lr {
        spec.lr = lr;
    }
    if let Some(b) = ov.batch {
        spec.batch = b;
    }
    if ov.degree.is_some() && matches!(spec.arch, ParamFamily::Mlp { .. }) {
        return Err(Error::Config("--degree only applies to --arch kan".into()));
    }
    if let Some(hs) = &ov.hidden {
        let widths = parse_hidden(hs)?;
        spec.arch = match &spec.arch {
            ParamFamily::Mlp { .. } => ParamFamily::Mlp { hidden: widths },
            ParamFamily::Kan { degree, .. } => {
                ParamFamily::Kan { hidden: widths, degree: ov.degree.unwrap_or(*degree) }
            }
        };
    } else if let Some(d) = ov.degree {
        spec.arch = match &spec.arch {
            ParamFamily::Kan { hidden, .. } => {
                ParamFamily::Kan { hidden: hidden.clone(), degree: d }
            }
            ParamFamily::Mlp { .. } => unreachable!("checked above"),
        };
    }
    Ok(())
}

fn read_datasets(paths: &[PathBuf]) -> Result<Vec<Dataset>> {
    paths.iter().map(|p| Dataset::read_csv(p)).collect()
}

fn arch_label(arch: &ParamFamily) -> String {
    match arch {
        ParamFamily::Mlp { hidden } => format!(
            "mlp({})",
            hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
        ),
        ParamFamily::Kan { hidden, degree } => format!(
            "kan({}) deg {degree}",
            hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
        ),
    }
}

fn variant_label(predict: PredictKind) -> &'static str {
    match predict {
        PredictKind::DeltaQ => "dq",
        PredictKind::DeltaQd => "dqdot",
    }
}

fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("history csv: {e}"));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["epoch", "train_loss", "val_metric"]).map_err(csv_err)?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.train_loss.to_string(),
            h.val_metric.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_dynmodel(
    cfg: &ToolkitConfig,
    json: bool,
    datasets: &[PathBuf],
    variant: VariantArg,
    arch: ArchArg,
    seed: u64,
    out: &Path,
    overrides: &SpecOverrides,
) -> Result<()> {
    let data = read_datasets(datasets)?;
    let mut spec = base_spec(variant, arch);
    spec.q_min = cfg.chain.q_min;
    spec.q_max = cfg.chain.q_max;
    apply_overrides(&mut spec, overrides)?;
    spec.validate()?;

    let opts = cfg.dynmodel.to_options(seed);
    let t0 = Instant::now();
    let (model, history) = train(&spec, &data, &opts)?;
    let wall = t0.elapsed().as_secs_f64();

    let trajs = prepare_trajectories(&data);
    let train_metric = eval_metric(
        &model,
        &trajs,
        SplitPart::Train,
        opts.eval_snippets,
        opts.eval_horizon,
        opts.seed,
    )?;
    let val_metric = eval_metric(
        &model,
        &trajs,
        SplitPart::Val,
        opts.eval_snippets,
        opts.eval_horizon,
        opts.seed,
    )?;
    let rms = rms_per_joint(val_metric);

    ensure_parent_dir(out)?;
    let side_path = manifest_path(out);
    let extra = serde_json::json!({
        "manifest": side_path.file_name().map(|n| n.to_string_lossy().into_owned()),
        "datasets": datasets.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "seed": seed,
    });
    model.save(out, extra)?;
    let hist_path = out.with_extension("history.csv");
    write_history_csv(&hist_path, &history)?;

    let mut manifest = RunManifest::new("train-dynmodel", cfg.snapshot());
    manifest.seed("master", seed);
    for p in datasets {
        manifest.input(p)?;
    }
    manifest.output(out)?;
    manifest.output(&hist_path)?;
    manifest.notes = serde_json::json!({
        "spec": spec,
        "epochs_run": history.len(),
        "train_metric": train_metric,
        "val_metric": val_metric,
        "rms_per_joint": rms,
        "wall_s": wall,
    });
    manifest.save_for(out)?;

    let summary = serde_json::json!({
        "command": "train-dynmodel",
        "out": out.display().to_string(),
        "manifest": side_path.display().to_string(),
        "history": hist_path.display().to_string(),
        "variant": variant_label(spec.predict),
        "arch": arch_label(&spec.arch),
        "k": spec.k,
        "horizon": spec.horizon,
        "epochs_run": history.len(),
        "eval_metric": val_metric,
        "train_metric": train_metric,
        "rms_per_joint": rms,
        "wall_s": wall,
    });
    let human = format!(
        "trained {} {} (k {}, unroll {}) for {} epochs in {:.0} s\n\
         eval metric (held-out, {}-step unroll): {:.4e}  [train split {:.4e}, ratio {:.2}]\n\
         open-loop RMS per joint: {:.4} rad\n\
         model: {}\nhistory: {}\nmanifest: {}",
        variant_label(spec.predict),
        arch_label(&spec.arch),
        spec.k,
        spec.horizon,
        history.len(),
        wall,
        opts.eval_horizon,
        val_metric,
        train_metric,
        val_metric / train_metric.max(f64::MIN_POSITIVE),
        rms,
        out.display(),
        hist_path.display(),
        side_path.display(),
    );
    emit(json, summary, &human);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_search_dynmodel(
    cfg: &ToolkitConfig,
    json: bool,
    datasets: &[PathBuf],
    variant: VariantArg,
    arch: ArchArg,
    budget: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let data = read_datasets(datasets)?;
    let family = match arch {
        ArchArg::Mlp => FamilyKind::Mlp,
        ArchArg::Kan => FamilyKind::Kan,
    };
    let predict = match variant {
        VariantArg::Dq => PredictKind::DeltaQ,
        VariantArg::Dqdot => PredictKind::DeltaQd,
    };
    let opts = cfg.dynmodel.to_options(seed);
    let t0 = Instant::now();
    let results =
        search_hyperparameters(&SearchSpace::default(), family, predict, &data, budget, &opts, seed)?;
    let wall = t0.elapsed().as_secs_f64();

    ensure_parent_dir(out)?;
    let csv_err = |e: csv::Error| Error::Format(format!("search csv: {e}"));
    let mut w = csv::Writer::from_path(out).map_err(csv_err)?;
    w.write_record(["rank", "score", "rms_per_joint", "params", "k", "horizon", "lr", "batch", "arch"])
        .map_err(csv_err)?;
    for (rank, r) in results.iter().enumerate() {
        w.write_record([
            (rank + 1).to_string(),
            r.score.to_string(),
            rms_per_joint(r.score).to_string(),
            r.param_count.to_string(),
            r.spec.k.to_string(),
            r.spec.horizon.to_string(),
            r.spec.lr.to_string(),
            r.spec.batch.to_string(),
            arch_label(&r.spec.arch),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let mut manifest = RunManifest::new("search-dynmodel", cfg.snapshot());
    manifest.seed("master", seed);
    for p in datasets {
        manifest.input(p)?;
    }
    manifest.output(out)?;
    manifest.notes = serde_json::json!({
        "budget": budget,
        "best": results.first(),
        "wall_s": wall,
    });
    let side = manifest.save_for(out)?;

    let best = results.first().expect("budget >= 1 yields at least one row");
    let summary = serde_json::json!({
        "command": "search-dynmodel",
        "out": out.display().to_string(),
        "manifest": side.display().to_string(),
        "budget": budget,
        "best": best,
        "wall_s": wall,
    });
    let mut human = format!(
        "searched {budget} configurations in {wall:.0} s; ranked results: {}\n\
         best: {} k {} unroll {} lr {} batch {} -> eval metric {:.4e} ({} params)",
        out.display(),
        arch_label(&best.spec.arch),
        best.spec.k,
        best.spec.horizon,
        best.spec.lr,
        best.spec.batch,
        best.score,
        best.param_count,
    );
    for (rank, r) in results.iter().enumerate().take(5).skip(1) {
        human.push_str(&format!(
            "\n  #{}: {} k {} unroll {} lr {} batch {} -> {:.4e}",
            rank + 1,
            arch_label(&r.spec.arch),
            r.spec.k,
            r.spec.horizon,
            r.spec.lr,
            r.spec.batch,
            r.score,
        ));
    }
    emit(json, summary, &human);
    Ok(())
}

fn cmd_train_ppo(
    cfg: &ToolkitConfig,
    json: bool,
    model_path: &Path,
    steps: Option<u64>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let model = Arc::new(DynModel::load(model_path)?);
    let mut pcfg = cfg.ppo.cfg.clone();
    if let Some(s) = steps {
        pcfg.total_steps = s;
    }
    pcfg.validate()?;
    std::fs::create_dir_all(out)?;

    // Success-rate probe on a fixed list kept disjoint from the shared
    // evaluation list (separate master seed).
    let probe_seed = cfg.eval.list_seed ^ 0x9E37_79B9_7F4A_7C15;
    let probe: Vec<EpisodeSpec> = if pcfg.eval_every > 0 {
        make_episode_list(&cfg.chain, &cfg.workspace, probe_seed, 16)?
            .episodes
            .iter()
            .map(|e| EpisodeSpec::new(e.initial_q, e.target_q))
            .collect()
    } else {
        Vec::new()
    };
    let probe_model = model.clone();
    let probe_chain = cfg.chain.clone();
    let probe_ws = cfg.workspace.clone();
    let probe_rcfg = cfg.reward.clone();
    let mut hook = move |policy: &Policy, _step: u64| -> Result<f64> {
        success_probe(
            policy,
            probe_model.clone(),
            &probe_chain,
            &probe_ws,
            &probe_rcfg,
            &probe,
            0.04,
            0.04,
        )
    };
    let hook_opt: Option<&mut EvalHook> =
        if pcfg.eval_every > 0 { Some(&mut hook) } else { None };

    let t0 = Instant::now();
    let trained = train_ppo(
        model.clone(),
        cfg.chain.clone(),
        cfg.workspace.clone(),
        cfg.reward.clone(),
        &pcfg,
        &cfg.ppo.actor_hidden,
        &cfg.ppo.critic_hidden,
        seed,
        Some(out),
        hook_opt,
    )?;
    let wall = t0.elapsed().as_secs_f64();

    let policy_path = out.join("policy_final.bin");
    trained.policy.save(&policy_path)?;
    let curve_path = out.join("curve.csv");
    write_curve_csv(&curve_path, &trained.curve)?;

    let final_return = trained.curve.iter().rev().find_map(|p| p.mean_return);
    let final_probe = trained.curve.iter().rev().find_map(|p| p.success_rate);

    let mut manifest = RunManifest::new("train-ppo", cfg.snapshot());
    manifest.seed("master", seed);
    manifest.input(model_path)?;
    manifest.output(&policy_path)?;
    manifest.output(&curve_path)?;
    manifest.notes = serde_json::json!({
        "total_steps": pcfg.total_steps,
        "updates": trained.stats.len(),
        "final_mean_return": final_return,
        "final_probe_sr": final_probe,
        "wall_s": wall,
    });
    let side = manifest.save_for(&policy_path)?;

    let steps_per_s = pcfg.total_steps as f64 / wall.max(1e-9);
    let summary = serde_json::json!({
        "command": "train-ppo",
        "policy": policy_path.display().to_string(),
        "curve": curve_path.display().to_string(),
        "manifest": side.display().to_string(),
        "total_steps": pcfg.total_steps,
        "updates": trained.stats.len(),
        "final_mean_return": final_return,
        "final_probe_sr": final_probe,
        "wall_s": wall,
        "steps_per_s": steps_per_s,
    });
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    let human = format!(
        "trained PPO for {} decision steps in {:.0} s ({:.0} steps/s), {} updates\n\
         final mean return {}  probe SR(0.04,0.04) {}\n\
         policy: {}\ncurve: {}\nmanifest: {}",
        pcfg.total_steps,
        wall,
        steps_per_s,
        trained.stats.len(),
        fmt_opt(final_return),
        fmt_opt(final_probe),
        policy_path.display(),
        curve_path.display(),
        side.display(),
    );
    emit(json, summary, &human);
    Ok(())
}

enum AnyController {
    Null(NullController),
    Ppo(PolicyController),
    Icem(Box<PlannerController>),
}

impl AnyController {
    fn as_dyn(&mut self) -> &mut dyn Controller {
        match self {
            AnyController::Null(c) => c,
            AnyController::Ppo(c) => c,
            AnyController::Icem(c) => c.as_mut(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cfg: &ToolkitConfig,
    json: bool,
    controller: ControllerArg,
    backend: BackendArg,
    model_path: &Path,
    policy_path: Option<&Path>,
    episodes: Option<usize>,
    protocol: ProtocolArg,
    list_seed: Option<u64>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let model = Arc::new(DynModel::load(model_path)?);
    let n = episodes.unwrap_or(cfg.eval.episodes);
    if n == 0 {
        return Err(Error::Config("--episodes must be >= 1".into()));
    }
    let list_seed = list_seed.unwrap_or(cfg.eval.list_seed);
    let list = make_episode_list(&cfg.chain, &cfg.workspace, list_seed, n)?;
    std::fs::create_dir_all(out)?;

    let mut any = match controller {
        ControllerArg::Null => AnyController::Null(NullController),
        ControllerArg::Ppo => {
            let p = policy_path
                .ok_or_else(|| Error::Config("--controller ppo requires --policy".into()))?;
            AnyController::Ppo(PolicyController { policy: Policy::load(p)? })
        }
        ControllerArg::Icem => {
            // The planner optimizes the reward without the pose-distance and
            // bonus terms; the reported metrics still use the full reward.
            let prcfg =
                RewardConfig { use_pose: false, use_bonus: false, ..cfg.reward.clone() };
            let planner = Planner::new(
                model.clone(),
                cfg.chain.clone(),
                cfg.workspace.clone(),
                prcfg,
                cfg.icem.clone(),
                seed,
            )?;
            AnyController::Icem(Box::new(PlannerController::new(planner)))
        }
    };
    let study = StudyConfig {
        protocol: match protocol {
            ProtocolArg::Fixed => Protocol::Fixed,
            ProtocolArg::Sequential => Protocol::Sequential,
        },
        backend: match backend {
            BackendArg::Model => BackendKind::Model,
            BackendArg::Plant => BackendKind::Plant(cfg.plant.clone()),
        },
        max_episodes: None,
    };

    let t0 = Instant::now();
    let study_out = run_study(
        any.as_dyn(),
        model.clone(),
        &cfg.chain,
        &cfg.workspace,
        &cfg.reward,
        &list,
        &study,
    )?;
    let wall = t0.elapsed().as_secs_f64();
    let plan_ms = match &any {
        AnyController::Icem(c) => c.mean_plan_ms(),
        _ => None,
    };

    let report_path = out.join("report.json");
    save_report_json(&report_path, &study_out.report)?;
    save_logs_json(&out.join("logs.json"), &study_out.logs)?;
    write_sr_csv(&out.join("sr.csv"), &study_out.report)?;
    write_episodes_csv(&out.join("episodes.csv"), &study_out.report)?;
    list.save(&out.join("episode_list.json"))?;

    let r = &study_out.report;
    let mut manifest = RunManifest::new("eval", cfg.snapshot());
    manifest.seed("list", list_seed);
    manifest.seed("controller", seed);
    manifest.input(model_path)?;
    if let Some(p) = policy_path {
        manifest.input(p)?;
    }
    for name in ["report.json", "logs.json", "sr.csv", "episodes.csv", "episode_list.json"] {
        manifest.output(&out.join(name))?;
    }
    manifest.notes = serde_json::json!({
        "sr_tight": r.sr_at(0.02, 0.02),
        "sr_mid": r.sr_at(0.04, 0.04),
        "sr_loose": r.sr_at(0.12, 0.08),
        "oow": r.oow,
        "ooz": r.ooz,
        "min_z": r.min_z,
        "mean_path_length": r.mean_path_length,
        "avg_return": r.avg_return,
        "mean_plan_ms": plan_ms,
        "wall_s": wall,
    });
    let side = manifest.save_for(&report_path)?;

    let summary = serde_json::json!({
        "command": "eval",
        "controller": r.controller,
        "backend": r.backend,
        "protocol": r.protocol,
        "episodes": r.episodes,
        "sr_002_002": r.sr_at(0.02, 0.02),
        "sr_004_004": r.sr_at(0.04, 0.04),
        "sr_012_008": r.sr_at(0.12, 0.08),
        "oow": r.oow,
        "ooz": r.ooz,
        "min_z": r.min_z,
        "mean_path_length": r.mean_path_length,
        "avg_return": r.avg_return,
        "mean_plan_ms": plan_ms,
        "report": report_path.display().to_string(),
        "manifest": side.display().to_string(),
        "wall_s": wall,
    });
    let plan_line = plan_ms
        .map(|ms| format!("\nmean planning time {ms:.1} ms/call"))
        .unwrap_or_default();
    let human = format!(
        "{} on {} backend ({} protocol), {} episodes in {:.0} s\n\
         SR(0.02,0.02) {:.3}   SR(0.04,0.04) {:.3}   SR(0.12,0.08) {:.3}\n\
         OOW {:.3}   OOZ {:.3}   min z {:.3} m   mean EEF path {:.3} m   avg return {:.2}{}\n\
         report: {}\nmanifest: {}",
        r.controller,
        r.backend,
        r.protocol,
        r.episodes,
        wall,
        r.sr_at(0.02, 0.02),
        r.sr_at(0.04, 0.04),
        r.sr_at(0.12, 0.08),
        r.oow,
        r.ooz,
        r.min_z,
        r.mean_path_length,
        r.avg_return,
        plan_line,
        report_path.display(),
        side.display(),
    );
    emit(json, summary, &human);
    Ok(())
}

const FLAG_NAMES: [&str; 5] = ["pose", "config", "bonus", "action", "workspace"];

/// Parse one reward-term subset ("pose,config+bonus") into the canonical
/// name and the matching reward switches on top of the configured weights.
fn parse_flag_set(s: &str, base: &RewardConfig) -> Result<(String, RewardConfig)> {
    let mut on = [false; 5];
    let mut any = false;
    for tok in s.split([',', '+']) {
        let t = tok.trim().to_ascii_lowercase();
        if t.is_empty() {
            continue;
        }
        let idx = match t.as_str() {
            "pose" | "x" => 0,
            "config" | "q" => 1,
            "bonus" | "eps" | "epsilon" => 2,
            "action" | "a" => 3,
            "workspace" | "w" => 4,
            _ => {
                return Err(Error::Config(format!(
                    "unknown reward flag {t:?} (expected pose, config, bonus, action, workspace)"
                )))
            }
        };
        on[idx] = true;
        any = true;
    }
    if !any {
        return Err(Error::Config(format!("empty reward flag set {s:?}")));
    }
    let rcfg = RewardConfig {
        use_pose: on[0],
        use_config: on[1],
        use_bonus: on[2],
        use_action: on[3],
        use_workspace: on[4],
        ..base.clone()
    };
    let name = FLAG_NAMES
        .iter()
        .zip(on)
        .filter(|(_, b)| *b)
        .map(|(n, _)| *n)
        .collect::<Vec<_>>()
        .join("+");
    Ok((name, rcfg))
}

/// The default ablation grid: every term subset studied in our runs, from
/// single distance terms up to the full shipped reward.
fn default_flag_sets() -> Vec<String> {
    [
        "pose",
        "config",
        "pose,bonus",
        "config,bonus",
        "pose,config",
        "pose,config,bonus",
        "pose,config,bonus,action",
        "pose,config,action,workspace",
        "pose,config,bonus,action,workspace",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate_reward(
    cfg: &ToolkitConfig,
    json: bool,
    model_path: &Path,
    flags: &[String],
    seeds: usize,
    steps: Option<u64>,
    episodes: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let sets = if flags.is_empty() { default_flag_sets() } else { flags.to_vec() };
    let rows: Vec<(String, RewardConfig)> =
        sets.iter().map(|s| parse_flag_set(s, &cfg.reward)).collect::<Result<_>>()?;

    let model = Arc::new(DynModel::load(model_path)?);
    let mut pcfg = cfg.ppo.cfg.clone();
    if let Some(s) = steps {
        pcfg.total_steps = s;
    }
    // No probes or checkpoints inside ablation runs.
    pcfg.eval_every = 0;
    pcfg.checkpoint_every = 0;
    pcfg.validate()?;
    let n_eval = episodes.unwrap_or(cfg.eval.episodes);
    let list = make_episode_list(&cfg.chain, &cfg.workspace, cfg.eval.list_seed, n_eval)?;
    std::fs::create_dir_all(out)?;

    const COLS: [&str; 7] =
        ["avg_return", "sr_002_002", "sr_004_004", "oow", "ooz", "min_z", "eef_path_length"];
    let t0 = Instant::now();
    let mut table: Vec<serde_json::Value> = Vec::new();
    let mut csv_rows: Vec<Vec<String>> = Vec::new();
    for (name, rcfg) in &rows {
        let mut per_seed: Vec<[f64; 7]> = Vec::new();
        for s in 0..seeds {
            let run_seed = seed.wrapping_add(s as u64);
            let trained = train_ppo(
                model.clone(),
                cfg.chain.clone(),
                cfg.workspace.clone(),
                rcfg.clone(),
                &pcfg,
                &cfg.ppo.actor_hidden,
                &cfg.ppo.critic_hidden,
                run_seed,
                None,
                None,
            )?;
            let mut ctrl = PolicyController { policy: trained.policy };
            // Returns are measured under the same reward the row trained
            // with, so rows are comparable to their own training signal.
            let study_out = run_study(
                &mut ctrl,
                model.clone(),
                &cfg.chain,
                &cfg.workspace,
                rcfg,
                &list,
                &StudyConfig {
                    protocol: Protocol::Fixed,
                    backend: BackendKind::Model,
                    max_episodes: None,
                },
            )?;
            let r = &study_out.report;
            per_seed.push([
                r.avg_return,
                r.sr_at(0.02, 0.02),
                r.sr_at(0.04, 0.04),
                r.oow,
                r.ooz,
                r.min_z,
                r.mean_path_length,
            ]);
            eprintln!(
                "[{name} seed {}/{seeds}] SR(0.02,0.02) {:.3}  SR(0.04,0.04) {:.3}  return {:.2}",
                s + 1,
                per_seed.last().unwrap()[1],
                per_seed.last().unwrap()[2],
                per_seed.last().unwrap()[0],
            );
        }
        let mut row_json = serde_json::Map::new();
        row_json.insert("flags".into(), serde_json::Value::String(name.clone()));
        let mut csv_row = vec![name.clone()];
        for (c, col) in COLS.iter().enumerate() {
            let vals: Vec<f64> = per_seed.iter().map(|m| m[c]).collect();
            let (mean, std) = reachkit::eval::mean_std(&vals);
            row_json.insert(format!("{col}_mean"), serde_json::json!(mean));
            row_json.insert(format!("{col}_std"), serde_json::json!(std));
            row_json.insert(format!("{col}_per_seed"), serde_json::json!(vals));
            csv_row.push(mean.to_string());
            csv_row.push(std.to_string());
        }
        table.push(serde_json::Value::Object(row_json));
        csv_rows.push(csv_row);
    }
    let wall = t0.elapsed().as_secs_f64();

    let csv_path = out.join("ablation.csv");
    let csv_err = |e: csv::Error| Error::Format(format!("ablation csv: {e}"));
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    let mut header = vec!["flags".to_string()];
    for col in COLS {
        header.push(format!("{col}_mean"));
        header.push(format!("{col}_std"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for row in &csv_rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush()?;
    let json_path = out.join("ablation.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&table)
            .map_err(|e| Error::Format(format!("ablation encode: {e}")))?,
    )?;

    let mut manifest = RunManifest::new("ablate-reward", cfg.snapshot());
    manifest.seed("master", seed);
    manifest.seed("list", cfg.eval.list_seed);
    manifest.input(model_path)?;
    manifest.output(&csv_path)?;
    manifest.output(&json_path)?;
    manifest.notes = serde_json::json!({
        "rows": rows.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
        "seeds": seeds,
        "steps_per_run": pcfg.total_steps,
        "episodes": n_eval,
        "wall_s": wall,
    });
    let side = manifest.save_for(&csv_path)?;

    let summary = serde_json::json!({
        "command": "ablate-reward",
        "table": table,
        "csv": csv_path.display().to_string(),
        "json": json_path.display().to_string(),
        "manifest": side.display().to_string(),
        "wall_s": wall,
    });
    let mut human = format!(
        "{} reward subsets x {} seeds, {} steps each, evaluated on {} episodes ({:.0} s total)\n\
         {:<38} {:>18} {:>12} {:>12} {:>7} {:>7} {:>8} {:>8}",
        rows.len(),
        seeds,
        pcfg.total_steps,
        n_eval,
        wall,
        "flags",
        "avg return",
        "SR(.02,.02)",
        "SR(.04,.04)",
        "OOW",
        "OOZ",
        "min z",
        "EEF-PL",
    );
    for (row, csv_row) in table.iter().zip(&csv_rows) {
        let g = |k: &str| row[k].as_f64().unwrap_or(f64::NAN);
        human.push_str(&format!(
            "\n{:<38} {:>9.2}±{:>7.2} {:>5.2}±{:>5.2} {:>5.2}±{:>5.2} {:>7.2} {:>7.2} {:>8.2} {:>8.2}",
            csv_row[0],
            g("avg_return_mean"),
            g("avg_return_std"),
            g("sr_002_002_mean"),
            g("sr_002_002_std"),
            g("sr_004_004_mean"),
            g("sr_004_004_std"),
            g("oow_mean"),
            g("ooz_mean"),
            g("min_z_mean"),
            g("eef_path_length_mean"),
        ));
    }
    human.push_str(&format!(
        "\ntable: {}\nmanifest: {}",
        csv_path.display(),
        side.display()
    ));
    emit(json, summary, &human);
    Ok(())
}
