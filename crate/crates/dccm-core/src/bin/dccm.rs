//! Pipeline entry point: dataset generation, metric/gain training, region
//! certification, closed-loop simulation, geodesic evaluation and reference
//! diagnostics.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use dccm_core::certifier::certify_region;
use dccm_core::config::{ModelConfig, RunConfig};
use dccm_core::dataset::{element_count, export_csv, generate_dataset, load_dataset, save_dataset, GridSpec};
use dccm_core::geodesic::{compute_geodesic, GeodesicConfig};
use dccm_core::model::CstrParams;
use dccm_core::reference::cstr_reference_diagnostics;
use dccm_core::sim::{run_closed_loop, write_trace};
use dccm_core::trainer::{
    load_dccm_checkpoint, save_dccm_checkpoint, train_dccm, verify_contraction, DccmFunction,
    TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "dccm",
    about = "Contraction-metric learning, geodesic feedback control, and certification",
    version
)]
struct Cli {
    /// Worker threads (also via the DCCM_WORKERS environment variable).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Plant selection by name (cstr).
    #[arg(long, default_value = "cstr")]
    model: String,
    /// Scale on how the input enters the CSTR temperature state.
    #[arg(long)]
    input_gain: Option<f64>,
}

impl ModelArgs {
    fn build(&self) -> Result<dccm_core::model::PlantModel> {
        let mut cfg = ModelConfig::named(&self.model);
        if let Some(gain) = self.input_gain {
            if self.model != "cstr" {
                anyhow::bail!("--input-gain only applies to the cstr model");
            }
            cfg.cstr = Some(CstrParams {
                input_gain: gain,
                ..Default::default()
            });
        }
        Ok(cfg.build()?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sweep the model family over a lattice and store the training set.
    GenData {
        #[command(flatten)]
        model: ModelArgs,
        /// State lattice step (broadcast across state dimensions).
        #[arg(long, default_value_t = 1.0 / 60.0)]
        state_step: f64,
        #[arg(long, default_value_t = 0.1)]
        input_step: f64,
        #[arg(long, default_value_t = 0.1)]
        param_step: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also export a CSV copy for inspection.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train the metric/gain network on a stored dataset.
    TrainDccm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        /// Positivity margin on the leading principal minors.
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-6)]
        eps_min: f64,
        #[arg(long, default_value_t = 20000)]
        max_iters: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        /// Hidden layer widths, comma separated.
        #[arg(long, default_value = "10,10,10", value_delimiter = ',')]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 0.5)]
        weight_decay: f64,
        /// Drop elements whose successor left the state box.
        #[arg(long)]
        exclude_flagged: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write the training report (loss trajectory, verification) as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Certify a contraction rate over the model region from a checkpoint.
    Certify {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0.1)]
        state_step: f64,
        #[arg(long, default_value_t = 0.2)]
        input_step: f64,
        #[arg(long, default_value_t = 0.5)]
        param_step: f64,
        /// Target contraction rate lambda.
        #[arg(long, default_value_t = 0.05)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a closed-loop scenario from a JSON run configuration.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve one geodesic under a checkpoint metric and print it.
    EvalGeodesic {
        #[arg(long)]
        ckpt: PathBuf,
        /// Start state, comma separated.
        #[arg(long, value_delimiter = ',')]
        from: Vec<f64>,
        /// End state, comma separated.
        #[arg(long, value_delimiter = ',')]
        to: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        segments: usize,
    },
    /// Compare model-derived reference inputs with the reported case-study
    /// values.
    RefDiag {
        #[command(flatten)]
        model: ModelArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let workers = cli
        .workers
        .or_else(|| std::env::var("DCCM_WORKERS").ok().and_then(|v| v.parse().ok()));
    if let Some(w) = workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            log::warn!("worker pool already initialized: {e}");
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({
                "error": format!("{err:#}"),
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            model,
            state_step,
            input_step,
            param_step,
            out,
            csv,
        } => {
            let plant = model.build()?;
            let grid = GridSpec::uniform(&plant, state_step, input_step, param_step);
            log::info!(
                "generating dataset: model = {}, grid = {}",
                plant.name,
                serde_json::to_string(&grid)?
            );
            let expected = element_count(&plant, &grid)?;
            let ds = generate_dataset(&plant, &grid)?;
            save_dataset(&ds, &out).context("writing dataset")?;
            if let Some(csv_path) = csv {
                export_csv(&ds, &csv_path).context("writing csv export")?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "elements": ds.len(),
                    "expected_elements": expected,
                    "flagged": ds.flagged_count(),
                    "skipped_nonfinite": ds.skipped_nonfinite,
                    "out": out,
                })
            );
            Ok(())
        }
        Command::TrainDccm {
            data,
            beta,
            eps,
            eps_min,
            max_iters,
            lr,
            hidden,
            weight_decay,
            exclude_flagged,
            seed,
            out,
            report,
        } => {
            let ds = load_dataset(&data).context("loading dataset")?;
            let cfg = TrainConfig {
                beta,
                eps_minor: eps,
                eps_min,
                max_iterations: max_iters,
                learning_rate: lr,
                hidden,
                weight_decay,
                include_flagged: !exclude_flagged,
                ..Default::default()
            };
            log::info!(
                "training: elements = {}, seed = {seed}, config = {}",
                ds.len(),
                serde_json::to_string(&cfg)?
            );
            let (net, train_report) = train_dccm(&ds, &cfg, seed)?;
            let verify = verify_contraction(&net, &ds, &cfg)?;
            let dccm = DccmFunction::new(net, ds.n, ds.m)?;
            save_dccm_checkpoint(&dccm, &cfg, seed, &ds.model_name, &out)
                .context("writing checkpoint")?;
            if let Some(report_path) = report {
                let doc = serde_json::json!({
                    "train": train_report,
                    "verification": verify,
                });
                std::fs::write(&report_path, serde_json::to_vec_pretty(&doc)?)
                    .with_context(|| format!("writing report {}", report_path.display()))?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "converged": train_report.converged,
                    "iterations": train_report.iterations,
                    "final_loss": train_report.final_loss,
                    "fraction_pd": verify.fraction_pd,
                    "out": out,
                })
            );
            if !train_report.converged {
                log::warn!(
                    "training hit the iteration budget; best loss {}",
                    train_report.best_loss
                );
            }
            Ok(())
        }
        Command::Certify {
            ckpt,
            model,
            state_step,
            input_step,
            param_step,
            lambda,
            out,
        } => {
            let plant = model.build()?;
            let (dccm, meta) = load_dccm_checkpoint(&ckpt).context("loading checkpoint")?;
            if dccm.n != plant.n || dccm.m != plant.m {
                anyhow::bail!(
                    "checkpoint dimensions (n = {}, m = {}) do not match model (n = {}, m = {})",
                    dccm.n,
                    dccm.m,
                    plant.n,
                    plant.m
                );
            }
            log::info!(
                "certifying: model = {}, checkpoint trained on {}, lambda = {lambda}",
                plant.name,
                meta.model_name
            );
            let grid = GridSpec::uniform(&plant, state_step, input_step, param_step);
            let report = certify_region(&dccm, &plant, &grid, lambda)?;
            std::fs::write(&out, serde_json::to_vec_pretty(&report)?)
                .with_context(|| format!("writing report {}", out.display()))?;
            println!(
                "{}",
                serde_json::json!({
                    "covered": report.covered,
                    "lambda_s_min": report.lambda_s_min,
                    "h_min": report.h_min,
                    "h_max": report.h_max,
                    "failing_points": report.failing_points.len(),
                    "out": out,
                })
            );
            Ok(())
        }
        Command::Simulate { config, ckpt, out } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading config {}", config.display()))?;
            let run_cfg = RunConfig::from_json(&text)?;
            let plant = run_cfg.model.build()?;
            let (dccm, _) = load_dccm_checkpoint(&ckpt).context("loading checkpoint")?;
            if dccm.n != plant.n || dccm.m != plant.m {
                anyhow::bail!(
                    "checkpoint dimensions (n = {}, m = {}) do not match model (n = {}, m = {})",
                    dccm.n,
                    dccm.m,
                    plant.n,
                    plant.m
                );
            }
            log::info!("resolved run config: {}", run_cfg.to_json());
            let trace = run_closed_loop(
                &run_cfg.scenario,
                &plant,
                &dccm,
                &run_cfg.geodesic,
                &run_cfg.estimator,
            )?;
            write_trace(&trace, plant.n, plant.m, plant.ell, &out).context("writing trace")?;
            if let Some(reason) = &trace.aborted {
                anyhow::bail!("simulation aborted after {} steps: {reason}", trace.steps.len());
            }
            let last = trace.steps.last();
            println!(
                "{}",
                serde_json::json!({
                    "steps": trace.steps.len(),
                    "final_d_geo": last.map(|s| s.d_geo),
                    "final_r_hat": last.map(|s| s.r_hat.clone()),
                    "out": out,
                })
            );
            Ok(())
        }
        Command::EvalGeodesic {
            ckpt,
            from,
            to,
            segments,
        } => {
            let (dccm, _) = load_dccm_checkpoint(&ckpt).context("loading checkpoint")?;
            let cfg = GeodesicConfig {
                segments,
                ..Default::default()
            };
            let path = compute_geodesic(&dccm, &from, &to, &cfg)?;
            let nodes: Vec<Vec<f64>> = path.nodes.iter().map(|n| n.as_slice().to_vec()).collect();
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "nodes": nodes,
                    "energy": path.energy,
                    "length": path.length,
                    "converged": path.converged,
                    "iterations": path.iterations,
                }))?
            );
            Ok(())
        }
        Command::RefDiag { model } => {
            let plant = model.build()?;
            if plant.name != "cstr" {
                anyhow::bail!("reference diagnostics are defined for the cstr model");
            }
            let diag = cstr_reference_diagnostics(&plant)?;
            println!("{}", serde_json::to_string_pretty(&diag)?);
            Ok(())
        }
    }
}
