mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use mstrnn::analysis::{export_trajectories, final_step_separation};
use mstrnn::datasets::{self, category_triple, SynthSpec, Task};
use mstrnn::evaluation::{evaluate_model, run_losocv};
use mstrnn::model::{load_checkpoint, save_checkpoint, Model};
use mstrnn::tensor::SeededRng;
use mstrnn::training::Trainer;

use config::{read_json, RunConfig, VERSION};

#[derive(Parser)]
#[command(name = "mstrnn", version = VERSION, about = "Multiple-timescale recurrent video classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one model on the whole dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Leave-one-subject-out cross-validation.
    Losocv {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on the configured dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export PCA trajectories of one stage.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { spec, out, force } => gen_data(&spec, &out, force),
        Command::Train { config } => train(&config),
        Command::Losocv { config } => losocv(&config),
        Command::Eval { config, checkpoint } => eval(&config, &checkpoint),
        Command::Analyze { config, checkpoint } => analyze(&config, &checkpoint),
    }
}

fn gen_data(spec_path: &Path, out: &Path, force: bool) -> Result<()> {
    let spec: SynthSpec = read_json(spec_path)?;
    spec.validate()?;
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        if !force {
            bail!("{} exists and is not empty (pass --force to overwrite)", out.display());
        }
        fs::remove_dir_all(out).with_context(|| format!("clearing {}", out.display()))?;
    }
    let ds = datasets::generate(&spec)?;
    datasets::save_dataset(&ds, out)?;
    println!("{} samples ({}) written to {}", ds.len(), spec.task, out.display());
    Ok(())
}

/// Loads the config and dataset and writes the effective config.
fn prepare(path: &Path) -> Result<(RunConfig, datasets::Dataset, mstrnn::model::ModelSpec)> {
    let mut cfg = RunConfig::load(path)?;
    let ds = cfg.load_dataset()?;
    let spec = cfg.resolve_model(&ds)?;
    let written = cfg.write_effective(&cfg.output_dir)?;
    info!("effective config written to {}", written.display());
    Ok((cfg, ds, spec))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(path: &Path) -> Result<()> {
    let (cfg, ds, spec) = prepare(path)?;
    let out = &cfg.output_dir;
    write_json(&out.join("model_spec.json"), &spec)?;
    let model = Model::build(spec, &mut SeededRng::new(cfg.seed))?;
    info!("{} with {} parameters, {} training videos", model.spec().kind, model.count_parameters(), ds.len());
    let mut trainer = Trainer::new(model, &ds, None, cfg.training.clone())?.with_checkpoints(&out.join("checkpoints"));
    trainer.run()?;
    let (model, log, _) = trainer.into_parts();
    log.write_csv(&out.join("train_log.csv"))?;
    save_checkpoint(&model, &out.join("final.ckpt"))?;
    let last = log.rows.last().map_or(f64::NAN, |r| r.train_loss);
    println!("trained {} epochs, final training loss {last:.5}", log.rows.len());
    Ok(())
}

fn losocv(path: &Path) -> Result<()> {
    let (cfg, ds, spec) = prepare(path)?;
    let run = run_losocv(&spec, &ds, &cfg.training, cfg.seed, Some(&cfg.output_dir))?;
    run.report.check()?;
    print!("{}", run.report.text_table());
    Ok(())
}

fn eval(path: &Path, checkpoint: &Path) -> Result<()> {
    let (cfg, ds, spec) = prepare(path)?;
    let model = load_checkpoint(&spec, checkpoint)?;
    let report = evaluate_model(&model, &ds, cfg.delay(), cfg.training.crop_margin)?;
    report.check()?;
    report.write(&cfg.output_dir.join("eval_report.json"), Some(&cfg.output_dir.join("eval_report.txt")))?;
    print!("{}", report.text_table());
    Ok(())
}

fn analyze(path: &Path, checkpoint: &Path) -> Result<()> {
    let (cfg, ds, spec) = prepare(path)?;
    let model = load_checkpoint(&spec, checkpoint)?;
    let stage = match cfg.analysis.stage {
        Some(s) => s,
        None => spec.default_tap().context("the model has no default recording stage")?,
    };
    let ds = match &cfg.analysis.samples {
        None => ds,
        Some(ids) => {
            let idx = ids
                .iter()
                .map(|id| {
                    ds.samples
                        .iter()
                        .position(|s| &s.id == id)
                        .with_context(|| format!("at `analysis.samples`: no sample {id}"))
                })
                .collect::<Result<Vec<_>>>()?;
            ds.subset(&idx)
        }
    };
    let dir = cfg.output_dir.join("trajectories");
    let export = export_trajectories(&model, &ds, stage, cfg.delay(), cfg.training.crop_margin, &dir)?;
    let by_label = final_step_separation(&export, |l| l[0]).ok();
    let by_first = (ds.task == Task::Concat3)
        .then(|| final_step_separation(&export, |l| category_triple(l[0])[0]).ok())
        .flatten();
    let summary = serde_json::json!({
        "stage": stage,
        "samples": export.trajectories.len(),
        "separation_by_first_label": by_label,
        "separation_by_first_primitive": by_first,
    });
    write_json(&dir.join("separation.json"), &summary)?;
    println!(
        "{} trajectories of stage {stage} ({}) written to {}",
        export.trajectories.len(),
        export.meta.stage_label,
        dir.display()
    );
    if let Some(s) = by_first.or(by_label) {
        println!("final-step separation statistic: {s:.4}");
    }
    Ok(())
}
