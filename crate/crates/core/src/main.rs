use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use auaseg::contrastive::Prototypes;
use auaseg::data::{load_dataset, save_dataset, DatasetSplit};
use auaseg::pipeline::{
    ablation, dataset_from_config, estimate_prototypes, evaluate, generate_pseudo_labels, partition, split_samples,
    train_stage1, train_stage2, write_jsonl, RunDirs, RunLogRecord, TrainConfig,
};
use auaseg::segnet::NetworkParams;
use auaseg::Result;

#[derive(Parser, Debug)]
#[command(name = "auaseg", version, about = "Two-stage semi-supervised volumetric segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat key = value config file; built-in desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory shared by all verbs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset into <out>/data.
    GenData(Common),
    /// Train the stage-1 student and teacher.
    TrainStage1(Common),
    /// Sliding-window pseudo labels for the unlabeled split into <out>/pseudo.
    PseudoLabel(Common),
    /// Estimate and freeze class prototypes from the stage-1 student.
    EstimatePrototypes(Common),
    /// Retrain from scratch on labeled and pseudo-labeled data.
    TrainStage2(Common),
    /// Score a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score; defaults to the stage-2 parameters.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// All five cumulative ablation steps on a fresh dataset.
    Ablation(Common),
}

fn load_config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_log(path: &Path, log: &[RunLogRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, log)?;
    w.flush()?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let dirs = RunDirs::new(&c.out);
            let (samples, split) = dataset_from_config(&cfg)?;
            let (l, u, t) = partition(&samples, &split);
            let stored: Vec<_> = l.into_iter().chain(u).chain(t).collect();
            save_dataset(&dirs.data(), &stored, &split)?;
            RunDirs::ensure(&dirs.root)?;
            std::fs::write(dirs.root.join("config.cfg"), cfg.to_text())?;
            eprintln!("wrote {} volumes to {}", stored.len(), dirs.data().display());
        }
        Command::TrainStage1(c) => {
            let cfg = load_config(&c)?;
            let dirs = RunDirs::new(&c.out);
            let (samples, split) = load_dataset(&dirs.data())?;
            let (labeled, unlabeled, _) = partition(&samples, &split);
            let r = train_stage1(&cfg, &labeled, &unlabeled)?;
            RunDirs::ensure(&dirs.stage1())?;
            r.student.save(dirs.student())?;
            r.teacher.save(dirs.teacher())?;
            write_log(&dirs.stage1().join("log.jsonl"), &r.log)?;
            eprintln!("stage 1 done: final loss {:.5}", r.log.last().map_or(f64::NAN, |l| l.total));
        }
        Command::PseudoLabel(c) => {
            let cfg = load_config(&c)?;
            let dirs = RunDirs::new(&c.out);
            let (samples, split) = load_dataset(&dirs.data())?;
            let (labeled, unlabeled, _) = partition(&samples, &split);
            let student = NetworkParams::load(dirs.student())?;
            let pseudo = generate_pseudo_labels(&student, &unlabeled, cfg.crop, cfg.stride)?;
            let split = DatasetSplit { test: Vec::new(), ..split };
            let stored: Vec<_> = labeled.into_iter().chain(pseudo).collect();
            save_dataset(&dirs.pseudo(), &stored, &split)?;
            eprintln!("pseudo-labeled {} volumes", split.unlabeled.len());
        }
        Command::EstimatePrototypes(c) => {
            let cfg = load_config(&c)?;
            let dirs = RunDirs::new(&c.out);
            let (samples, split) = load_dataset(&dirs.pseudo())?;
            let (labeled, pseudo, _) = split_samples(&samples, &split);
            let student = NetworkParams::load(dirs.student())?;
            let protos = estimate_prototypes(&cfg, &student, &labeled, &pseudo)?;
            protos.save(&dirs.prototypes())?;
            let counts: Vec<u64> = protos.classes().iter().map(|p| p.count).collect();
            eprintln!("prototype counts per class: {counts:?}");
        }
        Command::TrainStage2(c) => {
            let cfg = load_config(&c)?;
            let dirs = RunDirs::new(&c.out);
            let (samples, split) = load_dataset(&dirs.pseudo())?;
            let (labeled, pseudo, _) = split_samples(&samples, &split);
            let protos = if cfg.lambda_r > 0.0 { Some(Prototypes::load(&dirs.prototypes())?) } else { None };
            let (params, log) = train_stage2(&cfg, &labeled, &pseudo, protos.as_ref())?;
            RunDirs::ensure(&dirs.stage2())?;
            params.save(dirs.stage2_params())?;
            write_log(&dirs.stage2().join("log.jsonl"), &log)?;
            eprintln!("stage 2 done: final loss {:.5}", log.last().map_or(f64::NAN, |l| l.total));
        }
        Command::Evaluate { common: c, params } => {
            let cfg = load_config(&c)?;
            let dirs = RunDirs::new(&c.out);
            let (samples, split) = load_dataset(&dirs.data())?;
            let (_, _, test) = partition(&samples, &split);
            let params = NetworkParams::load(params.unwrap_or_else(|| dirs.stage2_params()))?;
            let table = evaluate(&params, &test, cfg.crop, cfg.stride)?;
            write_json(&dirs.metrics(), &table)?;
            println!("mean dice {:.4} jaccard {:.4}", table.mean.dice, table.mean.jaccard);
        }
        Command::Ablation(c) => {
            let cfg = load_config(&c)?;
            RunDirs::ensure(&c.out)?;
            let r = ablation(&cfg)?;
            for (name, dice) in r.steps() {
                println!("{name:<34} {dice:.4}");
            }
            write_json(&c.out.join("ablation.json"), &r)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
