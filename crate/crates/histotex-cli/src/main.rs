//! Command-line front end: dataset generation, training, evaluation,
//! feature export and self-verification, all driven by a line-oriented
//! config file. Exit codes: 0 success, 2 configuration/input, 3 I/O,
//! 4 numerical failure.

use clap::{Parser, Subcommand};
use histotex::config::ExperimentConfig;
use histotex::dataset::{load_dataset, write_dataset};
use histotex::error::Error;
use histotex::metrics::{calinski_harabasz, Factor};
use histotex::models::checkpoint::{self, CheckpointMeta};
use histotex::models::Model;
use histotex::textures::build_dataset;
use histotex::train::{evaluate, export_features, infer, train, FactorScores, RunReport};
use histotex::verify::run_verification;
use histotex::Elem;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "histotex",
    about = "Differentiable histogram layers vs convolutions on synthetic textures",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the configured dataset to PGM images plus manifests.
    GenData {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's run.out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per seed and summarize accuracy over seeds.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra seed(s) appended to the config's run.seeds list.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (as written by gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Label factor to report: both, statistical, structural or all.
        #[arg(long, default_value = "all")]
        factor: String,
        /// Split to score.
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for confusion CSVs (defaults next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write penultimate features of a split to CSV.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run gradient checks and oracle comparisons; exit 0 iff all pass.
    Verify {
        /// Corrupt one backward rule to prove the checks can fail.
        #[arg(long)]
        inject_fault: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {}", e);
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => 3,
        Error::Numeric(_) => 4,
        _ => 2,
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData { config, out } => cmd_gen_data(&config, out),
        Command::Train { config, out, seeds } => cmd_train(&config, out, seeds),
        Command::Eval { checkpoint, data, factor, split, out } => {
            cmd_eval(&checkpoint, &data, &factor, &split, out)
        }
        Command::ExportFeatures { checkpoint, data, split, out } => {
            cmd_export_features(&checkpoint, &data, &split, &out)
        }
        Command::Verify { inject_fault } => cmd_verify(inject_fault),
    }
}

fn read_config(path: &Path) -> Result<ExperimentConfig, Error> {
    let text = fs::read_to_string(path)?;
    ExperimentConfig::parse(&text)
}

fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

fn cmd_gen_data(config_path: &Path, out: Option<PathBuf>) -> Result<(), Error> {
    let cfg = read_config(config_path)?;
    let out = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    let dir = data_dir(&out);
    let splits = build_dataset(
        &cfg.dataset.texture_specs(),
        cfg.dataset.per_class,
        cfg.dataset.split,
        cfg.dataset.seed,
    )?;
    let manifests = write_dataset(&splits, &dir, cfg.dataset.depth)?;

    println!("dataset written to {}", dir.display());
    println!(
        "{} classes, {} per class; splits train/val/test = {}/{}/{}",
        splits.classes.num_classes(),
        cfg.dataset.per_class,
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    for (ci, name) in splits.classes.joint_names.iter().enumerate() {
        let count = |part: &[histotex::textures::LabeledImage]| {
            part.iter().filter(|im| im.joint == ci).count()
        };
        println!(
            "  {:24} {:>5} train {:>4} val {:>4} test",
            name,
            count(&splits.train),
            count(&splits.val),
            count(&splits.test)
        );
    }
    for m in manifests {
        println!("manifest: {}", m.display());
    }
    Ok(())
}

fn mean_std(values: &[Elem]) -> (Elem, Elem) {
    let n = values.len() as Elem;
    let mean = values.iter().sum::<Elem>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<Elem>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cmd_train(config_path: &Path, out: Option<PathBuf>, extra_seeds: Vec<u64>) -> Result<(), Error> {
    let mut cfg = read_config(config_path)?;
    cfg.seeds.extend(extra_seeds);
    cfg.validate()?;
    let out = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    let data = load_dataset(&data_dir(&out))?;
    if data.classes.num_classes() != cfg.model.num_classes {
        return Err(Error::Input(format!(
            "dataset has {} classes, model expects {}",
            data.classes.num_classes(),
            cfg.model.num_classes
        )));
    }

    let mut reports: Vec<RunReport> = Vec::new();
    let mut param_count = 0usize;
    for &seed in &cfg.seeds {
        let mut model_cfg = cfg.model.clone();
        model_cfg.seed = seed;
        let mut model = Model::build(model_cfg)?;
        param_count = model.num_parameters();
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = seed;

        let report = train(&mut model, &data, &train_cfg)?;
        let run_dir = out.join(format!("seed_{}", seed));
        fs::create_dir_all(&run_dir)?;
        let meta = CheckpointMeta {
            epoch: report.best_epoch as u64,
            val_loss: report.val_loss[report.best_epoch.saturating_sub(1)],
        };
        checkpoint::save(&model, &meta, &run_dir.join("model.ckpt"))?;
        fs::write(run_dir.join("report.txt"), report.to_text())?;
        fs::write(run_dir.join("confusion_both.csv"), report.confusion.to_csv())?;
        println!(
            "seed {}: stopped at epoch {} (best {}), test both/statistical/structural = \
             {:.2}/{:.2}/{:.2}  [{:.1}s]",
            seed,
            report.stopped_epoch,
            report.best_epoch,
            report.test_accuracy.both,
            report.test_accuracy.statistical,
            report.test_accuracy.structural,
            report.wall_seconds
        );
        reports.push(report);
    }

    let acc = |f: fn(&FactorScores) -> Elem, field: &str, rs: &[RunReport], get_ch: bool| {
        let values: Vec<Elem> = rs
            .iter()
            .map(|r| if get_ch { f(&r.ch) } else { f(&r.test_accuracy) })
            .collect();
        let (m, s) = mean_std(&values);
        (field.to_string(), m, s)
    };
    let mut summary = String::new();
    summary.push_str(&format!("model = {}\n", cfg.model.kind));
    summary.push_str(&format!("bins = {}\n", cfg.model.bins));
    summary.push_str(&format!(
        "seeds = {}\n",
        cfg.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
    ));
    summary.push_str(&format!("parameters = {}\n", param_count));
    println!(
        "{} bins={} over {} seeds ({} parameters):",
        cfg.model.kind,
        cfg.model.bins,
        cfg.seeds.len(),
        param_count
    );
    for (label, mean, std) in [
        acc(|f| f.both, "accuracy_both", &reports, false),
        acc(|f| f.statistical, "accuracy_statistical", &reports, false),
        acc(|f| f.structural, "accuracy_structural", &reports, false),
        acc(|f| f.both, "ch_both", &reports, true),
        acc(|f| f.statistical, "ch_statistical", &reports, true),
        acc(|f| f.structural, "ch_structural", &reports, true),
    ] {
        summary.push_str(&format!("{}_mean = {:.16e}\n", label, mean));
        summary.push_str(&format!("{}_std = {:.16e}\n", label, std));
        println!("  {:24} {:.2} ± {:.2}", label, mean, std);
    }
    fs::write(out.join("summary.txt"), summary)?;
    println!("summary: {}", out.join("summary.txt").display());
    Ok(())
}

fn parse_factors(s: &str) -> Result<Vec<Factor>, Error> {
    match s {
        "all" => Ok(Factor::ALL.to_vec()),
        "both" => Ok(vec![Factor::Both]),
        "statistical" => Ok(vec![Factor::Statistical]),
        "structural" => Ok(vec![Factor::Structural]),
        other => Err(Error::Input(format!(
            "unknown factor '{}': expected both, statistical, structural or all",
            other
        ))),
    }
}

fn cmd_eval(
    checkpoint_path: &Path,
    data: &Path,
    factor: &str,
    split: &str,
    out: Option<PathBuf>,
) -> Result<(), Error> {
    let factors = parse_factors(factor)?;
    let (model, meta) = checkpoint::load(checkpoint_path)?;
    let dataset = load_dataset(data)?;
    if dataset.classes.num_classes() != model.config.num_classes {
        return Err(Error::Input(format!(
            "checkpoint expects {} classes, dataset has {}",
            model.config.num_classes,
            dataset.classes.num_classes()
        )));
    }
    let images = dataset.partition(split)?;
    let out_dir = out.unwrap_or_else(|| {
        checkpoint_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
    });
    fs::create_dir_all(&out_dir)?;

    println!(
        "checkpoint {} (best epoch {}, val loss {:.6})",
        checkpoint_path.display(),
        meta.epoch,
        meta.val_loss
    );
    let (_, features) = infer(&model, images, 64)?;
    for f in &factors {
        let (acc, cm) = evaluate(&model, images, &dataset.classes, *f)?;
        let labels: Vec<usize> =
            images.iter().map(|im| f.project(im.joint, &dataset.classes)).collect();
        let ch = calinski_harabasz(&features, &labels).unwrap_or(Elem::NAN);
        println!("{:12} {} accuracy = {:.2}%  CH = {:.2}", f.name(), split, acc, ch);
        let csv_path = out_dir.join(format!("confusion_{}_{}.csv", split, f.name()));
        fs::write(&csv_path, cm.to_csv())?;
        println!("  confusion: {}", csv_path.display());
    }
    Ok(())
}

fn cmd_export_features(
    checkpoint_path: &Path,
    data: &Path,
    split: &str,
    out: &Path,
) -> Result<(), Error> {
    let (model, _) = checkpoint::load(checkpoint_path)?;
    let dataset = load_dataset(data)?;
    if dataset.classes.num_classes() != model.config.num_classes {
        return Err(Error::Input(format!(
            "checkpoint expects {} classes, dataset has {}",
            model.config.num_classes,
            dataset.classes.num_classes()
        )));
    }
    let images = dataset.partition(split)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    export_features(&model, images, &dataset.classes, out)?;
    println!("features ({} rows) written to {}", images.len(), out.display());
    Ok(())
}

fn cmd_verify(inject_fault: bool) -> Result<(), Error> {
    let report = run_verification(inject_fault);
    print!("{}", report.to_table());
    if report.all_passed() {
        println!("all checks passed");
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(Error::Numeric(format!("verification failed: {}", failed.join(", "))))
    }
}
