//! Experiment CLI: single runs, the ablation matrix, and report
//! comparison tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bic::config::ExperimentConfig;
use bic::error::BicError;
use bic::pipeline::{run_variant, Variant};
use bic::report::{emit_report, load_report, RunReport};

#[derive(Parser)]
#[command(name = "bic", about = "Class-incremental learning with bias correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one incremental experiment for a single variant.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Variant override: baseline1, baseline2, bic, fc_retrain_ub, joint_ub.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Additional config overrides, repeatable: --set train.epochs=50
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run all five variants with a shared seed and schedule.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Also sweep train/val split ratios with the bic variant,
        /// e.g. --ratios 9:1,8:2,7:3,6:4
        #[arg(long)]
        ratios: Option<String>,
        /// Run variants as parallel workers with separate output dirs.
        #[arg(long)]
        parallel: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Print a comparison table over completed run directories.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            variant,
            seed,
            out_dir,
            set,
        } => cmd_run(&config, variant.as_deref(), seed, out_dir, &set),
        Command::Ablate {
            config,
            seed,
            out_dir,
            ratios,
            parallel,
            set,
        } => cmd_ablate(&config, seed, out_dir, ratios.as_deref(), parallel, &set),
        Command::Report { run_dirs } => cmd_report(&run_dirs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ BicError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(
    path: &Path,
    variant: Option<&str>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    set: &[String],
) -> Result<ExperimentConfig, BicError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(v) = variant {
        cfg.set("run.variant", v)?;
    }
    if let Some(s) = seed {
        cfg.set("run.seed", &s.to_string())?;
    }
    for kv in set {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            BicError::Config(format!("--set expects KEY=VALUE, got '{kv}'"))
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(dir) = out_dir {
        cfg.out_dir = Some(dir);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Output directory: flag/config first, then `$BIC_OUT_DIR` as root.
fn resolve_out_dir(cfg: &ExperimentConfig, leaf: &str) -> Result<PathBuf, BicError> {
    if let Some(dir) = &cfg.out_dir {
        return Ok(dir.clone());
    }
    if let Ok(root) = std::env::var("BIC_OUT_DIR") {
        return Ok(PathBuf::from(root).join(leaf));
    }
    Err(BicError::Config(
        "no output directory: set run.out_dir, --out-dir, or BIC_OUT_DIR".into(),
    ))
}

fn execute(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunReport, BicError> {
    let dataset = cfg.load_dataset()?;
    let sched = cfg.build_schedule(dataset.num_classes)?;
    let mut report = run_variant(&dataset, &sched, &cfg.train, Some(out_dir))?;
    report.config = cfg.echo();
    emit_report(&report, out_dir)?;
    Ok(report)
}

fn cmd_run(
    config: &Path,
    variant: Option<&str>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    set: &[String],
) -> Result<(), BicError> {
    let cfg = load_config(config, variant, seed, out_dir, set)?;
    let leaf = format!("run_{}_seed{}", cfg.train.variant.name(), cfg.train.seed);
    let dir = resolve_out_dir(&cfg, &leaf)?;
    let report = execute(&cfg, &dir)?;
    for s in &report.steps {
        println!(
            "step {} ({} classes): accuracy {:.4}",
            s.step, s.classes_seen, s.accuracy
        );
    }
    println!("report written to {}", dir.display());
    Ok(())
}

fn cmd_ablate(
    config: &Path,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    ratios: Option<&str>,
    parallel: bool,
    set: &[String],
) -> Result<(), BicError> {
    let base = load_config(config, None, seed, out_dir, set)?;
    let root = resolve_out_dir(&base, &format!("ablation_seed{}", base.train.seed))?;
    std::fs::create_dir_all(&root).map_err(|e| BicError::io(root.display().to_string(), e))?;

    let run_one = |variant: Variant| -> Result<RunReport, BicError> {
        let mut cfg = base.clone();
        cfg.train.variant = variant;
        cfg.out_dir = Some(root.join(variant.name()));
        execute(&cfg, &root.join(variant.name()))
            .map_err(|e| BicError::Data(format!("variant {} failed: {e}", variant.name())))
    };

    let reports: Vec<RunReport> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = Variant::ALL
                .iter()
                .map(|&v| scope.spawn(move || run_one(v)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect::<Result<_, _>>()
        })?
    } else {
        Variant::ALL
            .iter()
            .map(|&v| run_one(v))
            .collect::<Result<_, _>>()?
    };

    // Comparison grid: one column per variant, one row per step.
    let steps = reports[0].steps.len();
    let mut csv = String::from("step,classes_seen");
    for v in Variant::ALL {
        csv.push(',');
        csv.push_str(v.name());
    }
    csv.push('\n');
    for t in 0..steps {
        csv.push_str(&format!(
            "{},{}",
            t, reports[0].steps[t].classes_seen
        ));
        for r in &reports {
            csv.push_str(&format!(",{:.6}", r.steps[t].accuracy));
        }
        csv.push('\n');
    }
    std::fs::write(root.join("ablation.csv"), &csv)
        .map_err(|e| BicError::io(root.display().to_string(), e))?;
    print!("{csv}");

    let final_acc: BTreeMap<&str, f64> = Variant::ALL
        .iter()
        .zip(&reports)
        .map(|(v, r)| (v.name(), r.final_accuracy().unwrap_or(0.0)))
        .collect();
    let ordered = final_acc["baseline1"] <= final_acc["baseline2"]
        && final_acc["baseline2"] <= final_acc["bic"];
    println!(
        "final-step ordering baseline1 <= baseline2 <= bic: {}",
        if ordered { "OK" } else { "VIOLATED" }
    );

    if let Some(spec) = ratios {
        let mut csv = String::from("ratio");
        for t in 0..steps {
            csv.push_str(&format!(",step{t}"));
        }
        csv.push('\n');
        for ratio in spec.split(',') {
            let mut cfg = base.clone();
            cfg.set("train.split_ratio", ratio.trim())?;
            cfg.train.variant = Variant::Bic;
            let dir = root.join(format!("ratio_{}", ratio.trim().replace(':', "_")));
            cfg.out_dir = Some(dir.clone());
            let report = execute(&cfg, &dir)
                .map_err(|e| BicError::Data(format!("ratio {ratio} failed: {e}")))?;
            csv.push_str(ratio.trim());
            for s in &report.steps {
                csv.push_str(&format!(",{:.6}", s.accuracy));
            }
            csv.push('\n');
        }
        std::fs::write(root.join("ratios.csv"), &csv)
            .map_err(|e| BicError::io(root.display().to_string(), e))?;
        print!("{csv}");
    }
    Ok(())
}

fn cmd_report(run_dirs: &[PathBuf]) -> Result<(), BicError> {
    let mut reports = Vec::new();
    for dir in run_dirs {
        let path = dir.join("summary.json");
        let report = load_report(&path).map_err(|e| {
            BicError::Data(format!("run directory {}: {e}", dir.display()))
        })?;
        reports.push((dir, report));
    }
    let joint_final = reports
        .iter()
        .find(|(_, r)| r.variant == "joint_ub")
        .and_then(|(_, r)| r.final_accuracy());

    let steps = reports.iter().map(|(_, r)| r.steps.len()).max().unwrap_or(0);
    let mut header = String::from("step");
    for (_, r) in &reports {
        header.push_str(&format!(",{}_seed{}", r.variant, r.seed));
    }
    println!("{header}");
    for t in 0..steps {
        let mut line = t.to_string();
        for (_, r) in &reports {
            match r.steps.get(t) {
                Some(s) => line.push_str(&format!(",{:.6}", s.accuracy)),
                None => line.push(','),
            }
        }
        println!("{line}");
    }
    if let Some(joint) = joint_final {
        let mut line = String::from("degradation");
        for (_, r) in &reports {
            match r.final_accuracy() {
                Some(a) => line.push_str(&format!(",{:.6}", joint - a)),
                None => line.push(','),
            }
        }
        println!("{line}");
    }
    Ok(())
}
