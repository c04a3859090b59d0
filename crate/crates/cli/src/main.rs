mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;
use rand::Rng;

use plastica::activations::ActivationKind;
use plastica::config::ExperimentConfig;
use plastica::gradcheck::{grad_check, kernel_suite, GradCheckConfig};
use plastica::harness::{fmt_sig6, run_experiment};
use plastica::network::{Architecture, Network};
use plastica::rng::rng_for;
use plastica::taskstream::{generate_synthetic, Dataset};
use plastica::{Error, Tensor};

#[derive(Parser, Debug)]
#[command(name = "plastica", version, about = "Continual-learning training engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment from a config file.
    Run {
        config: PathBuf,
        /// Extra `key=value` assignments applied after the file.
        #[arg(long = "set", num_args = 1..)]
        set: Vec<String>,
    },
    /// Draw plasticity and stability curves from metrics CSVs as SVG.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Moving-average window in tasks.
        #[arg(long)]
        smooth: Option<usize>,
        /// Accuracy of a fresh network on a single task, drawn as a dashed line.
        #[arg(long)]
        reference: Option<f64>,
    },
    /// Write a synthetic dataset file.
    GenData {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every backward pass against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per kernel.
        #[arg(long, default_value_t = 50)]
        instances: usize,
        /// Parameters sampled per layer in the whole-network checks.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value = "6-deep")]
        layers: Architecture,
    },
}

/// Failure classes with stable exit codes.
enum Failure {
    /// Bad invocation, config or input data: exit 2.
    Usage(String),
    /// Anything that goes wrong after inputs were accepted: exit 1.
    Runtime(String),
}

impl Failure {
    fn from_input(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Format(_) | Error::Validation(_) | Error::Dimension(_) | Error::Io { .. } => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, set } => cmd_run(&config, &set),
        Command::Plot { csv, out, smooth, reference } => plot::cmd_plot(&csv, &out, smooth, reference),
        Command::GenData {
            classes,
            per_class,
            size,
            seed,
            channels,
            out,
        } => cmd_gen_data(classes, per_class, size, channels, seed, &out),
        Command::GradCheck {
            seed,
            instances,
            samples,
            layers,
        } => cmd_grad_check(seed, instances, samples, layers),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::parse(&text).map_err(|e| Failure::Usage(e.to_string()))?;
    for o in overrides {
        cfg.apply_assignment(o)
            .map_err(|e| Failure::Usage(format!("--set {o}: {e}")))?;
    }
    if let Ok(dir) = std::env::var("PLASTICA_OUT") {
        cfg.out_dir = PathBuf::from(dir);
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_run(config: &Path, overrides: &[String]) -> Result<(), Failure> {
    let cfg = load_config(config, overrides)?;
    if !cfg.data_path.exists() {
        return Err(Failure::Usage(format!("data file not found: {}", cfg.data_path.display())));
    }
    let dataset = Dataset::read(&cfg.data_path).map_err(Failure::from_input)?;
    let arch = cfg.validate_for(dataset.height).map_err(Failure::from_input)?;
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let resolved = cfg.out_dir.join("resolved_config.txt");
    fs::write(&resolved, cfg.resolved_text(Some(arch)))
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", resolved.display())))?;
    info!(
        "{}: {} tasks x {} epochs on {} ({} classes, {}x{}), output in {}",
        cfg.method_label(),
        cfg.n_tasks,
        cfg.epochs,
        cfg.data_path.display(),
        dataset.n_classes,
        dataset.height,
        dataset.width,
        cfg.out_dir.display()
    );
    let started = Instant::now();
    // config problems that need the dataset to detect still surface before training
    let outcome = run_experiment(&cfg, &dataset, Some(&cfg.out_dir)).map_err(|e| match e {
        Error::Config(_) | Error::Validation(_) => Failure::Usage(e.to_string()),
        other => Failure::Runtime(other.to_string()),
    })?;
    let last = outcome.records.last();
    info!(
        "done in {:.1}s; final plasticity {}, stability {}",
        started.elapsed().as_secs_f64(),
        last.map(|r| fmt_sig6(r.plasticity_acc)).unwrap_or_else(|| "-".into()),
        last.and_then(|r| r.stability_acc).map(fmt_sig6).unwrap_or_else(|| "-".into())
    );
    Ok(())
}

fn cmd_gen_data(classes: usize, per_class: usize, size: usize, channels: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let d = generate_synthetic(classes, per_class, size, size, channels, seed).map_err(Failure::from_input)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    d.write(out).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!(
        "wrote {} ({} classes x {} images, {}x{}x{})",
        out.display(),
        classes,
        per_class,
        channels,
        size,
        size
    );
    Ok(())
}

fn cmd_grad_check(seed: u64, instances: usize, samples: usize, layers: Architecture) -> Result<(), Failure> {
    let cfg = GradCheckConfig {
        samples_per_layer: samples,
        ..GradCheckConfig::default()
    };
    let mut failed = 0;
    println!("kernel                instances  entries  max_rel_error  result");
    for r in kernel_suite(instances, seed, &cfg) {
        println!(
            "{:<20}  {:>9}  {:>7}  {:>13.3e}  {}",
            r.kernel,
            r.instances,
            r.entries_checked,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
        failed += usize::from(!r.passed);
    }
    let side = layers.input_side();
    let batch = 4;
    for (i, kind) in ["relu", "tanh", "reludown", "pau"].into_iter().enumerate() {
        let kind: ActivationKind = kind.parse().expect("known activation");
        let mut rng = rng_for(seed, "grad-check", &[i as u64]);
        let mut net = Network::new(layers, 3, kind, &mut rng).map_err(|e| Failure::Runtime(e.to_string()))?;
        let x: Vec<f64> = (0..batch * 3 * side * side).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = Tensor::from_vec(&[batch, 3, side, side], x).map_err(|e| Failure::Runtime(e.to_string()))?;
        let labels: Vec<usize> = (0..batch).map(|i| i % 2).collect();
        let report = grad_check(&mut net, &x, &labels, &cfg, &mut rng).map_err(|e| Failure::Runtime(e.to_string()))?;
        println!("network {layers} with {}:", report.label);
        for l in &report.layers {
            println!(
                "  {:<6} checked {:>4}  frozen {:>4}  max_rel_error {:.3e}  {}",
                l.layer,
                l.checked,
                l.frozen,
                l.max_rel_error,
                if l.passed { "ok" } else { "FAIL" }
            );
            failed += usize::from(!l.passed);
        }
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} gradient checks failed")));
    }
    println!("all gradient checks passed");
    Ok(())
}
