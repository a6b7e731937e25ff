//! `rewc`: run continual-learning experiments, plot their results and probe
//! the Fisher information of saved networks.
//!
//! Exit codes: 0 on success, 1 for bad arguments or configs, 2 when a run
//! fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};
use rewc::checkpoint::load_checkpoint;
use rewc::data::{load_mnist, mnist_dir, read_sequence};
use rewc::diagnostics::fim_energy_comparison;
use rewc::experiment::{emit_plots, heatmap_svg, run_experiment, ExperimentConfig};
use rewc::fim::{FimMode, DEFAULT_FIM_SAMPLES};
use rewc::nn::{Activations, Shape};
use rewc::rotation::combine_network;
use rewc::Error;

/// Overrides the root that relative output directories are resolved against.
const OUTPUT_ROOT_ENV: &str = "REWC_OUTPUT_ROOT";

#[derive(Parser)]
#[command(
    name = "rewc",
    version,
    about = "Continual learning with rotated elastic weight consolidation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method and seed of a config file.
    Run { config: PathBuf },
    /// Write SVG plots for run or aggregate JSON files.
    Plot {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Defaults to the directory of the first result file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fisher block of one layer of a checkpoint, before and after rotating it.
    FimProbe {
        checkpoint: PathBuf,
        /// 1-based position among the dense and conv layers.
        #[arg(long)]
        layer: usize,
        /// Task cache written next to checkpoints; MNIST test digits if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// 1-based task of the cache whose held-out samples are used.
        #[arg(long, default_value_t = 1)]
        task: usize,
        #[arg(long, default_value_t = DEFAULT_FIM_SAMPLES)]
        samples: usize,
        #[arg(long, default_value = "sampled")]
        mode: FimMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn output_root() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from)
}

fn run(config: &Path) -> Result<(), Failure> {
    let cfg = ExperimentConfig::from_file(config).map_err(|e| match e {
        Error::Io { .. } => Failure::Usage(e.to_string()),
        other => other.into(),
    })?;
    let outcome = run_experiment(&cfg, output_root().as_deref())?;
    for r in &outcome.aggregate.records {
        let last = r.step_average_mean.last().copied().unwrap_or(f64::NAN);
        println!(
            "{:<28} final average accuracy {:6.2}%",
            r.method_label,
            100.0 * last
        );
    }
    println!("results in {}", outcome.output.display());
    if outcome.failures > 0 {
        return Err(Failure::Runtime(format!(
            "{} run(s) failed",
            outcome.failures
        )));
    }
    Ok(())
}

fn plot(results: &[PathBuf], out: Option<PathBuf>) -> Result<(), Failure> {
    let out = out.unwrap_or_else(|| {
        results[0]
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    });
    for path in emit_plots(results, &out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn probe_inputs(data: Option<&Path>, task: usize, input: Shape) -> Result<Activations, Failure> {
    if let Some(path) = data {
        let seq = read_sequence(path)?;
        let t = task
            .checked_sub(1)
            .and_then(|i| seq.tasks().get(i))
            .ok_or_else(|| Failure::Usage(format!("--task {task} is outside 1..={}", seq.len())))?;
        return Ok(t.validation.inputs.clone());
    }
    let padding = match input {
        Shape::Image { h, w, c: 1 } if h == w && h >= 28 && (h - 28) % 2 == 0 => (h - 28) / 2,
        Shape::Flat(784) => 0,
        other => {
            return Err(Failure::Usage(format!(
                "network input {other} is not MNIST-sized; pass --data"
            )))
        }
    };
    let dir = mnist_dir().ok_or_else(|| {
        Failure::Runtime("MNIST files not found; pass --data or set REWC_MNIST_DIR".into())
    })?;
    let mnist = load_mnist(&dir, padding)?;
    let x = mnist.test.inputs;
    if let Shape::Flat(n) = input {
        return Ok(Activations::new(x.n(), Shape::Flat(n), x.into_data())?);
    }
    Ok(x)
}

#[allow(clippy::too_many_arguments)]
fn fim_probe(
    checkpoint: &Path,
    layer: usize,
    data: Option<&Path>,
    task: usize,
    samples: usize,
    mode: FimMode,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let (net, pairs) = load_checkpoint(checkpoint)?;
    let net = combine_network(&net, &pairs)?;
    let weights = net.weight_layers();
    let index = layer
        .checked_sub(1)
        .and_then(|i| weights.get(i))
        .copied()
        .ok_or_else(|| {
            Failure::Usage(format!("--layer {layer} is outside 1..={}", weights.len()))
        })?;
    let inputs = probe_inputs(data, task, net.input_shape())?;
    if samples > inputs.n() {
        info!("only {} samples available; using all of them", inputs.n());
    }
    let samples = samples.min(inputs.n());
    let cmp = fim_energy_comparison(&net, &inputs, index, samples, mode, seed)?;
    let out = out.or_else(output_root).unwrap_or_else(|| {
        checkpoint
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    });
    std::fs::create_dir_all(&out)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    let stem = checkpoint
        .file_stem()
        .map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned());
    for (tag, m, ratio) in [
        ("before", &cmp.before, cmp.ratio_before),
        ("after", &cmp.after, cmp.ratio_after),
    ] {
        let path = out.join(format!("{stem}_layer{layer}_{tag}.svg"));
        let title = format!(
            "layer {layer} Fisher block {tag} rotation, diagonal energy {:.1}%",
            100.0 * ratio
        );
        std::fs::write(&path, heatmap_svg(m, &title))
            .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        info!("wrote {}", path.display());
    }
    let summary = serde_json::to_string_pretty(&cmp.summary())
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let path = out.join(format!("{stem}_layer{layer}_energy.json"));
    std::fs::write(&path, summary + "\n")
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    println!(
        "layer {layer} ({} weights): diagonal energy {:.2}% before rotation, {:.2}% after",
        cmp.before.rows(),
        100.0 * cmp.ratio_before,
        100.0 * cmp.ratio_after
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run { config } => run(&config),
        Command::Plot { results, out } => plot(&results, out),
        Command::FimProbe {
            checkpoint,
            layer,
            data,
            task,
            samples,
            mode,
            seed,
            out,
        } => fim_probe(
            &checkpoint,
            layer,
            data.as_deref(),
            task,
            samples,
            mode,
            seed,
            out,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            error!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            error!("{msg}");
            ExitCode::from(2)
        }
    }
}
