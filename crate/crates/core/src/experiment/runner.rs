//! Runs every (method, seed) pair of a config and writes JSON results.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, ExperimentConfig, TaskLayout};
use crate::checkpoint::save_checkpoint;
use crate::continual::{EvalMatrix, Method, SequenceRun, TaskDiagnostics};
use crate::data::{
    equal_groups, grouped_split, load_mnist, mnist_dir, synthetic_tasks, write_sequence, Mnist,
    TaskSequence,
};
use crate::diagnostics::{fim_energy_comparison, EnergySummary};
use crate::error::{Error, Result};
use crate::nn::{build_network, Network};

/// Version of the run and aggregate JSON layouts.
pub const SCHEMA_VERSION: u32 = 1;

/// Heatmap matrices are kept in run records up to this many parameters.
pub const HEATMAP_MAX_PARAMS: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Fisher diagonal energy of one layer after the first task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRecord {
    /// 1-based ordinal among weight layers.
    pub ordinal: usize,
    #[serde(flatten)]
    pub summary: EnergySummary,
    /// Fisher blocks, when small enough to plot.
    pub fim_before: Option<Vec<Vec<f64>>>,
    pub fim_after: Option<Vec<Vec<f64>>>,
}

/// One method on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub status: RunStatus,
    pub error: Option<String>,
    pub config_name: String,
    pub config_hash: String,
    pub method: Method,
    pub method_label: String,
    pub seed: u64,
    /// `accuracy[t][k]`: task `k` after training task `t`.
    pub accuracy: Vec<Vec<f64>>,
    pub step_averages: Vec<f64>,
    pub energy: Vec<EnergyRecord>,
    pub tasks: Vec<TaskDiagnostics>,
    pub seconds: f64,
}

/// Seed statistics of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub method: Method,
    pub method_label: String,
    /// Seeds whose runs completed; only these enter the statistics.
    pub seeds: Vec<u64>,
    pub failed_seeds: Vec<u64>,
    pub accuracy_mean: Vec<Vec<f64>>,
    pub accuracy_std: Vec<Vec<f64>>,
    pub step_average_mean: Vec<f64>,
    pub step_average_std: Vec<f64>,
    /// (ordinal, mean ratio before, mean ratio after).
    pub energy_mean: Vec<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub schema_version: u32,
    pub config_name: String,
    pub config_hash: String,
    pub records: Vec<AggregateRecord>,
}

/// Files written by [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub output: PathBuf,
    pub run_files: Vec<PathBuf>,
    pub aggregate_file: PathBuf,
    pub aggregate: Aggregate,
    pub failures: usize,
}

/// File-name form of a method label, e.g. `rewc-all_no_last-l100`.
pub fn method_slug(m: &Method) -> String {
    match m.kind {
        crate::continual::MethodKind::Ft => "ft".into(),
        crate::continual::MethodKind::Ewc => format!("ewc-l{}", m.lambda),
        crate::continual::MethodKind::Rewc => format!("rewc-{}-l{}", m.scope, m.lambda),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn build_tasks(cfg: &ExperimentConfig, mnist: Option<&Mnist>, seed: u64) -> Result<TaskSequence> {
    match (&cfg.dataset, mnist) {
        (
            DatasetSpec::Synthetic {
                classes_per_task,
                dim,
                separation,
            },
            _,
        ) => synthetic_tasks(seed, cfg.tasks.len(), *classes_per_task, *dim, *separation),
        (DatasetSpec::Mnist { train_limit, .. }, Some(m)) => {
            let limited;
            let train = match train_limit {
                Some(n) if *n < m.train.len() => {
                    limited = m.train.balanced_subset(*n, seed)?;
                    &limited
                }
                _ => &m.train,
            };
            let groups = match &cfg.tasks {
                TaskLayout::Equal(t) => equal_groups(train.classes().len(), *t)?,
                TaskLayout::Groups(g) => g.clone(),
            };
            grouped_split(train, &m.test, &groups, cfg.validation_size, seed)
        }
        (DatasetSpec::Mnist { .. }, None) => Err(Error::State("mnist data not loaded".into())),
    }
}

fn energy_records(
    cfg: &ExperimentConfig,
    net: &Network,
    tasks: &TaskSequence,
    seed: u64,
) -> Result<Vec<EnergyRecord>> {
    let weights = net.weight_layers();
    let held = &tasks.tasks()[0].validation.inputs;
    let mut out = Vec::new();
    for &ordinal in &cfg.energy_layers {
        let layer = *weights.get(ordinal - 1).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "energy layer {ordinal} exceeds the {} weight layers",
                weights.len()
            ))
        })?;
        let budget = cfg.fim_samples.min(held.n());
        let cmp = fim_energy_comparison(net, held, layer, budget, cfg.fim_mode, seed)?;
        let small = cmp.before.rows() <= HEATMAP_MAX_PARAMS;
        let rows = |m: &crate::linalg::Matrix| (0..m.rows()).map(|i| m.row(i).to_vec()).collect();
        info!(
            "seed {seed} layer {ordinal}: diagonal energy {:.1}% -> {:.1}%",
            100.0 * cmp.ratio_before,
            100.0 * cmp.ratio_after
        );
        out.push(EnergyRecord {
            ordinal,
            summary: cmp.summary(),
            fim_before: small.then(|| rows(&cmp.before)),
            fim_after: small.then(|| rows(&cmp.after)),
        });
    }
    Ok(out)
}

struct RunContext<'a> {
    cfg: &'a ExperimentConfig,
    hash: String,
    out: &'a Path,
}

impl RunContext<'_> {
    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        method: &Method,
        seed: u64,
        eval: &EvalMatrix,
        energy: &[EnergyRecord],
        tasks: Vec<TaskDiagnostics>,
        seconds: f64,
        error: Option<&Error>,
    ) -> RunRecord {
        RunRecord {
            schema_version: SCHEMA_VERSION,
            status: if error.is_some() {
                RunStatus::Failed
            } else {
                RunStatus::Ok
            },
            error: error.map(|e| e.to_string()),
            config_name: self.cfg.name.clone(),
            config_hash: self.hash.clone(),
            method: method.clone(),
            method_label: method.label(),
            seed,
            accuracy: eval.acc.clone(),
            step_averages: eval.step_averages(),
            energy: energy.to_vec(),
            tasks,
            seconds,
        }
    }

    fn run_path(&self, method: &Method, seed: u64) -> PathBuf {
        self.out
            .join(format!("{}_seed{seed}.json", method_slug(method)))
    }

    fn checkpoint(&self, run: &SequenceRun, method: &Method, seed: u64) -> Result<()> {
        if !self.cfg.checkpoints {
            return Ok(());
        }
        let dir = self.out.join("checkpoints");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!(
            "{}_seed{seed}_task{}.rckp",
            method_slug(method),
            run.next_task()
        ));
        let learner = run.learner();
        save_checkpoint(&path, learner.net(), learner.pairs())
    }
}

/// Resolves the config's output directory against `root` when it is
/// relative.
pub fn output_dir(cfg: &ExperimentConfig, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) if cfg.output.is_relative() => r.join(&cfg.output),
        _ => cfg.output.clone(),
    }
}

/// Runs every method of `cfg` on every seed.
///
/// Per seed the first task is trained once and shared by all methods, which
/// only differ from the second task on. A failing run is written with
/// status `failed` and whatever it had finished; the others continue. The
/// aggregate is written last.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    output_root: Option<&Path>,
) -> Result<ExperimentOutcome> {
    let out = output_dir(cfg, output_root);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let ctx = RunContext {
        cfg,
        hash: cfg.hash(),
        out: &out,
    };
    let methods = cfg.method_list();
    let mnist = match &cfg.dataset {
        DatasetSpec::Mnist { .. } => {
            let dir = cfg.mnist_dir.clone().or_else(mnist_dir).ok_or_else(|| {
                Error::State("MNIST files not found; set mnist_dir or REWC_MNIST_DIR".into())
            })?;
            Some(load_mnist(&dir, cfg.mnist_padding()?)?)
        }
        DatasetSpec::Synthetic { .. } => None,
    };
    let spec = cfg.arch_spec()?;

    let mut records: Vec<RunRecord> = Vec::new();
    let mut run_files = Vec::new();
    let mut emit = |record: RunRecord, records: &mut Vec<RunRecord>| -> Result<()> {
        let path = ctx.run_path(&record.method, record.seed);
        write_json(&path, &record)?;
        run_files.push(path);
        records.push(record);
        Ok(())
    };

    for &seed in &cfg.seeds {
        let train_cfg = cfg.train_config(seed);
        let clock = Instant::now();
        let shared = (|| -> Result<(TaskSequence, SequenceRun, Vec<EnergyRecord>)> {
            let tasks = build_tasks(cfg, mnist.as_ref(), seed)?;
            if cfg.checkpoints {
                write_sequence(&out.join(format!("tasks_seed{seed}.rdat")), &tasks)?;
            }
            let net = build_network(&spec.clone().with_head(tasks.classes_through(0)), seed)?;
            let mut run = SequenceRun::start(net, &tasks)?;
            run.step(&tasks, &methods[0], &train_cfg)?;
            let energy = energy_records(cfg, run.learner().net(), &tasks, seed)?;
            Ok((tasks, run, energy))
        })();
        let shared_seconds = clock.elapsed().as_secs_f64();
        let (tasks, first, energy) = match shared {
            Ok(s) => s,
            Err(e) => {
                warn!("seed {seed}: first task failed: {e}");
                for m in &methods {
                    emit(
                        ctx.record(
                            m,
                            seed,
                            &EvalMatrix::default(),
                            &[],
                            Vec::new(),
                            shared_seconds,
                            Some(&e),
                        ),
                        &mut records,
                    )?;
                }
                continue;
            }
        };
        for m in &methods {
            let clock = Instant::now();
            let mut run = first.clone();
            let mut failure = ctx.checkpoint(&run, m, seed).err();
            while failure.is_none() && !run.is_done(&tasks) {
                failure = run
                    .step(&tasks, m, &train_cfg)
                    .and_then(|()| ctx.checkpoint(&run, m, seed))
                    .err();
            }
            let seconds = shared_seconds + clock.elapsed().as_secs_f64();
            let eval = run.eval().clone();
            let diagnostics = match (failure.is_none(), run.finish()) {
                (true, Ok(done)) => done.diagnostics,
                (true, Err(e)) => {
                    failure = Some(e);
                    Vec::new()
                }
                (false, _) => Vec::new(),
            };
            if let Some(e) = &failure {
                warn!("{} seed {seed} failed: {e}", m.label());
            }
            emit(
                ctx.record(
                    m,
                    seed,
                    &eval,
                    &energy,
                    diagnostics,
                    seconds,
                    failure.as_ref(),
                ),
                &mut records,
            )?;
        }
    }

    let aggregate = aggregate(cfg, &ctx.hash, &methods, &records);
    let aggregate_file = out.join("aggregate.json");
    write_json(&aggregate_file, &aggregate)?;
    let failures = records
        .iter()
        .filter(|r| r.status == RunStatus::Failed)
        .count();
    Ok(ExperimentOutcome {
        output: out,
        run_files,
        aggregate_file,
        aggregate,
        failures,
    })
}

/// Mean and sample standard deviation (zero for a single value).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-method seed statistics over the completed runs in `records`.
pub fn aggregate(
    cfg: &ExperimentConfig,
    hash: &str,
    methods: &[Method],
    records: &[RunRecord],
) -> Aggregate {
    let mut out = Vec::new();
    for m in methods {
        let runs: Vec<&RunRecord> = records.iter().filter(|r| &r.method == m).collect();
        let ok: Vec<&RunRecord> = runs
            .iter()
            .copied()
            .filter(|r| r.status == RunStatus::Ok)
            .collect();
        let failed_seeds = runs
            .iter()
            .filter(|r| r.status == RunStatus::Failed)
            .map(|r| r.seed)
            .collect();
        let mut rec = AggregateRecord {
            method: m.clone(),
            method_label: m.label(),
            seeds: ok.iter().map(|r| r.seed).collect(),
            failed_seeds,
            accuracy_mean: Vec::new(),
            accuracy_std: Vec::new(),
            step_average_mean: Vec::new(),
            step_average_std: Vec::new(),
            energy_mean: Vec::new(),
        };
        if let Some(first) = ok.first() {
            for (t, row) in first.accuracy.iter().enumerate() {
                let stats: Vec<(f64, f64)> = (0..row.len())
                    .map(|k| mean_std(&ok.iter().map(|r| r.accuracy[t][k]).collect::<Vec<_>>()))
                    .collect();
                rec.accuracy_mean.push(stats.iter().map(|s| s.0).collect());
                rec.accuracy_std.push(stats.iter().map(|s| s.1).collect());
                let (m, s) = mean_std(&ok.iter().map(|r| r.step_averages[t]).collect::<Vec<_>>());
                rec.step_average_mean.push(m);
                rec.step_average_std.push(s);
            }
            for (i, e) in first.energy.iter().enumerate() {
                let before: Vec<f64> = ok
                    .iter()
                    .map(|r| r.energy[i].summary.ratio_before)
                    .collect();
                let after: Vec<f64> = ok.iter().map(|r| r.energy[i].summary.ratio_after).collect();
                rec.energy_mean
                    .push((e.ordinal, mean_std(&before).0, mean_std(&after).0));
            }
        }
        out.push(rec);
    }
    Aggregate {
        schema_version: SCHEMA_VERSION,
        config_name: cfg.name.clone(),
        config_hash: hash.to_string(),
        records: out,
    }
}
