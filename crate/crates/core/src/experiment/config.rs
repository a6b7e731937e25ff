//! Flat `key = value` experiment files.
//!
//! Blank lines and `#` comments are ignored. Every key is optional except
//! `dataset` and `arch`. Defaults: `methods = ft,ewc,rewc`, `lambdas = 100`,
//! `scope = all_no_last`, `epochs = 5`, `batch_size = 64`, `lr = 0.001`,
//! `fim_samples = 200`, `fim_mode = sampled`, `seeds = 0`, `tasks = 2`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::continual::{Method, MethodKind, TrainConfig, DEFAULT_LAMBDA};
use crate::data::DEFAULT_VALIDATION_SIZE;
use crate::error::{Error, Result};
use crate::fim::{FimMode, DEFAULT_FIM_SAMPLES};
use crate::nn::{ArchSpec, Shape};
use crate::rotation::RotationScope;

/// Where task data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Mnist {
        /// Pixels of zero padding per side; derived from the architecture
        /// input when absent.
        padding: Option<usize>,
        /// Balanced subset of the training set, drawn before splitting.
        train_limit: Option<usize>,
    },
    Synthetic {
        classes_per_task: usize,
        dim: usize,
        separation: f64,
    },
}

/// How classes are grouped into tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskLayout {
    Equal(usize),
    Groups(Vec<Vec<usize>>),
}

impl TaskLayout {
    pub fn len(&self) -> usize {
        match self {
            TaskLayout::Equal(t) => *t,
            TaskLayout::Groups(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    pub tasks: TaskLayout,
    pub arch: String,
    pub methods: Vec<MethodKind>,
    pub lambdas: Vec<f64>,
    pub scope: RotationScope,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    pub fim_samples: usize,
    pub fim_mode: FimMode,
    pub validation_size: usize,
    /// 1-based ordinals among the weight layers.
    pub energy_layers: Vec<usize>,
    pub checkpoints: bool,
    /// Not part of the config hash.
    #[serde(skip)]
    pub output: PathBuf,
    /// Not part of the config hash.
    #[serde(skip)]
    pub mnist_dir: Option<PathBuf>,
}

const KEYS: &[&str] = &[
    "name",
    "dataset",
    "tasks",
    "class_groups",
    "padding",
    "train_limit",
    "mnist_dir",
    "synthetic_classes_per_task",
    "synthetic_dim",
    "synthetic_separation",
    "arch",
    "methods",
    "lambdas",
    "scope",
    "epochs",
    "batch_size",
    "lr",
    "seeds",
    "fim_samples",
    "fim_mode",
    "validation_size",
    "energy_layers",
    "checkpoints",
    "output",
];

struct Entries<'a> {
    path: String,
    values: HashMap<&'a str, (usize, &'a str)>,
}

impl<'a> Entries<'a> {
    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Config {
            path: self.path.clone(),
            line,
            message: message.into(),
        }
    }

    fn raw(&self, key: &str) -> Option<(usize, &'a str)> {
        self.values.get(key).copied()
    }

    fn line(&self, key: &str) -> usize {
        self.raw(key).map_or(0, |(l, _)| l)
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| self.err(line, format!("{key}: cannot parse {v:?}: {e}"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|item| {
                    let item = item.trim();
                    item.parse()
                        .map_err(|e| self.err(line, format!("{key}: cannot parse {item:?}: {e}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }
}

fn parse_range(item: &str) -> Option<Vec<usize>> {
    let item = item.trim();
    match item.split_once('-') {
        Some((a, b)) => {
            let (a, b): (usize, usize) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
            (a <= b).then(|| (a..=b).collect())
        }
        None => Some(vec![item.parse().ok()?]),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let default_name = path.file_stem().map_or_else(
            || "experiment".to_string(),
            |s| s.to_string_lossy().into_owned(),
        );
        Self::parse(&text, &path.display().to_string(), &default_name)
    }

    /// Parses config text; `path` is only used in error messages.
    pub fn parse(text: &str, path: &str, default_name: &str) -> Result<Self> {
        let mut e = Entries {
            path: path.to_string(),
            values: HashMap::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(e.err(line, format!("expected `key = value`, got {content:?}")));
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(e.err(line, format!("unknown key {key:?}")));
            }
            if value.is_empty() {
                return Err(e.err(line, format!("{key}: empty value")));
            }
            if let Some((first, _)) = e.values.insert(key, (line, value)) {
                return Err(e.err(line, format!("{key}: already set on line {first}")));
            }
        }

        let arch_line = e.line("arch");
        let arch_text: String = e
            .parse("arch")?
            .ok_or_else(|| e.err(0, "missing required key `arch`"))?;
        let arch: ArchSpec = arch_text
            .parse()
            .map_err(|err: Error| e.err(arch_line, format!("arch: {err}")))?;

        let dataset = match e.raw("dataset") {
            None => return Err(e.err(0, "missing required key `dataset`")),
            Some((_, "mnist")) => DatasetSpec::Mnist {
                padding: e.parse("padding")?,
                train_limit: e.parse("train_limit")?,
            },
            Some((_, "synthetic")) => DatasetSpec::Synthetic {
                classes_per_task: e.parse("synthetic_classes_per_task")?.unwrap_or(2),
                dim: e.parse("synthetic_dim")?.unwrap_or(8),
                separation: e.parse("synthetic_separation")?.unwrap_or(10.0),
            },
            Some((line, other)) => {
                return Err(e.err(
                    line,
                    format!("dataset: expected mnist or synthetic, got {other:?}"),
                ))
            }
        };
        let is_mnist = matches!(dataset, DatasetSpec::Mnist { .. });
        for key in ["padding", "train_limit", "mnist_dir", "validation_size"] {
            if !is_mnist && e.raw(key).is_some() {
                return Err(e.err(
                    e.line(key),
                    format!("{key} only applies to the mnist dataset"),
                ));
            }
        }
        for key in [
            "synthetic_classes_per_task",
            "synthetic_dim",
            "synthetic_separation",
        ] {
            if is_mnist && e.raw(key).is_some() {
                return Err(e.err(
                    e.line(key),
                    format!("{key} only applies to the synthetic dataset"),
                ));
            }
        }

        let tasks = match (e.raw("tasks"), e.raw("class_groups")) {
            (Some(_), Some((line, _))) => {
                return Err(e.err(line, "set either `tasks` or `class_groups`, not both"))
            }
            (_, Some((line, v))) => {
                if !is_mnist {
                    return Err(e.err(line, "class_groups only applies to the mnist dataset"));
                }
                let groups: Option<Vec<Vec<usize>>> = v.split(',').map(parse_range).collect();
                TaskLayout::Groups(groups.ok_or_else(|| {
                    e.err(
                        line,
                        format!("class_groups: expected ranges like 0-2,3-4, got {v:?}"),
                    )
                })?)
            }
            _ => TaskLayout::Equal(e.parse("tasks")?.unwrap_or(2)),
        };
        if tasks.is_empty() {
            return Err(e.err(e.line("tasks"), "tasks must be positive"));
        }

        let methods: Vec<MethodKind> = e
            .list("methods")?
            .unwrap_or_else(|| vec![MethodKind::Ft, MethodKind::Ewc, MethodKind::Rewc]);
        let lambdas: Vec<f64> = e.list("lambdas")?.unwrap_or_else(|| vec![DEFAULT_LAMBDA]);
        let seeds: Vec<u64> = e.list("seeds")?.unwrap_or_else(|| vec![0]);
        if methods.is_empty() {
            return Err(e.err(e.line("methods"), "methods must not be empty"));
        }
        if seeds.is_empty() {
            return Err(e.err(e.line("seeds"), "seeds must not be empty"));
        }
        for (i, s) in seeds.iter().enumerate() {
            if seeds[..i].contains(s) {
                return Err(e.err(e.line("seeds"), format!("seed {s} is listed twice")));
            }
        }
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(e.err(e.line("lambdas"), "lambdas must be finite and non-negative"));
        }

        let defaults = TrainConfig::default();
        let cfg = ExperimentConfig {
            name: e.parse("name")?.unwrap_or_else(|| default_name.to_string()),
            dataset,
            tasks,
            arch: arch.to_string(),
            methods,
            lambdas,
            scope: e.parse("scope")?.unwrap_or_default(),
            epochs: e.parse("epochs")?.unwrap_or(defaults.epochs),
            batch_size: e.parse("batch_size")?.unwrap_or(defaults.batch_size),
            lr: e.parse("lr")?.unwrap_or(defaults.lr),
            seeds,
            fim_samples: e.parse("fim_samples")?.unwrap_or(DEFAULT_FIM_SAMPLES),
            fim_mode: e.parse("fim_mode")?.unwrap_or(FimMode::Sampled),
            validation_size: e
                .parse("validation_size")?
                .unwrap_or(DEFAULT_VALIDATION_SIZE),
            energy_layers: e.list("energy_layers")?.unwrap_or_default(),
            checkpoints: e.parse("checkpoints")?.unwrap_or(false),
            output: e
                .parse::<PathBuf>("output")?
                .unwrap_or_else(|| PathBuf::from("results").join(default_name)),
            mnist_dir: e.parse("mnist_dir")?,
        };

        for (key, v) in [
            ("epochs", cfg.epochs),
            ("batch_size", cfg.batch_size),
            ("fim_samples", cfg.fim_samples),
            ("validation_size", cfg.validation_size),
        ] {
            if v == 0 {
                return Err(e.err(e.line(key), format!("{key} must be positive")));
            }
        }
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return Err(e.err(e.line("lr"), "lr must be positive"));
        }
        if cfg.energy_layers.contains(&0) {
            return Err(e.err(e.line("energy_layers"), "energy_layers are 1-based"));
        }
        if let DatasetSpec::Synthetic {
            classes_per_task,
            dim,
            separation,
        } = cfg.dataset
        {
            if classes_per_task == 0 || dim == 0 || !(separation > 0.0 && separation.is_finite()) {
                return Err(e.err(
                    e.line("synthetic_separation"),
                    "synthetic classes, dim and separation must be positive",
                ));
            }
        }
        // Fails early on an input size the architecture cannot take.
        cfg.input_shape()
            .and_then(|s| arch.with_input(s))
            .map_err(|err| e.err(arch_line, format!("arch: {err}")))?;
        Ok(cfg)
    }

    pub fn arch_spec(&self) -> Result<ArchSpec> {
        self.arch
            .parse::<ArchSpec>()?
            .with_input(self.input_shape()?)
    }

    /// Padding applied to the 28×28 digits.
    pub fn mnist_padding(&self) -> Result<usize> {
        match &self.dataset {
            DatasetSpec::Mnist {
                padding: Some(p), ..
            } => Ok(*p),
            DatasetSpec::Mnist { padding: None, .. } => {
                let inputs = self.arch.parse::<ArchSpec>()?.input_shape().len();
                match inputs {
                    784 => Ok(0),
                    1024 => Ok(2),
                    n => Err(Error::InvalidArgument(format!(
                        "cannot infer mnist padding for {n} inputs; set `padding`"
                    ))),
                }
            }
            DatasetSpec::Synthetic { .. } => {
                Err(Error::InvalidArgument("not an mnist config".into()))
            }
        }
    }

    pub fn input_shape(&self) -> Result<Shape> {
        match &self.dataset {
            DatasetSpec::Mnist { .. } => {
                let side = 28 + 2 * self.mnist_padding()?;
                Ok(Shape::Image {
                    h: side,
                    w: side,
                    c: 1,
                })
            }
            DatasetSpec::Synthetic { dim, .. } => Ok(Shape::Flat(*dim)),
        }
    }

    /// Every method to run, in config order; `ft` appears once whatever the
    /// lambdas.
    pub fn method_list(&self) -> Vec<Method> {
        let mut out = Vec::new();
        for kind in &self.methods {
            let variants: Vec<Method> = match kind {
                MethodKind::Ft => vec![Method::ft()],
                MethodKind::Ewc => self.lambdas.iter().map(|&l| Method::ewc(l)).collect(),
                MethodKind::Rewc => self
                    .lambdas
                    .iter()
                    .map(|&l| Method::rewc(l, self.scope))
                    .collect(),
            };
            for mut m in variants {
                m.fim_samples = self.fim_samples;
                m.fim_mode = self.fim_mode;
                if !out.contains(&m) {
                    out.push(m);
                }
            }
        }
        out
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
        }
    }

    /// SHA-256 of the canonical JSON form, excluding paths.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
