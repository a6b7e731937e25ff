use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layer::{Conv2d, Dense, Layer};
use super::network::Network;
use super::tensor::{Shape, Tensor4};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Architecture families the builder knows about.
///
/// * `mlp-<in>-<w1>-...-<wk>`: dense ReLU stack; the last width is the head.
///   `mlp-784-10-10-10` is the small diagnostic network.
/// * `lenet`: conv 5×5×6 → ReLU → pool → conv 5×5×16 → ReLU → pool →
///   dense 120 → ReLU → dense 84 → ReLU → head, for 32×32×1 inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ArchSpec {
    Mlp { input: Shape, widths: Vec<usize> },
    LeNet { input: Shape, classes: usize },
}

impl ArchSpec {
    pub fn input_shape(&self) -> Shape {
        match self {
            ArchSpec::Mlp { input, .. } | ArchSpec::LeNet { input, .. } => *input,
        }
    }

    pub fn head_classes(&self) -> usize {
        match self {
            ArchSpec::Mlp { widths, .. } => *widths.last().expect("validated"),
            ArchSpec::LeNet { classes, .. } => *classes,
        }
    }

    pub fn with_head(mut self, classes: usize) -> Self {
        match &mut self {
            ArchSpec::Mlp { widths, .. } => *widths.last_mut().expect("validated") = classes,
            ArchSpec::LeNet { classes: c, .. } => *c = classes,
        }
        self
    }

    /// Reinterprets the input as `shape` when it holds the same number of
    /// values (an MLP over images gets a leading flatten).
    pub fn with_input(mut self, shape: Shape) -> Result<Self> {
        let current = self.input_shape();
        if current.len() != shape.len() {
            return Err(Error::dim("architecture input", current, shape));
        }
        match &mut self {
            ArchSpec::Mlp { input, .. } => *input = shape,
            ArchSpec::LeNet { input, .. } => {
                if !matches!(shape, Shape::Image { .. }) {
                    return Err(Error::dim("lenet input", "image", shape));
                }
                *input = shape;
            }
        }
        Ok(self)
    }
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "lenet" {
            return Ok(ArchSpec::LeNet {
                input: Shape::Image { h: 32, w: 32, c: 1 },
                classes: 10,
            });
        }
        if let Some(rest) = s.strip_prefix("mlp-") {
            let dims: std::result::Result<Vec<usize>, _> =
                rest.split('-').map(str::parse).collect();
            match dims {
                Ok(dims) if dims.len() >= 2 && dims.iter().all(|&d| d > 0) => {
                    return Ok(ArchSpec::Mlp {
                        input: Shape::Flat(dims[0]),
                        widths: dims[1..].to_vec(),
                    })
                }
                _ => {}
            }
        }
        Err(Error::InvalidArgument(format!(
            "unknown architecture {s:?} (expected \"lenet\" or \"mlp-<in>-<w1>-...\")"
        )))
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchSpec::Mlp { input, widths } => {
                write!(f, "mlp-{}", input.len())?;
                for w in widths {
                    write!(f, "-{w}")?;
                }
                Ok(())
            }
            ArchSpec::LeNet { .. } => write!(f, "lenet"),
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

fn dense(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Layer {
    let w =
        Matrix::from_vec(output, input, glorot(rng, input * output, input, output)).expect("sized");
    Layer::Dense(Dense::new(w, Some(vec![0.0; output])).expect("sized"))
}

fn conv(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize) -> Layer {
    let n = k * k * cin * cout;
    let kernel = Tensor4::from_vec([k, k, cin, cout], glorot(rng, n, k * k * cin, k * k * cout))
        .expect("sized");
    Layer::Conv2d(Conv2d::new(kernel, Some(vec![0.0; cout]), 1, 0).expect("valid"))
}

/// Builds a network with deterministic Glorot-uniform weights and zero biases.
pub fn build_network(spec: &ArchSpec, seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    match spec {
        ArchSpec::Mlp { input, widths } => {
            if widths.is_empty() || widths.contains(&0) {
                return Err(Error::InvalidArgument("mlp widths must be positive".into()));
            }
            if matches!(input, Shape::Image { .. }) {
                layers.push(Layer::Flatten);
            }
            let mut prev = input.len();
            for (i, &w) in widths.iter().enumerate() {
                layers.push(dense(&mut rng, prev, w));
                if i + 1 < widths.len() {
                    layers.push(Layer::Relu);
                }
                prev = w;
            }
        }
        ArchSpec::LeNet { input, classes } => {
            let Shape::Image { c, .. } = *input else {
                return Err(Error::dim("lenet input", "image", input));
            };
            layers.extend([
                conv(&mut rng, 5, c, 6),
                Layer::Relu,
                Layer::MeanPool2,
                conv(&mut rng, 5, 6, 16),
                Layer::Relu,
                Layer::MeanPool2,
                Layer::Flatten,
            ]);
            let mut shape = *input;
            for layer in &layers {
                shape = layer.output_shape(shape)?;
            }
            let flat = shape.len();
            layers.extend([
                dense(&mut rng, flat, 120),
                Layer::Relu,
                dense(&mut rng, 120, 84),
                Layer::Relu,
                dense(&mut rng, 84, *classes),
            ]);
        }
    }
    Network::new(layers, spec.input_shape(), seed)
}
