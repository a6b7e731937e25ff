//! Rotated reparameterization of dense and convolutional layers.
//!
//! A layer `y = W x` is rewritten as `y = U2 (W′ (U1 x))` with `W′ = U2ᵀ W U1ᵀ`,
//! where `U1ᵀ` holds the eigenvectors of `E[x xᵀ]` and `U2` those of
//! `E[z zᵀ]` for the output gradient `z = ∂ log p/∂y`. In the rotated basis
//! both correlation factors are diagonal, so a diagonal Fisher penalty on
//! `W′` discards less of the curvature than one on `W`. `U1` and `U2` are
//! inserted as fixed layers; the forward function is unchanged.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fim::{choose_inputs, draw_label, gather};
use crate::linalg::{gemm, jacobi_eigh, MatMut, MatRef, Matrix};
use crate::nn::{
    softmax_in_place, Activations, BackwardOptions, Conv2d, Dense, Layer, Network, Tensor4,
};

/// Orthogonality tolerance for stored rotation matrices.
pub const ORTHOGONALITY_TOL: f64 = 1e-8;

const CHUNK: usize = 64;

/// Which weight layers [`rotate_network`] rewrites.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationScope {
    ConvOnly,
    FcOnly,
    All,
    /// Every weight layer except the classification head.
    #[default]
    AllNoLast,
}

impl RotationScope {
    pub const ALL_SCOPES: [RotationScope; 4] = [
        RotationScope::ConvOnly,
        RotationScope::FcOnly,
        RotationScope::All,
        RotationScope::AllNoLast,
    ];

    /// Whether the head weight layer may be rotated under this scope.
    pub fn includes_head(self) -> bool {
        matches!(self, RotationScope::FcOnly | RotationScope::All)
    }

    fn selects(self, layer: &Layer, is_head: bool) -> bool {
        match (self, layer) {
            (RotationScope::ConvOnly, Layer::Conv2d(_)) => true,
            (RotationScope::FcOnly, Layer::Dense(_)) => true,
            (RotationScope::All, Layer::Conv2d(_) | Layer::Dense(_)) => true,
            (RotationScope::AllNoLast, Layer::Conv2d(_) | Layer::Dense(_)) => !is_head,
            _ => false,
        }
    }

    /// Weight layers of `net` selected by this scope.
    pub fn select(self, net: &Network) -> Result<Vec<usize>> {
        let head = net.head_index()?;
        Ok(net
            .weight_layers()
            .into_iter()
            .filter(|&i| self.selects(&net.layers()[i], i == head))
            .collect())
    }
}

impl fmt::Display for RotationScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RotationScope::ConvOnly => "conv_only",
            RotationScope::FcOnly => "fc_only",
            RotationScope::All => "all",
            RotationScope::AllNoLast => "all_no_last",
        })
    }
}

impl FromStr for RotationScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        RotationScope::ALL_SCOPES
            .into_iter()
            .find(|scope| scope.to_string() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown rotation scope {s:?} (expected conv_only, fc_only, all or all_no_last)"
                ))
            })
    }
}

/// Source of the labels whose score gradients feed the output correlation.
#[derive(Clone, Copy, Debug)]
pub enum GradientLabels<'a> {
    /// Labels drawn from the model's own softmax.
    Model,
    /// Dataset labels; useful for ablations only.
    GroundTruth(&'a [usize]),
}

/// Summed self-correlations of one layer's inputs and output gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCorrelation {
    pub layer: usize,
    /// `Σ x xᵀ` over inputs (channel fibers averaged over positions for conv).
    pub input: Matrix,
    /// `Σ z zᵀ` over output gradients.
    pub grad: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationStats {
    layout_hash: u64,
    count: usize,
    layers: Vec<LayerCorrelation>,
}

impl CorrelationStats {
    pub fn new(net: &Network, count: usize, layers: Vec<LayerCorrelation>) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument(
                "correlation statistics need a positive count".into(),
            ));
        }
        for lc in &layers {
            let (d1, d2) = channel_dims(net.layers().get(lc.layer)).ok_or_else(|| {
                Error::Alignment(format!("layer {} is not a dense or conv layer", lc.layer))
            })?;
            if lc.input.shape() != (d1, d1) || lc.grad.shape() != (d2, d2) {
                return Err(Error::dim(
                    "correlation accumulators",
                    format!("{d1}x{d1} and {d2}x{d2}"),
                    format!("{:?} and {:?}", lc.input.shape(), lc.grad.shape()),
                ));
            }
        }
        Ok(Self {
            layout_hash: net.layout().hash(),
            count,
            layers,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn layers(&self) -> &[LayerCorrelation] {
        &self.layers
    }

    pub fn get(&self, layer: usize) -> Option<&LayerCorrelation> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// `E[x xᵀ]` and `E[z zᵀ]` for one layer.
    pub fn means(&self, layer: usize) -> Option<(Matrix, Matrix)> {
        let lc = self.get(layer)?;
        let inv = 1.0 / self.count as f64;
        let (mut input, mut grad) = (lc.input.clone(), lc.grad.clone());
        input.scale(inv);
        grad.scale(inv);
        Some((input, grad))
    }
}

/// Orthogonal maps of one rotated layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationPair {
    /// Index of the weight layer in the plain network.
    pub layer: usize,
    /// Index of the rotated weight layer inside the rotated network.
    pub core: usize,
    /// Applied to the layer input: `x′ = U1 x`.
    pub u1: Matrix,
    /// Applied to the rotated output: `y = U2 y′`.
    pub u2: Matrix,
}

impl RotationPair {
    pub fn new(layer: usize, core: usize, u1: Matrix, u2: Matrix) -> Result<Self> {
        for (name, u) in [("u1", &u1), ("u2", &u2)] {
            if !u.is_square() {
                return Err(Error::dim(
                    "rotation matrix",
                    "square",
                    format!("{name} {:?}", u.shape()),
                ));
            }
            let gram = u.matmul_t(true, u, false)?;
            let dev = gram
                .max_abs_diff(&Matrix::identity(u.rows()))
                .expect("same shape");
            if dev >= ORTHOGONALITY_TOL {
                return Err(Error::InvalidArgument(format!(
                    "{name} is not orthogonal (deviation {dev:e})"
                )));
            }
        }
        Ok(Self {
            layer,
            core,
            u1,
            u2,
        })
    }
}

/// `(d1, d2)` channel dimensions of a weight layer.
fn channel_dims(layer: Option<&Layer>) -> Option<(usize, usize)> {
    match layer? {
        Layer::Dense(d) => Some((d.in_dim(), d.out_dim())),
        Layer::Conv2d(c) => Some((c.kernel.in_channels(), c.kernel.out_channels())),
        _ => None,
    }
}

/// Correlation statistics of every weight layer of a plain network.
///
/// Uses `sample_budget` inputs of `data`; output gradients come from labels
/// drawn from the model unless ground truth is requested.
pub fn accumulate_correlations(
    net: &Network,
    data: &Activations,
    sample_budget: usize,
    labels: GradientLabels<'_>,
    seed: u64,
) -> Result<CorrelationStats> {
    if net.is_rotated() {
        return Err(Error::State(
            "correlations must be accumulated on a plain network".into(),
        ));
    }
    accumulate_correlations_at(net, data, &net.weight_layers(), sample_budget, labels, seed)
}

/// Like [`accumulate_correlations`] for chosen weight layers of any network,
/// rotated ones included. On a rotated network the statistics of a core
/// layer are taken in the rotated basis.
pub fn accumulate_correlations_at(
    net: &Network,
    data: &Activations,
    layers: &[usize],
    sample_budget: usize,
    labels: GradientLabels<'_>,
    seed: u64,
) -> Result<CorrelationStats> {
    let idx = choose_inputs(data.n(), sample_budget, seed)?;
    let truth: Option<Vec<usize>> = match labels {
        GradientLabels::Model => None,
        GradientLabels::GroundTruth(y) => {
            if y.len() != data.n() {
                return Err(Error::dim("ground-truth labels", data.n(), y.len()));
            }
            Some(idx.iter().map(|&i| y[i]).collect())
        }
    };
    let data = gather(data, &idx)?;
    let mut acc = Vec::with_capacity(layers.len());
    for &layer in layers {
        let (d1, d2) = channel_dims(net.layers().get(layer)).ok_or_else(|| {
            Error::InvalidArgument(format!("layer {layer} is not a dense or conv layer"))
        })?;
        acc.push(LayerCorrelation {
            layer,
            input: Matrix::zeros(d1, d1),
            grad: Matrix::zeros(d2, d2),
        });
    }
    let classes = net.head_classes();
    let opts = BackwardOptions {
        param_grads: false,
        keep_output_grads: true,
        input_grad: false,
    };
    let sample_len = data.shape().len();
    for start in (0..data.n()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.n());
        let chunk = Activations::new(
            end - start,
            data.shape(),
            data.data()[start * sample_len..end * sample_len].to_vec(),
        )?;
        let cache = net.forward(&chunk)?;
        let mut up = cache.logits().clone();
        for (k, row) in up.data_mut().chunks_exact_mut(classes).enumerate() {
            softmax_in_place(row);
            let target = match &truth {
                Some(y) => y[start + k],
                None => draw_label(row, seed, start + k),
            };
            if target >= classes {
                return Err(Error::InvalidArgument(format!(
                    "label {target} outside head of {classes} classes"
                )));
            }
            // Gradient of log p_target with respect to the logits.
            row.iter_mut().for_each(|v| *v = -*v);
            row[target] += 1.0;
        }
        let grads = net.backward_from(&cache, &up, opts)?;
        for lc in acc.iter_mut() {
            add_fiber_correlation(cache.layer_input(lc.layer), &mut lc.input);
            add_fiber_correlation(grads.output_grad(lc.layer).expect("kept"), &mut lc.grad);
        }
    }
    for lc in acc.iter_mut() {
        lc.input.symmetrize();
        lc.grad.symmetrize();
    }
    CorrelationStats::new(net, data.n(), acc)
}

/// Adds `Σₙ (1/P) Σₚ vₙₚ vₙₚᵀ`, `P` being the number of spatial positions.
fn add_fiber_correlation(a: &Activations, target: &mut Matrix) {
    let channels = a.shape().channels();
    let positions = a.shape().positions();
    let rows = a.n() * positions;
    let m = MatRef::new(a.data(), rows, channels);
    gemm(1.0 / positions as f64, m.t(), m, 1.0, target.view_mut());
}

/// Eigenvector pair `(U1, U2)` for one layer's statistics.
fn rotation_from_stats(stats: &CorrelationStats, layer: usize) -> Result<(Matrix, Matrix)> {
    let (input, grad) = stats
        .means(layer)
        .ok_or_else(|| Error::Alignment(format!("no correlation statistics for layer {layer}")))?;
    if !input.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite("correlation statistics"));
    }
    let u1 = jacobi_eigh(&input)?.vectors.transpose();
    let u2 = jacobi_eigh(&grad)?.vectors;
    Ok((u1, u2))
}

/// `U1 S U2` for every `d1 × d2` spatial slice `S` of a kernel.
///
/// A slice acts on channel fibers as `y = Sᵀ x`; in that operator form this
/// is `M′ = U2ᵀ M U1ᵀ`, the dense rotation applied per kernel offset.
pub fn rotate_conv_kernel(kernel: &Tensor4, u1: &Matrix, u2: &Matrix) -> Result<Tensor4> {
    map_slices(kernel, u1, false, u2, false)
}

/// Inverse of [`rotate_conv_kernel`]: `U1ᵀ S′ U2ᵀ` per slice.
pub fn combine_conv_kernel(kernel: &Tensor4, u1: &Matrix, u2: &Matrix) -> Result<Tensor4> {
    map_slices(kernel, u1, true, u2, true)
}

fn map_slices(
    kernel: &Tensor4,
    left: &Matrix,
    left_t: bool,
    right: &Matrix,
    right_t: bool,
) -> Result<Tensor4> {
    let [kh, kw, cin, cout] = kernel.dims();
    if left.shape() != (cin, cin) || right.shape() != (cout, cout) {
        return Err(Error::dim(
            "kernel rotation",
            format!("{cin}x{cin} and {cout}x{cout}"),
            format!("{:?} and {:?}", left.shape(), right.shape()),
        ));
    }
    let mut out = Tensor4::zeros(kernel.dims());
    let mut tmp = vec![0.0; cin * cout];
    let l = if left_t { left.view().t() } else { left.view() };
    let r = if right_t {
        right.view().t()
    } else {
        right.view()
    };
    for ky in 0..kh {
        for kx in 0..kw {
            gemm(
                1.0,
                l,
                MatRef::new(kernel.slice(ky, kx), cin, cout),
                0.0,
                MatMut::new(&mut tmp, cin, cout),
            );
            gemm(
                1.0,
                MatRef::new(&tmp, cin, cout),
                r,
                0.0,
                MatMut::new(out.slice_mut(ky, kx), cin, cout),
            );
        }
    }
    Ok(out)
}

/// Rewrites the layers chosen by `scope` as fixed-rotation sandwiches.
pub fn rotate_network(
    net: &Network,
    stats: &CorrelationStats,
    scope: RotationScope,
) -> Result<(Network, Vec<RotationPair>)> {
    let selected = scope.select(net)?;
    rotate_layers(net, stats, &selected)
}

/// Rotates the given weight layers of a plain network.
///
/// Each dense layer becomes `FixedDense(U1) → Dense(W′) → FixedDense(U2)`
/// and each conv layer `FixedConv1x1(U1) → Conv2d(K′) → FixedConv1x1(U2)`,
/// followed by the original bias as a separate layer.
pub fn rotate_layers(
    net: &Network,
    stats: &CorrelationStats,
    layers: &[usize],
) -> Result<(Network, Vec<RotationPair>)> {
    if net.is_rotated() {
        return Err(Error::State(
            "network is already rotated; combine it first".into(),
        ));
    }
    if stats.layout_hash != net.layout().hash() {
        return Err(Error::Alignment(
            "correlation statistics belong to a different network".into(),
        ));
    }
    let mut out = Vec::with_capacity(net.layers().len() + 3 * layers.len());
    let mut pairs = Vec::with_capacity(layers.len());
    for (i, layer) in net.layers().iter().enumerate() {
        if !layers.contains(&i) {
            out.push(layer.clone());
            continue;
        }
        let (u1, u2) = rotation_from_stats(stats, i)?;
        let core = out.len() + 1;
        let bias = match layer {
            Layer::Dense(d) => {
                let rotated = u2
                    .matmul_t(true, &d.weight, false)?
                    .matmul_t(false, &u1, true)?;
                out.push(Layer::FixedDense(u1.clone()));
                out.push(Layer::Dense(Dense::new(rotated, None)?));
                out.push(Layer::FixedDense(u2.clone()));
                d.bias.clone()
            }
            Layer::Conv2d(c) => {
                let kernel = rotate_conv_kernel(&c.kernel, &u1, &u2)?;
                out.push(Layer::FixedConv1x1(u1.clone()));
                out.push(Layer::Conv2d(Conv2d::new(
                    kernel, None, c.stride, c.padding,
                )?));
                out.push(Layer::FixedConv1x1(u2.clone()));
                c.bias.clone()
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} ({}) cannot be rotated",
                    other.kind_name()
                )))
            }
        };
        if let Some(b) = bias {
            out.push(Layer::Bias(b));
        }
        pairs.push(RotationPair::new(i, core, u1, u2)?);
    }
    if pairs.len() != layers.len() {
        return Err(Error::InvalidArgument(format!(
            "rotation targets {layers:?} exceed the network"
        )));
    }
    Ok((Network::new(out, net.input_shape(), net.rng_seed())?, pairs))
}

/// Fuses every rotation sandwich back into a plain layer: `W = U2 W′ U1`.
pub fn combine_network(net: &Network, pairs: &[RotationPair]) -> Result<Network> {
    let layers = net.layers();
    let malformed = |at: usize, why: &str| {
        Error::State(format!("malformed rotation sandwich at layer {at}: {why}"))
    };
    let mut out = Vec::with_capacity(layers.len());
    let mut used = 0;
    let mut j = 0;
    while j < layers.len() {
        if !layers[j].is_fixed() {
            out.push(layers[j].clone());
            j += 1;
            continue;
        }
        let pair = pairs
            .iter()
            .find(|p| p.core == j + 1)
            .ok_or_else(|| malformed(j, "no rotation pair for this position"))?;
        if pair.layer != out.len() {
            return Err(malformed(j, "pair refers to a different plain layer"));
        }
        let bias = match layers.get(j + 3) {
            Some(Layer::Bias(b)) => Some(b.clone()),
            _ => None,
        };
        let fused = match (&layers[j], layers.get(j + 1), layers.get(j + 2)) {
            (Layer::FixedDense(u1), Some(Layer::Dense(d)), Some(Layer::FixedDense(u2)))
                if *u1 == pair.u1 && *u2 == pair.u2 && d.bias.is_none() =>
            {
                let w = u2.matmul(&d.weight)?.matmul(u1)?;
                Layer::Dense(Dense::new(w, bias.clone())?)
            }
            (Layer::FixedConv1x1(u1), Some(Layer::Conv2d(c)), Some(Layer::FixedConv1x1(u2)))
                if *u1 == pair.u1 && *u2 == pair.u2 && c.bias.is_none() =>
            {
                let kernel = combine_conv_kernel(&c.kernel, u1, u2)?;
                Layer::Conv2d(Conv2d::new(kernel, bias.clone(), c.stride, c.padding)?)
            }
            _ => {
                return Err(malformed(
                    j,
                    "expected fixed, weight, fixed with matching rotations",
                ))
            }
        };
        out.push(fused);
        used += 1;
        j += if bias.is_some() { 4 } else { 3 };
    }
    if used != pairs.len() {
        return Err(Error::State(format!(
            "{} rotation pairs do not match any sandwich",
            pairs.len() - used
        )));
    }
    Network::new(out, net.input_shape(), net.rng_seed())
}
