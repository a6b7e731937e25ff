//! Fisher information estimation and the EWC quadratic penalty.
//!
//! The Fisher information of the model distribution is the expected outer
//! product of score vectors `∂ log p(y|x; θ)/∂θ` with `x` drawn from the data
//! and `y` drawn from the model itself (not the ground-truth labels). The
//! diagonal regularizes training; full per-layer blocks are diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatMut, MatRef, Matrix};
use crate::nn::{
    softmax_in_place, Activations, BackwardOptions, ForwardCache, GradientSet, Layer, Network,
    ParamLayout,
};

/// Default number of inputs used for Fisher estimation.
pub const DEFAULT_FIM_SAMPLES: usize = 200;

/// Largest layer (in weights) accepted by [`estimate_full_fim_layer`].
pub const FULL_FIM_MAX_PARAMS: usize = 2000;

const CHUNK: usize = 64;

/// How the inner expectation over `y ~ p(y|x)` is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FimMode {
    /// One label drawn from the model's softmax per input.
    Sampled,
    /// Exact enumeration over classes weighted by their probabilities.
    Expected,
}

impl std::str::FromStr for FimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sampled" => Ok(FimMode::Sampled),
            "expected" => Ok(FimMode::Expected),
            other => Err(Error::InvalidArgument(format!(
                "unknown fim mode {other:?} (expected \"sampled\" or \"expected\")"
            ))),
        }
    }
}

/// Diagonal Fisher information, one entry per trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct FimDiagonal {
    layout: ParamLayout,
    values: Vec<Vec<f64>>,
}

impl FimDiagonal {
    pub fn new(layout: ParamLayout, values: Vec<Vec<f64>>) -> Result<Self> {
        let aligned = values.len() == layout.tensors.len()
            && values
                .iter()
                .zip(&layout.tensors)
                .all(|(v, t)| v.len() == t.len());
        if !aligned {
            return Err(Error::Alignment(
                "fisher values do not match the layout".into(),
            ));
        }
        if let Some(bad) = values
            .iter()
            .flatten()
            .find(|v| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::InvalidArgument(format!(
                "fisher entries must be finite and >= 0, got {bad}"
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn layout_hash(&self) -> u64 {
        self.layout.hash()
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> FimDiagonal {
        FimDiagonal {
            layout: self.layout.clone(),
            values: self
                .values
                .iter()
                .map(|t| t.iter().map(|v| v * factor).collect())
                .collect(),
        }
    }

    pub fn median(&self) -> f64 {
        let mut all = self.flat();
        if all.is_empty() {
            return 0.0;
        }
        all.sort_by(f64::total_cmp);
        let mid = all.len() / 2;
        if all.len().is_multiple_of(2) {
            0.5 * (all[mid - 1] + all[mid])
        } else {
            all[mid]
        }
    }
}

/// Full Fisher information over the flattened weights of one layer.
#[derive(Clone, Debug)]
pub struct FimBlock {
    pub layer: usize,
    pub matrix: Matrix,
}

/// Previous-task parameters, their diagonal Fisher information and the
/// penalty strength.
#[derive(Clone, Debug)]
pub struct EwcAnchor {
    theta_star: Vec<Vec<f64>>,
    fim: FimDiagonal,
    lambda: f64,
}

impl EwcAnchor {
    /// Snapshots `net` as the anchor point.
    pub fn new(net: &Network, fim: FimDiagonal, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        if net.layout() != *fim.layout() {
            return Err(Error::Alignment(
                "fisher diagonal was estimated on a different layout".into(),
            ));
        }
        Ok(Self {
            theta_star: net.params().into_iter().map(<[f64]>::to_vec).collect(),
            fim,
            lambda,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn fim(&self) -> &FimDiagonal {
        &self.fim
    }

    pub fn theta_star(&self) -> &[Vec<f64>] {
        &self.theta_star
    }

    pub fn layout(&self) -> &ParamLayout {
        self.fim.layout()
    }
}

/// `(λ/2) Σᵢ Fᵢ (θᵢ − θ*ᵢ)²` and its gradient `λ Fᵢ (θᵢ − θ*ᵢ)`.
///
/// Head rows added after the anchor was taken are not penalized.
pub fn ewc_penalty(net: &Network, anchor: &EwcAnchor) -> Result<(f64, GradientSet)> {
    let layout = net.layout();
    layout.check_covers(anchor.layout())?;
    let mut grads = GradientSet::zeros_like(&layout);
    let mut penalty = 0.0;
    let lambda = anchor.lambda;
    for (((theta, star), fim), g) in net
        .params()
        .into_iter()
        .zip(&anchor.theta_star)
        .zip(anchor.fim.values())
        .zip(grads.tensors.iter_mut())
    {
        for i in 0..star.len() {
            let d = theta[i] - star[i];
            penalty += fim[i] * d * d;
            g[i] = lambda * fim[i] * d;
        }
    }
    Ok((0.5 * lambda * penalty, grads))
}

/// Deterministic per-input stream for label draws.
fn label_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws a class from `probs` using the stream of input `index`.
pub fn draw_label(probs: &[f64], seed: u64, index: usize) -> usize {
    let u: f64 = label_rng(seed, index).random();
    let mut acc = 0.0;
    for (c, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    probs.len() - 1
}

/// Runs forward/backward over `data` in chunks, presenting score gradients
/// whose per-sample squares (or outer products) sum to the Fisher estimate.
///
/// In sampled mode each input contributes one backward row `onehot(ŷ) − p`;
/// in expected mode one pass per class with rows scaled by `√p_c`.
pub(crate) fn for_each_score_pass(
    net: &Network,
    data: &Activations,
    mode: FimMode,
    seed: u64,
    mut visit: impl FnMut(&ForwardCache, &GradientSet) -> Result<()>,
) -> Result<()> {
    let classes = net.head_classes();
    let sample_len = data.shape().len();
    for start in (0..data.n()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.n());
        let chunk = Activations::new(
            end - start,
            data.shape(),
            data.data()[start * sample_len..end * sample_len].to_vec(),
        )?;
        let cache = net.forward(&chunk)?;
        let mut probs = cache.logits().clone();
        for row in probs.data_mut().chunks_exact_mut(classes) {
            softmax_in_place(row);
        }
        let opts = BackwardOptions {
            param_grads: false,
            keep_output_grads: true,
            input_grad: false,
        };
        let passes: Vec<Option<usize>> = match mode {
            FimMode::Sampled => vec![None],
            FimMode::Expected => (0..classes).map(Some).collect(),
        };
        for class in passes {
            let mut up = probs.clone();
            for (k, row) in up.data_mut().chunks_exact_mut(classes).enumerate() {
                let (target, weight) = match class {
                    None => (draw_label(row, seed, start + k), 1.0),
                    Some(c) => (c, row[c].sqrt()),
                };
                // Score of log p_target with respect to the logits.
                for v in row.iter_mut() {
                    *v = -*v;
                }
                row[target] += 1.0;
                row.iter_mut().for_each(|v| *v *= weight);
            }
            let grads = net.backward_from(&cache, &up, opts)?;
            visit(&cache, &grads)?;
        }
    }
    Ok(())
}

/// Picks `budget` distinct input indices: all of them in order when the
/// budget equals the data size, otherwise a seeded random subset.
pub(crate) fn choose_inputs(available: usize, budget: usize, seed: u64) -> Result<Vec<usize>> {
    if available == 0 {
        return Err(Error::InvalidArgument(
            "estimation needs at least one input".into(),
        ));
    }
    if budget == 0 || budget > available {
        return Err(Error::InvalidArgument(format!(
            "sample budget {budget} must be in 1..={available} (no replacement)"
        )));
    }
    let mut idx: Vec<usize> = (0..available).collect();
    if budget == available {
        return Ok(idx);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5345_4c45_4354);
    for i in 0..budget {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    idx.truncate(budget);
    Ok(idx)
}

pub(crate) fn gather(data: &Activations, idx: &[usize]) -> Result<Activations> {
    if idx.len() == data.n() && idx.iter().enumerate().all(|(k, &i)| k == i) {
        return Ok(data.clone());
    }
    let rows: Vec<&[f64]> = idx.iter().map(|&i| data.sample(i)).collect();
    Activations::from_samples(data.shape(), &rows)
}

fn select(data: &Activations, budget: usize, seed: u64) -> Result<Activations> {
    gather(data, &choose_inputs(data.n(), budget, seed)?)
}

/// Diagonal Fisher information of every trainable parameter.
pub fn estimate_diag_fim(
    net: &Network,
    data: &Activations,
    sample_budget: usize,
    mode: FimMode,
    seed: u64,
) -> Result<FimDiagonal> {
    let data = select(data, sample_budget, seed)?;
    let layout = net.layout();
    let mut values: Vec<Vec<f64>> = layout.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
    for_each_score_pass(net, &data, mode, seed, |cache, grads| {
        let mut slot = 0;
        for (i, layer) in net.layers().iter().enumerate() {
            let count = layer.param_shapes().len();
            if count == 0 {
                continue;
            }
            let z = grads.output_grad(i).expect("output grads kept");
            accumulate_squared(layer, cache, i, z, &mut values[slot..slot + count]);
            slot += count;
        }
        Ok(())
    })?;
    let inv = 1.0 / data.n() as f64;
    values.iter_mut().flatten().for_each(|v| *v *= inv);
    FimDiagonal::new(layout, values)
}

/// Adds per-sample squared gradients of one layer's tensors.
fn accumulate_squared(
    layer: &Layer,
    cache: &ForwardCache,
    i: usize,
    z: &Activations,
    out: &mut [Vec<f64>],
) {
    let n = z.n();
    let x = cache.layer_input(i);
    let channels = z.shape().channels();
    let positions = z.shape().positions();
    let bias_sq = |acc: &mut [f64]| {
        for s in 0..n {
            let zs = z.sample(s);
            let mut sum = vec![0.0; channels];
            for p in 0..positions {
                for c in 0..channels {
                    sum[c] += zs[p * channels + c];
                }
            }
            for (a, v) in acc.iter_mut().zip(&sum) {
                *a += v * v;
            }
        }
    };
    match layer {
        Layer::Dense(d) => {
            // Per-sample gradient z xᵀ squares to (z²)(x²)ᵀ.
            let z2: Vec<f64> = z.data().iter().map(|v| v * v).collect();
            let x2: Vec<f64> = x.data().iter().map(|v| v * v).collect();
            gemm(
                1.0,
                MatRef::new(&z2, n, d.out_dim()).t(),
                MatRef::new(&x2, n, d.in_dim()),
                1.0,
                MatMut::new(&mut out[0], d.out_dim(), d.in_dim()),
            );
            if d.bias.is_some() {
                bias_sq(&mut out[1]);
            }
        }
        Layer::Conv2d(c) => {
            let g = per_sample_conv_grads(c.kernel.dims(), cache, i, z);
            for gs in g.chunks_exact(out[0].len()) {
                for (a, v) in out[0].iter_mut().zip(gs) {
                    *a += v * v;
                }
            }
            if c.bias.is_some() {
                bias_sq(&mut out[1]);
            }
        }
        Layer::Bias(_) => bias_sq(&mut out[0]),
        _ => unreachable!("only trainable layers carry tensors"),
    }
}

/// Per-sample kernel gradients `colsₙᵀ zₙ`, concatenated.
fn per_sample_conv_grads(
    dims: [usize; 4],
    cache: &ForwardCache,
    i: usize,
    z: &Activations,
) -> Vec<f64> {
    let [kh, kw, cin, cout] = dims;
    let plen = kh * kw * cin;
    let positions = z.shape().positions();
    let cols = cache.conv_patches(i).expect("conv layer caches patches");
    let n = z.n();
    let mut out = vec![0.0; n * plen * cout];
    for s in 0..n {
        gemm(
            1.0,
            MatRef::new(
                &cols[s * positions * plen..(s + 1) * positions * plen],
                positions,
                plen,
            )
            .t(),
            MatRef::new(z.sample(s), positions, cout),
            0.0,
            MatMut::new(&mut out[s * plen * cout..(s + 1) * plen * cout], plen, cout),
        );
    }
    out
}

/// Per-sample flattened weight gradients of layer `i` as an `n × d` matrix.
fn per_sample_weight_grads(
    layer: &Layer,
    cache: &ForwardCache,
    i: usize,
    z: &Activations,
) -> Vec<f64> {
    match layer {
        Layer::Dense(d) => {
            let x = cache.layer_input(i);
            let (rows, cols) = (d.out_dim(), d.in_dim());
            let mut out = vec![0.0; z.n() * rows * cols];
            for s in 0..z.n() {
                let (zs, xs) = (z.sample(s), x.sample(s));
                let dst = &mut out[s * rows * cols..(s + 1) * rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dst[r * cols + c] = zs[r] * xs[c];
                    }
                }
            }
            out
        }
        Layer::Conv2d(c) => per_sample_conv_grads(c.kernel.dims(), cache, i, z),
        _ => unreachable!("caller checks for a weight layer"),
    }
}

/// Full Fisher block over the weights (not biases) of layer `layer`.
pub fn estimate_full_fim_layer(
    net: &Network,
    data: &Activations,
    layer: usize,
    sample_budget: usize,
    mode: FimMode,
    seed: u64,
) -> Result<FimBlock> {
    let target = net
        .layers()
        .get(layer)
        .filter(|l| l.has_weight())
        .ok_or_else(|| {
            Error::InvalidArgument(format!("layer {layer} is not a dense or conv layer"))
        })?;
    let d = target.params()[0].len();
    if d > FULL_FIM_MAX_PARAMS {
        return Err(Error::Capacity {
            layer,
            params: d,
            limit: FULL_FIM_MAX_PARAMS,
        });
    }
    let data = select(data, sample_budget, seed)?;
    let mut acc = Matrix::zeros(d, d);
    for_each_score_pass(net, &data, mode, seed, |cache, grads| {
        let z = grads.output_grad(layer).expect("output grads kept");
        let g = per_sample_weight_grads(target, cache, layer, z);
        gemm(
            1.0,
            MatRef::new(&g, z.n(), d).t(),
            MatRef::new(&g, z.n(), d),
            1.0,
            acc.view_mut(),
        );
        Ok(())
    })?;
    acc.scale(1.0 / data.n() as f64);
    acc.symmetrize();
    Ok(FimBlock { layer, matrix: acc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_network, Dense, Shape};
    use rand_distr::{Distribution, StandardNormal};

    fn random_inputs(n: usize, shape: Shape, seed: u64) -> Activations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * shape.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Activations::new(n, shape, data).unwrap()
    }

    /// Logits (z, 0) with z = w·1: a single free parameter.
    fn bernoulli_net(w: f64) -> Network {
        let d = Dense::new(Matrix::from_rows(&[[w], [0.0]]), None).unwrap();
        Network::new(vec![Layer::Dense(d)], Shape::Flat(1), 0).unwrap()
    }

    #[test]
    fn bernoulli_fisher_closed_form() {
        let net = bernoulli_net(0.0);
        let x = Activations::new(1, Shape::Flat(1), vec![1.0]).unwrap();
        let f = estimate_diag_fim(&net, &x, 1, FimMode::Expected, 0).unwrap();
        // ∂/∂z log p: p(1-p)^2 + (1-p) p^2 = p(1-p) = 0.25 at z = 0.
        assert!((f.values()[0][0] - 0.25).abs() < 1e-15);
        // The second row has zero input weight but still receives score mass.
        assert!((f.values()[0][1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn bernoulli_fisher_off_origin() {
        let z: f64 = 1.3;
        let net = bernoulli_net(z);
        let x = Activations::new(1, Shape::Flat(1), vec![1.0]).unwrap();
        let f = estimate_diag_fim(&net, &x, 1, FimMode::Expected, 0).unwrap();
        let p = 1.0 / (1.0 + (-z).exp());
        assert!((f.values()[0][0] - p * (1.0 - p)).abs() < 1e-14);
    }

    #[test]
    fn sampled_converges_to_expected() {
        let net = build_network(&"mlp-3-4-3".parse().unwrap(), 5).unwrap();
        let x1 = random_inputs(1, Shape::Flat(3), 1);
        // 10⁴ draws on the same input through distinct label streams.
        let rows: Vec<&[f64]> = (0..10_000).map(|_| x1.sample(0)).collect();
        let many = Activations::from_samples(Shape::Flat(3), &rows).unwrap();
        let sampled = estimate_diag_fim(&net, &many, 10_000, FimMode::Sampled, 77)
            .unwrap()
            .flat();
        let exact = estimate_diag_fim(&net, &x1, 1, FimMode::Expected, 0)
            .unwrap()
            .flat();
        let num: f64 = sampled.iter().zip(&exact).map(|(a, b)| (a - b).abs()).sum();
        let den: f64 = exact.iter().sum();
        assert!(num / den < 0.05, "relative deviation {}", num / den);
    }

    #[test]
    fn diagonal_block_consistency() {
        let net = build_network(&"mlp-6-5-4-3".parse().unwrap(), 2).unwrap();
        let x = random_inputs(70, Shape::Flat(6), 3);
        for mode in [FimMode::Sampled, FimMode::Expected] {
            let diag = estimate_diag_fim(&net, &x, 70, mode, 11).unwrap();
            for &layer in &net.weight_layers() {
                let block = estimate_full_fim_layer(&net, &x, layer, 70, mode, 11).unwrap();
                let slot = net
                    .layout()
                    .tensors
                    .iter()
                    .position(|t| t.layer == layer)
                    .unwrap();
                let expect = &diag.values()[slot];
                for (a, b) in block.matrix.diag().iter().zip(expect) {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn conv_block_matches_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut normal =
            |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let kernel = crate::nn::Tensor4::from_vec([3, 3, 2, 3], normal(54)).unwrap();
        let conv = crate::nn::Conv2d::new(kernel, Some(normal(3)), 1, 1).unwrap();
        let head = Dense::new(
            Matrix::from_vec(4, 48, normal(192)).unwrap(),
            Some(vec![0.0; 4]),
        )
        .unwrap();
        let net = Network::new(
            vec![
                Layer::Conv2d(conv),
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense(head),
            ],
            Shape::Image { h: 4, w: 4, c: 2 },
            0,
        )
        .unwrap();
        let x = random_inputs(9, Shape::Image { h: 4, w: 4, c: 2 }, 4);
        let diag = estimate_diag_fim(&net, &x, 9, FimMode::Sampled, 3).unwrap();
        let block = estimate_full_fim_layer(&net, &x, 0, 9, FimMode::Sampled, 3).unwrap();
        for (a, b) in block.matrix.diag().iter().zip(&diag.values()[0]) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn single_sample_block_rank() {
        let net = build_network(&"mlp-4-5-3".parse().unwrap(), 4).unwrap();
        let x = random_inputs(1, Shape::Flat(4), 9);
        let block = estimate_full_fim_layer(&net, &x, 2, 1, FimMode::Expected, 0).unwrap();
        let e = crate::linalg::jacobi_eigh(&block.matrix).unwrap();
        let tol = 1e-10 * e.values[0];
        let rank = e.values.iter().filter(|&&v| v > tol).count();
        assert!(rank <= 3, "rank {rank}");
        assert!(e.values.iter().all(|&v| v >= -1e-8));
    }

    #[test]
    fn oversized_layer_is_refused() {
        let net = build_network(&"mlp-100-30-2".parse().unwrap(), 0).unwrap();
        let x = random_inputs(2, Shape::Flat(100), 0);
        assert!(matches!(
            estimate_full_fim_layer(&net, &x, 0, 2, FimMode::Sampled, 0),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn budget_checks() {
        let net = bernoulli_net(0.0);
        let x = Activations::new(2, Shape::Flat(1), vec![1.0, 2.0]).unwrap();
        assert!(estimate_diag_fim(&net, &x, 3, FimMode::Sampled, 0).is_err());
        let empty = Activations::zeros(0, Shape::Flat(1));
        assert!(estimate_diag_fim(&net, &empty, 1, FimMode::Sampled, 0).is_err());
        assert!(estimate_diag_fim(&net, &x, 1, FimMode::Sampled, 0).is_ok());
    }

    #[test]
    fn penalty_direct_substitution() {
        let mut net = bernoulli_net(0.0);
        let fim = FimDiagonal::new(net.layout(), vec![vec![0.01, 0.0]]).unwrap();
        let anchor = EwcAnchor::new(&net, fim, 100.0).unwrap();
        let (p0, g0) = ewc_penalty(&net, &anchor).unwrap();
        assert_eq!(p0, 0.0);
        assert!(g0.flat().iter().all(|&v| v == 0.0));
        net.params_mut()[0][0] = 0.5;
        let (p, g) = ewc_penalty(&net, &anchor).unwrap();
        assert!((p - 0.125).abs() < 1e-15);
        assert!((g.tensors[0][0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn penalty_alignment_error() {
        let net = bernoulli_net(0.0);
        let fim = FimDiagonal::new(net.layout(), vec![vec![1.0, 1.0]]).unwrap();
        let anchor = EwcAnchor::new(&net, fim, 1.0).unwrap();
        let other = build_network(&"mlp-2-2".parse().unwrap(), 0).unwrap();
        assert!(matches!(
            ewc_penalty(&other, &anchor),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn fim_rejects_negative_entries() {
        let net = bernoulli_net(0.0);
        assert!(FimDiagonal::new(net.layout(), vec![vec![-1.0, 0.0]]).is_err());
    }
}
