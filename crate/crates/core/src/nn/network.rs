use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layer::{Layer, ParamRole};
use super::loss::{softmax_in_place, softmax_xent_grad};
use super::tensor::{Activations, Shape};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Std of the Gaussian used for freshly added head rows.
pub const HEAD_INIT_STD: f64 = 0.01;

/// One trainable tensor in parameter order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorSpec {
    pub layer: usize,
    pub role: ParamRole,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered description of a network's trainable tensors.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    /// Layer index of the classification head's weight layer.
    pub head_layer: usize,
}

impl ParamLayout {
    pub fn total(&self) -> usize {
        self.tensors.iter().map(TensorSpec::len).sum()
    }

    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.head_layer as u64).to_le_bytes());
        for t in &self.tensors {
            h.update((t.layer as u64).to_le_bytes());
            h.update([matches!(t.role, ParamRole::Bias) as u8]);
            h.update((t.shape.len() as u64).to_le_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }

    fn is_head_tensor(&self, t: &TensorSpec) -> bool {
        t.layer >= self.head_layer
    }

    /// Checks that `self` (a live network) can be regularized by an anchor
    /// recorded with `anchor` layout: every tensor identical, except head
    /// tensors which may have gained leading rows.
    pub fn check_covers(&self, anchor: &ParamLayout) -> Result<()> {
        if self.tensors.len() != anchor.tensors.len() || self.head_layer != anchor.head_layer {
            return Err(Error::Alignment(format!(
                "network has {} tensors (head at layer {}), anchor has {} (head at layer {})",
                self.tensors.len(),
                self.head_layer,
                anchor.tensors.len(),
                anchor.head_layer
            )));
        }
        for (i, (t, a)) in self.tensors.iter().zip(&anchor.tensors).enumerate() {
            let same_slot =
                t.layer == a.layer && t.role == a.role && t.shape.len() == a.shape.len();
            let shape_ok = if self.is_head_tensor(t) {
                t.shape[0] >= a.shape[0] && t.shape[1..] == a.shape[1..]
            } else {
                t.shape == a.shape
            };
            if !same_slot || !shape_ok {
                return Err(Error::Alignment(format!(
                    "tensor {i}: network {:?} layer {} {:?} vs anchor {:?} layer {} {:?}",
                    t.role, t.layer, t.shape, a.role, a.layer, a.shape
                )));
            }
        }
        Ok(())
    }
}

/// Sequential feed-forward network ending in a single classification head.
#[derive(Clone, Debug)]
pub struct Network {
    layers: Vec<Layer>,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the output.
    shapes: Vec<Shape>,
    rng_seed: u64,
    stamp: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.shapes == other.shapes
            && self.rng_seed == other.rng_seed
    }
}

/// Layer inputs recorded by [`Network::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    stamp: u64,
    inputs: Vec<Activations>,
    cols: Vec<Option<Vec<f64>>>,
    logits: Activations,
}

impl ForwardCache {
    pub fn logits(&self) -> &Activations {
        &self.logits
    }

    /// Input activations of layer `i`.
    pub fn layer_input(&self, i: usize) -> &Activations {
        &self.inputs[i]
    }

    /// Unfolded receptive fields of a convolution layer.
    pub fn conv_patches(&self, i: usize) -> Option<&[f64]> {
        self.cols[i].as_deref()
    }

    pub fn batch_size(&self) -> usize {
        self.logits.n()
    }
}

/// Gradients of every trainable tensor plus, on request, the output
/// gradient `∂L/∂y` of each trainable layer.
#[derive(Clone, Debug)]
pub struct GradientSet {
    pub tensors: Vec<Vec<f64>>,
    output_grads: Vec<Option<Activations>>,
}

impl GradientSet {
    pub fn zeros_like(layout: &ParamLayout) -> Self {
        Self {
            tensors: layout.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            output_grads: Vec::new(),
        }
    }

    /// Gradient with respect to the output of layer `i`, when kept.
    pub fn output_grad(&self, i: usize) -> Option<&Activations> {
        self.output_grads.get(i).and_then(Option::as_ref)
    }

    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Alignment("gradient tensor counts differ".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.len() != b.len() {
                return Err(Error::Alignment("gradient tensor lengths differ".into()));
            }
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BackwardOptions {
    pub param_grads: bool,
    pub keep_output_grads: bool,
    pub input_grad: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            param_grads: true,
            keep_output_grads: false,
            input_grad: false,
        }
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: Shape, rng_seed: u64) -> Result<Self> {
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        shapes.push(input_shape);
        for layer in &layers {
            let next = layer.output_shape(*shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        let net = Self {
            layers,
            shapes,
            rng_seed,
            stamp: fresh_stamp(),
        };
        net.head_index()?;
        match net.output_shape() {
            Shape::Flat(_) => Ok(net),
            other => Err(Error::dim("network output", "flat logits", other)),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().expect("non-empty")
    }

    /// Input shape of layer `i` (`i == layers.len()` gives the output shape).
    pub fn shape_at(&self, i: usize) -> Shape {
        self.shapes[i]
    }

    pub fn head_classes(&self) -> usize {
        self.output_shape().len()
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Index of the head weight layer: the last weight layer, followed only
    /// by fixed rotations and a detached bias.
    pub fn head_index(&self) -> Result<usize> {
        let idx = self
            .layers
            .iter()
            .rposition(Layer::has_weight)
            .ok_or_else(|| Error::State("network has no weight layer".into()))?;
        if !matches!(self.layers[idx], Layer::Dense(_)) {
            return Err(Error::State("final weight layer must be dense".into()));
        }
        let tail_ok = self.layers[idx + 1..]
            .iter()
            .all(|l| matches!(l, Layer::FixedDense(_) | Layer::Bias(_)));
        if !tail_ok {
            return Err(Error::State(
                "only rotations and a bias may follow the head".into(),
            ));
        }
        Ok(idx)
    }

    pub fn is_rotated(&self) -> bool {
        self.layers.iter().any(Layer::is_fixed)
    }

    pub fn layout(&self) -> ParamLayout {
        let mut tensors = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (role, shape) in layer.param_shapes() {
                tensors.push(TensorSpec {
                    layer: i,
                    role,
                    shape,
                });
            }
        }
        ParamLayout {
            tensors,
            head_layer: self.head_index().expect("validated at construction"),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn fixed_value_count(&self) -> usize {
        self.layers.iter().map(Layer::fixed_value_count).sum()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    /// Mutable parameter tensors, in layout order. Invalidates caches.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.stamp = fresh_stamp();
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().into_iter().flatten().copied().collect()
    }

    /// Indices of weight (dense/conv) layers, in order.
    pub fn weight_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].has_weight())
            .collect()
    }

    fn check_input(&self, x: &Activations) -> Result<()> {
        if x.shape() != self.input_shape() {
            return Err(Error::dim("network input", self.input_shape(), x.shape()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Activations) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cols = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(&cur, self.shapes[i + 1]);
            inputs.push(cur);
            cols.push(out.cols);
            cur = out.output;
        }
        Ok(ForwardCache {
            stamp: self.stamp,
            inputs,
            cols,
            logits: cur,
        })
    }

    /// Forward pass that keeps nothing but the logits.
    pub fn logits(&self, x: &Activations) -> Result<Activations> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(&cur, self.shapes[i + 1]).output;
        }
        Ok(cur)
    }

    /// Mean softmax cross-entropy over the batch and its gradients.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<(f64, GradientSet)> {
        let (loss, dlogits) = softmax_xent_grad(&cache.logits, labels)?;
        let grads = self.backward_from(cache, &dlogits, BackwardOptions::default())?;
        Ok((loss, grads))
    }

    /// Backpropagates an arbitrary logit gradient.
    pub fn backward_from(
        &self,
        cache: &ForwardCache,
        dlogits: &Activations,
        opts: BackwardOptions,
    ) -> Result<GradientSet> {
        if cache.stamp != self.stamp || cache.inputs.len() != self.layers.len() {
            return Err(Error::State(
                "forward cache does not belong to this network state".into(),
            ));
        }
        if dlogits.shape() != self.output_shape() || dlogits.n() != cache.batch_size() {
            return Err(Error::dim(
                "logit gradient",
                format!("{} x {}", cache.batch_size(), self.output_shape()),
                format!("{} x {}", dlogits.n(), dlogits.shape()),
            ));
        }
        let layout = self.layout();
        let mut tensors: Vec<Vec<f64>> = if opts.param_grads {
            layout.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
        } else {
            Vec::new()
        };
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.param_shapes().len();
        }
        let mut output_grads: Vec<Option<Activations>> = vec![None; self.layers.len()];
        let first_needed = if opts.input_grad {
            0
        } else {
            // Nothing upstream of the first trainable layer needs a gradient.
            self.layers
                .iter()
                .position(Layer::is_trainable)
                .unwrap_or(0)
        };

        let mut dy = dlogits.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let n_params = layer.param_shapes().len();
            let pg = if opts.param_grads && n_params > 0 {
                Some(&mut tensors[offsets[i]..offsets[i] + n_params])
            } else {
                None
            };
            let need_dx = i > first_needed || (opts.input_grad && i == 0);
            let dx = layer.backward(&cache.inputs[i], cache.cols[i].as_deref(), &dy, pg, need_dx);
            if opts.keep_output_grads && layer.is_trainable() {
                output_grads[i] = Some(dy);
            }
            match dx {
                Some(dx) => dy = dx,
                None => break,
            }
        }
        if !opts.keep_output_grads {
            output_grads.clear();
        }
        Ok(GradientSet {
            tensors,
            output_grads,
        })
    }

    /// Softmax probabilities for a batch.
    pub fn predict_proba(&self, x: &Activations) -> Result<Activations> {
        let mut logits = self.logits(x)?;
        let c = logits.shape().len();
        for row in logits.data_mut().chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        Ok(logits)
    }

    /// Appends `new_classes` rows to the head; existing rows are untouched.
    pub fn grow_head(&mut self, new_classes: usize) -> Result<()> {
        if new_classes == 0 {
            return Err(Error::InvalidArgument(
                "head growth must add at least one class".into(),
            ));
        }
        let last = self.layers.len() - 1;
        let Layer::Dense(head) = &mut self.layers[last] else {
            return Err(Error::State(
                "head is rotated or detached; combine before growing it".into(),
            ));
        };
        let (rows, cols) = head.weight.shape();
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.rng_seed ^ ((rows as u64) << 32) ^ 0x4845_4144);
        let normal = Normal::new(0.0, HEAD_INIT_STD).expect("valid std");
        let mut data = head.weight.as_slice().to_vec();
        data.extend((0..new_classes * cols).map(|_| normal.sample(&mut rng)));
        head.weight = Matrix::from_vec(rows + new_classes, cols, data)?;
        if let Some(b) = &mut head.bias {
            b.extend(std::iter::repeat_n(0.0, new_classes));
        }
        let out = self.shapes.len() - 1;
        self.shapes[out] = Shape::Flat(rows + new_classes);
        self.stamp = fresh_stamp();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::Dense;

    fn tiny() -> Network {
        let w = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        Network::new(
            vec![Layer::Dense(Dense::new(w, Some(vec![0.0, 0.0])).unwrap())],
            Shape::Flat(2),
            1,
        )
        .unwrap()
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let net = tiny();
        let x = Activations::new(2, Shape::Flat(2), vec![0.3, -1.2, 2.0, 0.5]).unwrap();
        assert_eq!(net.logits(&x).unwrap().data(), x.data());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = tiny();
        let x = Activations::new(1, Shape::Flat(2), vec![1.0, 2.0]).unwrap();
        let cache = net.forward(&x).unwrap();
        net.params_mut()[0][0] = 2.0;
        assert!(matches!(net.backward(&cache, &[0]), Err(Error::State(_))));
    }

    #[test]
    fn input_shape_mismatch() {
        let net = tiny();
        let x = Activations::new(1, Shape::Flat(3), vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_input_gives_zero_weight_gradient() {
        let net = tiny();
        let x = Activations::zeros(3, Shape::Flat(2));
        let cache = net.forward(&x).unwrap();
        let up =
            Activations::new(3, Shape::Flat(2), vec![0.5, -0.5, 1.0, 2.0, -1.0, 0.25]).unwrap();
        let g = net
            .backward_from(&cache, &up, BackwardOptions::default())
            .unwrap();
        assert!(g.tensors[0].iter().all(|&v| v == 0.0));
        assert_eq!(g.tensors[1], vec![0.5 + 1.0 - 1.0, -0.5 + 2.0 + 0.25]);
    }

    #[test]
    fn grow_head_rejects_zero() {
        let mut net = tiny();
        assert!(net.grow_head(0).is_err());
        net.grow_head(3).unwrap();
        assert_eq!(net.head_classes(), 5);
    }

    #[test]
    fn layout_covers_grown_head() {
        let mut net = tiny();
        let before = net.layout();
        net.grow_head(2).unwrap();
        let after = net.layout();
        assert_ne!(before.hash(), after.hash());
        after.check_covers(&before).unwrap();
        assert!(before.check_covers(&after).is_err());
    }
}
