use serde::{Deserialize, Serialize};

use super::tensor::{Activations, Shape, Tensor4};
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatMut, MatRef, Matrix};

/// Fully connected map `y = W x + b` with `W` of shape `out × in`.
///
/// In a rotated network the bias is detached into a trailing [`Layer::Bias`]
/// and this layer carries none.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl Dense {
    pub fn new(weight: Matrix, bias: Option<Vec<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.rows() {
                return Err(Error::dim("Dense bias", weight.rows(), b.len()));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// 2-D convolution (cross-correlation) over `h × w × c` images.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub kernel: Tensor4,
    pub bias: Option<Vec<f64>>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        kernel: Tensor4,
        bias: Option<Vec<f64>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "convolution stride must be positive".into(),
            ));
        }
        if let Some(b) = &bias {
            if b.len() != kernel.out_channels() {
                return Err(Error::dim("Conv2d bias", kernel.out_channels(), b.len()));
            }
        }
        Ok(Self {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    fn geometry(&self, input: Shape) -> Result<ConvGeom> {
        let Shape::Image { h, w, c } = input else {
            return Err(Error::dim("Conv2d input", "image", input));
        };
        let [kh, kw, cin, cout] = self.kernel.dims();
        if c != cin {
            return Err(Error::dim("Conv2d input channels", cin, c));
        }
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < kh || wp < kw {
            return Err(Error::dim(
                "Conv2d spatial extent",
                format!(">= {kh}x{kw}"),
                format!("{hp}x{wp}"),
            ));
        }
        Ok(ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride: self.stride,
            pad: self.padding,
            oh: (hp - kh) / self.stride + 1,
            ow: (wp - kw) / self.stride + 1,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds every receptive field into one row of `(ky, kx, ci)` values.
    fn im2col(&self, x: &[f64], n: usize) -> Vec<f64> {
        let plen = self.patch_len();
        let in_len = self.h * self.w * self.cin;
        let mut cols = vec![0.0; n * self.positions() * plen];
        for s in 0..n {
            let img = &x[s * in_len..(s + 1) * in_len];
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = (s * self.positions() + oy * self.ow + ox) * plen;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = (iy as usize * self.w + ix as usize) * self.cin;
                            let dst = row + (ky * self.kw + kx) * self.cin;
                            cols[dst..dst + self.cin].copy_from_slice(&img[src..src + self.cin]);
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
    fn col2im(&self, dcols: &[f64], n: usize) -> Vec<f64> {
        let plen = self.patch_len();
        let in_len = self.h * self.w * self.cin;
        let mut dx = vec![0.0; n * in_len];
        for s in 0..n {
            let img = &mut dx[s * in_len..(s + 1) * in_len];
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = (s * self.positions() + oy * self.ow + ox) * plen;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let dst = (iy as usize * self.w + ix as usize) * self.cin;
                            let src = row + (ky * self.kw + kx) * self.cin;
                            for (d, g) in img[dst..dst + self.cin]
                                .iter_mut()
                                .zip(&dcols[src..src + self.cin])
                            {
                                *d += g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// One stage of a sequential network.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    /// Trainable additive bias on the innermost axis (features or channels).
    Bias(Vec<f64>),
    Relu,
    /// 2×2 average pooling with stride 2.
    MeanPool2,
    Flatten,
    /// Non-trainable square map `x ↦ U x`.
    FixedDense(Matrix),
    /// Non-trainable `x ↦ U x` applied to the channel fiber at every position.
    FixedConv1x1(Matrix),
}

/// Which half of a parametric layer a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    Weight,
    Bias,
}

pub(crate) struct LayerOutput {
    pub output: Activations,
    pub cols: Option<Vec<f64>>,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Bias(_) => "bias",
            Layer::Relu => "relu",
            Layer::MeanPool2 => "meanpool2",
            Layer::Flatten => "flatten",
            Layer::FixedDense(_) => "fixed_dense",
            Layer::FixedConv1x1(_) => "fixed_conv1x1",
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2d(_) | Layer::Bias(_))
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, Layer::FixedDense(_) | Layer::FixedConv1x1(_))
    }

    /// Dense and convolutional layers: the ones a rotation can wrap.
    pub fn has_weight(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2d(_))
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            Layer::Dense(d) => match input {
                Shape::Flat(n) if n == d.in_dim() => Ok(Shape::Flat(d.out_dim())),
                _ => Err(Error::dim("Dense input", Shape::Flat(d.in_dim()), input)),
            },
            Layer::Conv2d(c) => {
                let g = c.geometry(input)?;
                Ok(Shape::Image {
                    h: g.oh,
                    w: g.ow,
                    c: g.cout,
                })
            }
            Layer::Bias(b) => {
                if input.channels() != b.len() {
                    return Err(Error::dim("Bias input channels", b.len(), input.channels()));
                }
                Ok(input)
            }
            Layer::Relu => Ok(input),
            Layer::MeanPool2 => match input {
                Shape::Image { h, w, c } if h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0 => {
                    Ok(Shape::Image {
                        h: h / 2,
                        w: w / 2,
                        c,
                    })
                }
                _ => Err(Error::dim(
                    "MeanPool2 input",
                    "image with even height and width",
                    input,
                )),
            },
            Layer::Flatten => Ok(Shape::Flat(input.len())),
            Layer::FixedDense(u) => match input {
                Shape::Flat(n) if n == u.cols() && u.is_square() => Ok(input),
                _ => Err(Error::dim("FixedDense input", Shape::Flat(u.cols()), input)),
            },
            Layer::FixedConv1x1(u) => match input {
                Shape::Image { c, .. } if c == u.cols() && u.is_square() => Ok(input),
                _ => Err(Error::dim("FixedConv1x1 input channels", u.cols(), input)),
            },
        }
    }

    pub fn param_shapes(&self) -> Vec<(ParamRole, Vec<usize>)> {
        match self {
            Layer::Dense(d) => {
                let mut v = vec![(ParamRole::Weight, vec![d.out_dim(), d.in_dim()])];
                if let Some(b) = &d.bias {
                    v.push((ParamRole::Bias, vec![b.len()]));
                }
                v
            }
            Layer::Conv2d(c) => {
                let mut v = vec![(ParamRole::Weight, c.kernel.dims().to_vec())];
                if let Some(b) = &c.bias {
                    v.push((ParamRole::Bias, vec![b.len()]));
                }
                v
            }
            Layer::Bias(b) => vec![(ParamRole::Bias, vec![b.len()])],
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Dense(d) => {
                let mut v = vec![d.weight.as_slice()];
                if let Some(b) = &d.bias {
                    v.push(b.as_slice());
                }
                v
            }
            Layer::Conv2d(c) => {
                let mut v = vec![c.kernel.as_slice()];
                if let Some(b) = &c.bias {
                    v.push(b.as_slice());
                }
                v
            }
            Layer::Bias(b) => vec![b.as_slice()],
            _ => Vec::new(),
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Dense(d) => {
                let mut v = vec![d.weight.as_mut_slice()];
                if let Some(b) = &mut d.bias {
                    v.push(b.as_mut_slice());
                }
                v
            }
            Layer::Conv2d(c) => {
                let mut v = vec![c.kernel.as_mut_slice()];
                if let Some(b) = &mut c.bias {
                    v.push(b.as_mut_slice());
                }
                v
            }
            Layer::Bias(b) => vec![b.as_mut_slice()],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Stored values that are not trainable (rotation matrices).
    pub fn fixed_value_count(&self) -> usize {
        match self {
            Layer::FixedDense(u) | Layer::FixedConv1x1(u) => u.rows() * u.cols(),
            _ => 0,
        }
    }

    pub(crate) fn forward(&self, x: &Activations, out_shape: Shape) -> LayerOutput {
        let n = x.n();
        match self {
            Layer::Dense(d) => {
                let mut y = Activations::zeros(n, out_shape);
                gemm(
                    1.0,
                    MatRef::new(x.data(), n, d.in_dim()),
                    d.weight.view().t(),
                    0.0,
                    MatMut::new(y.data_mut(), n, d.out_dim()),
                );
                if let Some(b) = &d.bias {
                    add_channel_bias(y.data_mut(), b);
                }
                LayerOutput {
                    output: y,
                    cols: None,
                }
            }
            Layer::Conv2d(c) => {
                let g = c.geometry(x.shape()).expect("validated at construction");
                let cols = g.im2col(x.data(), n);
                let rows = n * g.positions();
                let mut y = Activations::zeros(n, out_shape);
                gemm(
                    1.0,
                    MatRef::new(&cols, rows, g.patch_len()),
                    MatRef::new(c.kernel.as_slice(), g.patch_len(), g.cout),
                    0.0,
                    MatMut::new(y.data_mut(), rows, g.cout),
                );
                if let Some(b) = &c.bias {
                    add_channel_bias(y.data_mut(), b);
                }
                LayerOutput {
                    output: y,
                    cols: Some(cols),
                }
            }
            Layer::Bias(b) => {
                let mut y = x.clone();
                add_channel_bias(y.data_mut(), b);
                LayerOutput {
                    output: y,
                    cols: None,
                }
            }
            Layer::Relu => {
                let data = x
                    .data()
                    .iter()
                    .map(|&v| if v > 0.0 { v } else { 0.0 })
                    .collect();
                LayerOutput {
                    output: Activations::new(n, out_shape, data).expect("same length"),
                    cols: None,
                }
            }
            Layer::MeanPool2 => {
                let Shape::Image { h, w, c } = x.shape() else {
                    unreachable!()
                };
                let (oh, ow) = (h / 2, w / 2);
                let mut y = Activations::zeros(n, out_shape);
                let (src, dst) = (x.data(), y.data_mut());
                for s in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let o = ((s * oh + oy) * ow + ox) * c;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let i = ((s * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                                for ch in 0..c {
                                    dst[o + ch] += 0.25 * src[i + ch];
                                }
                            }
                        }
                    }
                }
                LayerOutput {
                    output: y,
                    cols: None,
                }
            }
            Layer::Flatten => LayerOutput {
                output: x.clone().reshape(out_shape),
                cols: None,
            },
            Layer::FixedDense(u) | Layer::FixedConv1x1(u) => {
                let rows = n * x.shape().positions();
                let mut y = Activations::zeros(n, out_shape);
                gemm(
                    1.0,
                    MatRef::new(x.data(), rows, u.cols()),
                    u.view().t(),
                    0.0,
                    MatMut::new(y.data_mut(), rows, u.rows()),
                );
                LayerOutput {
                    output: y,
                    cols: None,
                }
            }
        }
    }

    /// Backpropagates `dy` through the layer, accumulating parameter
    /// gradients into `param_grads` when given. Returns the input gradient if
    /// requested.
    pub(crate) fn backward(
        &self,
        x: &Activations,
        cols: Option<&[f64]>,
        dy: &Activations,
        param_grads: Option<&mut [Vec<f64>]>,
        need_input_grad: bool,
    ) -> Option<Activations> {
        let n = x.n();
        match self {
            Layer::Dense(d) => {
                if let Some(g) = param_grads {
                    gemm(
                        1.0,
                        MatRef::new(dy.data(), n, d.out_dim()).t(),
                        MatRef::new(x.data(), n, d.in_dim()),
                        1.0,
                        MatMut::new(&mut g[0], d.out_dim(), d.in_dim()),
                    );
                    if d.bias.is_some() {
                        sum_channels_into(dy.data(), &mut g[1]);
                    }
                }
                need_input_grad.then(|| {
                    let mut dx = Activations::zeros(n, x.shape());
                    gemm(
                        1.0,
                        MatRef::new(dy.data(), n, d.out_dim()),
                        d.weight.view(),
                        0.0,
                        MatMut::new(dx.data_mut(), n, d.in_dim()),
                    );
                    dx
                })
            }
            Layer::Conv2d(c) => {
                let g = c.geometry(x.shape()).expect("validated at construction");
                let rows = n * g.positions();
                let cols = cols.expect("conv cache holds unfolded patches");
                if let Some(pg) = param_grads {
                    gemm(
                        1.0,
                        MatRef::new(cols, rows, g.patch_len()).t(),
                        MatRef::new(dy.data(), rows, g.cout),
                        1.0,
                        MatMut::new(&mut pg[0], g.patch_len(), g.cout),
                    );
                    if c.bias.is_some() {
                        sum_channels_into(dy.data(), &mut pg[1]);
                    }
                }
                need_input_grad.then(|| {
                    let mut dcols = vec![0.0; rows * g.patch_len()];
                    gemm(
                        1.0,
                        MatRef::new(dy.data(), rows, g.cout),
                        MatRef::new(c.kernel.as_slice(), g.patch_len(), g.cout).t(),
                        0.0,
                        MatMut::new(&mut dcols, rows, g.patch_len()),
                    );
                    Activations::new(n, x.shape(), g.col2im(&dcols, n)).expect("input shape")
                })
            }
            Layer::Bias(_) => {
                if let Some(g) = param_grads {
                    sum_channels_into(dy.data(), &mut g[0]);
                }
                need_input_grad.then(|| dy.clone().reshape(x.shape()))
            }
            Layer::Relu => need_input_grad.then(|| {
                let data = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                Activations::new(n, x.shape(), data).expect("same length")
            }),
            Layer::MeanPool2 => need_input_grad.then(|| {
                let Shape::Image { h, w, c } = x.shape() else {
                    unreachable!()
                };
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = Activations::zeros(n, x.shape());
                let (src, dst) = (dy.data(), dx.data_mut());
                for s in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let o = ((s * oh + oy) * ow + ox) * c;
                            for (ddy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let i = ((s * h + 2 * oy + ddy) * w + 2 * ox + ddx) * c;
                                for ch in 0..c {
                                    dst[i + ch] = 0.25 * src[o + ch];
                                }
                            }
                        }
                    }
                }
                dx
            }),
            Layer::Flatten => need_input_grad.then(|| dy.clone().reshape(x.shape())),
            Layer::FixedDense(u) | Layer::FixedConv1x1(u) => need_input_grad.then(|| {
                let rows = n * x.shape().positions();
                let mut dx = Activations::zeros(n, x.shape());
                gemm(
                    1.0,
                    MatRef::new(dy.data(), rows, u.rows()),
                    u.view(),
                    0.0,
                    MatMut::new(dx.data_mut(), rows, u.cols()),
                );
                dx
            }),
        }
    }
}

fn add_channel_bias(data: &mut [f64], bias: &[f64]) {
    for chunk in data.chunks_exact_mut(bias.len()) {
        for (v, b) in chunk.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn sum_channels_into(data: &[f64], acc: &mut [f64]) {
    for chunk in data.chunks_exact(acc.len()) {
        for (a, v) in acc.iter_mut().zip(chunk) {
            *a += v;
        }
    }
}
