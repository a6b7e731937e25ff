use std::fmt;

use crate::error::{Error, Result};

/// Per-sample activation shape. Images are stored height-major with the
/// channel index fastest (`h, w, c`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Flat(usize),
    Image { h: usize, w: usize, c: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Flat(d) => d,
            Shape::Image { h, w, c } => h * w * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Size of the innermost axis: features for flat inputs, channels for images.
    pub fn channels(&self) -> usize {
        match *self {
            Shape::Flat(d) => d,
            Shape::Image { c, .. } => c,
        }
    }

    /// Number of channel fibers per sample (spatial positions, or 1).
    pub fn positions(&self) -> usize {
        match *self {
            Shape::Flat(_) => 1,
            Shape::Image { h, w, .. } => h * w,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Flat(d) => write!(f, "[{d}]"),
            Shape::Image { h, w, c } => write!(f, "[{h}x{w}x{c}]"),
        }
    }
}

/// A minibatch of activations: `n` samples of `shape`, sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Activations {
    n: usize,
    shape: Shape,
    data: Vec<f64>,
}

impl Activations {
    pub fn new(n: usize, shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * shape.len() {
            return Err(Error::dim("Activations::new", n * shape.len(), data.len()));
        }
        Ok(Self { n, shape, data })
    }

    pub fn zeros(n: usize, shape: Shape) -> Self {
        Self {
            n,
            shape,
            data: vec![0.0; n * shape.len()],
        }
    }

    /// Stacks per-sample rows of equal length.
    pub fn from_samples(shape: Shape, samples: &[&[f64]]) -> Result<Self> {
        let mut data = Vec::with_capacity(samples.len() * shape.len());
        for s in samples {
            if s.len() != shape.len() {
                return Err(Error::dim(
                    "Activations::from_samples",
                    shape.len(),
                    s.len(),
                ));
            }
            data.extend_from_slice(s);
        }
        Ok(Self {
            n: samples.len(),
            shape,
            data,
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.shape.len();
        &self.data[i * len..(i + 1) * len]
    }

    pub(crate) fn reshape(mut self, shape: Shape) -> Self {
        debug_assert_eq!(shape.len(), self.shape.len());
        self.shape = shape;
        self
    }
}

/// Convolution kernel with dims `(kh, kw, in_channels, out_channels)`,
/// stored row-major in that order.
#[derive(Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::dim("Tensor4::from_vec", len, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor4::from_vec"));
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn in_channels(&self) -> usize {
        self.dims[2]
    }

    pub fn out_channels(&self) -> usize {
        self.dims[3]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The `in × out` channel slice at spatial offset `(ky, kx)`.
    pub fn slice(&self, ky: usize, kx: usize) -> &[f64] {
        let [_, kw, ci, co] = self.dims;
        let start = (ky * kw + kx) * ci * co;
        &self.data[start..start + ci * co]
    }

    pub fn slice_mut(&mut self, ky: usize, kx: usize) -> &mut [f64] {
        let [_, kw, ci, co] = self.dims;
        let start = (ky * kw + kx) * ci * co;
        &mut self.data[start..start + ci * co]
    }

    #[inline]
    pub fn at(&self, ky: usize, kx: usize, ci: usize, co: usize) -> f64 {
        let [_, kw, cin, cout] = self.dims;
        self.data[((ky * kw + kx) * cin + ci) * cout + co]
    }
}

impl fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor4{:?}", self.dims)
    }
}
