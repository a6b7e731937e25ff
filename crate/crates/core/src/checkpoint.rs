//! Binary network checkpoints and Fisher snapshots.
//!
//! Checkpoint: magic `REWC`, `u32` version, the seed and input shape, one
//! record per layer (kind tag, dims, little-endian `f64` payload), then the
//! rotation pairs. Fisher snapshot: magic `RFIM`, `u32` version, the layout
//! hash, the entry count and the little-endian `f64` entries.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fim::FimDiagonal;
use crate::linalg::Matrix;
use crate::nn::{Conv2d, Dense, Layer, Network, ParamLayout, Shape, Tensor4};
use crate::rotation::RotationPair;

const CHECKPOINT_MAGIC: &[u8; 4] = b"REWC";
const FIM_MAGIC: &[u8; 4] = b"RFIM";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const FIM_VERSION: u32 = 1;

mod tag {
    pub const DENSE: u8 = 1;
    pub const CONV2D: u8 = 2;
    pub const BIAS: u8 = 3;
    pub const RELU: u8 = 4;
    pub const MEAN_POOL2: u8 = 5;
    pub const FLATTEN: u8 = 6;
    pub const FIXED_DENSE: u8 = 7;
    pub const FIXED_CONV1X1: u8 = 8;
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn floats(&mut self, v: &[f64]) {
        self.len(v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn matrix(&mut self, m: &Matrix) {
        self.len(m.rows());
        self.len(m.cols());
        for x in m.as_slice() {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn bias(&mut self, b: &Option<Vec<f64>>) {
        match b {
            Some(b) => {
                self.u8(1);
                self.floats(b);
            }
            None => self.u8(0),
        }
    }

    fn shape(&mut self, s: Shape) {
        match s {
            Shape::Flat(d) => {
                self.u8(0);
                self.len(d);
            }
            Shape::Image { h, w, c } => {
                self.u8(1);
                for v in [h, w, c] {
                    self.len(v);
                }
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], format: &'static str) -> Self {
        Self {
            bytes,
            at: 0,
            format,
        }
    }

    fn err(&self, field: &'static str, message: impl Into<String>) -> Error {
        Error::format(self.format, field, message)
    }

    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        match self.at.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let out = &self.bytes[self.at..end];
                self.at = end;
                Ok(out)
            }
            _ => Err(self.err(field, "file is truncated")),
        }
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, field)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, field)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self, field: &'static str) -> Result<usize> {
        let v = self.u64(field)?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| self.err(field, format!("implausible length {v}")))
    }

    fn raw_floats(&mut self, n: usize, field: &'static str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| self.err(field, "length overflows"))?;
        Ok(self
            .take(bytes, field)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }

    fn floats(&mut self, field: &'static str) -> Result<Vec<f64>> {
        let n = self.len(field)?;
        self.raw_floats(n, field)
    }

    fn matrix(&mut self, field: &'static str) -> Result<Matrix> {
        let rows = self.len(field)?;
        let cols = self.len(field)?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| self.err(field, "dims overflow"))?;
        let data = self.raw_floats(n, field)?;
        Matrix::from_vec(rows, cols, data)
    }

    fn bias(&mut self) -> Result<Option<Vec<f64>>> {
        match self.u8("bias flag")? {
            0 => Ok(None),
            1 => Ok(Some(self.floats("bias")?)),
            v => Err(self.err("bias flag", format!("expected 0 or 1, found {v}"))),
        }
    }

    fn shape(&mut self) -> Result<Shape> {
        match self.u8("input shape")? {
            0 => Ok(Shape::Flat(self.len("input shape")?)),
            1 => Ok(Shape::Image {
                h: self.len("input shape")?,
                w: self.len("input shape")?,
                c: self.len("input shape")?,
            }),
            v => Err(self.err("input shape", format!("unknown shape tag {v}"))),
        }
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != magic {
            return Err(self.err("magic", format!("expected {:?}, found {:?}", magic, found)));
        }
        Ok(())
    }

    fn version(&mut self, supported: u32) -> Result<()> {
        let v = self.u32("version")?;
        if v != supported {
            return Err(self.err(
                "version",
                format!("unsupported version {v} (expected {supported})"),
            ));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(self.err(
                "trailer",
                format!("{} unexpected trailing bytes", self.bytes.len() - self.at),
            ));
        }
        Ok(())
    }
}

/// Serializes a network and the rotation pairs of its current basis.
pub fn encode_checkpoint(net: &Network, pairs: &[RotationPair]) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(net.rng_seed());
    w.shape(net.input_shape());
    w.len(net.layers().len());
    for layer in net.layers() {
        match layer {
            Layer::Dense(d) => {
                w.u8(tag::DENSE);
                w.matrix(&d.weight);
                w.bias(&d.bias);
            }
            Layer::Conv2d(c) => {
                w.u8(tag::CONV2D);
                w.len(c.stride);
                w.len(c.padding);
                for d in c.kernel.dims() {
                    w.len(d);
                }
                for x in c.kernel.as_slice() {
                    w.0.extend_from_slice(&x.to_le_bytes());
                }
                w.bias(&c.bias);
            }
            Layer::Bias(b) => {
                w.u8(tag::BIAS);
                w.floats(b);
            }
            Layer::Relu => w.u8(tag::RELU),
            Layer::MeanPool2 => w.u8(tag::MEAN_POOL2),
            Layer::Flatten => w.u8(tag::FLATTEN),
            Layer::FixedDense(u) => {
                w.u8(tag::FIXED_DENSE);
                w.matrix(u);
            }
            Layer::FixedConv1x1(u) => {
                w.u8(tag::FIXED_CONV1X1);
                w.matrix(u);
            }
        }
    }
    w.len(pairs.len());
    for p in pairs {
        w.len(p.layer);
        w.len(p.core);
        w.matrix(&p.u1);
        w.matrix(&p.u2);
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network, Vec<RotationPair>)> {
    let mut r = Reader::new(bytes, "rewc checkpoint");
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let seed = r.u64("rng seed")?;
    let input = r.shape()?;
    let count = r.len("layer count")?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let layer = match r.u8("layer tag")? {
            tag::DENSE => {
                let weight = r.matrix("dense weight")?;
                Layer::Dense(Dense::new(weight, r.bias()?)?)
            }
            tag::CONV2D => {
                let stride = r.len("conv stride")?;
                let padding = r.len("conv padding")?;
                let mut dims = [0; 4];
                for d in dims.iter_mut() {
                    *d = r.len("kernel dims")?;
                }
                let n = dims
                    .iter()
                    .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                    .ok_or_else(|| r.err("kernel dims", "dims overflow"))?;
                let kernel = Tensor4::from_vec(dims, r.raw_floats(n, "kernel")?)?;
                Layer::Conv2d(Conv2d::new(kernel, r.bias()?, stride, padding)?)
            }
            tag::BIAS => Layer::Bias(r.floats("bias")?),
            tag::RELU => Layer::Relu,
            tag::MEAN_POOL2 => Layer::MeanPool2,
            tag::FLATTEN => Layer::Flatten,
            tag::FIXED_DENSE => Layer::FixedDense(r.matrix("fixed matrix")?),
            tag::FIXED_CONV1X1 => Layer::FixedConv1x1(r.matrix("fixed matrix")?),
            t => return Err(r.err("layer tag", format!("unknown layer kind {t}"))),
        };
        layers.push(layer);
    }
    let n_pairs = r.len("pair count")?;
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let layer = r.len("pair layer")?;
        let core = r.len("pair core")?;
        let u1 = r.matrix("u1")?;
        let u2 = r.matrix("u2")?;
        pairs.push(RotationPair::new(layer, core, u1, u2)?);
    }
    r.finish()?;
    let net = Network::new(layers, input, seed)?;
    for p in &pairs {
        let fixed_ok = |i: usize, u: &Matrix| matches!(net.layers().get(i), Some(Layer::FixedDense(m) | Layer::FixedConv1x1(m)) if m == u);
        if p.core == 0 || !fixed_ok(p.core - 1, &p.u1) || !fixed_ok(p.core + 1, &p.u2) {
            return Err(Error::format(
                "rewc checkpoint",
                "rotation pairs",
                "pair does not match the stored layers",
            ));
        }
    }
    Ok((net, pairs))
}

pub fn save_checkpoint(path: &Path, net: &Network, pairs: &[RotationPair]) -> Result<()> {
    fs::write(path, encode_checkpoint(net, pairs)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, Vec<RotationPair>)> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_fim(fim: &FimDiagonal) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(FIM_MAGIC);
    w.u32(FIM_VERSION);
    w.u64(fim.layout_hash());
    w.floats(&fim.flat());
    w.0
}

/// Reads a Fisher snapshot; `layout` must hash to the stored value.
pub fn decode_fim(bytes: &[u8], layout: &ParamLayout) -> Result<FimDiagonal> {
    let mut r = Reader::new(bytes, "rfim snapshot");
    r.magic(FIM_MAGIC)?;
    r.version(FIM_VERSION)?;
    let hash = r.u64("layout hash")?;
    let flat = r.floats("entries")?;
    r.finish()?;
    if hash != layout.hash() {
        return Err(Error::Alignment(format!(
            "snapshot layout hash {hash:016x} does not match {:016x}",
            layout.hash()
        )));
    }
    if flat.len() != layout.total() {
        return Err(Error::dim("fisher entries", layout.total(), flat.len()));
    }
    let mut values = Vec::with_capacity(layout.tensors.len());
    let mut at = 0;
    for t in &layout.tensors {
        values.push(flat[at..at + t.len()].to_vec());
        at += t.len();
    }
    FimDiagonal::new(layout.clone(), values)
}

pub fn save_fim(path: &Path, fim: &FimDiagonal) -> Result<()> {
    fs::write(path, encode_fim(fim)).map_err(|e| Error::io(path, e))
}

pub fn load_fim(path: &Path, layout: &ParamLayout) -> Result<FimDiagonal> {
    decode_fim(&fs::read(path).map_err(|e| Error::io(path, e))?, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fim::{estimate_diag_fim, FimMode};
    use crate::nn::{build_network, Activations};
    use crate::rotation::{accumulate_correlations, rotate_network, GradientLabels, RotationScope};

    fn rotated_lenet() -> (Network, Vec<RotationPair>) {
        let net = build_network(
            &"lenet".parse::<crate::nn::ArchSpec>().unwrap().with_head(3),
            4,
        )
        .unwrap();
        let x = Activations::new(
            4,
            net.input_shape(),
            (0..4 * 1024).map(|i| (i % 7) as f64 / 7.0).collect(),
        )
        .unwrap();
        let stats = accumulate_correlations(&net, &x, 4, GradientLabels::Model, 0).unwrap();
        rotate_network(&net, &stats, RotationScope::AllNoLast).unwrap()
    }

    #[test]
    fn rotated_checkpoint_round_trip_is_bit_exact() {
        let (net, pairs) = rotated_lenet();
        let bytes = encode_checkpoint(&net, &pairs);
        let (back, back_pairs) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(back_pairs, pairs);
        assert_eq!(encode_checkpoint(&back, &back_pairs), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let net = build_network(&"mlp-3-2".parse().unwrap(), 0).unwrap();
        let bytes = encode_checkpoint(&net, &[]);
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::Format {
                field: "version",
                ..
            })
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(
            decode_checkpoint(&extra),
            Err(Error::Format {
                field: "trailer",
                ..
            })
        ));
    }

    #[test]
    fn fim_snapshot_round_trip_and_hash_check() {
        let net = build_network(&"mlp-4-3-2".parse().unwrap(), 0).unwrap();
        let x = Activations::new(3, net.input_shape(), vec![0.5; 12]).unwrap();
        let fim = estimate_diag_fim(&net, &x, 3, FimMode::Expected, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.rfim");
        save_fim(&path, &fim).unwrap();
        assert_eq!(load_fim(&path, &net.layout()).unwrap(), fim);
        let other = build_network(&"mlp-4-2-2".parse().unwrap(), 0).unwrap();
        assert!(matches!(
            load_fim(&path, &other.layout()),
            Err(Error::Alignment(_))
        ));
    }
}
