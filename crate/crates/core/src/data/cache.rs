//! Binary dataset cache: magic `RDAT`, version, then every task with its
//! class ids and splits as little-endian `u64` labels and `f64` inputs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{LabeledData, TaskDataset, TaskSequence};
use crate::error::{Error, Result};
use crate::nn::{Activations, Shape};

const MAGIC: &[u8; 4] = b"RDAT";
const VERSION: u32 = 1;

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_shape(out: &mut Vec<u8>, shape: Shape) {
    match shape {
        Shape::Flat(d) => {
            out.push(0);
            put_u64(out, d);
        }
        Shape::Image { h, w, c } => {
            out.push(1);
            for v in [h, w, c] {
                put_u64(out, v);
            }
        }
    }
}

fn put_split(out: &mut Vec<u8>, data: &LabeledData) {
    put_shape(out, data.shape());
    put_u64(out, data.len());
    for &y in &data.labels {
        put_u64(out, y);
    }
    for v in data.inputs.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes all tasks of `seq` to `path`.
pub fn write_sequence(path: &Path, seq: &TaskSequence) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u64(&mut out, seq.len());
    for t in seq.tasks() {
        put_u64(&mut out, t.id);
        put_u64(&mut out, t.classes.len());
        for &c in &t.classes {
            put_u64(&mut out, c);
        }
        for split in [&t.train, &t.validation, &t.test] {
            put_split(&mut out, split);
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&out)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("rdat", field, "file is truncated"))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u64(&mut self, field: &'static str) -> Result<usize> {
        let b = self.take(8, field)?;
        usize::try_from(u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .map_err(|_| Error::format("rdat", field, "value does not fit in memory"))
    }

    fn shape(&mut self) -> Result<Shape> {
        match self.take(1, "shape")?[0] {
            0 => Ok(Shape::Flat(self.u64("shape")?)),
            1 => Ok(Shape::Image {
                h: self.u64("shape")?,
                w: self.u64("shape")?,
                c: self.u64("shape")?,
            }),
            tag => Err(Error::format(
                "rdat",
                "shape",
                format!("unknown shape tag {tag}"),
            )),
        }
    }

    fn split(&mut self) -> Result<LabeledData> {
        let shape = self.shape()?;
        let n = self.u64("count")?;
        let labels = (0..n)
            .map(|_| self.u64("labels"))
            .collect::<Result<Vec<_>>>()?;
        let len = n
            .checked_mul(shape.len())
            .and_then(|l| l.checked_mul(8))
            .ok_or_else(|| Error::format("rdat", "count", "sample count overflows"))?;
        let raw = self.take(len, "inputs")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        LabeledData::new(Activations::new(n, shape, data)?, labels)
    }
}

pub fn read_sequence(path: &Path) -> Result<TaskSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("rdat", "magic", "not a dataset cache"));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(
            "rdat",
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let count = r.u64("task count")?;
    let mut tasks = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let id = r.u64("task id")?;
        let k = r.u64("class count")?;
        let classes = (0..k)
            .map(|_| r.u64("classes"))
            .collect::<Result<Vec<_>>>()?;
        tasks.push(TaskDataset {
            id,
            classes,
            train: r.split()?,
            validation: r.split()?,
            test: r.split()?,
        });
    }
    if r.at != bytes.len() {
        return Err(Error::format(
            "rdat",
            "trailer",
            "unexpected bytes after the last task",
        ));
    }
    TaskSequence::new(tasks)
}
