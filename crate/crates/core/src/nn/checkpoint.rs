//! Flat text format for named tensors.
//!
//! ```text
//! # velomix-tensors v1
//! tensor <name> <rank> <dim_0> ... <dim_{rank-1}>
//! <value> <value> ...
//! ```
//!
//! Every tensor is a header line followed by exactly one line holding its
//! values in row-major order, written in shortest round-trip scientific
//! notation so a write/read cycle is exact. Names contain no whitespace.
//! Blank lines and lines starting with `#` are ignored.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::mlp::{BatchNorm, Layer, Mlp, MlpSpec};
use crate::error::{Error, Result};

pub const HEADER: &str = "# velomix-tensors v1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self { name: name.into(), shape, data }
    }

    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(name, vec![n], data)
    }
}

pub fn write_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_tensors_to(&mut w, tensors).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_tensors_to(w: &mut impl Write, tensors: &[NamedTensor]) -> std::io::Result<()> {
    writeln!(w, "{HEADER}")?;
    for t in tensors {
        write!(w, "tensor {} {}", t.name, t.shape.len())?;
        for d in &t.shape {
            write!(w, " {d}")?;
        }
        writeln!(w)?;
        let mut first = true;
        for v in &t.data {
            if !first {
                write!(w, " ")?;
            }
            write!(w, "{v:e}")?;
            first = false;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut lines = Vec::new();
    for line in reader.lines() {
        lines.push(line.map_err(|e| Error::io(path, e))?);
    }
    let mut body = lines.iter().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let mut out = Vec::new();
    while let Some((ln, header)) = body.next() {
        let bad = |msg: String| Error::parse(path, format!("line {}: {msg}", ln + 1));
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() < 3 || fields[0] != "tensor" {
            return Err(bad(format!("expected tensor header, got {header:?}")));
        }
        let rank: usize = fields[2].parse().map_err(|_| bad(format!("bad rank {:?}", fields[2])))?;
        if fields.len() != 3 + rank {
            return Err(bad(format!("rank {rank} but {} dimensions", fields.len() - 3)));
        }
        let shape = fields[3..]
            .iter()
            .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dimension {d:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let expected: usize = shape.iter().product();
        let data = if expected == 0 {
            Vec::new()
        } else {
            let (_, values) = body.next().ok_or_else(|| bad(format!("missing values for {}", fields[1])))?;
            values
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad value {v:?}"))))
                .collect::<Result<Vec<_>>>()?
        };
        if data.len() != expected {
            return Err(bad(format!("{} holds {} values, shape needs {expected}", fields[1], data.len())));
        }
        out.push(NamedTensor { name: fields[1].to_string(), shape, data });
    }
    Ok(out)
}

/// All tensors of a network, including batch-norm running statistics, under `prefix`.
pub fn mlp_tensors(prefix: &str, net: &Mlp) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for (i, l) in net.layers().iter().enumerate() {
        let (r, c) = l.weight.dim();
        out.push(NamedTensor::new(format!("{prefix}.layer{i}.weight"), vec![r, c], l.weight.iter().copied().collect()));
        out.push(NamedTensor::vector(format!("{prefix}.layer{i}.bias"), l.bias.to_vec()));
        if let Some(n) = &l.norm {
            out.push(NamedTensor::vector(format!("{prefix}.layer{i}.bn_scale"), n.scale.to_vec()));
            out.push(NamedTensor::vector(format!("{prefix}.layer{i}.bn_shift"), n.shift.to_vec()));
            out.push(NamedTensor::vector(format!("{prefix}.layer{i}.bn_running_mean"), n.running_mean.to_vec()));
            out.push(NamedTensor::vector(format!("{prefix}.layer{i}.bn_running_var"), n.running_var.to_vec()));
        }
    }
    out
}

pub fn find<'a>(tensors: &'a [NamedTensor], name: &str) -> Result<&'a NamedTensor> {
    tensors.iter().find(|t| t.name == name).ok_or_else(|| Error::Data(format!("checkpoint has no tensor {name}")))
}

/// Inverse of [`mlp_tensors`].
pub fn mlp_from_tensors(prefix: &str, spec: MlpSpec, tensors: &[NamedTensor]) -> Result<Mlp> {
    let vector = |name: String| -> Result<Array1<f64>> { Ok(Array1::from(find(tensors, &name)?.data.clone())) };
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, ls) in spec.layers.iter().enumerate() {
        let w = find(tensors, &format!("{prefix}.layer{i}.weight"))?;
        if w.shape.len() != 2 {
            return Err(Error::Shape(format!("{} must be rank 2", w.name)));
        }
        let weight = Array2::from_shape_vec((w.shape[0], w.shape[1]), w.data.clone())
            .map_err(|e| Error::Shape(format!("{}: {e}", w.name)))?;
        let bias = vector(format!("{prefix}.layer{i}.bias"))?;
        let norm = if ls.batch_norm {
            Some(BatchNorm {
                scale: vector(format!("{prefix}.layer{i}.bn_scale"))?,
                shift: vector(format!("{prefix}.layer{i}.bn_shift"))?,
                running_mean: vector(format!("{prefix}.layer{i}.bn_running_mean"))?,
                running_var: vector(format!("{prefix}.layer{i}.bn_running_var"))?,
            })
        } else {
            None
        };
        layers.push(Layer { weight, bias, norm });
    }
    Mlp::from_layers(spec, layers)
}
