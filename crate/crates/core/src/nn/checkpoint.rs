//! Parameter checkpoint files.
//!
//! Layout (little-endian): magic `DCEW`, `u32` version, `u32` tensor count,
//! then per tensor `u32` rank, `rank × u64` dims and the `f64` values in
//! row-major order.

use std::io::{self, Read, Write};

use ndarray::{Array1, Array2};

use crate::error::{DceError, Result};
use crate::nn::mlp::{Layer, Mlp};

pub const MAGIC: [u8; 4] = *b"DCEW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(DceError::shape(format!("dims {dims:?} do not cover {} values", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { dims: vec![data.len()], data }
    }
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[Tensor]) -> io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for &d in &t.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => DceError::Truncated(what.to_string()),
        _ => DceError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<Tensor>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(DceError::BadMagic { expected: MAGIC, found: magic });
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(DceError::Version { expected: VERSION, found: version });
    }
    let count = read_u32(&mut r, "tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let rank = read_u32(&mut r, &format!("tensor {i} rank"))?;
        let dims = (0..rank)
            .map(|_| read_u64(&mut r, &format!("tensor {i} dims")).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let mut bytes = vec![0u8; len * 8];
        read_exact(&mut r, &mut bytes, &format!("tensor {i} values"))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(Tensor { dims, data });
    }
    Ok(out)
}

impl Mlp {
    /// Weight `[in, out]` then bias `[out]` per layer.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.layers()
            .iter()
            .flat_map(|l| {
                [
                    Tensor { dims: vec![l.weight.nrows(), l.weight.ncols()], data: l.weight.iter().copied().collect() },
                    Tensor::vector(l.bias.to_vec()),
                ]
            })
            .collect()
    }

    /// Rebuilds a network from `2 × n_layers` tensors produced by [`Mlp::to_tensors`].
    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        if tensors.is_empty() || !tensors.len().is_multiple_of(2) {
            return Err(DceError::shape("network tensors must come in weight/bias pairs"));
        }
        let layers = tensors
            .chunks(2)
            .map(|pair| {
                let (w, b) = (&pair[0], &pair[1]);
                if w.dims.len() != 2 || b.dims.len() != 1 {
                    return Err(DceError::shape("expected rank-2 weight and rank-1 bias"));
                }
                let weight = Array2::from_shape_vec((w.dims[0], w.dims[1]), w.data.clone())
                    .map_err(|e| DceError::shape(e.to_string()))?;
                Ok(Layer { weight, bias: Array1::from(b.data.clone()) })
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_layers(layers)
    }
}
