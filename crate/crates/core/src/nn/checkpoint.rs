//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `DLTMLP`, format version `u32`, layer count
//! `u32`, the `layers + 1` dimensions as `u32`, then for each layer its weights
//! row-major (`out × in`) followed by its bias, all `f64`.

use std::io::{Read, Write};

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

use super::{Layer, Mlp};

const MAGIC: &[u8; 6] = b"DLTMLP";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &Mlp, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(model.layers().len() as u32).to_le_bytes())?;
    for d in model.dims() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for layer in model.layers() {
        for v in layer.weights.iter().chain(layer.bias.iter()) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Mlp> {
    let mut magic = [0u8; 6];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let n_layers = read_u32(&mut input)? as usize;
    if n_layers == 0 || n_layers > 1024 {
        return Err(Error::Format(format!("implausible layer count {n_layers}")));
    }
    let dims = (0..=n_layers)
        .map(|_| read_u32(&mut input).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(n_layers);
    for d in dims.windows(2) {
        let (fan_in, fan_out) = (d[0], d[1]);
        let w = read_f64s(&mut input, fan_in * fan_out)?;
        let b = read_f64s(&mut input, fan_out)?;
        layers.push(Layer {
            weights: Array2::from_shape_vec((fan_out, fan_in), w)
                .map_err(|e| Error::Format(e.to_string()))?,
            bias: Array1::from(b),
        });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Mlp::from_layers(layers)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64s<R: Read>(input: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = [0u8; 8];
    (0..n)
        .map(|_| {
            input.read_exact(&mut buf)?;
            Ok(f64::from_le_bytes(buf))
        })
        .collect()
}
