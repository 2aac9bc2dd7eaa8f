//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `PDDPMCK1`, a little-endian `u64` header length,
//! a JSON header, then every tensor's raw little-endian values in parameter
//! order (followed by Adam moments when present). Values are stored bit for
//! bit, so a round trip reproduces evaluation outputs exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig};
use super::unet::{DenoiserConfig, Unet};
use crate::error::{Error, Result};
use crate::tensor::Real;

const MAGIC: &[u8; 8] = b"PDDPMCK1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: DenoiserConfig,
    training_steps: u64,
    shapes: Vec<Vec<usize>>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

fn write_tensor<F: Real>(out: &mut Vec<u8>, t: &ArrayD<F>) {
    for &v in t.iter() {
        v.to_le(out);
    }
}

fn read_tensor<F: Real>(bytes: &[u8], shape: &[usize]) -> Result<ArrayD<F>> {
    let values = bytes.chunks_exact(F::BYTES).map(F::from_le).collect();
    ArrayD::from_shape_vec(shape, values).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint<F: Real>(
    path: &Path,
    model: &Unet<F>,
    optimizer: Option<&Adam<F>>,
) -> Result<()> {
    let params = model.parameters();
    let header = Header {
        dtype: F::NAME.to_string(),
        config: model.config().clone(),
        training_steps: model.training_steps,
        shapes: params.iter().map(|p| p.value.shape().to_vec()).collect(),
        optimizer: optimizer.map(|o| OptimizerHeader {
            config: *o.config(),
            step: o.steps(),
        }),
    };
    let header = serde_json::to_vec(&header)?;
    let mut body = Vec::new();
    for p in &params {
        write_tensor(&mut body, &p.value);
    }
    if let Some(o) = optimizer {
        let (m, v) = o.moments();
        for t in m.iter().chain(v) {
            write_tensor(&mut body, t);
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

/// A restored model and, when the checkpoint carries one, its optimizer.
pub struct Checkpoint<F> {
    pub model: Unet<F>,
    pub optimizer: Option<Adam<F>>,
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    if header.dtype != F::NAME {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {} values, requested {}",
            header.dtype,
            F::NAME
        )));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let mut offset = 0;
    let mut next = |shape: &[usize]| -> Result<ArrayD<F>> {
        let n: usize = shape.iter().product::<usize>() * F::BYTES;
        let chunk = body
            .get(offset..offset + n)
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        offset += n;
        read_tensor(chunk, shape)
    };
    let values = header
        .shapes
        .iter()
        .map(|s| next(s))
        .collect::<Result<Vec<_>>>()?;
    let mut model = Unet::new(header.config.clone())?;
    model.load_parameters(values)?;
    model.training_steps = header.training_steps;
    let optimizer = match header.optimizer {
        Some(o) => {
            let first = header.shapes.iter().map(|s| next(s)).collect::<Result<Vec<_>>>()?;
            let second = header.shapes.iter().map(|s| next(s)).collect::<Result<Vec<_>>>()?;
            Some(Adam::from_state(o.config, o.step, first, second))
        }
        None => None,
    };
    if offset != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(Checkpoint { model, optimizer })
}
