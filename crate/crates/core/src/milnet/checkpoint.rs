//! Model checkpoint layout, all little-endian:
//!
//! ```text
//! magic     "ECTM"
//! version   u16 = 1
//! u32 x 6   input_dim, enc_out, attn_hidden, batch_size, max_epochs, patience
//! f64 x 4   lr, weight_decay, dropout_feature, dropout_tile
//! count     u64, number of parameters
//! params    count x f64, tensors in declaration order
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::{ModelParams, ModelShape};
use super::HyperParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ECTM";
const CHECKPOINT_VERSION: u16 = 1;

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} does not fit in u32")))
}

pub fn write_checkpoint<W: Write>(params: &ModelParams, hyper: &HyperParams, mut sink: W) -> Result<()> {
    if ModelShape::from_hyper(hyper) != params.shape {
        return Err(Error::invalid("hyperparameters do not match the parameter shapes"));
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    let mut buf = Vec::with_capacity(64 + params.data.len() * 8);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (v, what) in [
        (hyper.input_dim, "input_dim"),
        (hyper.enc_out, "enc_out"),
        (hyper.attn_hidden, "attn_hidden"),
        (hyper.batch_size, "batch_size"),
        (hyper.max_epochs, "max_epochs"),
        (hyper.patience, "patience"),
    ] {
        buf.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    for v in [hyper.lr, hyper.weight_decay, hyper.dropout_feature, hyper.dropout_tile] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(params.data.len() as u64).to_le_bytes());
    for v in &params.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(())
}

fn take<R: Read, const N: usize>(source: &mut R, what: &'static str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    source.read_exact(&mut b).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated(what),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

pub fn read_checkpoint<R: Read>(mut source: R) -> Result<(ModelParams, HyperParams)> {
    let magic = take::<_, 4>(&mut source, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
    }
    let version = u16::from_le_bytes(take(&mut source, "version")?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut ints = [0usize; 6];
    for v in &mut ints {
        *v = u32::from_le_bytes(take(&mut source, "hyperparameters")?) as usize;
    }
    let mut reals = [0f64; 4];
    for v in &mut reals {
        *v = f64::from_le_bytes(take(&mut source, "hyperparameters")?);
    }
    let hyper = HyperParams {
        input_dim: ints[0],
        enc_out: ints[1],
        attn_hidden: ints[2],
        batch_size: ints[3],
        max_epochs: ints[4],
        patience: ints[5],
        lr: reals[0],
        weight_decay: reals[1],
        dropout_feature: reals[2],
        dropout_tile: reals[3],
    };
    hyper.validate()?;
    let shape = ModelShape::from_hyper(&hyper);
    let count = u64::from_le_bytes(take(&mut source, "parameter count")?);
    if count != shape.len() as u64 {
        return Err(Error::DimMismatch { expected: shape.len(), found: count as usize });
    }
    let mut raw = vec![0u8; shape.len() * 8];
    source.read_exact(&mut raw).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated("parameters"),
        _ => Error::Io(e),
    })?;
    let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let params = ModelParams { shape, data };
    if !params.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok((params, hyper))
}

pub fn write_checkpoint_file(params: &ModelParams, hyper: &HyperParams, path: impl AsRef<Path>) -> Result<()> {
    let mut sink = BufWriter::new(File::create(path)?);
    write_checkpoint(params, hyper, &mut sink)?;
    sink.flush()?;
    Ok(())
}

pub fn read_checkpoint_file(path: impl AsRef<Path>) -> Result<(ModelParams, HyperParams)> {
    let mut source = BufReader::new(File::open(path)?);
    let out = read_checkpoint(&mut source)?;
    let mut rest = [0u8; 1];
    if source.read(&mut rest)? != 0 {
        return Err(Error::invalid("trailing bytes after checkpoint parameters"));
    }
    Ok(out)
}
