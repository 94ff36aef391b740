//! Checkpoint format: one JSON header line, then the parameters as raw
//! little-endian values.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{ModelConfig, Policy};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    scalar: String,
    config: ModelConfig,
    n_params: usize,
}

pub fn write_checkpoint<S: Scalar, W: Write>(policy: &Policy<S>, mut out: W) -> Result<()> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        scalar: S::NAME.to_string(),
        config: policy.config().clone(),
        n_params: policy.n_params(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(policy.n_params() * S::BYTES);
    for &p in policy.params() {
        p.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<S: Scalar, R: BufRead>(mut input: R) -> Result<Policy<S>> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    if header.scalar != S::NAME {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {} but {} was requested",
            header.scalar,
            S::NAME
        )));
    }
    if header.config.n_params() != header.n_params {
        return Err(Error::Checkpoint("parameter count does not match architecture".into()));
    }
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    if payload.len() != header.n_params * S::BYTES {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            header.n_params * S::BYTES
        )));
    }
    let params = payload.chunks_exact(S::BYTES).map(S::read_le).collect();
    Policy::from_params(header.config, params)
}
