//! Model checkpoints: one line of JSON header followed by the parameters as
//! little-endian `f64` in [`ParamVector`] order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamVector};
use crate::ARTIFACT_VERSION;

pub const CHECKPOINT_FORMAT: &str = "fedunlearn-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: String,
    /// Training hash of the config that produced the parameters.
    pub config_hash: String,
    pub dataset_hash: String,
    pub model: ModelSpec,
    pub param_count: usize,
}

impl CheckpointHeader {
    pub fn new(config_hash: String, dataset_hash: String, model: ModelSpec) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: ARTIFACT_VERSION.into(),
            config_hash,
            dataset_hash,
            param_count: model.param_count(),
            model,
        }
    }
}

pub fn encode_checkpoint(header: &CheckpointHeader, params: &ParamVector) -> Result<Vec<u8>> {
    if params.len() != header.param_count {
        return Err(Error::DimensionMismatch {
            what: "checkpoint parameters",
            expected: header.param_count,
            got: params.len(),
        });
    }
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    for &w in params.as_slice() {
        out.write_f64::<LittleEndian>(w)?;
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, params: &ParamVector) -> Result<()> {
    let bytes = encode_checkpoint(header, params)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

pub fn decode_checkpoint(reader: impl Read) -> Result<(CheckpointHeader, ParamVector)> {
    let mut reader = BufReader::new(reader);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.pop() != Some(b'\n') {
        return Err(Error::Checkpoint("missing header line".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&line)
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", header.format)));
    }
    if header.version != ARTIFACT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint written by version {}, this is version {ARTIFACT_VERSION}",
            header.version
        )));
    }
    if header.param_count != header.model.param_count() {
        return Err(Error::Checkpoint(format!(
            "header declares {} parameters but the model has {}",
            header.param_count,
            header.model.param_count()
        )));
    }
    let mut params = vec![0.0; header.param_count];
    reader
        .read_f64_into::<LittleEndian>(&mut params)
        .map_err(|_| Error::Checkpoint("truncated parameter block".into()))?;
    let mut rest = [0u8; 1];
    if reader.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok((header, ParamVector::new(params)))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamVector)> {
    decode_checkpoint(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (CheckpointHeader, ParamVector) {
        let spec = ModelSpec::softmax(2, 2, 0.0);
        let params = ParamVector::new(vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 3.0]);
        (CheckpointHeader::new("abc".into(), "def".into(), spec), params)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (h, p) = sample();
        let bytes = encode_checkpoint(&h, &p).unwrap();
        let (h2, p2) = decode_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(h, h2);
        let bits = |v: &ParamVector| v.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&p2));
    }

    #[test]
    fn rejects_other_versions_and_damage() {
        let (mut h, p) = sample();
        let bytes = encode_checkpoint(&h, &p).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode_checkpoint(longer.as_slice()).is_err());
        h.version = "0.0.0-other".into();
        let bytes = encode_checkpoint(&h, &p).unwrap();
        let err = decode_checkpoint(bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("0.0.0-other"), "{err}");
        assert!(encode_checkpoint(&h, &ParamVector::zeros(2)).is_err());
    }
}
