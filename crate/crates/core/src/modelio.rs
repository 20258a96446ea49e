//! On-disk container for trained parameters: a single-line JSON header
//! followed by a raw little-endian IEEE-754 double block. The header carries
//! the kind tag, a format version, and kind-specific metadata (architecture,
//! normalization bounds, seed, dataset hash); the block carries the flat
//! parameter vector. Round-trips are bit-exact.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const FORMAT_NAME: &str = "reachkit-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: usize,
}

pub fn save_params(
    path: &Path,
    kind: &str,
    meta: &serde_json::Value,
    params: &[f64],
) -> Result<()> {
    let header = ModelHeader {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        meta: meta.clone(),
        params: params.len(),
    };
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, &header).map_err(json_err)?;
    w.write_all(b"\n")?;
    for v in params {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(ModelHeader, Vec<f64>)> {
    let mut r = BufReader::new(std::fs::File::open(path).map_err(|e| {
        Error::Format(format!("cannot open model file {}: {e}", path.display()))
    })?);
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(Error::Format(format!(
                "model file {}: truncated header",
                path.display()
            )));
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 1 << 20 {
            return Err(Error::Format("model header exceeds 1 MiB".into()));
        }
    }
    let header: ModelHeader = serde_json::from_slice(&line)
        .map_err(|e| Error::Format(format!("model header: {e}")))?;
    if header.format != FORMAT_NAME {
        return Err(Error::Format(format!(
            "not a {FORMAT_NAME} file (format = {:?})",
            header.format
        )));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported model format version {} (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != header.params * 8 {
        return Err(Error::Format(format!(
            "model file {}: parameter block is {} bytes, header promises {}",
            path.display(),
            raw.len(),
            header.params * 8
        )));
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, params))
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Format(format!("json: {e}"))
}

/// SHA-256 of a file, lowercase hex. Used for dataset fingerprints in model
/// metadata and for determinism checks on artifacts.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = BufReader::new(std::fs::File::open(path)?);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
