//! Model checkpoints and matrix files.
//!
//! A checkpoint is one text header line followed by the parameters as
//! little-endian `f32`, tensor after tensor in storage order:
//! `token_embedding`, `position_embedding`, then for every layer
//! `attn_norm, query, key, value, output, mlp_norm, mlp_fc, mlp_proj`,
//! then `final_norm` and `unembedding`. Matrices are row-major.
//!
//! ```text
//! memedit-checkpoint v1 vocab_size=256 d_model=64 n_layers=4 n_heads=2 d_ff=256 max_seq=64 seed=0 edit_history_len=0 params=N digest=<sha256> config=<sha256>
//! ```
//!
//! Matrix files use the same layout with `f64` payloads.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use memedit_core::editors::CovarianceStats;
use memedit_core::linalg::Matrix;
use memedit_core::model::{ArchSpec, ModelState};

use crate::error::{FormatError, Result};
use crate::header::Header;

pub const CHECKPOINT_KIND: &str = "memedit-checkpoint";
pub const MATRIX_KIND: &str = "memedit-matrix";

/// A loaded checkpoint and the digest of the config that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub config_digest: String,
}

fn write_file(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(FormatError::io(dir))?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(FormatError::io(path))?);
    writeln!(f, "{}", header.line()).map_err(FormatError::io(path))?;
    f.write_all(payload).map_err(FormatError::io(path))?;
    f.flush().map_err(FormatError::io(path))
}

fn read_file(path: &Path, kind: &str) -> Result<(Header, Vec<u8>)> {
    let mut r = BufReader::new(std::fs::File::open(path).map_err(FormatError::io(path))?);
    let mut line = String::new();
    r.read_line(&mut line).map_err(FormatError::io(path))?;
    let header = Header::parse(&line, kind, path)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(FormatError::io(path))?;
    Ok((header, payload))
}

pub fn write_checkpoint(path: &Path, model: &ModelState, config_digest: &str) -> Result<()> {
    let a = model.arch();
    let header = Header::new(CHECKPOINT_KIND)
        .with("vocab_size", a.vocab_size)
        .with("d_model", a.d_model)
        .with("n_layers", a.n_layers)
        .with("n_heads", a.n_heads)
        .with("d_ff", a.d_ff)
        .with("max_seq", a.max_seq)
        .with("seed", model.seed)
        .with("edit_history_len", model.edit_history_len)
        .with("params", model.params().len())
        .with("digest", model.digest())
        .with("config", config_digest);
    let payload: Vec<u8> = model.params().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(path, &header, &payload)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (h, payload) = read_file(path, CHECKPOINT_KIND)?;
    let arch = ArchSpec {
        vocab_size: h.require("vocab_size", path)?,
        d_model: h.require("d_model", path)?,
        n_layers: h.require("n_layers", path)?,
        n_heads: h.require("n_heads", path)?,
        d_ff: h.require("d_ff", path)?,
        max_seq: h.require("max_seq", path)?,
    };
    let n: usize = h.require("params", path)?;
    if payload.len() != 4 * n {
        return Err(FormatError::malformed(path, 2, format!("payload has {} bytes, expected {}", payload.len(), 4 * n)));
    }
    let params: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let model = ModelState::from_params(arch, params, h.require("seed", path)?, h.require("edit_history_len", path)?)
        .map_err(FormatError::invalid(path))?;
    let expected: String = h.require("digest", path)?;
    let actual = model.digest();
    if expected != actual {
        return Err(FormatError::DigestMismatch { path: path.to_path_buf(), expected, actual });
    }
    Ok(Checkpoint { model, config_digest: h.require("config", path)? })
}

/// Covariance statistics keyed by the model they were estimated from.
pub fn write_covariance(path: &Path, stats: &CovarianceStats, model_digest: &str, config_digest: &str) -> Result<()> {
    let header = Header::new(MATRIX_KIND)
        .with("rows", stats.c.rows())
        .with("cols", stats.c.cols())
        .with("layer", stats.layer)
        .with("ridge", stats.ridge)
        .with("samples", stats.sample_count)
        .with("model", model_digest)
        .with("config", config_digest);
    let payload: Vec<u8> = stats.c.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(path, &header, &payload)
}

/// Reads covariance statistics together with the digest of the model they
/// belong to.
pub fn read_covariance(path: &Path) -> Result<(CovarianceStats, String)> {
    let (h, payload) = read_file(path, MATRIX_KIND)?;
    let rows: usize = h.require("rows", path)?;
    let cols: usize = h.require("cols", path)?;
    if payload.len() != 8 * rows * cols {
        return Err(FormatError::malformed(path, 2, format!("payload has {} bytes, expected {}", payload.len(), 8 * rows * cols)));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let stats = CovarianceStats::new(
        h.require("layer", path)?,
        Matrix::from_row_slice(rows, cols, &data),
        h.require("samples", path)?,
        h.require("ridge", path)?,
    )
    .map_err(FormatError::invalid(path))?;
    Ok((stats, h.require("model", path)?))
}
