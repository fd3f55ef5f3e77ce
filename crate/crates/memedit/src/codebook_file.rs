//! Codebook files: a header line, then one comma-separated entry per line,
//! `fact_id,epsilon,key...,value...`.
//!
//! ```text
//! # memedit-codebook v1 layer=3 key_dim=256 value_dim=64 config=<sha256>
//! 17,1,0.25,...
//! ```
//!
//! Numbers use the shortest representation that reads back exactly.

use std::fmt::Write as _;
use std::path::Path;

use memedit_core::editors::{Codebook, CodebookEntry};

use crate::error::{FormatError, Result};
use crate::header::Header;

pub const CODEBOOK_KIND: &str = "memedit-codebook";

pub fn codebook_to_string(cb: &Codebook, config_digest: &str) -> String {
    let h = Header::new(CODEBOOK_KIND)
        .with("layer", cb.layer())
        .with("key_dim", cb.key_dim())
        .with("value_dim", cb.value_dim())
        .with("config", config_digest);
    let mut s = format!("# {}\n", h.line());
    for e in cb.entries() {
        let _ = write!(s, "{},{}", e.fact_id, e.radius);
        for v in e.key.iter().chain(&e.value) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn write_codebook(path: &Path, cb: &Codebook, config_digest: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(FormatError::io(dir))?;
    }
    std::fs::write(path, codebook_to_string(cb, config_digest)).map_err(FormatError::io(path))
}

/// Reads a codebook and the digest of the config that produced it.
pub fn read_codebook(path: &Path) -> Result<(Codebook, String)> {
    let text = std::fs::read_to_string(path).map_err(FormatError::io(path))?;
    parse_codebook(&text, path)
}

pub fn parse_codebook(text: &str, path: &Path) -> Result<(Codebook, String)> {
    let mut lines = text.lines().enumerate();
    let first = lines.next().map(|(_, l)| l).unwrap_or("");
    let h = Header::parse(first.strip_prefix("# ").unwrap_or(first), CODEBOOK_KIND, path)?;
    let (kd, vd): (usize, usize) = (h.require("key_dim", path)?, h.require("value_dim", path)?);
    let mut cb = Codebook::new(h.require("layer", path)?, kd, vd);
    for (n, line) in lines {
        let n = n + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 2 + kd + vd {
            return Err(FormatError::malformed(path, n, format!("expected {} fields, got {}", 2 + kd + vd, f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| FormatError::malformed(path, n, format!("invalid number {s:?}")));
        let nums = f[2..].iter().map(|s| num(s)).collect::<Result<Vec<f64>>>()?;
        let entry = CodebookEntry {
            fact_id: f[0].parse().map_err(|_| FormatError::malformed(path, n, format!("invalid fact id {:?}", f[0])))?,
            radius: num(f[1])?,
            key: nums[..kd].to_vec(),
            value: nums[kd..].to_vec(),
        };
        cb.push(entry).map_err(FormatError::invalid(path))?;
    }
    Ok((cb, h.require("config", path)?))
}
