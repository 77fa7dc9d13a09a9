//! File output: trace/decomposition CSVs, manifests, atomic writes.
//!
//! Floats are rendered with `{:e}`, which round-trips exactly, so a re-read
//! trace reproduces the in-memory values bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::delaysim::{IterRecord, RunTrace};
use crate::probe::ErrorDecomposition;
use crate::Result;

/// Write via a temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = PathBuf::from(dir);
    let base = path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "out".to_string());
    tmp.push(format!(".{base}.tmp"));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

pub fn trace_csv_bytes(trace: &RunTrace) -> Vec<u8> {
    let mut out = String::new();
    out.push_str("t,grad_norm_sq,objective,eta_t,n_t,max_staleness,comms_total\n");
    for r in &trace.records {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{},{},{}\n",
            r.t, r.grad_norm_sq, r.objective, r.eta_t, r.n_t, r.max_staleness, r.comms_total
        ));
    }
    out.into_bytes()
}

/// Parse a trace CSV back into records (reporter is not exported and reads
/// back as 0).
pub fn parse_trace_csv(bytes: &[u8]) -> Result<Vec<IterRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes);
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let field = |i: usize| -> Result<&str> {
            row.get(i)
                .ok_or_else(|| crate::Error::Parse(format!("missing column {i}")))
        };
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| crate::Error::Parse(format!("bad float {s}: {e}")))
        };
        let parse_u = |s: &str| -> Result<u64> {
            s.parse::<u64>()
                .map_err(|e| crate::Error::Parse(format!("bad integer {s}: {e}")))
        };
        records.push(IterRecord {
            t: parse_u(field(0)?)?,
            grad_norm_sq: parse_f(field(1)?)?,
            objective: parse_f(field(2)?)?,
            eta_t: parse_f(field(3)?)?,
            n_t: parse_u(field(4)?)? as usize,
            max_staleness: parse_u(field(5)?)?,
            comms_total: parse_u(field(6)?)?,
            reporter: 0,
        });
    }
    Ok(records)
}

pub fn decomposition_csv_bytes(series: &[ErrorDecomposition]) -> Vec<u8> {
    let mut out = String::new();
    out.push_str("t,a2,b2,c2,mse,grad_norm_sq,mean_drift\n");
    for d in series {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            d.t,
            d.norm_a2,
            d.norm_b2,
            d.norm_c2,
            d.mse,
            d.grad_norm_sq,
            d.mean_drift()
        ));
    }
    out.into_bytes()
}
