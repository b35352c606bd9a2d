//! Result files: results.json, trace.csv, matrices/*.csv and manifest.json.

use std::fs;
use std::path::{Path, PathBuf};

use factrfm::symlinalg::write_matrix_csv;
use factrfm::{Error, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{Command, Experiment};
use crate::run::Outcome;

/// Git-style object hash (`blob <len>\0<bytes>`), with SHA-256 as the digest.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn to_pretty(v: &Value) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn write(dir: &Path, rel: &Path, contents: &[u8], written: &mut Vec<(PathBuf, String)>) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, contents)?;
    written.push((rel.to_path_buf(), content_hash(contents)));
    Ok(())
}

fn input_hashes(experiment: &Experiment) -> Result<Vec<Value>> {
    experiment
        .input_paths()
        .iter()
        .map(|p| {
            let bytes = fs::read(p)?;
            Ok(json!({ "path": p, "hash": content_hash(&bytes) }))
        })
        .collect()
}

pub fn write_outcome(experiment: &Experiment, outcome: &Outcome) -> Result<()> {
    let dir = experiment.out_dir();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    write(dir, Path::new("results.json"), to_pretty(&outcome.results)?.as_bytes(), &mut written)?;
    write(dir, Path::new("trace.csv"), outcome.trace_csv.as_bytes(), &mut written)?;
    fs::create_dir_all(dir.join("matrices"))?;
    for (name, m) in &outcome.matrices {
        let rel = PathBuf::from("matrices").join(format!("{name}.csv"));
        write_matrix_csv(dir.join(&rel), m)?;
        let bytes = fs::read(dir.join(&rel))?;
        written.push((rel, content_hash(&bytes)));
    }
    for (rel, text) in &outcome.extra {
        write(dir, rel, text.as_bytes(), &mut written)?;
    }
    write_manifest(experiment, &written)
}

fn write_manifest(experiment: &Experiment, written: &[(PathBuf, String)]) -> Result<()> {
    let resolved = experiment.to_json();
    let outputs: serde_json::Map<String, Value> = written
        .iter()
        .map(|(p, h)| (p.to_string_lossy().replace('\\', "/"), Value::String(h.clone())))
        .collect();
    let manifest = json!({
        "tool": "factrfm",
        "version": env!("CARGO_PKG_VERSION"),
        "command": experiment.command().name(),
        "seed": experiment.seed(),
        "resolvedConfig": resolved,
        "configHash": content_hash(serde_json::to_string(&resolved)?.as_bytes()),
        "inputs": input_hashes(experiment)?,
        "outputs": outputs,
    });
    fs::write(experiment.out_dir().join("manifest.json"), to_pretty(&manifest)?)?;
    Ok(())
}

/// results.json for a failed run, carrying a machine-readable error code.
pub fn write_error(dir: &Path, command: Command, err: &Error) -> Result<()> {
    let mut error = json!({ "code": err.code(), "message": err.to_string() });
    if let Error::Diverged(d) = err {
        error["step"] = json!(d.step);
        error["lossCurve"] = json!(d.loss_curve);
        if let Some(trace) = &d.rfm_trace {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("trace.csv"), trace.to_csv())?;
        }
    }
    let results = json!({ "command": command.name(), "status": "error", "error": error });
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.json"), to_pretty(&results)?)?;
    Ok(())
}
