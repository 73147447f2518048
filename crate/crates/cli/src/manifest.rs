//! `<command>.manifest.json`: what a stage read, what it wrote and how.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use attend::pipeline::ExperimentConfig;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Files under `path` (or `path` itself) in name order.
fn files_of(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut out: Vec<PathBuf> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        out.retain(|p| p.is_file() && !p.to_string_lossy().ends_with(".manifest.json"));
        out.sort();
        Ok(out)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

pub struct Manifest {
    command: String,
    started: Instant,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    counts: Map<String, Value>,
}

impl Manifest {
    pub fn start(command: &str) -> Manifest {
        Manifest {
            command: command.to_string(),
            started: Instant::now(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            counts: Map::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        for f in files_of(path)? {
            self.inputs.insert(f.display().to_string(), sha256_file(&f)?);
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        for f in files_of(path)? {
            self.outputs.insert(f.display().to_string(), sha256_file(&f)?);
        }
        Ok(())
    }

    pub fn count(&mut self, name: &str, value: impl Into<Value>) {
        self.counts.insert(name.to_string(), value.into());
    }

    pub fn write(self, out_dir: &Path, config: &ExperimentConfig) -> Result<PathBuf> {
        let settings: Map<String, Value> = config
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), Value::String(v)))
            .collect();
        let doc = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": config.seed,
            "config": settings,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "counts": self.counts,
            "wall_clock_s": self.started.elapsed().as_secs_f64(),
        });
        let path = out_dir.join(format!("{}.manifest.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(path)
    }
}
