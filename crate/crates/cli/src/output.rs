use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use tsse_core::{rng, Result};

use crate::config::RunConfig;

/// Stream tags whose derived seeds are recorded in the manifest.
const SEED_TAGS: [&str; 8] = [
    "data", "noise", "init", "shuffle", "dropout", "bad-data", "extreme", "finetune",
];

#[derive(Serialize)]
struct OutputEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_sha256: String,
    seed: u64,
    sub_seeds: Vec<(&'static str, u64)>,
    config: String,
    outputs: Vec<OutputEntry>,
}

/// Output directory bookkeeping for one command.
pub struct Run {
    command: &'static str,
    config: RunConfig,
    outputs: Vec<PathBuf>,
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl Run {
    pub fn start(command: &'static str, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(&config.out_dir)?;
        Ok(Run {
            command,
            config: config.clone(),
            outputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    /// Records a file written outside the helpers below.
    pub fn record(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, serde_json::to_string_pretty(value)?)?;
        self.record(path.clone());
        Ok(path)
    }

    pub fn write_csv(
        &mut self,
        name: &str,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> Result<PathBuf> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        self.record(path.clone());
        Ok(path)
    }

    /// Writes `<command>.manifest.json` next to the outputs.
    pub fn finish(self) -> Result<()> {
        let outputs = self
            .outputs
            .iter()
            .filter(|p| p.is_file())
            .map(|p| {
                Ok(OutputEntry {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let seed = self.config.seed;
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            config_sha256: self.config.hash(),
            seed,
            sub_seeds: SEED_TAGS
                .iter()
                .map(|&t| (t, rng::sub_seed(seed, t)))
                .collect(),
            config: self.config.to_toml(),
            outputs,
        };
        let path = self
            .config
            .out_dir
            .join(format!("{}.manifest.json", self.command));
        fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

pub fn fmt(v: f64) -> String {
    format!("{v}")
}
