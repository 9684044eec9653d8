use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::{DateTime, Utc};
use mdsl_core::orchestrator::ExperimentConfig;
use serde::Serialize;
use tempfile::NamedTempFile;

use crate::{Failure, OutputArgs};

pub fn resolve_dir(args: &OutputArgs, config: &Path) -> PathBuf {
    args.out.clone().unwrap_or_else(|| {
        let stem = config.file_stem().map_or_else(|| "experiment".into(), |s| s.to_os_string());
        args.output_root.join(stem)
    })
}

/// Files staged next to their destinations and moved into place together
/// by [`OutputSet::commit`]. Dropping an uncommitted set removes the
/// staged files, so a failed command leaves no partial outputs.
pub struct OutputSet {
    dir: PathBuf,
    staged: Vec<(NamedTempFile, PathBuf)>,
}

impl OutputSet {
    pub fn new(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))
            .map_err(Failure::Input)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            staged: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn add(&mut self, relative: &str, contents: &[u8]) -> Result<(), Failure> {
        let dest = self.dir.join(relative);
        let parent = dest.parent().unwrap_or(&self.dir).to_path_buf();
        let stage = || -> anyhow::Result<NamedTempFile> {
            fs::create_dir_all(&parent)?;
            let mut tmp = NamedTempFile::new_in(&parent)?;
            tmp.write_all(contents)?;
            tmp.flush()?;
            Ok(tmp)
        };
        let tmp = stage()
            .with_context(|| format!("writing {}", dest.display()))
            .map_err(Failure::Input)?;
        self.staged.push((tmp, dest));
        Ok(())
    }

    pub fn add_json<T: Serialize>(&mut self, relative: &str, value: &T) -> Result<(), Failure> {
        let mut text = serde_json::to_vec_pretty(value)
            .context("serializing output")
            .map_err(Failure::Input)?;
        text.push(b'\n');
        self.add(relative, &text)
    }

    /// Moves every staged file into place; returns the final paths.
    pub fn commit(self) -> Result<Vec<PathBuf>, Failure> {
        let mut done = Vec::with_capacity(self.staged.len());
        for (tmp, dest) in self.staged {
            tmp.persist(&dest)
                .with_context(|| format!("moving output into {}", dest.display()))
                .map_err(Failure::Input)?;
            done.push(dest);
        }
        Ok(done)
    }
}

#[derive(Debug, Serialize)]
pub struct Seeds {
    pub experiment: u64,
    pub partition: u64,
    pub swarm: u64,
    pub eval: u64,
    pub data: Option<u64>,
}

impl Seeds {
    pub fn of(config: &ExperimentConfig) -> Self {
        use mdsl_core::orchestrator::DataSource;
        Self {
            experiment: config.seed,
            partition: config.partition.seed,
            swarm: config.swarm.seed,
            eval: config.data.eval_seed,
            data: match config.data.source {
                DataSource::Blobs { seed, .. } => Some(seed),
                DataSource::Idx { .. } => None,
            },
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub version: String,
    pub outputs: Vec<PathBuf>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl RunManifest {
    /// Commits `outputs` and then writes `manifest.json` listing them.
    pub fn finish(
        command: &str,
        config: ExperimentConfig,
        started_at: DateTime<Utc>,
        outputs: OutputSet,
    ) -> Result<PathBuf, Failure> {
        let dir = outputs.dir().to_path_buf();
        let written = outputs.commit()?;
        let manifest = RunManifest {
            command: command.to_string(),
            seeds: Seeds::of(&config),
            config,
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: written,
            started_at,
            finished_at: Utc::now(),
        };
        let mut set = OutputSet::new(&dir)?;
        set.add_json("manifest.json", &manifest)?;
        let path = set.commit()?.remove(0);
        Ok(path)
    }
}
