//! Named reference trajectories on disk, one `<name>.traj` file each.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use rover_core::gnc::ReferenceTrajectory;

pub const EXTENSION: &str = "traj";

/// Names are 1–64 characters of `[A-Za-z0-9_-]`, so they are always safe
/// file stems.
pub fn valid_name(name: &str) -> bool {
    (1..=64).contains(&name.len())
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectoryStore {
    dir: PathBuf,
}

impl TrajectoryStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> Result<PathBuf> {
        if !valid_name(name) {
            bail!("invalid trajectory name `{name}`");
        }
        Ok(self.dir.join(format!("{name}.{EXTENSION}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.path(name).map(|p| p.is_file()).unwrap_or(false)
    }

    pub fn save(&self, name: &str, traj: &ReferenceTrajectory) -> Result<PathBuf> {
        let path = self.path(name)?;
        std::fs::create_dir_all(&self.dir)
            .with_context(|| format!("creating {}", self.dir.display()))?;
        std::fs::write(&path, traj.to_text()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn load(&self, name: &str) -> Result<ReferenceTrajectory> {
        let path = self.path(name)?;
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("no trajectory `{name}` at {}", path.display()))?;
        Ok(ReferenceTrajectory::from_text(&text).with_context(|| format!("in {}", path.display()))?)
    }

    /// Stored names, sorted.
    pub fn list(&self) -> Vec<String> {
        let mut out: Vec<String> = std::fs::read_dir(&self.dir)
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| {
                let p = e.path();
                (p.extension()? == EXTENSION).then(|| p.file_stem()?.to_str().map(str::to_owned))?
            })
            .filter(|n| valid_name(n))
            .collect();
        out.sort();
        out
    }
}
