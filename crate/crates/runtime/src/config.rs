//! Workbench configuration document.
//!
//! One TOML file carries the vehicle model, noise model, controller gains
//! and runtime settings. Every table rejects unknown keys so a typo fails
//! loudly instead of silently falling back to a default. `ROVER_PORT` and
//! `ROVER_DATA_DIR` override the corresponding runtime keys.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use nalgebra::{Matrix3, Matrix6};
use serde::{Deserialize, Serialize};

use rover_core::dynamics::{DynamicParams, DEFAULT_DT, MAX_DT};
use rover_core::gnc::{Feedback, PdGains, DEFAULT_ABORT_BOUND, DEFAULT_BLEND};
use rover_core::noise::NoiseModel;

pub const PORT_ENV: &str = "ROVER_PORT";
pub const DATA_DIR_ENV: &str = "ROVER_DATA_DIR";

pub const DEFAULT_PORT: u16 = 9030;
pub const DEFAULT_DEAD_MAN: f64 = 0.5;
pub const DEFAULT_STATE_RATE: f64 = 20.0;
pub const DEFAULT_QUEUE_CAPACITY: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackKind {
    Ekf,
    Truth,
}

/// `Q` and `R` either inline (row-major) or from a noise document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeSection {
    pub port: u16,
    pub data_dir: PathBuf,
    /// Seconds without a fresh teleop command before the held one is dropped.
    pub dead_man: f64,
    /// StateUpdate broadcast rate, Hz.
    pub state_rate: f64,
    pub queue_capacity: usize,
    pub feedback: FeedbackKind,
    pub abort_bound: f64,
    pub blend: f64,
    pub looped: bool,
    pub process_noise: bool,
}

impl Default for RuntimeSection {
    fn default() -> Self {
        Self {
            port: DEFAULT_PORT,
            data_dir: PathBuf::from("data"),
            dead_man: DEFAULT_DEAD_MAN,
            state_rate: DEFAULT_STATE_RATE,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            feedback: FeedbackKind::Ekf,
            abort_bound: DEFAULT_ABORT_BOUND,
            blend: DEFAULT_BLEND,
            looped: false,
            process_noise: true,
        }
    }
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

fn default_params() -> DynamicParams {
    DynamicParams::reference_vehicle()
}

fn default_gains() -> PdGains {
    PdGains {
        alpha: 50.0,
        beta: 5.0,
        gamma: 5.0,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    #[serde(default = "default_dt")]
    dt: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_params")]
    params: DynamicParams,
    #[serde(default)]
    noise: NoiseSection,
    #[serde(default = "default_gains")]
    gains: PdGains,
    #[serde(default)]
    runtime: RuntimeSection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkbenchConfig {
    pub dt: f64,
    pub seed: u64,
    pub params: DynamicParams,
    pub noise: NoiseModel,
    pub gains: PdGains,
    pub runtime: RuntimeSection,
}

impl Default for WorkbenchConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            seed: 0,
            params: default_params(),
            noise: NoiseModel::zero(),
            gains: default_gains(),
            runtime: RuntimeSection::default(),
        }
    }
}

fn matrix_from<const N: usize>(name: &str, v: &[f64]) -> Result<nalgebra::SMatrix<f64, N, N>> {
    ensure!(v.len() == N * N, "noise.{name} needs {} entries, got {}", N * N, v.len());
    Ok(nalgebra::SMatrix::<f64, N, N>::from_row_slice(v))
}

impl WorkbenchConfig {
    /// Parses a config document; relative paths resolve against `base`.
    pub fn from_toml(s: &str, base: &Path) -> Result<Self> {
        let doc: ConfigDoc = toml::from_str(s).context("invalid config")?;
        let noise = match (&doc.noise.file, &doc.noise.q, &doc.noise.r) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                bail!("noise: give either `file` or inline `q`/`r`, not both")
            }
            (Some(f), None, None) => {
                let path = base.join(f);
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("reading noise document {}", path.display()))?;
                NoiseModel::from_text(&text)?
            }
            (None, q, r) => {
                let q = q.as_deref().map(|q| matrix_from::<3>("q", q)).transpose()?;
                let r = r.as_deref().map(|r| matrix_from::<6>("r", r)).transpose()?;
                NoiseModel::new(q.unwrap_or_else(Matrix3::zeros), r.unwrap_or_else(Matrix6::zeros))?
            }
        };
        let mut runtime = doc.runtime;
        if runtime.data_dir.is_relative() {
            runtime.data_dir = base.join(&runtime.data_dir);
        }
        let cfg = Self {
            dt: doc.dt,
            seed: doc.seed,
            params: doc.params,
            noise,
            gains: doc.gains,
            runtime,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults when `None`) and applies the
    /// environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let base = p.parent().unwrap_or(Path::new("."));
                Self::from_toml(&text, base).with_context(|| format!("in {}", p.display()))?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(p) = lookup(PORT_ENV) {
            self.runtime.port = p
                .trim()
                .parse()
                .with_context(|| format!("{PORT_ENV}={p} is not a port number"))?;
        }
        if let Some(d) = lookup(DATA_DIR_ENV) {
            self.runtime.data_dir = PathBuf::from(d);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.dt > 0.0 && self.dt <= MAX_DT, "dt = {} outside (0, {MAX_DT}]", self.dt);
        self.params.validate()?;
        self.noise.validate()?;
        self.gains.validate()?;
        let rt = &self.runtime;
        ensure!(rt.dead_man > 0.0, "runtime.dead_man must be > 0");
        ensure!(
            rt.state_rate > 0.0 && rt.state_rate <= 1.0 / self.dt + 1e-9,
            "runtime.state_rate must be in (0, 1/dt]"
        );
        ensure!(rt.queue_capacity > 0, "runtime.queue_capacity must be > 0");
        ensure!(rt.abort_bound > 0.0, "runtime.abort_bound must be > 0");
        ensure!(rt.blend >= 0.0, "runtime.blend must be >= 0");
        Ok(())
    }

    /// The filter starts from an exact rest state, so its first innovation
    /// covariance is `Q + R_accel`; a noise model that leaves it singular
    /// (the all-zero default, say) cannot drive closed-loop feedback.
    pub fn feedback(&self) -> Result<Feedback> {
        Ok(match self.runtime.feedback {
            FeedbackKind::Truth => Feedback::Truth,
            FeedbackKind::Ekf => {
                let s = self.noise.q_meas + self.noise.accel_block();
                let min = s.symmetric_eigenvalues().min();
                ensure!(
                    min > 1e-12,
                    "runtime.feedback = \"ekf\" needs a noise model with Q + R[acc] positive definite \
                     (smallest eigenvalue {min:.3e}); configure [noise] or set runtime.feedback = \"truth\""
                );
                Feedback::Ekf {
                    params: self.params.clone(),
                    noise: self.noise.clone(),
                }
            }
        })
    }

    /// Ticks between StateUpdate broadcasts.
    pub fn state_every(&self) -> u64 {
        ((1.0 / (self.runtime.state_rate * self.dt)).round() as u64).max(1)
    }

    pub fn trajectory_dir(&self) -> PathBuf {
        self.runtime.data_dir.join("trajectories")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.runtime.data_dir.join("runs")
    }

    /// Serialises back to a document with the noise inline.
    pub fn to_toml(&self) -> String {
        let doc = ConfigDoc {
            dt: self.dt,
            seed: self.seed,
            params: self.params.clone(),
            noise: NoiseSection {
                q: Some(self.noise.q_meas.transpose().iter().copied().collect()),
                r: Some(self.noise.r_model.transpose().iter().copied().collect()),
                file: None,
            },
            gains: self.gains,
            runtime: self.runtime.clone(),
        };
        toml::to_string(&doc).expect("config always serializes")
    }
}

/// Gains document written by `tune`: a `[gains]` table that can be pasted
/// into a config or passed to `run --gains`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsDoc {
    pub gains: PdGains,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<WorkbenchConfig> {
        WorkbenchConfig::from_toml(s, Path::new("/tmp/base"))
    }

    #[test]
    fn empty_document_gives_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.params, DynamicParams::reference_vehicle());
        assert_eq!(c.dt, 0.01);
        assert_eq!(c.runtime.port, DEFAULT_PORT);
        assert_eq!(c.runtime.data_dir, PathBuf::from("/tmp/base/data"));
        assert_eq!(c.state_every(), 5);
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        assert!(parse("dtt = 0.01").is_err());
        assert!(parse("[runtime]\nprot = 1").is_err());
        assert!(parse("[gains]\nalpha = 1.0\nbeta = 1.0\ngamma = 1.0\ndelta = 1.0").is_err());
        assert!(parse("[params]\nm = 1.0\ninertia = 1.0\ndl = [0,0,0]\ndc = [0,0,0]\nT = [1,0,0,0,1,0,0,0,1]\nI = 2.0").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(parse("dt = 0.5").is_err());
        assert!(parse("[noise]\nq = [1, 0, 0]").is_err());
        assert!(parse("[noise]\nq = [-1, 0, 0, 0, 0, 0, 0, 0, 0]").is_err());
        assert!(parse("[runtime]\ndead_man = 0.0").is_err());
        assert!(parse("[runtime]\nstate_rate = 500.0").is_err());
    }

    #[test]
    fn round_trip() {
        let mut c = WorkbenchConfig::default();
        c.noise.q_meas = Matrix3::from_diagonal(&nalgebra::Vector3::new(2.852, 0.0, 0.008));
        c.noise.r_model[(3, 3)] = 0.01;
        c.noise.r_model[(0, 0)] = 0.02;
        c.noise.r_model[(0, 3)] = 0.001;
        c.noise.r_model[(3, 0)] = 0.001;
        c.runtime.data_dir = PathBuf::from("/abs/data");
        let back = parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn env_overrides_port_and_data_dir() {
        let mut c = WorkbenchConfig::default();
        c.apply_env(|k| match k {
            PORT_ENV => Some("4321".into()),
            DATA_DIR_ENV => Some("/srv/rover".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.runtime.port, 4321);
        assert_eq!(c.runtime.data_dir, PathBuf::from("/srv/rover"));
        assert!(c.apply_env(|_| Some("not-a-port".into())).is_err());
    }
}
