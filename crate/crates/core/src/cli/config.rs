//! Experiment files: a training config plus output, export and sweep
//! settings, in TOML with dotted section names.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::nn::NetConfig;
use crate::trainer::{EvalConfig, ReflowConfig, TrainConfig, TrainParams};

fn d_dir() -> PathBuf {
    PathBuf::from("runs/svfm")
}
fn d_sample_n() -> usize {
    1000
}
fn d_sample_nfe() -> usize {
    1
}
fn d_export_n() -> usize {
    64
}

/// Where a run writes, and what it exports besides metrics and checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "d_dir")]
    pub dir: PathBuf,
    /// Write a trajectory CSV next to the samples after training.
    #[serde(default)]
    pub export_trajectories: bool,
    /// Samples drawn after training (0 disables).
    #[serde(default = "d_sample_n")]
    pub sample_n: usize,
    #[serde(default = "d_sample_nfe")]
    pub sample_nfe: usize,
    /// Trajectories kept in the export.
    #[serde(default = "d_export_n")]
    pub export_n: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

fn d_alphas() -> Vec<f64> {
    vec![1.0, 10.0, 100.0]
}
fn d_betas() -> Vec<f64> {
    vec![1e-3, 1e-2, 1e-1]
}

/// The (α, β) grid. Every cell trains in svfm mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "d_alphas")]
    pub alpha: Vec<f64>,
    #[serde(default = "d_betas")]
    pub beta: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub train: TrainParams,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub reflow: ReflowConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates; a missing or unreadable file is a config error
    /// naming the path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            train: self.train.clone(),
            dataset: self.dataset.clone(),
            net: self.net.clone(),
            eval: self.eval.clone(),
            reflow: self.reflow.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        let o = &self.output;
        if o.sample_n > 0 && o.sample_nfe == 0 {
            return Err(Error::Config("output.sample_nfe must be ≥ 1".into()));
        }
        if o.export_trajectories && o.export_n == 0 {
            return Err(Error::Config("output.export_n must be ≥ 1 when exporting".into()));
        }
        let s = &self.sweep;
        for &a in &s.alpha {
            if !(a.is_finite() && a >= 0.0) {
                return Err(Error::Config(format!("sweep.alpha entry {a} must be finite and ≥ 0")));
            }
        }
        for &b in &s.beta {
            if !(b.is_finite() && b >= 0.0) {
                return Err(Error::Config(format!("sweep.beta entry {b} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    /// Sweep needs both grids nonempty.
    pub fn validate_sweep(&self) -> Result<()> {
        if self.sweep.alpha.is_empty() || self.sweep.beta.is_empty() {
            return Err(Error::Config("sweep.alpha and sweep.beta must be nonempty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Mode;

    const SAMPLE: &str = r#"
[train]
mode = "svfm"
alpha = 10.0
beta = 0.01
steps = 200
seed = 7

[dataset]
name = "gmm_1d"
means = [-1.5, 2.5]

[net]
hidden = [32, 32]

[output]
dir = "out/run"
export_trajectories = true

[sweep]
alpha = [1.0, 10.0]
"#;

    #[test]
    fn parses_sections_and_defaults() {
        let c = ExperimentConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.train.mode, Mode::Svfm);
        assert_eq!(c.train.steps, 200);
        assert_eq!(c.train.batch_size, 512);
        assert_eq!(c.net.hidden, vec![32, 32]);
        assert_eq!(c.sweep.beta, vec![1e-3, 1e-2, 1e-1]);
        assert!(matches!(c.dataset, DatasetSpec::Gmm1d { ref means, .. } if means == &[-1.5, 2.5]));
    }

    #[test]
    fn round_trip_is_identity() {
        let c = ExperimentConfig::parse(SAMPLE).unwrap();
        let again = ExperimentConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(c, again);
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&d.to_toml()).unwrap(), d);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "[train]\nsteps = 0\n",
            "[train]\nunknown = 1\n",
            "[bogus]\nx = 1\n",
            "[sweep]\nalpha = [-1.0]\n",
            "[train]\nmode = \"nope\"\n",
        ] {
            assert!(matches!(ExperimentConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
        let empty = ExperimentConfig::parse("[sweep]\nalpha = []\n").unwrap();
        assert!(matches!(empty.validate_sweep(), Err(Error::Config(_))));
    }

    #[test]
    fn missing_file_names_path() {
        let err = ExperimentConfig::load(Path::new("/nonexistent/exp.toml")).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("/nonexistent/exp.toml")));
    }
}
