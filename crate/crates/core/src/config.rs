//! TOML run configuration: model hyperparameters, training schedule,
//! dataset sources and evaluation horizons, all driven by one seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_sequences, make_windows, skeleton_preset, synth_kinematic, SynthConfig, WindowSet};
use crate::error::{Error, Result};
use crate::graph::SkeletonGraph;
use crate::model::{ForecastModel, ModelConfig};
use crate::train::TrainConfig;

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}
fn default_stride() -> usize {
    1
}
fn default_horizons() -> Vec<usize> {
    vec![2, 10]
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Skeleton preset name.
    pub skeleton: String,
    /// `MGPS` file with training sequences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    /// `MGPS` file for evaluation; defaults to the training file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Generated periodic chain motion instead of files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    /// Independent motions (sequence `i` uses seed `seed + i`).
    pub sequences: usize,
    /// Training frames per sequence.
    pub frames: usize,
    /// Held-out frames per sequence, generated right after the training frames.
    pub test_frames: usize,
    pub amplitude: f64,
    pub period: f64,
    #[serde(default)]
    pub noise: f64,
    /// Defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    /// Add a zero-velocity row to the report.
    #[serde(default = "default_true")]
    pub baseline: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            horizons: default_horizons(),
            baseline: true,
        }
    }
}

impl RunConfig {
    /// Parses and validates; relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| text[..s.start].lines().count().max(1))
                .map_or_else(|| "config".to_owned(), |l| format!("line {l}"));
            Error::config(field, e.message().to_owned())
        })?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::from_toml_str(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(p) = self.data.train.as_mut() {
            fix(p);
        }
        if let Some(p) = self.data.test.as_mut() {
            fix(p);
        }
    }

    /// Field-level checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        let skeleton = self.skeleton()?;
        self.model.validate(skeleton.joint_count())?;
        self.train_config().validate()?;
        if self.data.stride == 0 {
            return Err(Error::config("data.stride", "must be at least 1"));
        }
        match (&self.data.train, &self.data.synthetic) {
            (None, None) => {
                return Err(Error::config(
                    "data.train",
                    "missing dataset path (or provide a [data.synthetic] table)",
                ))
            }
            (Some(_), Some(_)) => {
                return Err(Error::config("data.synthetic", "cannot be combined with data.train"))
            }
            (None, Some(s)) => {
                if !self.data.skeleton.starts_with("chain_") {
                    return Err(Error::config("data.skeleton", "synthetic data needs a chain_<n> skeleton"));
                }
                if s.sequences == 0 {
                    return Err(Error::config("data.synthetic.sequences", "must be at least 1"));
                }
                if !(s.period > 0.0) {
                    return Err(Error::config("data.synthetic.period", "must be positive"));
                }
            }
            (Some(_), None) => {}
        }
        let k = self.model.output_frames;
        if let Some(&h) = self.eval.horizons.iter().find(|&&h| h == 0 || h > k) {
            return Err(Error::config(
                "eval.horizons",
                format!("horizon {h} outside 1..={k}"),
            ));
        }
        Ok(())
    }

    pub fn skeleton(&self) -> Result<SkeletonGraph> {
        skeleton_preset(&self.data.skeleton).map_err(|e| Error::config("data.skeleton", e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn build_model(&self) -> Result<ForecastModel> {
        ForecastModel::new(self.skeleton()?, self.model.clone(), self.seed)
    }

    /// Training and evaluation windows.
    pub fn datasets(&self) -> Result<(WindowSet, WindowSet)> {
        let skeleton = self.skeleton()?;
        let (t, k, stride) = (self.model.input_frames, self.model.output_frames, self.data.stride);
        let (train, test) = if let Some(s) = &self.data.synthetic {
            let base = s.seed.unwrap_or(self.seed);
            let gen = |i: usize, start: usize, frames: usize| {
                synth_kinematic(&SynthConfig {
                    joints: skeleton.joint_count(),
                    amplitude: s.amplitude,
                    period: s.period,
                    frames,
                    seed: base + i as u64,
                    noise: s.noise,
                    start_frame: start,
                })
            };
            let train = (0..s.sequences).map(|i| gen(i, 0, s.frames)).collect::<Result<Vec<_>>>()?;
            let test = (0..s.sequences)
                .map(|i| gen(i, s.frames, s.test_frames))
                .collect::<Result<Vec<_>>>()?;
            (train, test)
        } else {
            let path = self.data.train.as_ref().expect("validated");
            let train = load_sequences(path)?;
            let test = match &self.data.test {
                Some(p) => load_sequences(p)?,
                None => train.clone(),
            };
            (train, test)
        };
        Ok((
            make_windows(&train, &skeleton, t, k, stride)?,
            make_windows(&test, &skeleton, t, k, stride)?,
        ))
    }
}
