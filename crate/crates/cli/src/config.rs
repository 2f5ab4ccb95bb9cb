//! Run configuration: a TOML file whose omitted keys take their defaults. The
//! effective configuration (defaults filled in) is what gets snapshotted.

use std::path::{Path, PathBuf};

use acdc_core::experiment::ExperimentConfig;
use acdc_core::sde::{Method, Schedule, SolverConfig};
use acdc_core::theory::InpaintingToy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let s = Schedule::default();
        Self {
            beta_min: s.beta_min(),
            beta_max: s.beta_max(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    /// Random mixture pairs for the KL check, alternating 1D and 2D.
    pub kl_pairs: usize,
    pub kl_mc_samples: usize,
    pub kl_grid: Vec<f64>,
    /// Allowed KL increase between grid points, in MC standard errors.
    pub kl_tolerance_se: f64,
    pub t_grid: Vec<f64>,
    pub trials: usize,
    pub solver: SolverConfig,
    /// Bound checks use a symmetric 2-mode mixture at `±separation·1`.
    pub dim: usize,
    pub separation: f64,
    pub variance: f64,
    pub clip_samples: usize,
    pub eta_samples: usize,
    /// Condition shift per unit condition distance in the conditional check.
    pub lipschitz_k: f64,
    pub mismatch_distance: f64,
    pub inpainting: InpaintingToy,
}

fn unit_grid(lo: usize, hi: usize) -> Vec<f64> {
    (lo..=hi).map(|i| i as f64 / 10.0).collect()
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            kl_pairs: 20,
            kl_mc_samples: 4000,
            kl_grid: unit_grid(0, 10),
            kl_tolerance_se: 2.0,
            t_grid: unit_grid(1, 9),
            trials: 500,
            solver: SolverConfig {
                n_steps: 100,
                method: Method::Euler,
                stochastic: false,
            },
            dim: 2,
            separation: 1.0,
            variance: 0.1,
            clip_samples: 5000,
            eta_samples: 100_000,
            lipschitz_k: 0.5,
            mismatch_distance: 2.0,
            inpainting: InpaintingToy::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Pixel upscaling of frames in the report grids.
    pub upscale: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { upscale: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory. Without it (and without `--out`) runs go to
    /// `$ACDC_OUT/run-<id>`, or `runs/run-<id>` when the variable is unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub schedule: ScheduleConfig,
    pub experiment: ExperimentConfig,
    pub theory: TheoryConfig,
    pub report: ReportConfig,
}

fn config_err(section: &str) -> impl Fn(acdc_core::Error) -> CliError + '_ {
    move |e| {
        let msg = e.to_string();
        let msg = msg.strip_prefix("invalid argument: ").unwrap_or(&msg).to_string();
        CliError::Config(format!("[{section}] {msg}"))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.schedule.beta_min, self.schedule.beta_max).map_err(config_err("schedule"))
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        let e = &self.experiment;
        e.story.validate().map_err(config_err("experiment.story"))?;
        e.correction.validate().map_err(config_err("experiment.correction"))?;
        e.generation.sampler.validate().map_err(config_err("experiment.generation.sampler"))?;
        e.video.frames.validate().map_err(config_err("experiment.video.frames"))?;
        e.validate().map_err(config_err("experiment"))?;
        e.diffusion.train.validate().map_err(config_err("experiment.diffusion.train"))?;
        if e.codebook.size < 2 {
            return Err(CliError::Config("[experiment.codebook] size must be at least 2".into()));
        }
        let t = &self.theory;
        let in_unit = |v: &[f64]| v.iter().all(|x| (0.0..=1.0).contains(x)) && v.windows(2).all(|w| w[0] < w[1]);
        if t.kl_grid.is_empty() || !in_unit(&t.kl_grid) {
            return Err(CliError::Config("[theory] kl_grid must be ascending within [0, 1]".into()));
        }
        if t.t_grid.is_empty() || !in_unit(&t.t_grid) {
            return Err(CliError::Config("[theory] t_grid must be ascending within [0, 1]".into()));
        }
        if t.trials == 0 || t.kl_mc_samples == 0 || t.clip_samples == 0 || t.eta_samples == 0 || t.dim == 0 {
            return Err(CliError::Config("[theory] trial and sample counts must be positive".into()));
        }
        if !(t.variance > 0.0) || t.lipschitz_k < 0.0 || t.mismatch_distance < 0.0 {
            return Err(CliError::Config("[theory] variance must be positive, K and distance non-negative".into()));
        }
        if self.report.upscale == 0 {
            return Err(CliError::Config("[report] upscale must be positive".into()));
        }
        Ok(())
    }

    /// Hash of everything that determines the corpus.
    pub fn corpus_hash(&self) -> String {
        let e = &self.experiment;
        digest(&(self.seed, &e.story, e.n_stories, e.video.n_videos, e.video.frames.n_frames))
    }

    /// Hash of everything that determines the fitted models.
    pub fn training_hash(&self) -> String {
        let e = &self.experiment;
        digest(&(
            self.corpus_hash(),
            self.schedule,
            &e.codebook,
            e.arm,
            &e.diffusion,
            e.video.frames.window,
        ))
    }

    /// Identifier of the run directory: runs sharing corpus and models share it.
    pub fn run_id(&self) -> String {
        self.training_hash()[..16].to_string()
    }
}

fn digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config values serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}
