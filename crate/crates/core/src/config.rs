//! TOML run configuration.
//!
//! Every section and key is optional; omitted keys take the defaults listed
//! on each field. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::EdgeMode;
use crate::error::{Error, Result};
use crate::losses::{FakeLossForm, LossWeights};
use crate::metrics::EvalProtocol;
use crate::nn::{DiscriminatorConfig, FeatureExtractor, FeaturePlan, GeneratorConfig, DESK_PLAN, VGG19_PLAN};
use crate::optim::{AdamConfig, LrSchedule};
use crate::tensor::Scalar;
use crate::train::{LossConfig, TrainRun, TrainStage};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub features: FeatureConfig,
    pub loss: LossSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalProtocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Include the feature loss in the GAN stage. Default true.
    pub enabled: bool,
    /// `"vgg19"`, `"desk"`, or an explicit plan such as `"16,16,M,32"`.
    /// Default `"vgg19"`.
    pub plan: String,
    /// Checkpoint file holding `features.N.weight`/`features.N.bias`
    /// tensors. Without it the extractor is randomly initialised from `seed`.
    pub weights: Option<PathBuf>,
    /// Default 0.
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            enabled: true,
            plan: "vgg19".into(),
            weights: None,
            seed: 0,
        }
    }
}

impl FeatureConfig {
    pub fn resolved_plan(&self) -> Result<FeaturePlan> {
        let text = match self.plan.as_str() {
            "vgg19" => VGG19_PLAN,
            "desk" => DESK_PLAN,
            other => other,
        };
        text.parse()
    }

    /// The extractor, or `None` when disabled.
    pub fn build<T: Scalar>(&self) -> Result<Option<FeatureExtractor<T>>> {
        if !self.enabled {
            return Ok(None);
        }
        let plan = self.resolved_plan()?;
        let fx = match &self.weights {
            Some(path) => FeatureExtractor::from_weights(&plan, &Checkpoint::read(path)?.tensors::<T>()?)?,
            None => FeatureExtractor::random(&plan, self.seed)?,
        };
        Ok(Some(fx))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// Pixel-loss weight. Default 10.
    pub lambda: f64,
    /// Adversarial-loss weight. Default 5e-3.
    pub eta: f64,
    /// Use `mean(log delta_fake) - 1` as the discriminator's fake term
    /// instead of `-mean(log(1 - delta_fake))`. Default false.
    pub fake_literal_paper: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection {
            lambda: w.lambda,
            eta: w.eta,
            fake_literal_paper: false,
        }
    }
}

impl LossSection {
    pub fn to_loss_config(&self) -> Result<LossConfig> {
        let weights = LossWeights {
            lambda: self.lambda,
            eta: self.eta,
        };
        weights.validate()?;
        Ok(LossConfig {
            weights,
            fake_form: if self.fake_literal_paper {
                FakeLossForm::Literal
            } else {
                FakeLossForm::Standard
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// `"psnr"` or `"gan"`. Default `"psnr"`.
    pub stage: TrainStage,
    /// Number of steps. Required by `train`; no default.
    pub steps: Option<u64>,
    /// Default 16.
    pub batch_size: usize,
    /// Steps between checkpoints; 0 disables. Default 5000.
    pub checkpoint_every: u64,
    /// Seeds initialisation and data sampling. Default 0.
    pub seed: u64,
    /// Default `"f32"`.
    pub precision: Precision,
    /// Discriminator updates per generator update. Default 1.
    pub d_updates: usize,
    /// Default `"runs"`.
    pub out_dir: PathBuf,
    /// Replaces the initial learning rate of the stage's schedule.
    pub lr: Option<f64>,
    /// Replaces the stage's schedule entirely.
    pub schedule: Option<LrSchedule>,
    /// Default beta1 0.9, beta2 0.99, eps 1e-8.
    pub adam: AdamConfig,
    /// Generator checkpoint to start from (GAN stage: the PSNR-stage result).
    pub init_checkpoint: Option<PathBuf>,
    /// Check update isolation between generator and discriminator each
    /// GAN-stage iteration. Default false.
    pub audit: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let run = TrainRun::new(TrainStage::Psnr, 0, "runs");
        TrainSection {
            stage: run.stage,
            steps: None,
            batch_size: run.batch_size,
            checkpoint_every: run.checkpoint_every,
            seed: run.seed,
            precision: Precision::F32,
            d_updates: run.d_updates,
            out_dir: run.out_dir,
            lr: None,
            schedule: None,
            adam: run.adam,
            init_checkpoint: None,
            audit: false,
        }
    }
}

impl TrainSection {
    pub fn schedule(&self) -> Result<LrSchedule> {
        if self.schedule.is_some() && self.lr.is_some() {
            return Err(Error::Config("set either train.lr or train.schedule, not both".into()));
        }
        let mut schedule = self.schedule.clone().unwrap_or_else(|| self.stage.default_schedule());
        if let Some(lr) = self.lr {
            match &mut schedule {
                LrSchedule::PsnrStage { initial, .. } | LrSchedule::GanStage { initial, .. } => *initial = lr,
                LrSchedule::Constant { lr: c } => *c = lr,
            }
        }
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn to_run(&self) -> Result<TrainRun> {
        let steps = self
            .steps
            .ok_or_else(|| Error::Config("train.steps must be set".into()))?;
        let run = TrainRun {
            stage: self.stage,
            steps,
            batch_size: self.batch_size,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            schedule: self.schedule()?,
            adam: self.adam,
            d_updates: self.d_updates,
            audit: self.audit,
        };
        run.validate()?;
        Ok(run)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory of HR training PNGs. Required by `train`.
    pub hr_dir: Option<PathBuf>,
    /// HR patch side. Must be divisible by the model scale. Default 512.
    pub patch: usize,
    /// Random flips and rotations. Default true.
    pub augment: bool,
    /// Bicubic edge handling, `"replicate"` or `"symmetric"`. Default
    /// `"replicate"`.
    pub edge: EdgeMode,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            hr_dir: None,
            patch: 512,
            augment: true,
            edge: EdgeMode::Replicate,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Loads `path`, or returns the defaults when `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Config::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.to_loss_config()?;
        self.features.resolved_plan()?;
        self.train.schedule()?;
        if self.data.patch == 0 || !self.data.patch.is_multiple_of(self.model.scale) {
            return Err(Error::Config(format!(
                "data.patch {} must be a positive multiple of model.scale {}",
                self.data.patch, self.model.scale
            )));
        }
        if self.train.batch_size == 0 || self.train.d_updates == 0 {
            return Err(Error::Config(
                "train.batch_size and train.d_updates must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// The effective configuration with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
