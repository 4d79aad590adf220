//! Training stages. Stage 0 trains the feature and identity networks used
//! by the perceptual loss and the metrics; stages 1 to 3 train the local
//! parsers, the overall decoder and the cyclic remix/transform networks.
//!
//! Every stage is driven by the same loop: a [`Schedule`] hands out shuffled
//! sample indices, the stage performs one iteration (all discriminators,
//! then all generators), and at epoch ends the stage validates, keeps its
//! best snapshot and writes a checkpoint that resumes bit-exactly.

mod cyclic;
mod data;
mod features;
mod overall;
mod parsers;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shapegene_tensor::{Adam, AdamSettings, Module};

use crate::checkpoint::CheckpointBundle;
use crate::error::{Error, IoContext, Result};
use crate::lossbank::{LossLog, LossReport, LossWeights};
use crate::netzoo::NetConfig;

pub use cyclic::{load_cyclic, CyclicTrainer};
pub use data::{
    foreground_weights, image_batch, label_batch, mask_batch, partial_label_batch, quantize_batch,
    remove_background_tensor, Affine, AugmentConfig, Dataset, Sample,
};
pub use features::{load_feature_net, load_identity_net, unit_rows, FeatureTrainer};
pub use overall::{load_overall, OverallTrainer};
pub use parsers::{load_parsers, ParserTrainer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let s = AdamSettings::default();
        OptimizerConfig {
            lr: s.lr,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> Adam<f32> {
        Adam::new(AdamSettings {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        })
    }
}

/// Which terms of the three-term parser/decoder objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSetting {
    L1,
    L1Vgg,
    #[default]
    Full,
}

impl std::str::FromStr for LossSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossSetting::L1),
            "l1_vgg" => Ok(LossSetting::L1Vgg),
            "full" => Ok(LossSetting::Full),
            _ => Err(Error::Config(format!("unknown loss setting {s:?} (l1, l1_vgg, full)"))),
        }
    }
}

/// One training run, usually read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// 0 feature networks, 1 local parsers, 2 overall decoder, 3 cyclic.
    pub stage: u8,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    /// Stage-0 checkpoint (perceptual feature network).
    #[serde(default)]
    pub features: Option<PathBuf>,
    /// Stage-1 checkpoint.
    #[serde(default)]
    pub parsers: Option<PathBuf>,
    /// Stage-2 checkpoint.
    #[serde(default)]
    pub overall: Option<PathBuf>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Defaults per stage: 10, 100, 50, 15.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub max_iterations: Option<u64>,
    /// Validate every this many epochs.
    #[serde(default = "default_validate_every")]
    pub validate_every: usize,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub val_limit: Option<usize>,
    #[serde(default)]
    pub loss_setting: LossSetting,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
}

fn default_seed() -> u64 {
    1
}

fn default_batch() -> usize {
    1
}

fn default_validate_every() -> usize {
    1
}

impl TrainConfig {
    pub fn new(stage: u8, manifest: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        TrainConfig {
            stage,
            manifest: manifest.into(),
            out_dir: out_dir.into(),
            features: None,
            parsers: None,
            overall: None,
            seed: default_seed(),
            epochs: None,
            batch_size: default_batch(),
            max_iterations: None,
            validate_every: default_validate_every(),
            train_limit: None,
            val_limit: None,
            loss_setting: LossSetting::default(),
            net: NetConfig::default(),
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
        }
    }

    /// Parses a TOML config; relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.manifest);
        fix(&mut cfg.out_dir);
        for p in [&mut cfg.features, &mut cfg.parsers, &mut cfg.overall].into_iter().flatten() {
            fix(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage > 3 {
            return Err(Error::Config(format!("stage {} is not one of 0, 1, 2, 3", self.stage)));
        }
        if self.epochs == Some(0) {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::Config("batch_size and validate_every must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        self.net.validate()?;
        self.weights.validate()?;
        self.augment.validate()
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.stage {
            0 => 10,
            1 => 100,
            2 => 50,
            _ => 15,
        })
    }

    /// Weights with the terms disabled by the loss setting zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        match self.loss_setting {
            LossSetting::L1 => {
                w.vgg = 0.0;
                w.gan = 0.0;
            }
            LossSetting::L1Vgg => w.gan = 0.0,
            LossSetting::Full => {}
        }
        w
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.ckpt", stage_name(self.stage)))
    }

    pub fn log_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.log.ndjson", stage_name(self.stage)))
    }

    fn require(&self, path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        path.clone()
            .ok_or_else(|| Error::Config(format!("stage {} needs the {what} checkpoint path", self.stage)))
    }

    fn expect_stage(&self, stage: u8) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Config(format!("config is for stage {}, not {stage}", self.stage)));
        }
        Ok(())
    }
}

pub fn stage_name(stage: u8) -> &'static str {
    match stage {
        0 => "features",
        1 => "parsers",
        2 => "overall",
        _ => "cyclic",
    }
}

/// Shuffled epoch order and iteration counters. Each iteration consumes
/// `per_step` indices; a trailing remainder smaller than that is skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub len: usize,
    pub per_step: usize,
    pub epochs: usize,
    pub max_iterations: Option<u64>,
    pub epoch: usize,
    pub iteration: u64,
    order: Vec<usize>,
    cursor: usize,
    pub rng: ChaCha8Rng,
}

impl Schedule {
    pub fn new(len: usize, per_step: usize, epochs: usize, max_iterations: Option<u64>, seed: u64) -> Result<Self> {
        if per_step == 0 || len < per_step {
            return Err(Error::InvalidArgument(format!(
                "{len} training samples cannot fill an iteration of {per_step}"
            )));
        }
        Ok(Schedule {
            len,
            per_step,
            epochs,
            max_iterations,
            epoch: 0,
            iteration: 0,
            order: Vec::new(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Takes the run length from the current config after a resume; the
    /// data must be the same size as before.
    pub fn resume_with(&mut self, cfg: &TrainConfig, len: usize) -> Result<()> {
        if len != self.len {
            return Err(Error::Config(format!(
                "resumed schedule covers {} samples, the data has {len}",
                self.len
            )));
        }
        self.epochs = cfg.epochs();
        self.max_iterations = cfg.max_iterations;
        Ok(())
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.len / self.per_step
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.epochs || self.max_iterations.is_some_and(|m| self.iteration >= m)
    }

    /// Indices of the next iteration and whether it completes an epoch.
    pub fn next_batch(&mut self) -> (Vec<usize>, bool) {
        if self.order.is_empty() {
            self.order = (0..self.len).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + self.per_step].to_vec();
        self.cursor += self.per_step;
        self.iteration += 1;
        let epoch_end = self.cursor + self.per_step > self.len;
        if epoch_end {
            self.epoch += 1;
            self.order.clear();
            self.cursor = 0;
        }
        (batch, epoch_end)
    }
}

/// Outcome of one iteration.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub report: LossReport,
    pub epoch_end: bool,
}

/// A resumable training stage.
pub trait StageTrainer {
    fn stage(&self) -> u8;
    fn config(&self) -> &TrainConfig;
    fn schedule(&self) -> &Schedule;
    /// One iteration: every discriminator update, then every generator update.
    fn step(&mut self) -> Result<StepOutcome>;
    /// Runs validation, updates the best snapshot and returns the metric
    /// (lower is better).
    fn validate(&mut self) -> Result<f64>;
    /// Copies the current networks into the best snapshot without scoring
    /// them, so the next validation replaces them regardless of its metric.
    fn adopt_current(&mut self);
    /// Every network, optimizer and the train state.
    fn checkpoint(&self) -> Result<CheckpointBundle>;
}

/// Runs `trainer` to completion, logging every iteration and writing a
/// checkpoint after each validation and at the end.
///
/// Only epoch-end validations choose the best snapshot, so an interrupted
/// and resumed run selects the same one as an uninterrupted run. A run that
/// stops before its first validation keeps its current networks
/// provisionally.
pub fn run_stage<S: StageTrainer>(trainer: &mut S) -> Result<CheckpointBundle> {
    let cfg = trainer.config().clone();
    std::fs::create_dir_all(&cfg.out_dir).at(&cfg.out_dir)?;
    let mut log = LossLog::append(&cfg.log_path())?;
    let name = stage_name(trainer.stage());
    while !trainer.schedule().done() {
        let out = trainer.step()?;
        log.write(trainer.schedule().iteration, name, &out.report)?;
        if out.epoch_end && trainer.schedule().epoch.is_multiple_of(cfg.validate_every) {
            let metric = trainer.validate()?;
            log::info!("{name}: epoch {} validation {metric:.6}", trainer.schedule().epoch);
            trainer.checkpoint()?.save(&cfg.checkpoint_path())?;
        }
    }
    if trainer.schedule().epoch < cfg.validate_every {
        trainer.adopt_current();
    }
    let ckpt = trainer.checkpoint()?;
    ckpt.save(&cfg.checkpoint_path())?;
    Ok(ckpt)
}

/// Aborts on the first non-finite term.
pub(crate) fn check_finite(stage: u8, iteration: u64, report: &LossReport) -> Result<()> {
    if let Some(term) = report.non_finite_term() {
        return Err(Error::NonFinite(format!(
            "{} iteration {iteration}: loss term {term:?} is not finite",
            stage_name(stage)
        )));
    }
    Ok(())
}

/// Fails if a frozen module changed.
pub(crate) fn check_frozen<M: Module<f32> + ?Sized>(what: &str, module: &M, expected: &str) -> Result<()> {
    let found = crate::netzoo::param_digest(module);
    if found != expected {
        return Err(Error::Fingerprint {
            expected: format!("{what} {expected}"),
            found: format!("{what} {found}"),
        });
    }
    Ok(())
}

/// Loads a checkpoint for `cfg.net` and checks it belongs to `stage`.
pub(crate) fn load_stage_checkpoint(path: &Path, net: &NetConfig, stage: u8) -> Result<CheckpointBundle> {
    let ckpt = CheckpointBundle::load_for(path, net)?;
    if ckpt.stage != stage_name(stage) {
        return Err(Error::InvalidArgument(format!(
            "{} is a {} checkpoint, expected {}",
            path.display(),
            ckpt.stage,
            stage_name(stage)
        )));
    }
    Ok(ckpt)
}

/// Trains the stage named by `cfg.stage`, optionally resuming from a checkpoint.
pub fn train(cfg: &TrainConfig, resume: Option<&Path>) -> Result<CheckpointBundle> {
    cfg.validate()?;
    let resume = resume
        .map(|p| load_stage_checkpoint(p, &cfg.net, cfg.stage))
        .transpose()?;
    match cfg.stage {
        0 => run_stage(&mut FeatureTrainer::new(cfg, resume.as_ref())?),
        1 => run_stage(&mut ParserTrainer::new(cfg, resume.as_ref())?),
        2 => run_stage(&mut OverallTrainer::new(cfg, resume.as_ref())?),
        _ => run_stage(&mut CyclicTrainer::new(cfg, resume.as_ref())?),
    }
}

/// Trains `cfg` until its schedule is done, resuming from the checkpoint at
/// `cfg.checkpoint_path()` when one exists. A finished checkpoint is
/// returned as is.
pub fn train_to_completion(cfg: &TrainConfig) -> Result<CheckpointBundle> {
    let path = cfg.checkpoint_path();
    if !path.exists() {
        return train(cfg, None);
    }
    cfg.validate()?;
    let ckpt = load_stage_checkpoint(&path, &cfg.net, cfg.stage)?;
    let mut schedule: Schedule = serde_json::from_value(ckpt.train_state["schedule"].clone())?;
    let len = schedule.len;
    schedule.resume_with(cfg, len)?;
    if schedule.done() {
        return Ok(ckpt);
    }
    log::info!("{}: resuming at iteration {}", stage_name(cfg.stage), schedule.iteration);
    train(cfg, Some(&path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_covers_each_epoch_without_repeats() {
        let mut s = Schedule::new(7, 2, 2, None, 4).unwrap();
        assert_eq!(s.iterations_per_epoch(), 3);
        let mut first = Vec::new();
        for k in 0..3 {
            let (b, end) = s.next_batch();
            assert_eq!(end, k == 2);
            first.extend(b);
        }
        first.sort();
        first.dedup();
        assert_eq!(first.len(), 6);
        while !s.done() {
            s.next_batch();
        }
        assert_eq!((s.iteration, s.epoch), (6, 2));
        let mut capped = Schedule::new(7, 2, 100, Some(5), 4).unwrap();
        while !capped.done() {
            capped.next_batch();
        }
        assert_eq!(capped.iteration, 5);
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = TrainConfig::new(1, "m.json", "out");
        cfg.validate().unwrap();
        assert_eq!(cfg.epochs(), 100);
        let mut bad = cfg.clone();
        bad.optimizer.lr = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.stage = 4;
        assert!(bad.validate().is_err());
        let text = cfg.to_toml().unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
