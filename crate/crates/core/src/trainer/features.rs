//! Stage 0: the perceptual feature network (identity and hair-template
//! heads) and the identity embedder, both trained by classification.

use std::path::Path;

use serde::{Deserialize, Serialize};
use shapegene_tensor::{Adam, Tensor};

use super::{check_finite, data, load_stage_checkpoint, Dataset, Schedule, StageTrainer, StepOutcome, TrainConfig};
use crate::checkpoint::CheckpointBundle;
use crate::error::{Error, Result};
use crate::lossbank::LossReport;
use crate::netzoo::{FeatureNet, IdentityNet, NetConfig};
use crate::synthgen::{Split, HAIR_TEMPLATES};

const EVAL_CHUNK: usize = 16;

#[derive(Serialize, Deserialize)]
struct FeatureState {
    schedule: Schedule,
    best_hair_error: Option<f64>,
    best_nn_error: Option<f64>,
}

pub struct FeatureTrainer {
    cfg: TrainConfig,
    train: Dataset,
    val: Dataset,
    phi: FeatureNet<f32>,
    idnet: IdentityNet<f32>,
    opt_phi: Adam<f32>,
    opt_id: Adam<f32>,
    best_phi: FeatureNet<f32>,
    best_idnet: IdentityNet<f32>,
    state: FeatureState,
}

/// Best feature network of a stage-0 checkpoint.
pub fn load_feature_net(path: &Path, cfg: &NetConfig) -> Result<FeatureNet<f32>> {
    let ckpt = load_stage_checkpoint(path, cfg, 0)?;
    let mut phi = FeatureNet::new(cfg, 0)?;
    ckpt.load_network("best.phi", &mut phi)?;
    Ok(phi)
}

/// Best identity embedder of a stage-0 checkpoint.
pub fn load_identity_net(path: &Path, cfg: &NetConfig) -> Result<IdentityNet<f32>> {
    let ckpt = load_stage_checkpoint(path, cfg, 0)?;
    let mut net = IdentityNet::new(cfg, 0)?;
    ckpt.load_network("best.idnet", &mut net)?;
    Ok(net)
}

impl FeatureTrainer {
    pub fn new(cfg: &TrainConfig, resume: Option<&CheckpointBundle>) -> Result<Self> {
        cfg.expect_stage(0)?;
        let train = Dataset::load(&cfg.manifest, Split::Train, cfg.train_limit)?;
        let val = Dataset::load(&cfg.manifest, Split::Val, cfg.val_limit)?;
        if let Some(s) = train.samples.iter().find(|s| s.identity as usize >= cfg.net.identity_classes) {
            return Err(Error::Config(format!(
                "identity {} exceeds net.identity_classes = {}",
                s.identity, cfg.net.identity_classes
            )));
        }
        let mut phi = FeatureNet::new(&cfg.net, cfg.seed)?;
        let mut idnet = IdentityNet::new(&cfg.net, cfg.seed)?;
        let mut t = FeatureTrainer {
            cfg: cfg.clone(),
            best_phi: phi.clone(),
            best_idnet: idnet.clone(),
            opt_phi: cfg.optimizer.adam(),
            opt_id: cfg.optimizer.adam(),
            state: FeatureState {
                schedule: Schedule::new(train.len(), cfg.batch_size, cfg.epochs(), cfg.max_iterations, cfg.seed)?,
                best_hair_error: None,
                best_nn_error: None,
            },
            train,
            val,
            phi: phi.clone(),
            idnet: idnet.clone(),
        };
        if let Some(ckpt) = resume {
            ckpt.load_network("phi", &mut phi)?;
            ckpt.load_network("idnet", &mut idnet)?;
            t.phi = phi;
            t.idnet = idnet;
            ckpt.load_network("best.phi", &mut t.best_phi)?;
            ckpt.load_network("best.idnet", &mut t.best_idnet)?;
            t.opt_phi = ckpt.optimizer("adam.phi")?;
            t.opt_id = ckpt.optimizer("adam.idnet")?;
            t.state = serde_json::from_value(ckpt.train_state.clone())?;
            t.state.schedule.resume_with(cfg, t.train.len())?;
        }
        Ok(t)
    }

    pub fn feature_net(&self) -> &FeatureNet<f32> {
        &self.best_phi
    }

    pub fn identity_net(&self) -> &IdentityNet<f32> {
        &self.best_idnet
    }
}

/// Index of the nearest other row (Euclidean) for each row.
fn nearest_neighbors(rows: &[Vec<f64>]) -> Vec<usize> {
    (0..rows.len())
        .map(|i| {
            let mut best = (f64::INFINITY, i);
            for (j, r) in rows.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d: f64 = rows[i].iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

pub fn unit_rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let n = t.shape()[0];
    let d = t.len() / n.max(1);
    t.data()
        .chunks(d)
        .map(|r| {
            let norm = r.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            r.iter().map(|&v| if norm > 0.0 { f64::from(v) / norm } else { 0.0 }).collect()
        })
        .collect()
}

impl StageTrainer for FeatureTrainer {
    fn stage(&self) -> u8 {
        0
    }

    fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn schedule(&self) -> &Schedule {
        &self.state.schedule
    }

    fn step(&mut self) -> Result<StepOutcome> {
        let (idx, epoch_end) = self.state.schedule.next_batch();
        let mut images = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = &self.train.samples[i];
            images.push(self.cfg.augment.apply(&s.image, &s.label, &mut self.state.schedule.rng)?.0);
        }
        let refs: Vec<_> = images.iter().collect();
        let x = data::image_batch(&refs)?;
        let ids: Vec<usize> = idx.iter().map(|&i| self.train.samples[i].identity as usize).collect();
        let hairs: Vec<usize> = idx.iter().map(|&i| usize::from(self.train.samples[i].hair_template)).collect();

        let out = self.phi.forward_all(&x, true)?;
        let l_id = out.identity_logits.cross_entropy(&ids)?;
        let l_hair = out.hair_logits.cross_entropy(&hairs)?;
        let l_phi = l_id.add(&l_hair)?;
        let l_embed = self.idnet.logits(&x, true)?.cross_entropy(&ids)?;
        let report = LossReport::weighted(&[
            ("phi_identity", f64::from(l_id.item()), 1.0),
            ("phi_hair", f64::from(l_hair.item()), 1.0),
            ("idnet", f64::from(l_embed.item()), 1.0),
        ]);
        check_finite(0, self.state.schedule.iteration, &report)?;
        let g = l_phi.backward()?;
        self.opt_phi.step(&mut self.phi, &g);
        let g = l_embed.backward()?;
        self.opt_id.step(&mut self.idnet, &g);
        Ok(StepOutcome { report, epoch_end })
    }

    fn adopt_current(&mut self) {
        self.best_phi = self.phi.clone();
        self.best_idnet = self.idnet.clone();
        self.state.best_hair_error = None;
        self.state.best_nn_error = None;
    }

    fn validate(&mut self) -> Result<f64> {
        if self.val.len() < 2 {
            self.best_phi = self.phi.clone();
            self.best_idnet = self.idnet.clone();
            return Ok(0.0);
        }
        let mut hair_wrong = 0usize;
        let mut embeddings = Vec::new();
        for chunk in self.val.samples.chunks(EVAL_CHUNK) {
            let refs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
            let x = data::image_batch(&refs)?;
            let logits = self.phi.forward_all(&x, false)?.hair_logits;
            for (s, row) in chunk.iter().zip(logits.data().chunks(HAIR_TEMPLATES)) {
                let arg = row
                    .iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b })
                    .0;
                hair_wrong += usize::from(arg != usize::from(s.hair_template));
            }
            embeddings.extend(unit_rows(&self.idnet.embed(&x, false)?));
        }
        let hair_error = hair_wrong as f64 / self.val.len() as f64;
        let nn = nearest_neighbors(&embeddings);
        let nn_wrong = nn
            .iter()
            .enumerate()
            .filter(|&(i, &j)| self.val.samples[i].identity != self.val.samples[j].identity)
            .count();
        let nn_error = nn_wrong as f64 / self.val.len() as f64;
        if self.state.best_hair_error.is_none_or(|b| hair_error <= b) {
            self.state.best_hair_error = Some(hair_error);
            self.best_phi = self.phi.clone();
        }
        if self.state.best_nn_error.is_none_or(|b| nn_error <= b) {
            self.state.best_nn_error = Some(nn_error);
            self.best_idnet = self.idnet.clone();
        }
        log::info!("features: hair error {hair_error:.4}, identity 1-nn error {nn_error:.4}");
        Ok(hair_error + nn_error)
    }

    fn checkpoint(&self) -> Result<CheckpointBundle> {
        let mut c = CheckpointBundle::new(&self.cfg.net, "features");
        c.put_network("phi", &self.phi);
        c.put_network("idnet", &self.idnet);
        c.put_network("best.phi", &self.best_phi);
        c.put_network("best.idnet", &self.best_idnet);
        c.put_optimizer("adam.phi", &self.opt_phi);
        c.put_optimizer("adam.idnet", &self.opt_id);
        c.train_state = serde_json::to_value(&self.state)?;
        Ok(c)
    }
}
