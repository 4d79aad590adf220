//! Stage 2: the overall decoder, trained on genes from the frozen
//! stage-1 encoders.

use std::path::Path;

use serde::{Deserialize, Serialize};
use shapegene_tensor::{Adam, Tensor};

use super::parsers::{disc_objective, load_parsers, maybe_feature_net, EVAL_CHUNK};
use super::{
    check_finite, check_frozen, data, load_stage_checkpoint, Dataset, Schedule, StageTrainer, StepOutcome,
    TrainConfig,
};
use crate::checkpoint::CheckpointBundle;
use crate::error::{Error, Result};
use crate::genecore::PartEncoders;
use crate::labelspace::Part;
use crate::lossbank::{self, LossReport, LossWeights};
use crate::netzoo::{param_digest, Decoder, FeatureNet, NetConfig, PartEncoder, PatchDisc};
use crate::synthgen::Split;

#[derive(Serialize, Deserialize)]
struct OverallState {
    schedule: Schedule,
    encoder_digest: String,
    best_l1: Option<f64>,
}

pub struct OverallTrainer {
    cfg: TrainConfig,
    weights: LossWeights,
    train: Dataset,
    val: Dataset,
    phi: Option<FeatureNet<f32>>,
    encoders: PartEncoders<f32>,
    decoder: Decoder<f32>,
    disc: PatchDisc<f32>,
    opt_dec: Adam<f32>,
    opt_disc: Adam<f32>,
    best_dec: Decoder<f32>,
    state: OverallState,
}

pub(crate) fn put_encoders(c: &mut CheckpointBundle, encoders: &PartEncoders<f32>) {
    for e in encoders.iter() {
        c.put_network(&format!("enc.{}", e.part().name()), e);
    }
}

pub(crate) fn get_encoders(c: &CheckpointBundle, cfg: &NetConfig) -> Result<PartEncoders<f32>> {
    let encoders = Part::ALL
        .iter()
        .map(|&p| {
            let mut e = PartEncoder::new(cfg, p, 0)?;
            c.load_network(&format!("enc.{}", p.name()), &mut e)?;
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    PartEncoders::from_vec(encoders)
}

/// Frozen encoders and the best overall decoder of a stage-2 checkpoint.
pub fn load_overall(path: &Path, cfg: &NetConfig) -> Result<(PartEncoders<f32>, Decoder<f32>)> {
    let ckpt = load_stage_checkpoint(path, cfg, 2)?;
    let encoders = get_encoders(&ckpt, cfg)?;
    let mut decoder = Decoder::overall(cfg, 0)?;
    ckpt.load_network("best.dec.overall", &mut decoder)?;
    Ok((encoders, decoder))
}

impl OverallTrainer {
    pub fn new(cfg: &TrainConfig, resume: Option<&CheckpointBundle>) -> Result<Self> {
        cfg.expect_stage(2)?;
        let weights = cfg.effective_weights();
        let train = Dataset::load(&cfg.manifest, Split::Train, cfg.train_limit)?;
        let val = Dataset::load(&cfg.manifest, Split::Val, cfg.val_limit)?;
        if train.resolution != cfg.net.resolution {
            return Err(Error::ResolutionMismatch(train.resolution, cfg.net.resolution));
        }
        let phi = maybe_feature_net(cfg, weights.vgg > 0.0)?;
        let encoders = match resume {
            Some(c) => get_encoders(c, &cfg.net)?,
            None => load_parsers(&cfg.require(&cfg.parsers, "parsers")?, &cfg.net)?.0,
        };
        let decoder = Decoder::overall(&cfg.net, cfg.seed)?;
        let mut t = OverallTrainer {
            cfg: cfg.clone(),
            weights,
            phi,
            best_dec: decoder.clone(),
            decoder,
            disc: PatchDisc::new(&cfg.net, "disc.whole", 6, cfg.seed)?,
            opt_dec: cfg.optimizer.adam(),
            opt_disc: cfg.optimizer.adam(),
            state: OverallState {
                schedule: Schedule::new(train.len(), cfg.batch_size, cfg.epochs(), cfg.max_iterations, cfg.seed)?,
                encoder_digest: param_digest(&encoders),
                best_l1: None,
            },
            encoders,
            train,
            val,
        };
        if let Some(c) = resume {
            c.load_network("dec.overall", &mut t.decoder)?;
            c.load_network("best.dec.overall", &mut t.best_dec)?;
            c.load_network("disc.whole", &mut t.disc)?;
            t.opt_dec = c.optimizer("adam.dec.overall")?;
            t.opt_disc = c.optimizer("adam.disc.whole")?;
            t.state = serde_json::from_value(c.train_state.clone())?;
            t.state.schedule.resume_with(cfg, t.train.len())?;
            check_frozen("encoders", &t.encoders, &t.state.encoder_digest)?;
        }
        Ok(t)
    }

    pub fn encoders(&self) -> &PartEncoders<f32> {
        &self.encoders
    }

    pub fn encoder_digest(&self) -> &str {
        &self.state.encoder_digest
    }

    pub fn best_decoder(&self) -> &Decoder<f32> {
        &self.best_dec
    }
}

impl StageTrainer for OverallTrainer {
    fn stage(&self) -> u8 {
        2
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
        let mut labels = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = &self.train.samples[i];
            let (x, y) = self.cfg.augment.apply(&s.image, &s.label, &mut self.state.schedule.rng)?;
            images.push(x);
            labels.push(y);
        }
        let x = data::image_batch(&images.iter().collect::<Vec<_>>())?;
        let y = data::label_batch(&labels.iter().collect::<Vec<_>>())?;
        let w = self.weights;
        let z = self.encoders.encode_batch(&x, false, None)?;
        let pred = self.decoder.forward(&z, true)?;

        let mut disc_value = 0.0;
        if w.gan > 0.0 {
            let real = Tensor::cat_dim1(&[&x, &y])?;
            let fake = Tensor::cat_dim1(&[&x, &pred.detach()])?;
            let (loss, value) = disc_objective(&self.disc, &real, &fake, w.gp, &mut self.state.schedule.rng)?;
            disc_value = value;
            let g = loss.backward()?;
            self.opt_disc.step(&mut self.disc, &g);
        }

        let l1 = lossbank::l1_loss(&pred, &y)?;
        let (mut vgg_value, mut gan_value) = (0.0, 0.0);
        let mut obj = l1.clone();
        if w.vgg > 0.0 {
            let phi = self.phi.as_ref().expect("loaded when vgg > 0");
            let vgg = lossbank::perceptual_loss(phi, &pred, &y)?;
            vgg_value = f64::from(vgg.item());
            obj = obj.add(&vgg.mul_scalar(w.vgg as f32))?;
        }
        if w.gan > 0.0 {
            let gan = lossbank::lsgan_g_loss(&self.disc.forward(&Tensor::cat_dim1(&[&x, &pred])?, false)?)?;
            gan_value = f64::from(gan.item());
            obj = obj.add(&gan.mul_scalar(w.gan as f32))?;
        }
        let report = LossReport::weighted(&[
            ("l1", f64::from(l1.item()), 1.0),
            ("vgg", vgg_value, w.vgg),
            ("gan", gan_value, w.gan),
            ("disc", disc_value, 0.0),
        ]);
        check_finite(2, self.state.schedule.iteration, &report)?;
        let g = obj.backward()?;
        self.opt_dec.step(&mut self.decoder, &g);
        Ok(StepOutcome { report, epoch_end })
    }

    fn validate(&mut self) -> Result<f64> {
        check_frozen("encoders", &self.encoders, &self.state.encoder_digest)?;
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in self.val.samples.chunks(EVAL_CHUNK) {
            let x = data::image_batch(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
            let y = data::label_batch(&chunk.iter().map(|s| &s.label).collect::<Vec<_>>())?;
            let pred = self.decoder.forward(&self.encoders.encode_batch(&x, false, None)?, false)?;
            sum += f64::from(lossbank::l1_loss(&pred, &y)?.item()) * chunk.len() as f64;
            n += chunk.len();
        }
        let l1 = if n > 0 { sum / n as f64 } else { 0.0 };
        if self.state.best_l1.is_none_or(|b| l1 <= b) {
            self.state.best_l1 = Some(l1);
            self.best_dec = self.decoder.clone();
        }
        Ok(l1)
    }

    fn adopt_current(&mut self) {
        self.best_dec = self.decoder.clone();
        self.state.best_l1 = None;
    }

    fn checkpoint(&self) -> Result<CheckpointBundle> {
        check_frozen("encoders", &self.encoders, &self.state.encoder_digest)?;
        let mut c = CheckpointBundle::new(&self.cfg.net, "overall");
        put_encoders(&mut c, &self.encoders);
        c.put_network("dec.overall", &self.decoder);
        c.put_network("best.dec.overall", &self.best_dec);
        c.put_network("disc.whole", &self.disc);
        c.put_optimizer("adam.dec.overall", &self.opt_dec);
        c.put_optimizer("adam.disc.whole", &self.opt_disc);
        c.train_state = serde_json::to_value(&self.state)?;
        Ok(c)
    }
}
