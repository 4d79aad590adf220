//! Stage 1: one encoder/decoder/discriminator triple per part, trained to
//! regress the part's partial label map.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use shapegene_tensor::{Adam, Tensor};

use super::features::load_feature_net;
use super::{check_finite, data, load_stage_checkpoint, Dataset, Schedule, StageTrainer, StepOutcome, TrainConfig};
use crate::checkpoint::CheckpointBundle;
use crate::error::{Error, Result};
use crate::genecore::PartEncoders;
use crate::labelspace::{Part, PART_COUNT};
use crate::lossbank::{self, LossReport, LossWeights};
use crate::netzoo::{Decoder, FeatureNet, NetConfig, PartEncoder, PatchDisc};
use crate::synthgen::Split;

pub(crate) const EVAL_CHUNK: usize = 16;

#[derive(Serialize, Deserialize)]
struct ParserState {
    schedule: Schedule,
    best_l1: Vec<Option<f64>>,
}

pub struct ParserTrainer {
    cfg: TrainConfig,
    weights: LossWeights,
    train: Dataset,
    val: Dataset,
    phi: Option<FeatureNet<f32>>,
    encoders: Vec<PartEncoder<f32>>,
    decoders: Vec<Decoder<f32>>,
    discs: Vec<PatchDisc<f32>>,
    opt_enc: Vec<Adam<f32>>,
    opt_dec: Vec<Adam<f32>>,
    opt_disc: Vec<Adam<f32>>,
    best_enc: Vec<PartEncoder<f32>>,
    best_dec: Vec<Decoder<f32>>,
    state: ParserState,
}

/// Best encoders and part decoders of a stage-1 checkpoint.
pub fn load_parsers(path: &Path, cfg: &NetConfig) -> Result<(PartEncoders<f32>, Vec<Decoder<f32>>)> {
    let ckpt = load_stage_checkpoint(path, cfg, 1)?;
    let mut encoders = Vec::with_capacity(PART_COUNT);
    let mut decoders = Vec::with_capacity(PART_COUNT);
    for p in Part::ALL {
        let mut e = PartEncoder::new(cfg, p, 0)?;
        ckpt.load_network(&format!("best.enc.{}", p.name()), &mut e)?;
        encoders.push(e);
        let mut d = Decoder::part(cfg, p, 0)?;
        ckpt.load_network(&format!("best.dec.{}", p.name()), &mut d)?;
        decoders.push(d);
    }
    Ok((PartEncoders::from_vec(encoders)?, decoders))
}

/// The perceptual network when the weights need one.
pub(crate) fn maybe_feature_net(cfg: &TrainConfig, needed: bool) -> Result<Option<FeatureNet<f32>>> {
    if !needed {
        return Ok(None);
    }
    let path = cfg.require(&cfg.features, "features (perceptual network)")?;
    Ok(Some(load_feature_net(&path, &cfg.net)?))
}

/// `lsgan_d(D(real), D(fake)) + w_gp * penalty` for one discriminator
/// update; returns the differentiable loss and its reported value.
pub(crate) fn disc_objective<R: Rng>(
    disc: &PatchDisc<f32>,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
    w_gp: f64,
    rng: &mut R,
) -> Result<(Tensor<f32>, f64)> {
    let adv = lossbank::lsgan_d_loss(&disc.forward(real, true)?, &disc.forward(fake, true)?)?;
    let mut reported = f64::from(adv.item());
    let mut loss = adv;
    if w_gp > 0.0 {
        let mix: Vec<f64> = (0..real.shape()[0]).map(|_| rng.random::<f64>()).collect();
        let gp = lossbank::gradient_penalty(|x, track| disc.forward(x, track), real, fake, &mix)?;
        reported += w_gp * gp.value;
        loss = loss.add(&gp.surrogate.mul_scalar(w_gp as f32))?;
    }
    Ok((loss, reported))
}

fn part_key(prefix: &str, p: Part) -> String {
    format!("{prefix}.{}", p.name())
}

impl ParserTrainer {
    pub fn new(cfg: &TrainConfig, resume: Option<&CheckpointBundle>) -> Result<Self> {
        cfg.expect_stage(1)?;
        let weights = cfg.effective_weights();
        let train = Dataset::load(&cfg.manifest, Split::Train, cfg.train_limit)?;
        let val = Dataset::load(&cfg.manifest, Split::Val, cfg.val_limit)?;
        if train.resolution != cfg.net.resolution {
            return Err(Error::ResolutionMismatch(train.resolution, cfg.net.resolution));
        }
        let phi = maybe_feature_net(cfg, weights.vgg > 0.0)?;
        let net = &cfg.net;
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        let mut discs = Vec::new();
        for p in Part::ALL {
            encoders.push(PartEncoder::new(net, p, cfg.seed)?);
            decoders.push(Decoder::part(net, p, cfg.seed)?);
            discs.push(PatchDisc::new(net, &part_key("disc", p), 6, cfg.seed)?);
        }
        let adams = || (0..PART_COUNT).map(|_| cfg.optimizer.adam()).collect::<Vec<_>>();
        let mut t = ParserTrainer {
            cfg: cfg.clone(),
            weights,
            phi,
            best_enc: encoders.clone(),
            best_dec: decoders.clone(),
            encoders,
            decoders,
            discs,
            opt_enc: adams(),
            opt_dec: adams(),
            opt_disc: adams(),
            state: ParserState {
                schedule: Schedule::new(train.len(), cfg.batch_size, cfg.epochs(), cfg.max_iterations, cfg.seed)?,
                best_l1: vec![None; PART_COUNT],
            },
            train,
            val,
        };
        if let Some(c) = resume {
            for p in Part::ALL {
                let i = p.index();
                c.load_network(&part_key("enc", p), &mut t.encoders[i])?;
                c.load_network(&part_key("dec", p), &mut t.decoders[i])?;
                c.load_network(&part_key("disc", p), &mut t.discs[i])?;
                c.load_network(&part_key("best.enc", p), &mut t.best_enc[i])?;
                c.load_network(&part_key("best.dec", p), &mut t.best_dec[i])?;
                t.opt_enc[i] = c.optimizer(&part_key("adam.enc", p))?;
                t.opt_dec[i] = c.optimizer(&part_key("adam.dec", p))?;
                t.opt_disc[i] = c.optimizer(&part_key("adam.disc", p))?;
            }
            t.state = serde_json::from_value(c.train_state.clone())?;
            t.state.schedule.resume_with(cfg, t.train.len())?;
        }
        Ok(t)
    }

    /// Best-validation encoders, in part order.
    pub fn best_encoders(&self) -> Result<PartEncoders<f32>> {
        PartEncoders::from_vec(self.best_enc.clone())
    }

    pub fn best_decoders(&self) -> &[Decoder<f32>] {
        &self.best_dec
    }
}

impl StageTrainer for ParserTrainer {
    fn stage(&self) -> u8 {
        1
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
        let label_refs: Vec<_> = labels.iter().collect();
        let w = self.weights;

        let mut targets = Vec::with_capacity(PART_COUNT);
        let mut preds = Vec::with_capacity(PART_COUNT);
        for p in Part::ALL {
            let i = p.index();
            targets.push(data::partial_label_batch(&label_refs, p)?);
            let z = self.encoders[i].forward(&x, true)?;
            preds.push(self.decoders[i].forward(&z, true)?);
        }

        let mut disc_total = 0.0;
        if w.gan > 0.0 {
            for i in 0..PART_COUNT {
                let real = Tensor::cat_dim1(&[&x, &targets[i]])?;
                let fake = Tensor::cat_dim1(&[&x, &preds[i].detach()])?;
                let (loss, value) = disc_objective(&self.discs[i], &real, &fake, w.gp, &mut self.state.schedule.rng)?;
                disc_total += value;
                let g = loss.backward()?;
                self.opt_disc[i].step(&mut self.discs[i], &g);
            }
        }

        let mut l1_parts = [0.0f64; PART_COUNT];
        let (mut vgg_total, mut gan_total) = (0.0, 0.0);
        let mut objectives = Vec::with_capacity(PART_COUNT);
        for i in 0..PART_COUNT {
            let l1 = lossbank::l1_loss(&preds[i], &targets[i])?;
            l1_parts[i] = f64::from(l1.item());
            let mut obj = l1;
            if w.vgg > 0.0 {
                let phi = self.phi.as_ref().expect("loaded when vgg > 0");
                let vgg = lossbank::perceptual_loss(phi, &preds[i], &targets[i])?;
                vgg_total += f64::from(vgg.item());
                obj = obj.add(&vgg.mul_scalar(w.vgg as f32))?;
            }
            if w.gan > 0.0 {
                let scores = self.discs[i].forward(&Tensor::cat_dim1(&[&x, &preds[i]])?, false)?;
                let gan = lossbank::lsgan_g_loss(&scores)?;
                gan_total += f64::from(gan.item());
                obj = obj.add(&gan.mul_scalar(w.gan as f32))?;
            }
            objectives.push(obj);
        }
        let l1_total: f64 = l1_parts.iter().sum();
        let mut entries: Vec<(String, f64, f64)> = vec![
            ("l1".into(), l1_total, 1.0),
            ("vgg".into(), vgg_total, w.vgg),
            ("gan".into(), gan_total, w.gan),
            ("disc".into(), disc_total, 0.0),
        ];
        for p in Part::ALL {
            entries.push((part_key("l1", p), l1_parts[p.index()], 0.0));
        }
        let refs: Vec<(&str, f64, f64)> = entries.iter().map(|(k, v, w)| (k.as_str(), *v, *w)).collect();
        let report = LossReport::weighted(&refs);
        check_finite(1, self.state.schedule.iteration, &report)?;

        for (i, obj) in objectives.into_iter().enumerate() {
            let g = obj.backward()?;
            self.opt_enc[i].step(&mut self.encoders[i], &g);
            self.opt_dec[i].step(&mut self.decoders[i], &g);
        }
        Ok(StepOutcome { report, epoch_end })
    }

    /// Mean validation L1 per part; each part keeps its own best snapshot.
    fn validate(&mut self) -> Result<f64> {
        let mut sums = [0.0f64; PART_COUNT];
        let mut n = 0usize;
        for chunk in self.val.samples.chunks(EVAL_CHUNK) {
            let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
            let labels: Vec<_> = chunk.iter().map(|s| &s.label).collect();
            let x = data::image_batch(&imgs)?;
            for p in Part::ALL {
                let i = p.index();
                let y = data::partial_label_batch(&labels, p)?;
                let pred = self.decoders[i].forward(&self.encoders[i].forward(&x, false)?, false)?;
                sums[i] += f64::from(lossbank::l1_loss(&pred, &y)?.item()) * chunk.len() as f64;
            }
            n += chunk.len();
        }
        let mut mean = 0.0;
        for i in 0..PART_COUNT {
            let l1 = if n > 0 { sums[i] / n as f64 } else { 0.0 };
            mean += l1 / PART_COUNT as f64;
            if self.state.best_l1[i].is_none_or(|b| l1 <= b) {
                self.state.best_l1[i] = Some(l1);
                self.best_enc[i] = self.encoders[i].clone();
                self.best_dec[i] = self.decoders[i].clone();
            }
        }
        Ok(mean)
    }

    fn adopt_current(&mut self) {
        self.best_enc = self.encoders.clone();
        self.best_dec = self.decoders.clone();
        self.state.best_l1.iter_mut().for_each(|b| *b = None);
    }

    fn checkpoint(&self) -> Result<CheckpointBundle> {
        let mut c = CheckpointBundle::new(&self.cfg.net, "parsers");
        for p in Part::ALL {
            let i = p.index();
            c.put_network(&part_key("enc", p), &self.encoders[i]);
            c.put_network(&part_key("dec", p), &self.decoders[i]);
            c.put_network(&part_key("disc", p), &self.discs[i]);
            c.put_network(&part_key("best.enc", p), &self.best_enc[i]);
            c.put_network(&part_key("best.dec", p), &self.best_dec[i]);
            c.put_optimizer(&part_key("adam.enc", p), &self.opt_enc[i]);
            c.put_optimizer(&part_key("adam.dec", p), &self.opt_dec[i]);
            c.put_optimizer(&part_key("adam.disc", p), &self.opt_disc[i]);
        }
        c.train_state = serde_json::to_value(&self.state)?;
        Ok(c)
    }
}
