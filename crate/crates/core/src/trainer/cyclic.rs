//! Stage 3: cyclic training of the label-to-face transformer together with
//! fine-tuning of the overall decoder, encoders frozen.
//!
//! Per iteration, with receptor `A`, donor `B` and part `i`:
//!
//! ```text
//! y_r  = G_D(f_A with slot i of f_B)      x_r  = F(y_r,  bg(x_A))
//! y_r' = G_D(G_E(x_r) with slot i of f_A) x_A' = F(y_r', bg(x_r))
//! ```
//!
//! where `bg` fills the background with grey. Both discriminators see
//! background-removed inputs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shapegene_tensor::{Adam, Tensor};

use super::overall::{get_encoders, put_encoders};
use super::parsers::{disc_objective, maybe_feature_net, EVAL_CHUNK};
use super::{
    check_finite, check_frozen, data, load_stage_checkpoint, Dataset, Schedule, StageTrainer, StepOutcome,
    TrainConfig,
};
use crate::checkpoint::CheckpointBundle;
use crate::error::{Error, Result};
use crate::genecore::PartEncoders;
use crate::labelspace::{self, LabelMap, Part, PART_COUNT};
use crate::lossbank::{self, LossReport, LossWeights, STAGE3_TERMS};
use crate::netzoo::{param_digest, Decoder, FeatureNet, NetConfig, PatchDisc, Transformer};
use crate::synthgen::{mix_seed, Split};

#[derive(Serialize, Deserialize)]
struct CyclicState {
    schedule: Schedule,
    encoder_digest: String,
    best_total: Option<f64>,
}

pub struct CyclicTrainer {
    cfg: TrainConfig,
    weights: LossWeights,
    train: Dataset,
    val: Dataset,
    phi: FeatureNet<f32>,
    encoders: PartEncoders<f32>,
    decoder: Decoder<f32>,
    transformer: Transformer<f32>,
    disc_image: PatchDisc<f32>,
    disc_label: PatchDisc<f32>,
    opt_dec: Adam<f32>,
    opt_tf: Adam<f32>,
    opt_di: Adam<f32>,
    opt_dl: Adam<f32>,
    best_dec: Decoder<f32>,
    best_tf: Transformer<f32>,
    state: CyclicState,
}

/// Encoders, best overall decoder and best transformer of a stage-3 checkpoint.
pub fn load_cyclic(path: &Path, cfg: &NetConfig) -> Result<(PartEncoders<f32>, Decoder<f32>, Transformer<f32>)> {
    let ckpt = load_stage_checkpoint(path, cfg, 3)?;
    let encoders = get_encoders(&ckpt, cfg)?;
    let mut decoder = Decoder::overall(cfg, 0)?;
    ckpt.load_network("best.dec.overall", &mut decoder)?;
    let mut transformer = Transformer::new(cfg, 0)?;
    ckpt.load_network("best.transformer", &mut transformer)?;
    Ok((encoders, decoder, transformer))
}

/// One receptor/donor mini-batch.
struct PairBatch {
    xa: Tensor<f32>,
    xb: Tensor<f32>,
    ya: Tensor<f32>,
    yb: Tensor<f32>,
    label_a: Vec<LabelMap>,
    label_b: Vec<LabelMap>,
}

impl PairBatch {
    fn new(a: &[(crate::image::FaceImage, LabelMap)], b: &[(crate::image::FaceImage, LabelMap)]) -> Result<Self> {
        let imgs = |v: &[(crate::image::FaceImage, LabelMap)]| data::image_batch(&v.iter().map(|s| &s.0).collect::<Vec<_>>());
        let labs = |v: &[(crate::image::FaceImage, LabelMap)]| data::label_batch(&v.iter().map(|s| &s.1).collect::<Vec<_>>());
        Ok(PairBatch {
            xa: imgs(a)?,
            xb: imgs(b)?,
            ya: labs(a)?,
            yb: labs(b)?,
            label_a: a.iter().map(|s| s.1.clone()).collect(),
            label_b: b.iter().map(|s| s.1.clone()).collect(),
        })
    }
}

/// Everything the losses need from one forward pass.
struct Cycle {
    xa_bg: Tensor<f32>,
    xb_bg: Tensor<f32>,
    y_r: Tensor<f32>,
    x_r_bg: Tensor<f32>,
    y_rp: Tensor<f32>,
    x_ap_bg: Tensor<f32>,
    cyc_image: Tensor<f32>,
    cyc_label: Tensor<f32>,
    identity: Tensor<f32>,
}

/// `dst` with slot `part` of every row taken from `src` (both `[B, 7d]`).
fn splice_slot(dst: &[f32], src: &[f32], d: usize, part: Part, zero_rest: bool) -> Vec<f32> {
    let row = PART_COUNT * d;
    let lo = part.index() * d;
    let mut out = if zero_rest { vec![0.0; dst.len()] } else { dst.to_vec() };
    for (o, s) in out.chunks_mut(row).zip(src.chunks(row)) {
        o[lo..lo + d].copy_from_slice(&s[lo..lo + d]);
    }
    out
}

fn bg_removed(x: &Tensor<f32>, labels: &[LabelMap]) -> Result<Tensor<f32>> {
    let keep = data::foreground_weights(&labels.iter().collect::<Vec<_>>())?;
    data::remove_background_tensor(x, &keep)
}

impl CyclicTrainer {
    pub fn new(cfg: &TrainConfig, resume: Option<&CheckpointBundle>) -> Result<Self> {
        cfg.expect_stage(3)?;
        let weights = cfg.weights;
        let train = Dataset::load(&cfg.manifest, Split::Train, cfg.train_limit)?;
        let val = Dataset::load(&cfg.manifest, Split::Val, cfg.val_limit)?;
        if train.resolution != cfg.net.resolution {
            return Err(Error::ResolutionMismatch(train.resolution, cfg.net.resolution));
        }
        let phi = match maybe_feature_net(cfg, weights.vgg > 0.0)? {
            Some(phi) => phi,
            None => FeatureNet::new(&cfg.net, cfg.seed)?,
        };
        let (encoders, decoder, digest) = match resume {
            Some(c) => {
                let state: CyclicState = serde_json::from_value(c.train_state.clone())?;
                (get_encoders(c, &cfg.net)?, Decoder::overall(&cfg.net, cfg.seed)?, state.encoder_digest)
            }
            None => {
                let path = cfg.require(&cfg.overall, "overall")?;
                let up = load_stage_checkpoint(&path, &cfg.net, 2)?;
                let encoders = get_encoders(&up, &cfg.net)?;
                let recorded = up.train_state["encoder_digest"].as_str().unwrap_or_default().to_string();
                check_frozen("encoders", &encoders, &recorded)?;
                let mut decoder = Decoder::overall(&cfg.net, cfg.seed)?;
                up.load_network("best.dec.overall", &mut decoder)?;
                (encoders, decoder, recorded)
            }
        };
        let transformer = Transformer::new(&cfg.net, cfg.seed)?;
        let mut t = CyclicTrainer {
            cfg: cfg.clone(),
            weights,
            phi,
            best_dec: decoder.clone(),
            best_tf: transformer.clone(),
            decoder,
            transformer,
            disc_image: PatchDisc::new(&cfg.net, "disc.image", 3, cfg.seed)?,
            disc_label: PatchDisc::new(&cfg.net, "disc.label", 3, cfg.seed)?,
            opt_dec: cfg.optimizer.adam(),
            opt_tf: cfg.optimizer.adam(),
            opt_di: cfg.optimizer.adam(),
            opt_dl: cfg.optimizer.adam(),
            state: CyclicState {
                schedule: Schedule::new(
                    train.len(),
                    2 * cfg.batch_size,
                    cfg.epochs(),
                    cfg.max_iterations,
                    cfg.seed,
                )?,
                encoder_digest: digest,
                best_total: None,
            },
            encoders,
            train,
            val,
        };
        if let Some(c) = resume {
            c.load_network("dec.overall", &mut t.decoder)?;
            c.load_network("transformer", &mut t.transformer)?;
            c.load_network("best.dec.overall", &mut t.best_dec)?;
            c.load_network("best.transformer", &mut t.best_tf)?;
            c.load_network("disc.image", &mut t.disc_image)?;
            c.load_network("disc.label", &mut t.disc_label)?;
            t.opt_dec = c.optimizer("adam.dec.overall")?;
            t.opt_tf = c.optimizer("adam.transformer")?;
            t.opt_di = c.optimizer("adam.disc.image")?;
            t.opt_dl = c.optimizer("adam.disc.label")?;
            t.state = serde_json::from_value(c.train_state.clone())?;
            t.state.schedule.resume_with(cfg, t.train.len())?;
        }
        check_frozen("encoders", &t.encoders, &t.state.encoder_digest)?;
        Ok(t)
    }

    pub fn encoder_digest(&self) -> String {
        param_digest(&self.encoders)
    }

    pub fn iteration(&self) -> u64 {
        self.state.schedule.iteration
    }

    /// Forward pass of the cycle. With `track`, gradients reach the
    /// decoder and transformer parameters.
    fn cycle(&self, b: &PairBatch, part: Part, track: bool) -> Result<Cycle> {
        let w = &self.weights;
        let d = self.cfg.net.gene_slot_dim;
        let xa_bg = bg_removed(&b.xa, &b.label_a)?;
        let xb_bg = bg_removed(&b.xb, &b.label_b)?;
        let fa = self.encoders.encode_batch(&b.xa, false, None)?;
        let fb = self.encoders.encode_batch(&b.xb, false, None)?;
        let f_r = Tensor::from_vec(splice_slot(fa.data(), fb.data(), d, part, false), fa.shape())?;
        let y_r = self.decoder.forward(&f_r, track)?;
        let x_r = self.transformer.forward(&y_r, &xa_bg, track)?;
        let label_r = data::quantize_batch(&y_r)?;
        let x_r_bg = bg_removed(&x_r, &label_r)?;

        // the receptor's own slot goes back in; the rest is re-encoded from x_r
        let g_r = self.encoders.encode_batch(&x_r, false, Some(part))?;
        let slot_a = Tensor::from_vec(splice_slot(fa.data(), fa.data(), d, part, true), fa.shape())?;
        let y_rp = self.decoder.forward(&g_r.add(&slot_a)?, track)?;
        let x_ap = self.transformer.forward(&y_rp, &x_r_bg, track)?;
        let x_ap_bg = bg_removed(&x_ap, &b.label_a)?;

        let cyc_image = lossbank::cycle_image_loss(&self.phi, &x_ap_bg, &xa_bg, w.vgg)?;
        let cyc_label = lossbank::cycle_label_loss(&self.phi, &y_rp, &b.ya, w.vgg)?;
        let m1 = b
            .label_a
            .iter()
            .zip(&b.label_b)
            .map(|(a, bb)| labelspace::editing_mask(a, bb, part))
            .collect::<Result<Vec<_>>>()?;
        let m2 = label_r
            .iter()
            .zip(&b.label_a)
            .map(|(r, a)| labelspace::editing_mask(r, a, part))
            .collect::<Result<Vec<_>>>()?;
        let identity = lossbank::masked_identity_loss(
            &x_r_bg,
            &xa_bg,
            &x_ap_bg,
            &x_r_bg,
            &data::mask_batch(&m1)?,
            &data::mask_batch(&m2)?,
        )?;
        Ok(Cycle {
            xa_bg,
            xb_bg,
            y_r,
            x_r_bg,
            y_rp,
            x_ap_bg,
            cyc_image,
            cyc_label,
            identity,
        })
    }

    /// Generator-side adversarial terms against the current discriminators.
    fn gan_terms(&self, c: &Cycle) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let g = |d: &PatchDisc<f32>, x: &Tensor<f32>| lossbank::lsgan_g_loss(&d.forward(x, false)?);
        let gi = g(&self.disc_image, &c.x_r_bg)?.add(&g(&self.disc_image, &c.x_ap_bg)?)?;
        let gl = g(&self.disc_label, &c.y_r)?.add(&g(&self.disc_label, &c.y_rp)?)?;
        Ok((gi, gl))
    }

    fn objective(&self, c: &Cycle) -> Result<(Tensor<f32>, LossReport)> {
        let (gi, gl) = self.gan_terms(c)?;
        let w = &self.weights;
        let terms = [c.cyc_image.clone(), c.cyc_label.clone(), gi, gl, c.identity.clone()];
        let weights = [1.0, w.cl, w.gi, w.gl, w.id];
        let entries: Vec<(&str, Tensor<f32>, f64)> = STAGE3_TERMS
            .iter()
            .zip(terms)
            .zip(weights)
            .map(|((&name, t), w)| (name, t, w))
            .collect();
        lossbank::weighted_total(&entries)
    }

    /// Fixed validation pairs: every validation face is a receptor, with a
    /// seeded donor and part.
    fn validation_pairs(&self) -> Vec<(usize, usize, Part)> {
        let n = self.val.len();
        if n < 2 {
            return Vec::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, 0xC1C));
        (0..n)
            .map(|a| {
                let b = (a + rng.random_range(1..n)) % n;
                let p = Part::ALL[rng.random_range(0..PART_COUNT)];
                (a, b, p)
            })
            .collect()
    }
}

impl StageTrainer for CyclicTrainer {
    fn stage(&self) -> u8 {
        3
    }

    fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn schedule(&self) -> &Schedule {
        &self.state.schedule
    }

    fn step(&mut self) -> Result<StepOutcome> {
        let (idx, epoch_end) = self.state.schedule.next_batch();
        let rng = &mut self.state.schedule.rng;
        let mut samples = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = &self.train.samples[i];
            samples.push(self.cfg.augment.apply(&s.image, &s.label, rng)?);
        }
        let part = Part::ALL[rng.random_range(0..PART_COUNT)];
        let half = idx.len() / 2;
        let batch = PairBatch::new(&samples[..half], &samples[half..])?;
        let c = self.cycle(&batch, part, true)?;
        let w = self.weights;

        let (mut d_image, mut d_label) = (0.0, 0.0);
        if w.gi > 0.0 {
            let real = Tensor::cat_batch(&[&c.xa_bg, &c.xb_bg])?;
            let fake = Tensor::cat_batch(&[&c.x_r_bg.detach(), &c.x_ap_bg.detach()])?;
            let (loss, v) = disc_objective(&self.disc_image, &real, &fake, w.gp, &mut self.state.schedule.rng)?;
            d_image = v;
            let g = loss.backward()?;
            self.opt_di.step(&mut self.disc_image, &g);
        }
        if w.gl > 0.0 {
            let real = Tensor::cat_batch(&[&batch.ya, &batch.yb])?;
            let fake = Tensor::cat_batch(&[&c.y_r.detach(), &c.y_rp.detach()])?;
            let (loss, v) = disc_objective(&self.disc_label, &real, &fake, w.gp, &mut self.state.schedule.rng)?;
            d_label = v;
            let g = loss.backward()?;
            self.opt_dl.step(&mut self.disc_label, &g);
        }

        let (total, mut report) = self.objective(&c)?;
        report.terms.insert("disc_image".into(), d_image);
        report.terms.insert("disc_label".into(), d_label);
        report.weights.insert("disc_image".into(), 0.0);
        report.weights.insert("disc_label".into(), 0.0);
        check_finite(3, self.state.schedule.iteration, &report)?;
        let g = total.backward()?;
        self.opt_tf.step(&mut self.transformer, &g);
        self.opt_dec.step(&mut self.decoder, &g);
        Ok(StepOutcome { report, epoch_end })
    }

    /// Mean weighted total over the fixed validation pairs.
    fn validate(&mut self) -> Result<f64> {
        check_frozen("encoders", &self.encoders, &self.state.encoder_digest)?;
        let pairs = self.validation_pairs();
        let mut sum = 0.0;
        for chunk in pairs.chunks(EVAL_CHUNK) {
            for part in Part::ALL {
                let sel: Vec<_> = chunk.iter().filter(|p| p.2 == part).collect();
                if sel.is_empty() {
                    continue;
                }
                let pick = |i: usize| (self.val.samples[i].image.clone(), self.val.samples[i].label.clone());
                let a: Vec<_> = sel.iter().map(|p| pick(p.0)).collect();
                let b: Vec<_> = sel.iter().map(|p| pick(p.1)).collect();
                let c = self.cycle(&PairBatch::new(&a, &b)?, part, false)?;
                sum += self.objective(&c)?.1.total * sel.len() as f64;
            }
        }
        let total = if pairs.is_empty() { 0.0 } else { sum / pairs.len() as f64 };
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("cyclic validation total {total}")));
        }
        if self.state.best_total.is_none_or(|b| total <= b) {
            self.state.best_total = Some(total);
            self.best_dec = self.decoder.clone();
            self.best_tf = self.transformer.clone();
        }
        Ok(total)
    }

    fn adopt_current(&mut self) {
        self.best_dec = self.decoder.clone();
        self.best_tf = self.transformer.clone();
        self.state.best_total = None;
    }

    fn checkpoint(&self) -> Result<CheckpointBundle> {
        check_frozen("encoders", &self.encoders, &self.state.encoder_digest)?;
        let mut c = CheckpointBundle::new(&self.cfg.net, "cyclic");
        put_encoders(&mut c, &self.encoders);
        c.put_network("dec.overall", &self.decoder);
        c.put_network("transformer", &self.transformer);
        c.put_network("best.dec.overall", &self.best_dec);
        c.put_network("best.transformer", &self.best_tf);
        c.put_network("disc.image", &self.disc_image);
        c.put_network("disc.label", &self.disc_label);
        c.put_optimizer("adam.dec.overall", &self.opt_dec);
        c.put_optimizer("adam.transformer", &self.opt_tf);
        c.put_optimizer("adam.disc.image", &self.opt_di);
        c.put_optimizer("adam.disc.label", &self.opt_dl);
        c.train_state = serde_json::to_value(&self.state)?;
        Ok(c)
    }
}
