//! Inference over trained checkpoints: parsing, remixing, interpolation and
//! conditional generation.

use std::path::Path;

use shapegene_tensor::Tensor;

use crate::checkpoint::CheckpointBundle;
use crate::error::{Error, Result};
use crate::genecore::{decode_gene, encode_gene, interpolate_slot, FaceShapeGene, PartEncoders};
use crate::image::{FaceImage, Image};
use crate::labelspace::{self, LabelMap, Part};
use crate::netzoo::{Decoder, NetConfig, Transformer};
use crate::trainer::{load_cyclic, load_overall};

/// Frozen encoders, the overall decoder and, after stage 3, the transformer.
pub struct FaceModel {
    pub net: NetConfig,
    pub encoders: PartEncoders<f32>,
    pub decoder: Decoder<f32>,
    pub transformer: Option<Transformer<f32>>,
    /// Digest of the checkpoint archive.
    pub digest: String,
    pub stage: String,
}

/// Output of one remix.
#[derive(Debug, Clone)]
pub struct Remix {
    pub gene: FaceShapeGene,
    /// Quantized remixed label map.
    pub label: LabelMap,
    /// Generated face, background filled grey; `None` without a transformer.
    pub face: Option<FaceImage>,
    /// Generated foreground pasted over the receptor photograph.
    pub composited: Option<FaceImage>,
}

impl FaceModel {
    /// Loads a stage-2 (no transformer) or stage-3 checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = CheckpointBundle::load(path)?;
        let net = ckpt.net_config.clone();
        let digest = ckpt.digest()?;
        let (encoders, decoder, transformer) = match ckpt.stage.as_str() {
            "cyclic" => {
                let (e, d, t) = load_cyclic(path, &net)?;
                (e, d, Some(t))
            }
            "overall" => {
                let (e, d) = load_overall(path, &net)?;
                (e, d, None)
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "{} is a {other} checkpoint; inference needs an overall or cyclic one",
                    path.display()
                )))
            }
        };
        Ok(FaceModel {
            net,
            encoders,
            decoder,
            transformer,
            digest,
            stage: ckpt.stage,
        })
    }

    pub fn resolution(&self) -> usize {
        self.net.resolution
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.size() != self.net.resolution {
            return Err(Error::ResolutionMismatch(image.size(), self.net.resolution));
        }
        if !image.is_finite() {
            return Err(Error::NonFinite("input image".into()));
        }
        Ok(())
    }

    pub fn gene(&self, image: &FaceImage) -> Result<FaceShapeGene> {
        self.check_image(image)?;
        encode_gene(&self.encoders, image)
    }

    pub fn decode(&self, gene: &FaceShapeGene) -> Result<LabelMap> {
        Ok(labelspace::quantize(decode_gene(&self.decoder, gene)?.image()))
    }

    /// Quantized whole-face label map and gene of a face.
    pub fn parse(&self, image: &FaceImage) -> Result<(LabelMap, FaceShapeGene)> {
        let gene = self.gene(image)?;
        Ok((self.decode(&gene)?, gene))
    }

    fn transformer(&self) -> Result<&Transformer<f32>> {
        self.transformer
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("a {} checkpoint has no transformer", self.stage)))
    }

    /// Face for `label` with the identity of `cond`, whose background is
    /// removed using `cond_label`. The result keeps a grey background.
    pub fn render_face(&self, label: &Image, cond: &FaceImage, cond_label: &LabelMap) -> Result<FaceImage> {
        let tf = self.transformer()?;
        self.check_image(label)?;
        let cond_bg = labelspace::remove_background(cond, cond_label)?;
        let y = Image::batch_tensor::<f32>(&[label], 1.0, 0.0)?;
        let c = Image::batch_tensor::<f32>(&[&cond_bg], 1.0, 0.0)?;
        let out = tf.forward(&y, &c, false)?;
        let face = Image::from_batch_tensor(&out, 1.0, 0.0)?.pop().expect("batch of one");
        let q = labelspace::quantize(label);
        labelspace::remove_background(&face, &q)
    }

    /// Conditional generation: the face for a (quantized) label map with
    /// the identity of `cond`, pasted over `cond`'s background.
    pub fn generate(&self, label: &LabelMap, cond: &FaceImage) -> Result<FaceImage> {
        self.check_image(cond)?;
        let label = if label.is_quantized() {
            label.clone()
        } else {
            labelspace::quantize(label.image())
        };
        let (cond_label, _) = self.parse(cond)?;
        let face = self.render_face(label.image(), cond, &cond_label)?;
        labelspace::composite_background(&face, cond, &cond_label, &label)
    }

    /// Replaces (alpha 1) or blends slot `part` of the receptor's gene with
    /// the donor's and renders the result.
    pub fn remix(&self, receptor: &FaceImage, donor: &FaceImage, part: Part, alpha: f64) -> Result<Remix> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidAlpha(alpha));
        }
        let (label_a, f_a) = self.parse(receptor)?;
        let f_b = self.gene(donor)?;
        self.remix_genes(receptor, &label_a, &f_a, &f_b, part, alpha)
    }

    fn remix_genes(
        &self,
        receptor: &FaceImage,
        label_a: &LabelMap,
        f_a: &FaceShapeGene,
        f_b: &FaceShapeGene,
        part: Part,
        alpha: f64,
    ) -> Result<Remix> {
        let gene = interpolate_slot(f_a, f_b, part, alpha)?;
        let raw = decode_gene(&self.decoder, &gene)?;
        let label = labelspace::quantize(raw.image());
        let (face, composited) = match &self.transformer {
            Some(_) => {
                let face = self.render_face(raw.image(), receptor, label_a)?;
                let comp = labelspace::composite_background(&face, receptor, label_a, &label)?;
                (Some(face), Some(comp))
            }
            None => (None, None),
        };
        Ok(Remix {
            gene,
            label,
            face,
            composited,
        })
    }

    /// `steps` remixes at alphas evenly spaced over `[0, 1]`, endpoints included.
    pub fn interpolate(&self, receptor: &FaceImage, donor: &FaceImage, part: Part, steps: usize) -> Result<Vec<Remix>> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("interpolation needs at least 2 steps, got {steps}")));
        }
        let (label_a, f_a) = self.parse(receptor)?;
        let f_b = self.gene(donor)?;
        (0..steps)
            .map(|k| {
                let alpha = k as f64 / (steps - 1) as f64;
                self.remix_genes(receptor, &label_a, &f_a, &f_b, part, alpha)
            })
            .collect()
    }

    /// Label maps for a batch of images, one decoder pass.
    pub fn parse_batch(&self, images: &[&FaceImage]) -> Result<Vec<LabelMap>> {
        for img in images {
            self.check_image(img)?;
        }
        let x = Image::batch_tensor::<f32>(images, 1.0, 0.0)?;
        let z: Tensor<f32> = self.encoders.encode_batch(&x, false, None)?;
        let y = self.decoder.forward(&z, false)?;
        Ok(Image::from_batch_tensor(&y, 1.0, 0.0)?
            .iter()
            .map(labelspace::quantize)
            .collect())
    }
}
