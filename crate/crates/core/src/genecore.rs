//! Face shape genes: seven per-part latent slots, slot replacement and
//! interpolation, and the encode/remix/decode pipeline.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use shapegene_tensor::{Module, Param, Scalar, Tensor};

use crate::error::{Error, IoContext, Result};
use crate::image::FaceImage;
use crate::labelspace::{LabelMap, Part, PART_COUNT};
use crate::netzoo::{Decoder, NetConfig, Network, PartEncoder};

pub const GENE_MAGIC: &[u8; 8] = b"FSGGENE\0";
pub const GENE_VERSION: u32 = 1;

/// Seven slots of length `d`, stored contiguously in part order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceShapeGene {
    slot_dim: usize,
    values: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl FaceShapeGene {
    pub fn new(slot_dim: usize, values: Vec<f32>) -> Result<Self> {
        if slot_dim == 0 || values.len() != PART_COUNT * slot_dim {
            return Err(Error::GeneDimension(values.len(), PART_COUNT * slot_dim));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gene".into()));
        }
        Ok(FaceShapeGene {
            slot_dim,
            values,
            source: None,
        })
    }

    pub fn from_slots(slots: &[Vec<f32>]) -> Result<Self> {
        if slots.len() != PART_COUNT {
            return Err(Error::InvalidArgument(format!("{} slots, expected {PART_COUNT}", slots.len())));
        }
        let d = slots[0].len();
        if slots.iter().any(|s| s.len() != d) {
            return Err(Error::InvalidArgument("slots differ in length".into()));
        }
        Self::new(d, slots.concat())
    }

    pub fn slot_dim(&self) -> usize {
        self.slot_dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn slot(&self, part: Part) -> &[f32] {
        let d = self.slot_dim;
        &self.values[part.index() * d..(part.index() + 1) * d]
    }

    fn slot_mut(&mut self, part: Part) -> &mut [f32] {
        let d = self.slot_dim;
        &mut self.values[part.index() * d..(part.index() + 1) * d]
    }

    fn check_pair(&self, other: &FaceShapeGene) -> Result<()> {
        if self.slot_dim != other.slot_dim {
            return Err(Error::GeneDimension(other.len(), self.len()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.values.len());
        out.extend_from_slice(GENE_MAGIC);
        out.extend_from_slice(&GENE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.slot_dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |reason: &str| Error::CorruptArchive {
            path: "<gene>".into(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != GENE_MAGIC {
            return Err(corrupt("bad gene header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        if word(8) != GENE_VERSION {
            return Err(corrupt(&format!("unsupported gene version {}", word(8))));
        }
        let d = word(12) as usize;
        let payload = &bytes[16..];
        if payload.len() != 4 * PART_COUNT * d {
            return Err(corrupt(&format!("payload of {} bytes for d = {d}", payload.len())));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(d, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).at(path)?;
        f.write_all(&self.to_bytes()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).at(path)?.read_to_end(&mut bytes).at(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::CorruptArchive { reason, .. } => Error::CorruptArchive {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}

/// `f_a` with the slot of `part` taken from `f_b`.
pub fn replace_slot(f_a: &FaceShapeGene, f_b: &FaceShapeGene, part: Part) -> Result<FaceShapeGene> {
    f_a.check_pair(f_b)?;
    let mut out = f_a.clone();
    out.slot_mut(part).copy_from_slice(f_b.slot(part));
    Ok(out)
}

/// `f_a` with slot `part` set to `(1 - alpha) a + alpha b`. The endpoints
/// return `f_a` and [`replace_slot`] exactly.
pub fn interpolate_slot(f_a: &FaceShapeGene, f_b: &FaceShapeGene, part: Part, alpha: f64) -> Result<FaceShapeGene> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidAlpha(alpha));
    }
    f_a.check_pair(f_b)?;
    if alpha == 0.0 {
        return Ok(f_a.clone());
    }
    if alpha == 1.0 {
        return replace_slot(f_a, f_b, part);
    }
    let mut out = f_a.clone();
    let a = alpha as f32;
    for (o, &b) in out.slot_mut(part).iter_mut().zip(f_b.slot(part)) {
        *o = (1.0 - a) * *o + a * b;
    }
    Ok(out)
}

/// The seven part encoders, in part order.
#[derive(Clone)]
pub struct PartEncoders<T: Scalar> {
    encoders: Vec<PartEncoder<T>>,
}

impl<T: Scalar> PartEncoders<T> {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        let encoders = Part::ALL
            .iter()
            .map(|&p| PartEncoder::new(cfg, p, seed))
            .collect::<Result<_>>()?;
        Ok(PartEncoders { encoders })
    }

    pub fn from_vec(encoders: Vec<PartEncoder<T>>) -> Result<Self> {
        let ordered = encoders.len() == PART_COUNT && encoders.iter().zip(Part::ALL).all(|(e, p)| e.part() == p);
        if !ordered {
            return Err(Error::InvalidArgument("need one encoder per part, in part order".into()));
        }
        Ok(PartEncoders { encoders })
    }

    pub fn get(&self, part: Part) -> &PartEncoder<T> {
        &self.encoders[part.index()]
    }

    pub fn get_mut(&mut self, part: Part) -> &mut PartEncoder<T> {
        &mut self.encoders[part.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &PartEncoder<T>> {
        self.encoders.iter()
    }

    /// `[B, 3, R, R]` images to `[B, 7d]` genes. With `skip`, that slot's
    /// encoder is not run and its entries are zero.
    pub fn encode_batch(&self, x: &Tensor<T>, track: bool, skip: Option<Part>) -> Result<Tensor<T>> {
        let b = x.shape().first().copied().unwrap_or(0);
        let slots = self
            .encoders
            .iter()
            .map(|e| match skip {
                Some(p) if p == e.part() => {
                    let d = e.config().gene_slot_dim;
                    Ok(Tensor::zeros(&[b, d]))
                }
                _ => e.forward(x, track),
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = slots.iter().collect();
        Ok(Tensor::cat_dim1(&refs)?)
    }
}

impl<T: Scalar> Module<T> for PartEncoders<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.encoders.iter().flat_map(|e| e.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.encoders.iter_mut().flat_map(|e| e.params_mut()).collect()
    }
}

fn image_batch(image: &FaceImage, cfg: &NetConfig) -> Result<Tensor<f32>> {
    if image.size() != cfg.resolution {
        return Err(Error::ResolutionMismatch(image.size(), cfg.resolution));
    }
    crate::image::Image::batch_tensor(&[image], 1.0, 0.0)
}

/// Gene of one image; slot `i` is the output of encoder `i`.
pub fn encode_gene(encoders: &PartEncoders<f32>, image: &FaceImage) -> Result<FaceShapeGene> {
    let cfg = encoders.get(Part::Hair).config();
    let x = image_batch(image, cfg)?;
    let g = encoders.encode_batch(&x, false, None)?;
    FaceShapeGene::new(cfg.gene_slot_dim, g.to_vec())
}

/// Whole-face label map (not quantized) of a gene.
pub fn decode_gene(decoder: &Decoder<f32>, gene: &FaceShapeGene) -> Result<LabelMap> {
    if gene.len() != decoder.input_dim() {
        return Err(Error::GeneDimension(gene.len(), decoder.input_dim()));
    }
    let z = Tensor::from_vec(gene.values().to_vec(), &[1, gene.len()])?;
    let y = decoder.forward(&z, false)?;
    let img = crate::image::Image::from_batch_tensor(&y, 1.0, 0.0)?
        .pop()
        .expect("batch of one");
    Ok(LabelMap::from_raw(img))
}

/// A face given either as an image or as an already computed gene.
#[derive(Debug, Clone)]
pub enum GeneSource {
    Image(FaceImage),
    Gene(FaceShapeGene),
}

#[derive(Debug, Clone)]
pub struct RemixRequest {
    pub receptor: GeneSource,
    pub donor: GeneSource,
    pub part: Part,
    /// 1 replaces the slot, 0 keeps the receptor's.
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct RemixOutput {
    pub label: LabelMap,
    pub gene: FaceShapeGene,
}

/// Encoders plus the overall decoder.
pub struct ShapeRemixer<'a> {
    pub encoders: &'a PartEncoders<f32>,
    pub decoder: &'a Decoder<f32>,
}

impl ShapeRemixer<'_> {
    pub fn gene_of(&self, src: &GeneSource) -> Result<FaceShapeGene> {
        match src {
            GeneSource::Image(img) => encode_gene(self.encoders, img),
            GeneSource::Gene(g) => {
                if g.len() != self.decoder.input_dim() {
                    return Err(Error::GeneDimension(g.len(), self.decoder.input_dim()));
                }
                Ok(g.clone())
            }
        }
    }

    pub fn remix(&self, req: &RemixRequest) -> Result<RemixOutput> {
        if !(0.0..=1.0).contains(&req.alpha) {
            return Err(Error::InvalidAlpha(req.alpha));
        }
        let f_a = self.gene_of(&req.receptor)?;
        let f_b = self.gene_of(&req.donor)?;
        let gene = interpolate_slot(&f_a, &f_b, req.part, req.alpha)?;
        let label = decode_gene(self.decoder, &gene)?;
        Ok(RemixOutput { label, gene })
    }
}

/// Free-function form of [`ShapeRemixer::remix`].
pub fn remix(encoders: &PartEncoders<f32>, decoder: &Decoder<f32>, req: &RemixRequest) -> Result<RemixOutput> {
    ShapeRemixer { encoders, decoder }.remix(req)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gene(d: usize, base: f32) -> FaceShapeGene {
        FaceShapeGene::new(d, (0..7 * d).map(|i| base + i as f32).collect()).unwrap()
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let g = gene(4, -1.5);
        let bytes = g.to_bytes();
        assert_eq!(FaceShapeGene::from_bytes(&bytes).unwrap(), g);
        assert!(FaceShapeGene::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FaceShapeGene::from_bytes(&bad).is_err());
    }

    #[test]
    fn midpoint_and_alpha_bounds() {
        let a = FaceShapeGene::new(3, vec![0.0; 21]).unwrap();
        let b = FaceShapeGene::new(3, vec![2.0; 21]).unwrap();
        let m = interpolate_slot(&a, &b, Part::Nose, 0.5).unwrap();
        assert_eq!(m.slot(Part::Nose), &[1.0; 3]);
        assert_eq!(m.slot(Part::Hair), &[0.0; 3]);
        assert!(matches!(interpolate_slot(&a, &b, Part::Nose, 1.5), Err(Error::InvalidAlpha(_))));
        assert!(replace_slot(&a, &gene(4, 0.0), Part::Hair).is_err());
    }
}
