//! In-memory datasets and paired image/label augmentation.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use shapegene_tensor::Tensor;

use crate::error::{Error, Result};
use crate::image::{FaceImage, Image};
use crate::labelspace::{self, EditingMask, LabelMap, Part};
use crate::synthgen::{DatasetManifest, Split};

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: FaceImage,
    pub label: LabelMap,
    pub identity: u32,
    pub hair_template: u8,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub resolution: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads one split of a manifest, optionally only its first `limit` entries.
    pub fn load(manifest_path: &Path, split: Split, limit: Option<usize>) -> Result<Self> {
        if !manifest_path.exists() {
            return Err(Error::InvalidArgument(format!("dataset manifest {} not found", manifest_path.display())));
        }
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut samples = Vec::new();
        for e in manifest.split(split).take(limit.unwrap_or(usize::MAX)) {
            let image = Image::load_png(&root.join(&e.image))?;
            let label = LabelMap::from_image_exact(Image::load_png(&root.join(&e.label))?);
            if !label.is_quantized() {
                return Err(Error::Unquantized);
            }
            if image.size() != manifest.resolution || label.size() != manifest.resolution {
                return Err(Error::ResolutionMismatch(image.size(), manifest.resolution));
            }
            samples.push(Sample {
                id: e.id.clone(),
                image,
                label,
                identity: e.identity,
                hair_template: e.spec.part_params.hair.template,
            });
        }
        Ok(Dataset {
            resolution: manifest.resolution,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Random affine augmentation ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub rotation_deg: f64,
    /// Fraction of the image size.
    pub translation: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            rotation_deg: 10.0,
            translation: 0.05,
            scale_min: 0.9,
            scale_max: 1.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_deg >= 0.0
            && self.translation >= 0.0
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && [self.rotation_deg, self.translation, self.scale_min, self.scale_max].iter().all(|v| v.is_finite());
        if !ok {
            return Err(Error::Config(format!("invalid augmentation ranges {self:?}")));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Affine {
        let mut draw = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Affine {
            angle: draw(-self.rotation_deg, self.rotation_deg).to_radians(),
            tx: draw(-self.translation, self.translation),
            ty: draw(-self.translation, self.translation),
            scale: draw(self.scale_min, self.scale_max),
        }
    }

    /// Augments one pair with a single shared transform, or copies it when disabled.
    pub fn apply<R: Rng>(&self, image: &FaceImage, label: &LabelMap, rng: &mut R) -> Result<(FaceImage, LabelMap)> {
        if !self.enabled {
            return Ok((image.clone(), label.clone()));
        }
        let t = self.sample(rng);
        Ok((t.warp_image(image), t.warp_label(label)?))
    }
}

/// Rotation and scale about the image center, then translation, in units of
/// the image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub angle: f64,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        angle: 0.0,
        tx: 0.0,
        ty: 0.0,
        scale: 1.0,
    };

    /// Source position (in pixels) sampled by output pixel `(x, y)`.
    fn source(&self, x: usize, y: usize, size: usize) -> (f64, f64) {
        let n = size as f64;
        let u = (x as f64 + 0.5) / n - 0.5 - self.tx;
        let v = (y as f64 + 0.5) / n - 0.5 - self.ty;
        let (s, c) = self.angle.sin_cos();
        let su = (c * u + s * v) / self.scale;
        let sv = (-s * u + c * v) / self.scale;
        ((su + 0.5) * n - 0.5, (sv + 0.5) * n - 0.5)
    }

    /// Bilinear resampling with edge clamping.
    pub fn warp_image(&self, img: &Image) -> Image {
        let n = img.size();
        let max = (n - 1) as f64;
        let mut out = img.clone();
        for y in 0..n {
            for x in 0..n {
                let (sx, sy) = self.source(x, y, n);
                let (sx, sy) = (sx.clamp(0.0, max), sy.clamp(0.0, max));
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(n - 1), (y0 + 1).min(n - 1));
                let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
                let p = |xx: usize, yy: usize| img.pixel(yy * n + xx);
                let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
                let mut rgb = [0.0f32; 3];
                for k in 0..3 {
                    let top = a[k] + (b[k] - a[k]) * fx;
                    let bottom = c[k] + (d[k] - c[k]) * fx;
                    rgb[k] = top + (bottom - top) * fy;
                }
                out.set_pixel(y * n + x, rgb);
            }
        }
        out
    }

    /// Nearest-neighbor resampling, so the result stays palette-exact.
    pub fn warp_label(&self, label: &LabelMap) -> Result<LabelMap> {
        let n = label.size();
        let max = (n - 1) as f64;
        let classes = label.classes()?;
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let (sx, sy) = self.source(x, y, n);
                let xi = sx.round().clamp(0.0, max) as usize;
                let yi = sy.round().clamp(0.0, max) as usize;
                out.push(classes[yi * n + xi]);
            }
        }
        LabelMap::from_classes(n, out)
    }
}

/// `[B, 3, R, R]` unit-range tensor of images.
pub fn image_batch(images: &[&Image]) -> Result<Tensor<f32>> {
    Image::batch_tensor(images, 1.0, 0.0)
}

pub fn label_batch(labels: &[&LabelMap]) -> Result<Tensor<f32>> {
    let images: Vec<&Image> = labels.iter().map(|l| l.image()).collect();
    image_batch(&images)
}

pub fn partial_label_batch(labels: &[&LabelMap], part: Part) -> Result<Tensor<f32>> {
    let partial = labels
        .iter()
        .map(|l| labelspace::partial_label(l, part))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&LabelMap> = partial.iter().collect();
    label_batch(&refs)
}

/// `[B, 1, R, R]` tensor of binary masks.
pub fn mask_batch(masks: &[EditingMask]) -> Result<Tensor<f32>> {
    let size = masks.first().map(|m| m.size()).unwrap_or(0);
    let mut data = Vec::with_capacity(masks.len() * size * size);
    for m in masks {
        if m.size() != size {
            return Err(Error::ResolutionMismatch(size, m.size()));
        }
        data.extend(m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    Ok(Tensor::from_vec(data, &[masks.len(), 1, size, size])?)
}

/// Per-sample foreground keep-weights `[B, 3, R, R]` (1 on foreground).
pub fn foreground_weights(labels: &[&LabelMap]) -> Result<Tensor<f32>> {
    let size = labels.first().map(|l| l.size()).unwrap_or(0);
    let hw = size * size;
    let mut data = Vec::with_capacity(labels.len() * 3 * hw);
    for l in labels {
        let bg = labelspace::background_mask(l)?;
        for _ in 0..3 {
            data.extend(bg.bits().iter().map(|&b| if b { 0.0 } else { 1.0 }));
        }
    }
    Ok(Tensor::from_vec(data, &[labels.len(), 3, size, size])?)
}

/// Differentiable background removal: `x * w + fill * (1 - w)` for the
/// keep-weights `w` of [`foreground_weights`].
pub fn remove_background_tensor(x: &Tensor<f32>, keep: &Tensor<f32>) -> Result<Tensor<f32>> {
    let fill = keep.affine(-labelspace::BACKGROUND_FILL, labelspace::BACKGROUND_FILL);
    Ok(x.mul(keep)?.add(&fill)?)
}

/// Quantized label maps of a `[B, 3, R, R]` network output.
pub fn quantize_batch(y: &Tensor<f32>) -> Result<Vec<LabelMap>> {
    Ok(Image::from_batch_tensor(y, 1.0, 0.0)?
        .iter()
        .map(labelspace::quantize)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_transform_is_exact() {
        let img = Image::new(2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 0.0, 0.5]).unwrap();
        assert_eq!(Affine::IDENTITY.warp_image(&img), img);
        let label = LabelMap::from_classes(2, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(Affine::IDENTITY.warp_label(&label).unwrap(), label);
    }

    #[test]
    fn sampled_transforms_stay_in_range() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = cfg.sample(&mut rng);
            assert!(t.angle.abs() <= 10f64.to_radians() + 1e-12);
            assert!(t.tx.abs() <= 0.05 && t.ty.abs() <= 0.05);
            assert!((0.9..=1.1).contains(&t.scale));
        }
    }
}
