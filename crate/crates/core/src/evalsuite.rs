//! Metrics: Fréchet feature distance, a classifier-entropy score, identity
//! embedding distance, part IoU and the leakage of part edits, plus the
//! evaluation table over a test split.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shapegene_tensor::Tensor;

use crate::checkpoint::CheckpointBundle;
use crate::error::{Error, IoContext, Result};
use crate::image::{FaceImage, Image};
use crate::labelspace::{self, EditingMask, LabelMap, Part, PART_COUNT};
use crate::netzoo::{FeatureNet, IdentityNet};
use crate::pipeline::FaceModel;
use crate::synthgen::{mix_seed, Split};
use crate::trainer::{Dataset, Sample};

/// Most negative eigenvalue accepted (and clamped to zero) in a covariance
/// or in the product under the matrix square root.
pub const EIGEN_TOLERANCE: f64 = 1e-6;

const CHUNK: usize = 16;

/// Mean and covariance of a feature distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGaussian {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
    pub count: usize,
}

fn sym_eigen(m: DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(m)
}

/// Symmetric PSD square root; eigenvalues in `[-EIGEN_TOLERANCE, 0)` are
/// clamped, anything more negative is an error.
fn psd_sqrt(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let e = sym_eigen(m);
    let mut vals = e.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -EIGEN_TOLERANCE {
            return Err(Error::InvalidArgument(format!("{what} has eigenvalue {v} below -{EIGEN_TOLERANCE}")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose())
}

impl FeatureGaussian {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::Shape(format!("covariance of {} values for dimension {d}", cov.len())));
        }
        if count < 2 {
            return Err(Error::InvalidArgument(format!("a Gaussian needs at least 2 samples, got {count}")));
        }
        if mean.iter().chain(&cov).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature Gaussian".into()));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[i * d + j] - cov[j * d + i]).abs() > EIGEN_TOLERANCE {
                    return Err(Error::InvalidArgument("covariance is not symmetric".into()));
                }
            }
        }
        if d > 0 {
            let min = sym_eigen(DMatrix::from_row_slice(d, d, &cov)).eigenvalues.min();
            if min < -EIGEN_TOLERANCE {
                return Err(Error::InvalidArgument(format!("covariance has eigenvalue {min}")));
            }
        }
        Ok(FeatureGaussian { mean, cov, count })
    }

    /// Sample mean and unbiased covariance of `rows`.
    pub fn from_samples(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("a Gaussian needs at least 2 samples, got {n}")));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows of different lengths".into()));
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in 0..=i {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..=i {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Self::new(mean, cov, n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of `(S_a S_b)^(1/2)` is computed as that of the symmetric
/// `(S_a^(1/2) S_b S_a^(1/2))^(1/2)`, which has the same eigenvalues.
pub fn frechet_distance(a: &FeatureGaussian, b: &FeatureGaussian) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("Gaussians of dimension {} and {}", a.dim(), b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (sa, sb) = (a.matrix(), b.matrix());
    let root_a = psd_sqrt(sa.clone(), "first covariance")?;
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let mut cross = 0.0;
    for v in sym_eigen(inner).eigenvalues.iter() {
        if *v < -EIGEN_TOLERANCE {
            return Err(Error::InvalidArgument(format!("covariance product has eigenvalue {v}")));
        }
        cross += v.max(0.0).sqrt();
    }
    Ok(mean_term + sa.trace() + sb.trace() - 2.0 * cross)
}

const BOUND_SNAP: f64 = 1e-12;

/// `exp(mean_i KL(p_i || p_bar))` over class-probability rows, in `[1, K]`.
pub fn is_like_score(probabilities: &[Vec<f64>]) -> Result<f64> {
    let n = probabilities.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no probability rows".into()));
    }
    let k = probabilities[0].len();
    for row in probabilities {
        if row.len() != k {
            return Err(Error::Shape("probability rows of different lengths".into()));
        }
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("row is not a distribution (sum {sum})")));
        }
    }
    let marginal: Vec<f64> = (0..k)
        .map(|j| probabilities.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let mut kl_sum = 0.0;
    for row in probabilities {
        for (&p, &m) in row.iter().zip(&marginal) {
            if p > 0.0 && p != m {
                kl_sum += p * (p / m).ln();
            }
        }
    }
    let score = (kl_sum / n as f64).exp().clamp(1.0, k as f64);
    // rounding in the marginal leaves the extreme cases a few ulps off
    Ok(if score - 1.0 < BOUND_SNAP {
        1.0
    } else if k as f64 - score < BOUND_SNAP {
        k as f64
    } else {
        score
    })
}

/// An identity network known to come out of training.
pub struct IdentityEmbedder {
    net: IdentityNet<f32>,
}

impl IdentityEmbedder {
    /// Best identity network of a stage-0 checkpoint; fails if the
    /// checkpoint's embedder never took an optimizer step.
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = CheckpointBundle::load(path)?;
        let trained = ckpt.optimizers.get("adam.idnet").is_some_and(|o| o.steps > 0);
        if ckpt.stage != "features" || !trained {
            return Err(Error::Fingerprint {
                expected: "trained identity network".into(),
                found: format!("{} checkpoint without identity training", ckpt.stage),
            });
        }
        let mut net = IdentityNet::new(&ckpt.net_config, 0)?;
        ckpt.load_network("best.idnet", &mut net)?;
        Ok(IdentityEmbedder { net })
    }

    /// Unit-normalized embeddings, one row per image.
    pub fn embed(&self, images: &[&FaceImage]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let x = Image::batch_tensor::<f32>(chunk, 1.0, 0.0)?;
            out.extend(crate::trainer::unit_rows(&self.net.embed(&x, false)?));
        }
        Ok(out)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Euclidean distance between unit-normalized identity embeddings.
pub fn identity_distance(embedder: &IdentityEmbedder, a: &FaceImage, b: &FaceImage) -> Result<f64> {
    a.check_same_size(b)?;
    let e = embedder.embed(&[a, b])?;
    Ok(euclidean(&e[0], &e[1]))
}

/// Intersection over union of the part's masks; 1 when both are empty.
pub fn part_iou(pred: &LabelMap, gt: &LabelMap, part: Part) -> Result<f64> {
    if pred.size() != gt.size() {
        return Err(Error::ResolutionMismatch(pred.size(), gt.size()));
    }
    let a = labelspace::part_mask(pred, part)?;
    let b = labelspace::part_mask(gt, part)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of changed pixels (by class) lying outside `edit_mask`; 0 when
/// nothing changed.
pub fn leakage_metric(before: &LabelMap, after: &LabelMap, edit_mask: &EditingMask) -> Result<f64> {
    if before.size() != after.size() {
        return Err(Error::ResolutionMismatch(before.size(), after.size()));
    }
    if edit_mask.size() != before.size() {
        return Err(Error::ResolutionMismatch(before.size(), edit_mask.size()));
    }
    let (b, a) = (before.classes()?, after.classes()?);
    let (mut changed, mut outside) = (0usize, 0usize);
    for (i, (x, y)) in b.iter().zip(a).enumerate() {
        if x != y {
            changed += 1;
            outside += usize::from(!edit_mask.get(i));
        }
    }
    Ok(if changed == 0 { 0.0 } else { outside as f64 / changed as f64 })
}

/// Per-part IoU of the best local parsers of a stage-1 checkpoint: each
/// part's decoded partial label, quantized, against the ground-truth part.
pub fn local_parser_iou(path: &Path, samples: &[Sample]) -> Result<BTreeMap<Part, f64>> {
    let net = CheckpointBundle::load(path)?.net_config;
    let (encoders, decoders) = crate::trainer::load_parsers(path, &net)?;
    let mut per_part: BTreeMap<Part, Vec<f64>> = BTreeMap::new();
    for chunk in samples.chunks(CHUNK) {
        let images: Vec<&FaceImage> = chunk.iter().map(|s| &s.image).collect();
        let x = Image::batch_tensor::<f32>(&images, 1.0, 0.0)?;
        for part in Part::ALL {
            let y = decoders[part.index()].forward(&encoders.get(part).forward(&x, false)?, false)?;
            for (pred, s) in crate::trainer::quantize_batch(&y)?.iter().zip(chunk) {
                per_part.entry(part).or_default().push(part_iou(pred, &s.label, part)?);
            }
        }
    }
    Ok(per_part.into_iter().map(|(p, v)| (p, mean(&v))).collect())
}

/// A named checkpoint to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedCheckpoint {
    pub name: String,
    pub path: PathBuf,
}

impl std::str::FromStr for NamedCheckpoint {
    type Err = Error;

    /// `name=path`, or a bare path named after its parent directory.
    fn from_str(s: &str) -> Result<Self> {
        let (name, path) = match s.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(s);
                let name = p
                    .parent()
                    .and_then(|d| d.file_name())
                    .or_else(|| p.file_stem())
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| s.to_string());
                (name, p)
            }
        };
        if name.is_empty() || path.as_os_str().is_empty() {
            return Err(Error::InvalidArgument(format!("bad checkpoint spec {s:?}")));
        }
        Ok(NamedCheckpoint { name, path })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub manifest: PathBuf,
    /// Stage-0 checkpoint with the feature network and identity embedder.
    pub features: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate only the first this many test faces.
    #[serde(default)]
    pub limit: Option<usize>,
    /// Part edited in the receptor/donor protocol; random per receptor if unset.
    #[serde(default)]
    pub part: Option<Part>,
    /// Receptor/donor pairs for the leakage measurement (each over all parts).
    #[serde(default = "default_leakage_pairs")]
    pub leakage_pairs: usize,
    /// Directory for interpolation strips and swap grids.
    #[serde(default)]
    pub grids: Option<PathBuf>,
    #[serde(default)]
    pub checkpoints: Vec<NamedCheckpoint>,
}

fn default_leakage_pairs() -> usize {
    100
}

impl EvalConfig {
    pub fn new(manifest: impl Into<PathBuf>, features: impl Into<PathBuf>) -> Self {
        EvalConfig {
            manifest: manifest.into(),
            features: features.into(),
            seed: 0,
            limit: None,
            part: None,
            leakage_pairs: default_leakage_pairs(),
            grids: None,
            checkpoints: Vec::new(),
        }
    }

    /// Parses a TOML config; relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg: EvalConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.manifest);
        fix(&mut cfg.features);
        if let Some(g) = cfg.grids.as_mut() {
            fix(g);
        }
        cfg.checkpoints.iter_mut().for_each(|c| fix(&mut c.path));
        Ok(cfg)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(serde_json::to_vec(self)?)))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One row of the evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub checkpoint_digest: String,
    /// Fréchet distance between feature Gaussians of real test faces and
    /// composited remixed faces.
    pub fid_like: Option<f64>,
    pub is_like: Option<f64>,
    /// Mean identity distance between receptor and composited remix.
    pub identity_distance: Option<f64>,
    /// Mean absolute difference between the composited remix and the
    /// receptor over pixels outside the editing mask.
    pub out_of_mask_l1: Option<f64>,
    /// Parsing IoU of every part on the test faces.
    pub part_iou: BTreeMap<String, f64>,
    pub mean_iou: f64,
    /// Mean leakage of slot replacement, per part and overall.
    pub leakage_per_part: BTreeMap<String, f64>,
    pub leakage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub dataset_digest: String,
    pub test_faces: usize,
    /// Sanity references: two disjoint halves of the test set, and the test
    /// set against uniform noise images.
    pub fid_halves: f64,
    pub fid_noise: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).at(path)
    }

    /// Every metric is finite.
    pub fn is_finite(&self) -> bool {
        let row_ok = |r: &EvalRow| {
            [r.fid_like, r.is_like, r.identity_distance, r.out_of_mask_l1]
                .iter()
                .flatten()
                .chain(r.part_iou.values())
                .chain(r.leakage_per_part.values())
                .chain([&r.mean_iou, &r.leakage])
                .all(|v| v.is_finite())
        };
        self.fid_halves.is_finite() && self.fid_noise.is_finite() && self.rows.iter().all(row_ok)
    }
}

/// Feature statistics and class probabilities from the feature network.
pub struct FeatureProbe {
    phi: FeatureNet<f32>,
}

impl FeatureProbe {
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = CheckpointBundle::load(path)?;
        if ckpt.stage != "features" {
            return Err(Error::InvalidArgument(format!("{} is not a features checkpoint", path.display())));
        }
        let mut phi = FeatureNet::new(&ckpt.net_config, 0)?;
        ckpt.load_network("best.phi", &mut phi)?;
        Ok(FeatureProbe { phi })
    }

    /// Pooled features and hair-template probabilities per image.
    pub fn probe(&self, images: &[&FaceImage]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (mut feats, mut probs) = (Vec::new(), Vec::new());
        for chunk in images.chunks(CHUNK) {
            let x = Image::batch_tensor::<f32>(chunk, 1.0, 0.0)?;
            let out = self.phi.forward_all(&x, false)?;
            feats.extend(rows_f64(&out.pooled));
            probs.extend(rows_f64(&out.hair_logits).iter().map(|r| softmax(r)));
        }
        Ok((feats, probs))
    }

    pub fn gaussian(&self, images: &[&FaceImage]) -> Result<FeatureGaussian> {
        FeatureGaussian::from_samples(&self.probe(images)?.0)
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter().map(|v| v / sum).collect()
}

fn rows_f64(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let n = t.shape()[0];
    let d = t.len() / n.max(1);
    t.data().chunks(d).map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect()
}

/// The fixed donor and edited part of every receptor.
pub fn donor_protocol(n: usize, seed: u64, part: Option<Part>) -> Vec<(usize, usize, Part)> {
    if n < 2 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xD0D0));
    (0..n)
        .map(|a| {
            let b = (a + rng.random_range(1..n)) % n;
            let p = Part::ALL[rng.random_range(0..PART_COUNT)];
            (a, b, part.unwrap_or(p))
        })
        .collect()
}

fn noise_images(n: usize, size: usize, seed: u64) -> Vec<FaceImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x4015E));
    (0..n)
        .map(|_| {
            let data = (0..size * size * 3).map(|_| rng.random::<f32>()).collect();
            Image::new(size, data).expect("consistent size")
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean absolute difference over the pixels (all channels) where the mask is off.
pub fn out_of_mask_l1(a: &FaceImage, b: &FaceImage, mask: &EditingMask) -> Result<f64> {
    a.check_same_size(b)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..a.pixels() {
        if !mask.get(i) {
            let (pa, pb) = (a.pixel(i), b.pixel(i));
            sum += (0..3).map(|c| f64::from((pa[c] - pb[c]).abs())).sum::<f64>();
            n += 3;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Leakage of slot replacement over the first `pairs` protocol pairs and
/// all parts, with masks from the decoded receptor and donor labels.
fn leakage_study(
    model: &FaceModel,
    test: &[Sample],
    protocol: &[(usize, usize, Part)],
    pairs: usize,
) -> Result<BTreeMap<Part, Vec<f64>>> {
    let mut per_part: BTreeMap<Part, Vec<f64>> = BTreeMap::new();
    for &(a, b, _) in protocol.iter().take(pairs) {
        let (label_a, f_a) = model.parse(&test[a].image)?;
        let (label_b, f_b) = model.parse(&test[b].image)?;
        for part in Part::ALL {
            let after = model.decode(&crate::genecore::replace_slot(&f_a, &f_b, part)?)?;
            let mask = labelspace::editing_mask(&label_a, &label_b, part)?;
            per_part.entry(part).or_default().push(leakage_metric(&label_a, &after, &mask)?);
        }
    }
    Ok(per_part)
}

fn eval_checkpoint(
    named: &NamedCheckpoint,
    cfg: &EvalConfig,
    test: &[Sample],
    probe: &FeatureProbe,
    embedder: &IdentityEmbedder,
    real_gaussian: &FeatureGaussian,
) -> Result<EvalRow> {
    let model = FaceModel::load(&named.path)?;
    let images: Vec<&FaceImage> = test.iter().map(|s| &s.image).collect();
    let parsed = model.parse_batch(&images)?;
    let mut part_iou = BTreeMap::new();
    for part in Part::ALL {
        let v = parsed
            .iter()
            .zip(test)
            .map(|(p, s)| self::part_iou(p, &s.label, part))
            .collect::<Result<Vec<_>>>()?;
        part_iou.insert(part.name().to_string(), mean(&v));
    }
    let mean_iou = mean(&part_iou.values().copied().collect::<Vec<_>>());

    let protocol = donor_protocol(test.len(), cfg.seed, cfg.part);
    let leak = leakage_study(&model, test, &protocol, cfg.leakage_pairs)?;
    let leakage_per_part: BTreeMap<String, f64> = leak.iter().map(|(p, v)| (p.name().to_string(), mean(v))).collect();
    let leakage = mean(&leak.values().flatten().copied().collect::<Vec<_>>());

    let (mut fid_like, mut is_like, mut id_dist, mut oom) = (None, None, None, None);
    if model.transformer.is_some() {
        let mut remixed = Vec::with_capacity(protocol.len());
        let mut oom_v = Vec::with_capacity(protocol.len());
        for &(a, b, part) in &protocol {
            let r = model.remix(&test[a].image, &test[b].image, part, 1.0)?;
            let face = r.composited.expect("transformer present");
            let m1 = labelspace::editing_mask(&test[a].label, &test[b].label, part)?;
            oom_v.push(out_of_mask_l1(&face, &test[a].image, &m1)?);
            remixed.push(face);
        }
        let refs: Vec<&FaceImage> = remixed.iter().collect();
        let (feats, probs) = probe.probe(&refs)?;
        fid_like = Some(frechet_distance(real_gaussian, &FeatureGaussian::from_samples(&feats)?)?);
        is_like = Some(is_like_score(&probs)?);
        let e_r = embedder.embed(&refs)?;
        let e_a = embedder.embed(&protocol.iter().map(|&(a, _, _)| &test[a].image).collect::<Vec<_>>())?;
        id_dist = Some(mean(&e_r.iter().zip(&e_a).map(|(x, y)| euclidean(x, y)).collect::<Vec<_>>()));
        oom = Some(mean(&oom_v));
    }
    if let Some(dir) = &cfg.grids {
        write_grids(&model, test, &protocol, &dir.join(&named.name))?;
    }
    Ok(EvalRow {
        name: named.name.clone(),
        checkpoint_digest: model.digest.clone(),
        fid_like,
        is_like,
        identity_distance: id_dist,
        out_of_mask_l1: oom,
        part_iou,
        mean_iou,
        leakage_per_part,
        leakage,
    })
}

/// Evaluates every checkpoint of `cfg` on the test split.
pub fn run_eval_table(cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.checkpoints.is_empty() {
        return Err(Error::InvalidArgument("no checkpoints to evaluate".into()));
    }
    for c in &cfg.checkpoints {
        if !c.path.exists() {
            return Err(Error::MissingCheckpoint(c.path.clone()));
        }
    }
    let manifest_bytes = std::fs::read(&cfg.manifest).at(&cfg.manifest)?;
    let test = Dataset::load(&cfg.manifest, Split::Test, cfg.limit)?;
    if test.len() < 4 {
        return Err(Error::InvalidArgument(format!("test split has only {} faces", test.len())));
    }
    let probe = FeatureProbe::load(&cfg.features)?;
    let embedder = IdentityEmbedder::load(&cfg.features)?;
    let images: Vec<&FaceImage> = test.samples.iter().map(|s| &s.image).collect();
    let real = probe.gaussian(&images)?;
    let half = images.len() / 2;
    let fid_halves = frechet_distance(&probe.gaussian(&images[..half])?, &probe.gaussian(&images[half..])?)?;
    let noise = noise_images(images.len(), test.resolution, cfg.seed);
    let fid_noise = frechet_distance(&real, &probe.gaussian(&noise.iter().collect::<Vec<_>>())?)?;
    let rows = cfg
        .checkpoints
        .iter()
        .map(|c| eval_checkpoint(c, cfg, &test.samples, &probe, &embedder, &real))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        config_digest: cfg.digest()?,
        dataset_digest: hex(&Sha256::digest(&manifest_bytes)),
        test_faces: test.len(),
        fid_halves,
        fid_noise,
        rows,
    })
}

/// Tiles equally sized images into a `cols`-wide grid.
pub fn tile(images: &[&Image], cols: usize) -> Result<Image> {
    let size = images.first().map(|i| i.size()).unwrap_or(0);
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols);
    let (w, h) = (cols * size, rows * size);
    // square canvas: the image type is square, so pad the short side
    let side = w.max(h);
    let mut out = Image::filled(side, [1.0; 3]);
    for (k, img) in images.iter().enumerate() {
        if img.size() != size {
            return Err(Error::ResolutionMismatch(size, img.size()));
        }
        let (ox, oy) = ((k % cols) * size, (k / cols) * size);
        for y in 0..size {
            for x in 0..size {
                out.set_pixel((oy + y) * side + ox + x, img.pixel(y * size + x));
            }
        }
    }
    Ok(out)
}

/// Interpolation strips (receptor, five blends, donor) and a hair swap
/// grid (receptors by donors) for the first few test faces.
fn write_grids(model: &FaceModel, test: &[Sample], protocol: &[(usize, usize, Part)], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let show = |r: &crate::pipeline::Remix| r.composited.clone().unwrap_or_else(|| r.label.image().clone());
    for &(a, b, part) in protocol.iter().take(4) {
        let frames = model.interpolate(&test[a].image, &test[b].image, part, 5)?;
        let mut strip = vec![test[a].image.clone()];
        strip.extend(frames.iter().map(show));
        strip.push(test[b].image.clone());
        let labels: Vec<Image> = frames.iter().map(|f| f.label.image().clone()).collect();
        let mut all: Vec<&Image> = strip.iter().collect();
        all.push(test[a].label.image());
        all.extend(labels.iter());
        let grid = tile(&all, strip.len())?;
        grid.save_png(&dir.join(format!("strip_{a:03}_{}_{b:03}.png", part.name())))?;
    }
    let k = test.len().min(4);
    let mut cells: Vec<Image> = vec![Image::filled(test[0].image.size(), [1.0; 3])];
    cells.extend(test[..k].iter().map(|s| s.image.clone()));
    for a in 0..k {
        cells.push(test[a].image.clone());
        for b in 0..k {
            cells.push(show(&model.remix(&test[a].image, &test[b].image, Part::Hair, 1.0)?));
        }
    }
    tile(&cells.iter().collect::<Vec<_>>(), k + 1)?.save_png(&dir.join("swap_hair.png"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frechet_one_dimensional_case() {
        let a = FeatureGaussian::new(vec![0.0], vec![1.0], 10).unwrap();
        let b = FeatureGaussian::new(vec![3.0], vec![1.0], 10).unwrap();
        assert_eq!(frechet_distance(&a, &b).unwrap(), 9.0);
    }

    #[test]
    fn is_like_forced_cases() {
        let uniform = vec![vec![0.25; 4]; 5];
        assert_eq!(is_like_score(&uniform).unwrap(), 1.0);
        let onehot: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        assert_eq!(is_like_score(&onehot).unwrap(), 4.0);
    }
}
