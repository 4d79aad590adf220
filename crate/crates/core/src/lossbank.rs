//! Loss terms, the gradient penalty, weighted totals and a finite-difference
//! gradient checker. Every reduction is a mean over all elements.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shapegene_tensor::{Module, Scalar, Tensor};

use crate::error::{Error, IoContext, Result};
use crate::netzoo::FeatureNet;

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("l1_loss", a, b)?;
    Ok(a.sub(b)?.abs().mean_all())
}

/// Sum over the five feature taps of the mean absolute feature difference.
/// The feature network itself is never updated through this loss.
pub fn perceptual_loss<T: Scalar>(phi: &FeatureNet<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("perceptual_loss", a, b)?;
    let fa = phi.features(a, false)?;
    let fb = phi.features(b, false)?;
    let mut total: Option<Tensor<T>> = None;
    for (x, y) in fa.iter().zip(&fb) {
        let term = x.sub(y)?.abs().mean_all();
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("feature net has taps"))
}

/// `mean((real - 1)^2) + mean(fake^2)`.
pub fn lsgan_d_loss<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<Tensor<T>> {
    let r = real.add_scalar(-T::one()).sqr().mean_all();
    let f = fake.sqr().mean_all();
    Ok(r.add(&f)?)
}

/// `mean((fake - 1)^2)`.
pub fn lsgan_g_loss<T: Scalar>(fake: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(fake.add_scalar(-T::one()).sqr().mean_all())
}

/// L1 plus weighted perceptual distance; the perceptual pass is skipped
/// when its weight is zero.
fn l1_plus_perceptual<T: Scalar>(phi: &FeatureNet<T>, a: &Tensor<T>, b: &Tensor<T>, w_vgg: f64) -> Result<Tensor<T>> {
    let l1 = l1_loss(a, b)?;
    if w_vgg == 0.0 {
        return Ok(l1);
    }
    let p = perceptual_loss(phi, a, b)?.mul_scalar(T::from_f64_lossy(w_vgg));
    Ok(l1.add(&p)?)
}

/// Label-domain cycle loss between the re-remixed label and the receptor's.
pub fn cycle_label_loss<T: Scalar>(phi: &FeatureNet<T>, y_rp: &Tensor<T>, y_a: &Tensor<T>, w_vgg: f64) -> Result<Tensor<T>> {
    l1_plus_perceptual(phi, y_rp, y_a, w_vgg)
}

/// Image-domain cycle loss; both images are expected background-removed.
pub fn cycle_image_loss<T: Scalar>(phi: &FeatureNet<T>, x_ap: &Tensor<T>, x_a: &Tensor<T>, w_vgg: f64) -> Result<Tensor<T>> {
    l1_plus_perceptual(phi, x_ap, x_a, w_vgg)
}

/// Expands `[B, 1, H, W]` binary masks to `[B, 3, H, W]` keep-weights `1 - m`.
fn keep_weights<T: Scalar>(mask: &Tensor<T>, like: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = like.dims4()?;
    let (mb, mc, mh, mw) = mask.dims4()?;
    if (mb, mc, mh, mw) != (b, 1, h, w) {
        return Err(Error::Shape(format!("mask {:?} for images {:?}", mask.shape(), like.shape())));
    }
    if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::NonBinaryMask);
    }
    let plane = h * w;
    let mut keep = Vec::with_capacity(b * c * plane);
    for s in 0..b {
        let m = &mask.data()[s * plane..(s + 1) * plane];
        for _ in 0..c {
            keep.extend(m.iter().map(|&v| T::one() - v));
        }
    }
    Ok(Tensor::from_vec(keep, like.shape())?)
}

/// `mean(|x_r - x_a| * (1 - m1)) + mean(|x_ap - x_cond2| * (1 - m2))`, where
/// `x_cond2` is the conditional input of the second transform.
pub fn masked_identity_loss<T: Scalar>(
    x_r: &Tensor<T>,
    x_a: &Tensor<T>,
    x_ap: &Tensor<T>,
    x_cond2: &Tensor<T>,
    m1: &Tensor<T>,
    m2: &Tensor<T>,
) -> Result<Tensor<T>> {
    same_shape("masked_identity_loss", x_r, x_a)?;
    same_shape("masked_identity_loss", x_ap, x_cond2)?;
    same_shape("masked_identity_loss", x_r, x_ap)?;
    let k1 = keep_weights(m1, x_r)?;
    let k2 = keep_weights(m2, x_ap)?;
    let a = x_r.sub(x_a)?.abs().mul(&k1)?.mean_all();
    let b = x_ap.sub(x_cond2)?.abs().mul(&k2)?.mean_all();
    Ok(a.add(&b)?)
}

/// Result of [`gradient_penalty`].
pub struct Penalty<T: Scalar> {
    /// Exact `mean_b (||grad_x D(x_b)|| - 1)^2`.
    pub value: f64,
    pub grad_norms: Vec<f64>,
    /// Differentiable in the discriminator parameters; its parameter
    /// gradient approximates that of `value` (its own value does not).
    pub surrogate: Tensor<T>,
}

/// Step of the directional difference used for the parameter gradient in
/// single precision. A crossing of an activation kink within the step
/// biases the estimate, so double precision uses [`PENALTY_STEP_F64`].
pub const PENALTY_STEP: f64 = 5e-3;
pub const PENALTY_STEP_F64: f64 = 1e-6;

fn penalty_step<T: Scalar>() -> f64 {
    if std::mem::size_of::<T>() >= 8 {
        PENALTY_STEP_F64
    } else {
        PENALTY_STEP
    }
}

/// Gradient penalty at `x = u real + (1 - u) fake`, one `u` per sample.
///
/// `disc(x, track)` returns the score map for a batch; the per-sample score
/// is the sum of its map. The value uses the exact input gradient. The
/// parameter gradient of `||g_b||` equals that of the directional derivative
/// `u_b . grad S(x_b)` with `u_b = g_b / ||g_b||` held fixed, which is taken
/// by a central difference along `u_b`, avoiding second-order autograd.
pub fn gradient_penalty<T, D>(disc: D, real: &Tensor<T>, fake: &Tensor<T>, mix: &[f64]) -> Result<Penalty<T>>
where
    T: Scalar,
    D: Fn(&Tensor<T>, bool) -> Result<Tensor<T>>,
{
    same_shape("gradient_penalty", real, fake)?;
    let b = real.shape()[0];
    if mix.len() != b {
        return Err(Error::Shape(format!("{} mixing weights for batch {b}", mix.len())));
    }
    let per = real.len() / b;
    let mut xhat = Vec::with_capacity(real.len());
    for (s, &u) in mix.iter().enumerate() {
        let u = T::from_f64_lossy(u);
        let r = &real.data()[s * per..(s + 1) * per];
        let f = &fake.data()[s * per..(s + 1) * per];
        xhat.extend(r.iter().zip(f).map(|(&r, &f)| u * r + (T::one() - u) * f));
    }
    let x = Tensor::variable(xhat.clone(), real.shape())?;
    let grads = disc(&x, false)?.sum_all().backward()?;
    let g = grads.get(&x).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); x.len()]);

    let mut norms = Vec::with_capacity(b);
    let mut shifted = Vec::with_capacity(2 * real.len());
    let mut minus = Vec::with_capacity(real.len());
    let h = penalty_step::<T>();
    for s in 0..b {
        let gs = &g[s * per..(s + 1) * per];
        let norm = gs.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        norms.push(norm);
        let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        let xs = &xhat[s * per..(s + 1) * per];
        for (&xv, &gv) in xs.iter().zip(gs) {
            let step = T::from_f64_lossy(h * gv.as_f64() * inv);
            shifted.push(xv + step);
            minus.push(xv - step);
        }
    }
    shifted.extend(minus);
    let value = norms.iter().map(|n| (n - 1.0).powi(2)).sum::<f64>() / b as f64;

    let mut shape = real.shape().to_vec();
    shape[0] = 2 * b;
    let pair = Tensor::from_vec(shifted, &shape)?;
    let scores = disc(&pair, true)?.sum_rows(2 * b)?;
    let mut coef = vec![T::zero(); 2 * b];
    for (s, n) in norms.iter().enumerate() {
        let c = 2.0 / b as f64 * (n - 1.0) / (2.0 * h);
        coef[s] = T::from_f64_lossy(c);
        coef[b + s] = T::from_f64_lossy(-c);
    }
    let surrogate = scores.mul(&Tensor::from_vec(coef, &[2 * b])?)?.sum_all();
    Ok(Penalty {
        value,
        grad_norms: norms,
        surrogate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub vgg: f64,
    pub gan: f64,
    pub cl: f64,
    pub id: f64,
    pub gi: f64,
    pub gl: f64,
    pub gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            vgg: 1.0,
            gan: 0.1,
            cl: 1.0,
            id: 1.0,
            gi: 0.1,
            gl: 0.1,
            gp: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.vgg, self.gan, self.cl, self.id, self.gi, self.gl, self.gp];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    /// Weight of each term of the cyclic objective, by term name.
    pub fn stage3(&self) -> [(&'static str, f64); 5] {
        [
            (STAGE3_TERMS[0], 1.0),
            (STAGE3_TERMS[1], self.cl),
            (STAGE3_TERMS[2], self.gi),
            (STAGE3_TERMS[3], self.gl),
            (STAGE3_TERMS[4], self.id),
        ]
    }
}

/// Names of the cyclic-objective terms: image cycle, label cycle, image
/// adversarial, label adversarial, masked identity.
pub const STAGE3_TERMS: [&str; 5] = ["cyc_image", "cyc_label", "gan_image", "gan_label", "identity"];

/// Named unweighted terms, their weights and the weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
    pub total: f64,
}

impl LossReport {
    /// Report over `(name, term, weight)` triples.
    pub fn weighted(entries: &[(&str, f64, f64)]) -> Self {
        let mut terms = BTreeMap::new();
        let mut weights = BTreeMap::new();
        let mut total = 0.0;
        for &(name, v, w) in entries {
            terms.insert(name.to_string(), v);
            weights.insert(name.to_string(), w);
            total += w * v;
        }
        LossReport { terms, weights, total }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms.values().all(|v| v.is_finite())
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&str> {
        self.terms.iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k.as_str())
    }
}

/// Weighted cyclic objective from already computed scalar terms.
pub fn total_stage3(terms: &BTreeMap<String, f64>, weights: &LossWeights) -> Result<LossReport> {
    let mut entries = Vec::with_capacity(5);
    for (name, w) in weights.stage3() {
        let v = terms
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing loss term {name}")))?;
        entries.push((name, *v, w));
    }
    Ok(LossReport::weighted(&entries))
}

/// Differentiable weighted sum of named terms plus its report.
pub fn weighted_total<T: Scalar>(entries: &[(&str, Tensor<T>, f64)]) -> Result<(Tensor<T>, LossReport)> {
    let mut total: Option<Tensor<T>> = None;
    let mut rows = Vec::with_capacity(entries.len());
    for (name, t, w) in entries {
        let v = t.item().as_f64();
        rows.push((*name, v, *w));
        if *w == 0.0 {
            continue;
        }
        let term = t.mul_scalar(T::from_f64_lossy(*w));
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let report = LossReport::weighted(&rows);
    if let Some(bad) = report.non_finite_term() {
        return Err(Error::NonFinite(format!("loss term {bad}")));
    }
    Ok((total.unwrap_or_else(|| Tensor::scalar(T::zero())), report))
}

/// One line of the newline-delimited training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub stage: String,
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
}

/// Append-only newline-delimited JSON log.
pub struct LossLog {
    path: PathBuf,
    file: std::fs::File,
}

impl LossLog {
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path).at(path)?;
        Ok(LossLog {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write(&mut self, iteration: u64, stage: &str, report: &LossReport) -> Result<()> {
        let rec = LogRecord {
            iteration,
            stage: stage.to_string(),
            terms: report.terms.clone(),
            total: report.total,
        };
        let mut line = serde_json::to_string(&rec)?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).at(&self.path)
    }

    pub fn read(path: &Path) -> Result<Vec<LogRecord>> {
        let text = std::fs::read_to_string(path).at(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates compared; all of them when fewer exist.
    pub samples: usize,
    pub seed: u64,
    /// Denominator floor of the relative error, so that two near-zero
    /// gradients compare by absolute difference.
    pub abs_floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            eps: 1e-6,
            tolerance: 1e-3,
            samples: 64,
            seed: 0,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Array index and coordinate with the largest error.
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `loss` over a random
/// subsample of coordinates of `point`.
pub fn compare_gradients<F>(mut loss: F, point: &[Vec<f64>], analytic: &[Vec<f64>], opts: &FdOptions) -> Result<FdReport>
where
    F: FnMut(&[Vec<f64>]) -> Result<f64>,
{
    let total: usize = point.iter().map(Vec::len).sum();
    let coords: Vec<(usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(a, v)| (0..v.len()).map(move |i| (a, i)))
        .collect();
    let picks: Vec<(usize, usize)> = if total <= opts.samples {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        (0..opts.samples).map(|_| coords[rng.random_range(0..total)]).collect()
    };
    let mut work: Vec<Vec<f64>> = point.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        passed: true,
    };
    for (a, i) in picks {
        let orig = work[a][i];
        work[a][i] = orig + opts.eps;
        let up = loss(&work)?;
        work[a][i] = orig - opts.eps;
        let down = loss(&work)?;
        work[a][i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("loss during finite differences".into()));
        }
        let numeric = (up - down) / (2.0 * opts.eps);
        let exact = analytic[a][i];
        let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(opts.abs_floor);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((a, i));
        }
    }
    report.passed = report.max_rel_error <= opts.tolerance;
    Ok(report)
}

/// Checks the gradient of `loss_fn` with respect to each input array.
pub fn finite_diff_check<F>(loss_fn: F, inputs: &[(Vec<usize>, Vec<f64>)], opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let vars = inputs
        .iter()
        .map(|(shape, data)| Ok(Tensor::variable(data.clone(), shape)?))
        .collect::<Result<Vec<_>>>()?;
    let loss = loss_fn(&vars)?;
    if !loss.item().is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = loss.backward()?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.len()]))
        .collect();
    let point: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let eval = |p: &[Vec<f64>]| -> Result<f64> {
        let ts = inputs
            .iter()
            .zip(p)
            .map(|((shape, _), d)| Ok(Tensor::from_vec(d.clone(), shape)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(loss_fn(&ts)?.item())
    };
    compare_gradients(eval, &point, &analytic, opts)
}

/// Checks the gradient of `loss_fn` with respect to every parameter of a
/// module. `loss_fn` must bind the parameters with tracking enabled.
pub fn finite_diff_check_module<M, F>(module: &mut M, loss_fn: F, opts: &FdOptions) -> Result<FdReport>
where
    M: Module<f64>,
    F: Fn(&M) -> Result<Tensor<f64>>,
{
    let loss = loss_fn(module)?;
    if !loss.item().is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = loss.backward()?;
    let analytic: Vec<Vec<f64>> = module
        .params()
        .iter()
        .map(|p| grads.get_id(p.id()).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    let point: Vec<Vec<f64>> = module.params().iter().map(|p| p.data().to_vec()).collect();
    let eval = |p: &[Vec<f64>]| -> Result<f64> {
        for (param, data) in module.params_mut().into_iter().zip(p) {
            if param.data() != data.as_slice() {
                param.set_data(data.clone())?;
            }
        }
        Ok(loss_fn(module)?.item())
    };
    compare_gradients(eval, &point, &analytic, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec(), &[v.len()]).unwrap()
    }

    #[test]
    fn simple_cases() {
        assert_eq!(l1_loss(&t(&[1.0, 0.0]), &t(&[0.0, 0.0])).unwrap().item(), 0.5);
        assert_eq!(lsgan_d_loss(&t(&[1.0; 4]), &t(&[0.0; 4])).unwrap().item(), 0.0);
        assert_eq!(lsgan_d_loss(&t(&[0.0; 4]), &t(&[1.0; 4])).unwrap().item(), 2.0);
        assert_eq!(lsgan_g_loss(&t(&[0.0; 3])).unwrap().item(), 1.0);
        assert!(l1_loss(&t(&[1.0]), &t(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn stage3_total_with_unit_terms() {
        let terms: BTreeMap<String, f64> = STAGE3_TERMS.iter().map(|n| (n.to_string(), 1.0)).collect();
        let r = total_stage3(&terms, &LossWeights::default()).unwrap();
        assert!((r.total - 3.2).abs() < 1e-12);
        let mut missing = terms.clone();
        missing.remove("identity");
        assert!(total_stage3(&missing, &LossWeights::default()).is_err());
    }
}
