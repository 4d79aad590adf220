mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use shapegene::evalsuite::*;
use shapegene::labelspace::{EditingMask, LabelMap, Part};

/// `tr(sqrt(M))` by Denman-Beavers iteration, valid for matrices with
/// positive real spectrum.
fn trace_sqrt(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let (mut y, mut z) = (m.clone(), DMatrix::identity(n, n));
    for _ in 0..100 {
        let yi = y.clone().try_inverse().unwrap();
        let zi = z.clone().try_inverse().unwrap();
        y = (&y + zi) * 0.5;
        z = (&z + yi) * 0.5;
    }
    y.trace()
}

fn oracle_frechet(a: &FeatureGaussian, b: &FeatureGaussian) -> f64 {
    let d = a.dim();
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    mean_term + sa.trace() + sb.trace() - 2.0 * trace_sqrt(&(&sa * &sb))
}

fn random_gaussian(d: usize, seed: u64) -> FeatureGaussian {
    let mut r = common::rng(seed);
    let l = DMatrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
    let cov = &l * l.transpose() + DMatrix::identity(d, d) * 0.1;
    let mean = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
    let rows: Vec<f64> = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| cov[(i, j)]).collect();
    FeatureGaussian::new(mean, rows, 100).unwrap()
}

fn brute_is(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len() as f64;
    let k = rows[0].len();
    let mut kl = 0.0;
    for row in rows {
        for j in 0..k {
            let m: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            if row[j] > 0.0 {
                kl += row[j] * (row[j] / m).ln();
            }
        }
    }
    (kl / n).exp()
}

fn labels(size: usize, classes: Vec<u8>) -> LabelMap {
    LabelMap::from_classes(size, classes).unwrap()
}

#[test]
fn frechet_matches_an_independent_square_root() {
    for seed in 0..20 {
        let a = random_gaussian(4, seed);
        let b = random_gaussian(4, seed + 100);
        let got = frechet_distance(&a, &b).unwrap();
        let want = oracle_frechet(&a, &b);
        assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "seed {seed}: {got} vs {want}");
        assert!((got - frechet_distance(&b, &a).unwrap()).abs() < 1e-8);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
    }
}

#[test]
fn frechet_shift_adds_squared_distance() {
    let a = random_gaussian(4, 7);
    let mut b = a.clone();
    b.mean[2] += 3.0;
    assert!((frechet_distance(&a, &b).unwrap() - 9.0).abs() < 1e-8);
    let c = random_gaussian(3, 8);
    assert!(frechet_distance(&a, &c).is_err());
}

#[test]
fn gaussian_validation() {
    assert!(FeatureGaussian::new(vec![0.0; 2], vec![1.0, 0.0, 0.0, 1.0], 1).is_err());
    assert!(FeatureGaussian::new(vec![0.0; 2], vec![1.0, 0.5, 0.0, 1.0], 5).is_err());
    assert!(FeatureGaussian::new(vec![0.0; 2], vec![-1.0, 0.0, 0.0, 1.0], 5).is_err());
    assert!(FeatureGaussian::new(vec![f64::NAN; 2], vec![1.0, 0.0, 0.0, 1.0], 5).is_err());
    assert!(FeatureGaussian::from_samples(&[vec![1.0, 2.0]]).is_err());
}

#[test]
fn sample_moments_are_unbiased() {
    let rows: Vec<Vec<f64>> = (0..50).map(|i| common::uniform(3, -1.0, 1.0, i)).collect();
    let g = FeatureGaussian::from_samples(&rows).unwrap();
    let n = rows.len() as f64;
    for j in 0..3 {
        let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        assert!((g.mean[j] - m).abs() < 1e-12);
        for k in 0..3 {
            let mk = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let c = rows.iter().map(|r| (r[j] - m) * (r[k] - mk)).sum::<f64>() / (n - 1.0);
            assert!((g.cov[j * 3 + k] - c).abs() < 1e-12);
        }
    }
    assert_eq!(g.count, 50);
}

#[test]
fn is_like_known_values() {
    let same = vec![vec![0.2, 0.3, 0.5]; 10];
    assert_eq!(is_like_score(&same).unwrap(), 1.0);
    assert_eq!(is_like_score(&vec![vec![0.2; 5]; 10]).unwrap(), 1.0);
    let onehot: Vec<Vec<f64>> = (0..12).map(|i| (0..4).map(|j| f64::from(u8::from(i % 4 == j))).collect()).collect();
    assert_eq!(is_like_score(&onehot).unwrap(), 4.0);
    for k in 2..12 {
        let rows: Vec<Vec<f64>> = (0..3 * k).map(|i| (0..k).map(|j| f64::from(u8::from(i % k == j))).collect()).collect();
        assert_eq!(is_like_score(&rows).unwrap(), k as f64);
    }
    assert!(is_like_score(&[vec![0.5, 0.6]]).is_err());
    assert!(is_like_score(&[vec![1.5, -0.5]]).is_err());
    assert!(is_like_score(&[]).is_err());
}

fn distribution(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum::<f64>() + 1e-9;
        let mut p: Vec<f64> = v.iter().map(|x| x / s).collect();
        let rest: f64 = p[1..].iter().sum();
        p[0] = (1.0 - rest).max(0.0);
        p
    })
}

proptest! {
    #[test]
    fn is_like_matches_brute_force(rows in prop::collection::vec(distribution(5), 2..20)) {
        let got = is_like_score(&rows).unwrap();
        prop_assert!((1.0..=5.0).contains(&got));
        prop_assert!((got - brute_is(&rows).clamp(1.0, 5.0)).abs() < 1e-9);
    }

    #[test]
    fn leakage_is_invariant_to_relabeling(
        before in prop::collection::vec(0u8..11, 64),
        after in prop::collection::vec(0u8..11, 64),
        mask in prop::collection::vec(any::<bool>(), 64),
        shift in 1u8..11,
    ) {
        let m = EditingMask::new(8, mask).unwrap();
        let base = leakage_metric(&labels(8, before.clone()), &labels(8, after.clone()), &m).unwrap();
        let perm = |v: &[u8]| v.iter().map(|c| (c + shift) % 11).collect::<Vec<_>>();
        let moved = leakage_metric(&labels(8, perm(&before)), &labels(8, perm(&after)), &m).unwrap();
        prop_assert_eq!(base, moved);
        prop_assert!((0.0..=1.0).contains(&base));
    }
}

#[test]
fn leakage_counts_changes_outside_the_mask() {
    let before = labels(4, vec![0; 16]);
    let after = labels(4, (0..16).map(|i| if i < 4 { 9 } else { 0 }).collect());
    let mask = EditingMask::new(4, (0..16).map(|i| i < 2).collect()).unwrap();
    assert_eq!(leakage_metric(&before, &after, &mask).unwrap(), 0.5);
    assert_eq!(leakage_metric(&before, &before, &mask).unwrap(), 0.0);
    assert_eq!(leakage_metric(&before, &after, &EditingMask::full(4)).unwrap(), 0.0);
    assert_eq!(leakage_metric(&before, &after, &EditingMask::empty(4)).unwrap(), 1.0);
    assert!(leakage_metric(&before, &labels(8, vec![0; 64]), &mask).is_err());
}

#[test]
fn part_iou_cases() {
    let empty = labels(4, vec![0; 16]);
    assert_eq!(part_iou(&empty, &empty, Part::Nose).unwrap(), 1.0);
    let a = labels(4, (0..16).map(|i| if i < 4 { 4 } else { 0 }).collect());
    let b = labels(4, (0..16).map(|i| if (2..6).contains(&i) { 4 } else { 0 }).collect());
    assert!((part_iou(&a, &b, Part::Nose).unwrap() - 2.0 / 6.0).abs() < 1e-12);
    assert_eq!(part_iou(&a, &empty, Part::Nose).unwrap(), 0.0);
    // mouth groups three classes
    let lips = labels(4, (0..16).map(|i| if i < 3 { 5 } else { 0 }).collect());
    let teeth = labels(4, (0..16).map(|i| if i < 3 { 7 } else { 0 }).collect());
    assert_eq!(part_iou(&lips, &teeth, Part::Mouth).unwrap(), 1.0);
    let raw = LabelMap::from_raw(shapegene::image::Image::filled(4, [0.4; 3]));
    assert!(part_iou(&raw, &a, Part::Nose).is_err());
}

#[test]
fn out_of_mask_l1_ignores_masked_pixels() {
    use shapegene::image::Image;
    let a = Image::filled(4, [0.0; 3]);
    let mut data = vec![0.0f32; 48];
    for v in &mut data[..6] {
        *v = 1.0;
    }
    let b = Image::new(4, data).unwrap();
    let covering = EditingMask::new(4, (0..16).map(|i| i < 2).collect()).unwrap();
    assert_eq!(out_of_mask_l1(&a, &b, &covering).unwrap(), 0.0);
    assert!((out_of_mask_l1(&a, &b, &EditingMask::empty(4)).unwrap() - 6.0 / 48.0).abs() < 1e-12);
    assert_eq!(out_of_mask_l1(&a, &b, &EditingMask::full(4)).unwrap(), 0.0);
}

#[test]
fn donor_protocol_is_fixed_and_never_self() {
    let p = donor_protocol(30, 5, None);
    assert_eq!(p, donor_protocol(30, 5, None));
    assert_ne!(p, donor_protocol(30, 6, None));
    assert_eq!(p.len(), 30);
    for (i, &(a, b, _)) in p.iter().enumerate() {
        assert_eq!(a, i);
        assert_ne!(a, b);
        assert!(b < 30);
    }
    let parts: std::collections::BTreeSet<Part> = p.iter().map(|t| t.2).collect();
    assert!(parts.len() > 1);
    assert!(donor_protocol(30, 5, Some(Part::Hair)).iter().all(|t| t.2 == Part::Hair));
    assert!(donor_protocol(1, 5, None).is_empty());
}

#[test]
fn checkpoint_specs_parse() {
    let a: NamedCheckpoint = "ours=/x/cyclic.ckpt".parse().unwrap();
    assert_eq!((a.name.as_str(), a.path.to_str().unwrap()), ("ours", "/x/cyclic.ckpt"));
    let b: NamedCheckpoint = "runs/no_id/cyclic.ckpt".parse().unwrap();
    assert_eq!(b.name, "no_id");
    assert!("=x".parse::<NamedCheckpoint>().is_err());
}

#[test]
fn eval_config_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eval.toml");
    std::fs::write(
        &path,
        "manifest = \"data/manifest.json\"\nfeatures = \"/abs/features.ckpt\"\n\n[[checkpoints]]\nname = \"a\"\npath = \"a.ckpt\"\n",
    )
    .unwrap();
    let cfg = EvalConfig::load(&path).unwrap();
    assert_eq!(cfg.manifest, dir.path().join("data/manifest.json"));
    assert_eq!(cfg.features.to_str(), Some("/abs/features.ckpt"));
    assert_eq!(cfg.checkpoints[0].path, dir.path().join("a.ckpt"));
    assert_eq!(cfg.leakage_pairs, 100);
    assert_eq!(cfg.digest().unwrap(), cfg.clone().digest().unwrap());
    std::fs::write(&path, "manifest = \"m\"\nfeatures = \"f\"\nbogus = 1\n").unwrap();
    assert!(EvalConfig::load(&path).is_err());
}

#[test]
fn eval_table_requires_checkpoints() {
    let mut cfg = EvalConfig::new("/nonexistent/manifest.json", "/nonexistent/f.ckpt");
    assert!(run_eval_table(&cfg).is_err());
    cfg.checkpoints.push("x=/nonexistent/x.ckpt".parse().unwrap());
    assert!(matches!(run_eval_table(&cfg), Err(shapegene::Error::MissingCheckpoint(_))));
}
