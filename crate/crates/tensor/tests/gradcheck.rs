//! Central-difference checks of every differentiable operation in f64.

use shapegene_tensor::{ConvSpec, Tensor};

fn ramp(n: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 2.0 * scale
        })
        .collect()
}

/// Compares the analytic gradient of `f` w.r.t. each input with central
/// differences; `f` rebuilds the graph from raw input buffers.
fn check(inputs: Vec<(Vec<f64>, Vec<usize>)>, f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>) {
    let vars: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(d, s)| Tensor::variable(d.clone(), s).unwrap())
        .collect();
    let grads = f(&vars).backward().unwrap();
    let eps = 1e-6;
    for (k, (data, shape)) in inputs.iter().enumerate() {
        let analytic = grads.get(&vars[k]).expect("gradient present").to_vec();
        for i in 0..data.len() {
            let eval = |delta: f64| {
                let ts: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, (d, s))| {
                        let mut d = d.clone();
                        if j == k {
                            d[i] += delta;
                        }
                        Tensor::from_vec(d, s).unwrap()
                    })
                    .collect();
                f(&ts).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic[i] - numeric).abs() / denom;
            assert!(
                rel < 1e-5,
                "input {k} (shape {shape:?}) coord {i}: analytic {} numeric {numeric}",
                analytic[i]
            );
        }
    }
}

fn weighted_sum(t: &Tensor<f64>) -> Tensor<f64> {
    let w = Tensor::from_vec(ramp(t.len(), 99, 1.0), t.shape()).unwrap();
    t.mul(&w).unwrap().sum_all()
}

#[test]
fn conv2d_all_inputs() {
    for (spec, h) in [(ConvSpec::new(3, 1, 1), 5), (ConvSpec::new(4, 2, 1), 6), (ConvSpec::new(2, 1, 0), 3)] {
        let k = spec.kernel;
        check(
            vec![
                (ramp(2 * 3 * h * h, 1, 1.0), vec![2, 3, h, h]),
                (ramp(4 * 3 * k * k, 2, 0.5), vec![4, 3, k, k]),
                (ramp(4, 3, 0.5), vec![4]),
            ],
            |v| weighted_sum(&v[0].conv2d(&v[1], Some(&v[2]), spec).unwrap()),
        );
    }
}

#[test]
fn conv_transpose2d_all_inputs() {
    for (spec, h) in [(ConvSpec::new(4, 2, 1), 3), (ConvSpec::new(4, 1, 0), 1), (ConvSpec::new(3, 1, 1), 4)] {
        let k = spec.kernel;
        check(
            vec![
                (ramp(2 * 3 * h * h, 4, 1.0), vec![2, 3, h, h]),
                (ramp(3 * 2 * k * k, 5, 0.5), vec![3, 2, k, k]),
                (ramp(2, 6, 0.5), vec![2]),
            ],
            |v| weighted_sum(&v[0].conv_transpose2d(&v[1], Some(&v[2]), spec).unwrap()),
        );
    }
}

#[test]
fn instance_norm_all_inputs() {
    check(
        vec![
            (ramp(2 * 3 * 16, 7, 2.0), vec![2, 3, 4, 4]),
            (ramp(3, 8, 1.0), vec![3]),
            (ramp(3, 9, 1.0), vec![3]),
        ],
        |v| weighted_sum(&v[0].instance_norm(&v[1], &v[2], 1e-5).unwrap()),
    );
}

#[test]
fn linear_pool_and_cross_entropy() {
    check(
        vec![
            (ramp(3 * 4 * 9, 10, 1.0), vec![3, 4, 3, 3]),
            (ramp(5 * 4, 11, 1.0), vec![5, 4]),
            (ramp(5, 12, 1.0), vec![5]),
        ],
        |v| {
            v[0].global_avg_pool()
                .unwrap()
                .linear(&v[1], &v[2])
                .unwrap()
                .cross_entropy(&[0, 4, 2])
                .unwrap()
        },
    );
}

#[test]
fn pointwise_ops() {
    let x = ramp(12, 13, 1.5).iter().map(|v| if v.abs() < 0.05 { 0.3 } else { *v }).collect::<Vec<_>>();
    let pos: Vec<f64> = x.iter().map(|v| v.abs() + 0.1).collect();
    type Op = fn(&Tensor<f64>) -> Tensor<f64>;
    let ops: [Op; 7] = [
        |t| t.sigmoid(),
        |t| t.tanh(),
        |t| t.relu(),
        |t| t.leaky_relu(0.2),
        |t| t.abs(),
        |t| t.sqr(),
        |t| t.affine(-2.0, 0.5),
    ];
    for op in ops {
        check(vec![(x.clone(), vec![3, 4])], |v| weighted_sum(&op(&v[0])));
    }
    check(vec![(pos, vec![12])], |v| weighted_sum(&v[0].sqrt()));
}

#[test]
fn binary_and_shape_ops() {
    check(
        vec![(ramp(24, 14, 1.0), vec![2, 3, 2, 2]), (ramp(16, 15, 1.0), vec![2, 2, 2, 2])],
        |v| {
            let c = Tensor::cat_dim1(&[&v[0], &v[1]]).unwrap();
            let n = c.narrow_dim1(1, 3).unwrap();
            let m = n.mul(&v[0]).unwrap().sub(&v[0]).unwrap();
            let b = Tensor::cat_batch(&[&m, &m]).unwrap().narrow_batch(1, 2).unwrap();
            weighted_sum(&b.reshape(&[4, 6]).unwrap()).add(&v[1].mean_all()).unwrap()
        },
    );
}
