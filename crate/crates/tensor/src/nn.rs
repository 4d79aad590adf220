use crate::error::{invalid, Result, TensorError};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

impl<T: Scalar> Tensor<T> {
    /// `[B, F] @ weight^T + bias` with `weight: [O, F]`, `bias: [O]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, f) = match self.shape() {
            &[b, f] => (b, f),
            s => return Err(invalid("linear", format!("expected [B, F], got {s:?}"))),
        };
        let o = match weight.shape() {
            &[o, wf] if wf == f => o,
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    lhs: self.shape().to_vec(),
                    rhs: s.to_vec(),
                })
            }
        };
        if bias.shape() != [o] {
            return Err(invalid("linear", format!("bias shape {:?} != [{o}]", bias.shape())));
        }
        let mut out = vec![T::zero(); b * o];
        matmul(b, f, o, self.data(), false, weight.data(), true, &mut out, false);
        for row in out.chunks_mut(o) {
            row.iter_mut().zip(bias.data()).for_each(|(v, &bb)| *v = *v + bb);
        }
        let (x, w, bs) = (self.clone(), weight.clone(), bias.clone());
        Ok(Tensor::from_op(
            out,
            vec![b, o],
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g, _| {
                let gx = x.requires_grad().then(|| {
                    let mut gx = vec![T::zero(); b * f];
                    matmul(b, o, f, g, false, w.data(), false, &mut gx, false);
                    gx
                });
                let gw = w.requires_grad().then(|| {
                    let mut gw = vec![T::zero(); o * f];
                    matmul(o, b, f, g, true, x.data(), false, &mut gw, false);
                    gw
                });
                let gb = bs.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    gb
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// `[B, C, H, W]` -> `[B, C]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4()?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).expect("plane size");
        let out = self
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(Tensor::from_op(
            out,
            vec![b, c],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(b * c * hw);
                for &gv in g {
                    gx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class indices.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor<T>> {
        let (b, k) = match self.shape() {
            &[b, k] => (b, k),
            s => return Err(invalid("cross_entropy", format!("expected [B, K], got {s:?}"))),
        };
        if targets.len() != b || targets.iter().any(|&t| t >= k) {
            return Err(invalid("cross_entropy", "targets do not match logits"));
        }
        let probs = softmax_rows(self.data(), k);
        let inv_b = T::one() / T::from_usize(b).expect("batch");
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -(probs[i * k + t].max(T::min_positive_value())).ln())
            .sum::<T>()
            * inv_b;
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            vec![loss],
            vec![],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gx[i * k + t] = gx[i * k + t] - T::one();
                }
                gx.iter_mut().for_each(|v| *v = *v * g[0] * inv_b);
                vec![Some(gx)]
            }),
        ))
    }
}

/// Row-wise numerically stable softmax of a row-major `[_, k]` buffer.
pub fn softmax_rows<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s = e.iter().copied().sum::<T>();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}
