use crate::error::{invalid, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    /// Pointwise map `y = f(x)` whose derivative is expressed through `x` and `y`.
    fn unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, y| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .zip(y)
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let ga = a.requires_grad().then(|| {
                    g.iter().zip(b.data()).map(|(&g, &b)| g * b).collect()
                });
                let gb = b.requires_grad().then(|| {
                    g.iter().zip(a.data()).map(|(&g, &a)| g * a).collect()
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    /// `a * x + b` in one node.
    pub fn affine(&self, a: T, b: T) -> Tensor<T> {
        self.unary(move |x| a * x + b, move |_, _| a)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-T::one())
    }

    /// Absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&self) -> Tensor<T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sqr(&self) -> Tensor<T> {
        let two = T::one() + T::one();
        self.unary(|x| x * x, move |x, _| two * x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        let half = T::from_f64_lossy(0.5);
        self.unary(|x| x.sqrt(), move |_, y| half / y)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        self.unary(
            move |x| if x > T::zero() { x } else { slope * x },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum::<T>();
        let n = self.len();
        Tensor::from_op(
            vec![s],
            vec![],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.len().max(1);
        let inv = T::one() / T::from_usize(n).expect("length fits");
        let s = self.data().iter().copied().sum::<T>() * inv;
        let len = self.len();
        Tensor::from_op(
            vec![s],
            vec![],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0] * inv; len])]),
        )
    }

    /// Sum of each row of a `[rows, cols]` view: returns shape `[rows]`.
    pub fn sum_rows(&self, rows: usize) -> Result<Tensor<T>> {
        if rows == 0 || !self.len().is_multiple_of(rows) {
            return Err(invalid("sum_rows", format!("{} rows do not divide {}", rows, self.len())));
        }
        let cols = self.len() / rows;
        let out = self
            .data()
            .chunks(cols)
            .map(|r| r.iter().copied().sum::<T>())
            .collect();
        Ok(Tensor::from_op(
            out,
            vec![rows],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(rows * cols);
                for &gr in g {
                    gx.extend(std::iter::repeat_n(gr, cols));
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Concatenates along axis 1 (channels for NCHW, features for `[B, F]`).
    pub fn cat_dim1(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| invalid("cat_dim1", "no inputs"))?;
        let b = first.shape().first().copied().unwrap_or(0);
        let tail: Vec<usize> = first.shape().get(2..).unwrap_or(&[]).to_vec();
        let inner: usize = tail.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            if p.shape().len() != first.shape().len()
                || p.shape()[0] != b
                || p.shape().get(2..).unwrap_or(&[]) != tail.as_slice()
            {
                return Err(TensorError::ShapeMismatch {
                    op: "cat_dim1",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(p.shape()[1] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(b * total);
        for bi in 0..b {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[bi * w..(bi + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[1] = parts.iter().map(|p| p.shape()[1]).sum();
        let inputs: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
        let wb = widths.clone();
        Ok(Tensor::from_op(
            out,
            shape,
            inputs,
            Box::new(move |g, _| {
                let mut grads: Vec<Vec<T>> = wb.iter().map(|&w| Vec::with_capacity(b * w)).collect();
                let mut off = 0;
                for _ in 0..b {
                    for (gi, &w) in grads.iter_mut().zip(&wb) {
                        gi.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Slice `[start, start + len)` along axis 1.
    pub fn narrow_dim1(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 || start + len > shape[1] {
            return Err(invalid(
                "narrow_dim1",
                format!("range {start}+{len} out of bounds for {shape:?}"),
            ));
        }
        let b = shape[0];
        let inner: usize = shape[2..].iter().product();
        let row = shape[1] * inner;
        let mut out = Vec::with_capacity(b * len * inner);
        for bi in 0..b {
            let base = bi * row + start * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[1] = len;
        let full = self.len();
        Ok(Tensor::from_op(
            out,
            oshape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); full];
                for bi in 0..b {
                    let base = bi * row + start * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[bi * len * inner..(bi + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenates along the batch axis.
    pub fn cat_batch(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| invalid("cat_batch", "no inputs"))?;
        let tail = first.shape()[1..].to_vec();
        let mut b = 0;
        let mut out = Vec::new();
        for p in parts {
            if p.shape()[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "cat_batch",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            b += p.shape()[0];
            out.extend_from_slice(p.data());
        }
        let mut shape = vec![b];
        shape.extend_from_slice(&tail);
        let lens: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        Ok(Tensor::from_op(
            out,
            shape,
            parts.iter().map(|p| (*p).clone()).collect(),
            Box::new(move |g, _| {
                let mut off = 0;
                lens.iter()
                    .map(|&l| {
                        let s = g[off..off + l].to_vec();
                        off += l;
                        Some(s)
                    })
                    .collect()
            }),
        ))
    }

    /// Slice `[start, start + len)` along the batch axis.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(invalid(
                "narrow_batch",
                format!("range {start}+{len} out of bounds for {shape:?}"),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let out = self.data()[start * inner..(start + len) * inner].to_vec();
        let mut oshape = shape.clone();
        oshape[0] = len;
        let full = self.len();
        Ok(Tensor::from_op(
            out,
            oshape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); full];
                gx[start * inner..(start + len) * inner].copy_from_slice(g);
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_through_shared_input() {
        // f = sum((w*x)^2), df/dw = 2 w x^2
        let w = Tensor::<f64>::variable(vec![1.5, 2.0], &[2]).unwrap();
        let x = Tensor::<f64>::from_vec(vec![0.3, -0.7], &[2]).unwrap();
        let f = w.mul(&x).unwrap().sqr().sum_all();
        let g = f.backward().unwrap();
        let gw = g.get(&w).unwrap();
        assert!((gw[0] - 2.0 * 1.5 * 0.09).abs() < 1e-12);
        assert!((gw[1] - 2.0 * 2.0 * 0.49).abs() < 1e-12);
    }

    #[test]
    fn diamond_graph_accumulates() {
        let x = Tensor::<f64>::variable(vec![3.0], &[1]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap(); // x^2 + x
        let g = y.sum_all().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[7.0]);
    }

    #[test]
    fn cat_and_narrow_are_inverse() {
        let a = Tensor::<f64>::variable((0..12).map(f64::from).collect(), &[2, 3, 2]).unwrap();
        let b = Tensor::<f64>::variable((0..8).map(f64::from).collect(), &[2, 2, 2]).unwrap();
        let c = Tensor::cat_dim1(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 5, 2]);
        let back = c.narrow_dim1(3, 2).unwrap();
        assert_eq!(back.data(), b.data());
        let g = back.sum_all().backward().unwrap();
        assert!(g.get(&a).unwrap().iter().all(|&v| v == 0.0));
        assert!(g.get(&b).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_graph_has_no_grads() {
        let x = Tensor::<f32>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.sqr().mean_all();
        assert!(!y.requires_grad());
        assert!(y.backward().unwrap().is_empty());
    }
}
