use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Tensor<T> {
    /// Per-sample, per-channel normalization over spatial positions followed
    /// by a learned per-channel scale and shift.
    pub fn instance_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4()?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(invalid(
                "instance_norm",
                format!("affine shapes {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
            ));
        }
        let hw = h * w;
        let n = T::from_usize(hw).expect("plane size");
        let x = self.data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); b * c];
        let mut out = vec![T::zero(); x.len()];
        for plane in 0..b * c {
            let ci = plane % c;
            let src = &x[plane * hw..(plane + 1) * hw];
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[plane] = is;
            let (gm, bt) = (gamma.data()[ci], beta.data()[ci]);
            for i in 0..hw {
                let xh = (src[i] - mean) * is;
                xhat[plane * hw + i] = xh;
                out[plane * hw + i] = gm * xh + bt;
            }
        }
        let (xin, g_t, b_t) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::from_op(
            out,
            vec![b, c, h, w],
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _| {
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = xin.requires_grad().then(|| vec![T::zero(); b * c * hw]);
                for plane in 0..b * c {
                    let ci = plane % c;
                    let gp = &g[plane * hw..(plane + 1) * hw];
                    let xp = &xhat[plane * hw..(plane + 1) * hw];
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for i in 0..hw {
                        sum_g = sum_g + gp[i];
                        sum_gx = sum_gx + gp[i] * xp[i];
                    }
                    dgamma[ci] = dgamma[ci] + sum_gx;
                    dbeta[ci] = dbeta[ci] + sum_g;
                    if let Some(dx) = dx.as_mut() {
                        let gm = g_t.data()[ci];
                        let k = gm * inv_std[plane] / n;
                        let dst = &mut dx[plane * hw..(plane + 1) * hw];
                        for i in 0..hw {
                            dst[i] = k * (n * gp[i] - sum_g - xp[i] * sum_gx);
                        }
                    }
                }
                vec![
                    dx,
                    g_t.requires_grad().then_some(dgamma),
                    b_t.requires_grad().then_some(dbeta),
                ]
            }),
        ))
    }
}
