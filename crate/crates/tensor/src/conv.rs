use crate::error::{invalid, Result};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

/// Square-kernel convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            kernel,
            stride,
            padding,
        }
    }

    /// Output extent of a convolution over `input` pixels.
    pub fn conv_out(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution over `input` pixels.
    pub fn deconv_out(&self, input: usize) -> Option<usize> {
        ((input.max(1) - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }
}

/// Geometry of the im2col lowering of one convolution.
#[derive(Debug, Clone, Copy)]
struct Lowering {
    batch: usize,
    channels: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    spec: ConvSpec,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.channels * self.spec.kernel * self.spec.kernel
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// `[C*k*k, B*OH*OW]` patch matrix of an NCHW image.
    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let k = self.spec.kernel;
        let (s, p) = (self.spec.stride as isize, self.spec.padding as isize);
        let (oh, ow) = (self.out_h, self.out_w);
        let ncols = self.cols();
        let mut cols = vec![T::zero(); self.rows() * ncols];
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                    for b in 0..self.batch {
                        let plane = &x[(b * self.channels + c) * self.in_h * self.in_w..]
                            [..self.in_h * self.in_w];
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= self.in_h as isize {
                                continue;
                            }
                            let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                            let dst = &mut dst_row[(b * oh + oy) * ow..(b * oh + oy + 1) * ow];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix >= 0 && ix < self.in_w as isize {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Lowering::im2col`]: scatters patches back into an image.
    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let k = self.spec.kernel;
        let (s, p) = (self.spec.stride as isize, self.spec.padding as isize);
        let (oh, ow) = (self.out_h, self.out_w);
        let ncols = self.cols();
        let mut x = vec![T::zero(); self.batch * self.channels * self.in_h * self.in_w];
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src_row = &cols[row * ncols..(row + 1) * ncols];
                    for b in 0..self.batch {
                        let base = (b * self.channels + c) * self.in_h * self.in_w;
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= self.in_h as isize {
                                continue;
                            }
                            let src = &src_row[(b * oh + oy) * ow..(b * oh + oy + 1) * ow];
                            let dst = &mut x[base + iy as usize * self.in_w..][..self.in_w];
                            for (ox, &v) in src.iter().enumerate() {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix >= 0 && ix < self.in_w as isize {
                                    dst[ix as usize] = dst[ix as usize] + v;
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// `[B, C, HW]` -> `[C, B*HW]`.
fn batch_to_channel_major<T: Scalar>(x: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(ci * b + bi) * hw..(ci * b + bi + 1) * hw]
                .copy_from_slice(&x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]);
        }
    }
    out
}

/// `[C, B*HW]` -> `[B, C, HW]`.
fn channel_to_batch_major<T: Scalar>(x: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ci in 0..c {
        for bi in 0..b {
            out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                .copy_from_slice(&x[(ci * b + bi) * hw..(ci * b + bi + 1) * hw]);
        }
    }
    out
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], b: usize, c: usize, hw: usize) {
    for bi in 0..b {
        for (ci, &bv) in bias.iter().enumerate().take(c) {
            out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                .iter_mut()
                .for_each(|v| *v = *v + bv);
        }
    }
}

fn channel_sums<T: Scalar>(g: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for bi in 0..b {
        for (ci, o) in out.iter_mut().enumerate() {
            *o = *o + g[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter().copied().sum::<T>();
        }
    }
    out
}

impl<T: Scalar> Tensor<T> {
    /// 2-D cross-correlation. `weight: [O, C, k, k]`, `bias: [O]`.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, spec: ConvSpec) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4()?;
        let (o, wc, kh, kw) = weight.dims4()?;
        if wc != c || kh != spec.kernel || kw != spec.kernel {
            return Err(invalid(
                "conv2d",
                format!("weight {:?} incompatible with input {:?} / {spec:?}", weight.shape(), self.shape()),
            ));
        }
        if let Some(bias) = bias {
            if bias.shape() != [o] {
                return Err(invalid("conv2d", format!("bias shape {:?} != [{o}]", bias.shape())));
            }
        }
        let (oh, ow) = match (spec.conv_out(h), spec.conv_out(w)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(invalid("conv2d", format!("kernel larger than padded input {h}x{w}"))),
        };
        let low = Lowering {
            batch: b,
            channels: c,
            in_h: h,
            in_w: w,
            out_h: oh,
            out_w: ow,
            spec,
        };
        let cols = low.im2col(self.data());
        let (rows, ncols) = (low.rows(), low.cols());
        let mut tmp = vec![T::zero(); o * ncols];
        matmul(o, rows, ncols, weight.data(), false, &cols, false, &mut tmp, false);
        drop(cols);
        let mut out = channel_to_batch_major(&tmp, b, o, oh * ow);
        if let Some(bias) = bias {
            add_channel_bias(&mut out, bias.data(), b, o, oh * ow);
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            inputs.push(bias.clone());
        }
        let (x, wt, has_bias) = (self.clone(), weight.clone(), bias.is_some());
        Ok(Tensor::from_op(
            out,
            vec![b, o, oh, ow],
            inputs,
            Box::new(move |g, _| {
                let gt = batch_to_channel_major(g, b, o, oh * ow);
                let gx = x.requires_grad().then(|| {
                    let mut dcols = vec![T::zero(); rows * ncols];
                    matmul(rows, o, ncols, wt.data(), true, &gt, false, &mut dcols, false);
                    low.col2im(&dcols)
                });
                let gw = wt.requires_grad().then(|| {
                    let cols = low.im2col(x.data());
                    let mut dw = vec![T::zero(); o * rows];
                    matmul(o, ncols, rows, &gt, false, &cols, true, &mut dw, false);
                    dw
                });
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(Some(channel_sums(g, b, o, oh * ow)));
                }
                res
            }),
        ))
    }

    /// 2-D transposed convolution. `weight: [C_in, C_out, k, k]`, `bias: [C_out]`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        spec: ConvSpec,
    ) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4()?;
        let (wc, o, kh, kw) = weight.dims4()?;
        if wc != c || kh != spec.kernel || kw != spec.kernel {
            return Err(invalid(
                "conv_transpose2d",
                format!("weight {:?} incompatible with input {:?} / {spec:?}", weight.shape(), self.shape()),
            ));
        }
        if let Some(bias) = bias {
            if bias.shape() != [o] {
                return Err(invalid("conv_transpose2d", format!("bias shape {:?} != [{o}]", bias.shape())));
            }
        }
        let (oh, ow) = match (spec.deconv_out(h), spec.deconv_out(w)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => return Err(invalid("conv_transpose2d", "padding exceeds output extent")),
        };
        // The adjoint convolution maps [o, oh, ow] back onto [c, h, w].
        let low = Lowering {
            batch: b,
            channels: o,
            in_h: oh,
            in_w: ow,
            out_h: h,
            out_w: w,
            spec,
        };
        if spec.conv_out(oh) != Some(h) || spec.conv_out(ow) != Some(w) {
            return Err(invalid("conv_transpose2d", "geometry is not invertible"));
        }
        let (rows, ncols) = (low.rows(), low.cols());
        let xt = batch_to_channel_major(self.data(), b, c, h * w);
        let mut cols = vec![T::zero(); rows * ncols];
        matmul(rows, c, ncols, weight.data(), true, &xt, false, &mut cols, false);
        let mut out = low.col2im(&cols);
        drop(cols);
        if let Some(bias) = bias {
            add_channel_bias(&mut out, bias.data(), b, o, oh * ow);
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            inputs.push(bias.clone());
        }
        let (x, wt, has_bias) = (self.clone(), weight.clone(), bias.is_some());
        Ok(Tensor::from_op(
            out,
            vec![b, o, oh, ow],
            inputs,
            Box::new(move |g, _| {
                let gcols = low.im2col(g);
                let gx = x.requires_grad().then(|| {
                    let mut gxt = vec![T::zero(); c * ncols];
                    matmul(c, rows, ncols, wt.data(), false, &gcols, false, &mut gxt, false);
                    channel_to_batch_major(&gxt, b, c, h * w)
                });
                let gw = wt.requires_grad().then(|| {
                    let xt = batch_to_channel_major(x.data(), b, c, h * w);
                    let mut dw = vec![T::zero(); c * rows];
                    matmul(c, ncols, rows, &xt, false, &gcols, true, &mut dw, false);
                    dw
                });
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(Some(channel_sums(g, b, o, oh * ow)));
                }
                res
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], shape: (usize, usize, usize, usize), w: &[f64], o: usize, s: ConvSpec) -> Vec<f64> {
        let (b, c, h, wd) = shape;
        let k = s.kernel;
        let oh = s.conv_out(h).unwrap();
        let ow = s.conv_out(wd).unwrap();
        let mut out = vec![0.0; b * o * oh * ow];
        for bi in 0..b {
            for oi in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                                    let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w[((oi * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((bi * o + oi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for spec in [ConvSpec::new(3, 1, 1), ConvSpec::new(4, 2, 1), ConvSpec::new(5, 2, 2)] {
            let (b, c, h, w, o) = (2, 3, 7, 6, 4);
            let x = ramp(b * c * h * w, 2.0);
            let wt = ramp(o * c * spec.kernel * spec.kernel, 1.0);
            let xt = Tensor::<f64>::from_vec(x.clone(), &[b, c, h, w]).unwrap();
            let wtt = Tensor::<f64>::from_vec(wt.clone(), &[o, c, spec.kernel, spec.kernel]).unwrap();
            let y = xt.conv2d(&wtt, None, spec).unwrap();
            let expect = naive_conv(&x, (b, c, h, w), &wt, o, spec);
            for (a, e) in y.data().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for matching geometry
        let spec = ConvSpec::new(4, 2, 1);
        let (b, c, h, w, o) = (2, 3, 8, 8, 5);
        let x = Tensor::<f64>::from_vec(ramp(b * c * h * w, 1.0), &[b, c, h, w]).unwrap();
        let wt = Tensor::<f64>::from_vec(ramp(o * c * 16, 1.0), &[o, c, 4, 4]).unwrap();
        let y = x.conv2d(&wt, None, spec).unwrap();
        let r = Tensor::<f64>::from_vec(ramp(y.len(), 3.0), y.shape()).unwrap();
        // conv weight [o, c, k, k] read as transposed weight [c_in=o, c_out=c, k, k]
        let xt = r.conv_transpose2d(&wt, None, spec).unwrap();
        assert_eq!(xt.shape(), x.shape());
        let lhs: f64 = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(xt.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn deconv_from_single_pixel() {
        let spec = ConvSpec::new(4, 1, 0);
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[1, 2, 1, 1]).unwrap();
        let w = Tensor::<f64>::from_vec(ramp(2 * 3 * 16, 1.0), &[2, 3, 4, 4]).unwrap();
        let y = x.conv_transpose2d(&w, None, spec).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        for o in 0..3 {
            for p in 0..16 {
                let e = w.data()[o * 16 + p] + 2.0 * w.data()[(3 + o) * 16 + p];
                assert!((y.data()[o * 16 + p] - e).abs() < 1e-12);
            }
        }
    }
}
