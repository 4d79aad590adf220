//! Parameterized building blocks shared by every network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use shapegene_tensor::{ConvSpec, Param, Scalar, Tensor};

use crate::error::Result;
use crate::synthgen::mix_seed;

const NORM_EPS: f64 = 1e-5;
const LEAK: f64 = 0.2;

fn name_seed(seed: u64, name: &str) -> u64 {
    name.bytes().fold(seed, |acc, b| mix_seed(acc, u64::from(b)))
}

/// Gaussian weights with standard deviation `gain / sqrt(fan_in)`.
pub(crate) fn init_param<T: Scalar>(
    seed: u64,
    name: String,
    shape: &[usize],
    fan_in: usize,
    gain: f64,
) -> Param<T> {
    let n: usize = shape.iter().product();
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(&mut rng))).collect();
    Param::new(name, shape, data).expect("consistent shape")
}

pub(crate) fn const_param<T: Scalar>(name: String, shape: &[usize], value: f64) -> Param<T> {
    let n: usize = shape.iter().product();
    Param::new(name, shape, vec![T::from_f64_lossy(value); n]).expect("consistent shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Act {
    None,
    Relu,
    Leaky,
}

impl Act {
    pub(crate) fn apply<T: Scalar>(self, x: Tensor<T>) -> Tensor<T> {
        match self {
            Act::None => x,
            Act::Relu => x.relu(),
            Act::Leaky => x.leaky_relu(T::from_f64_lossy(LEAK)),
        }
    }

    fn gain(self) -> f64 {
        match self {
            Act::None => 1.0,
            Act::Relu | Act::Leaky => std::f64::consts::SQRT_2,
        }
    }
}

/// Per-channel instance normalization with a learned scale and shift.
#[derive(Clone)]
pub(crate) struct Norm<T: Scalar> {
    pub(crate) gamma: Param<T>,
    pub(crate) beta: Param<T>,
}

impl<T: Scalar> Norm<T> {
    pub(crate) fn new(name: &str, channels: usize) -> Self {
        Norm {
            gamma: const_param(format!("{name}.gamma"), &[channels], 1.0),
            beta: const_param(format!("{name}.beta"), &[channels], 0.0),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>, track: bool) -> Result<Tensor<T>> {
        Ok(x.instance_norm(
            &self.gamma.bind(track),
            &self.beta.bind(track),
            T::from_f64_lossy(NORM_EPS),
        )?)
    }

    fn params(&self) -> [&Param<T>; 2] {
        [&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

/// Convolution or transposed convolution, optionally followed by instance
/// normalization, then an activation.
#[derive(Clone)]
pub(crate) struct ConvLayer<T: Scalar> {
    pub(crate) weight: Param<T>,
    pub(crate) bias: Option<Param<T>>,
    pub(crate) norm: Option<Norm<T>>,
    pub(crate) spec: ConvSpec,
    pub(crate) transposed: bool,
    pub(crate) act: Act,
}

pub(crate) struct ConvOpts {
    pub(crate) transposed: bool,
    pub(crate) norm: bool,
    pub(crate) act: Act,
}

impl ConvOpts {
    pub(crate) fn conv(norm: bool, act: Act) -> Self {
        ConvOpts {
            transposed: false,
            norm,
            act,
        }
    }

    pub(crate) fn deconv(norm: bool, act: Act) -> Self {
        ConvOpts {
            transposed: true,
            norm,
            act,
        }
    }
}

impl<T: Scalar> ConvLayer<T> {
    pub(crate) fn new(
        seed: u64,
        name: &str,
        cin: usize,
        cout: usize,
        spec: ConvSpec,
        opts: ConvOpts,
    ) -> Self {
        let k = spec.kernel;
        let (shape, fan_in) = if opts.transposed {
            // each output pixel sees roughly cin * (k / stride)^2 inputs
            let per_axis = (k / spec.stride).max(1);
            ([cin, cout, k, k], cin * per_axis * per_axis)
        } else {
            ([cout, cin, k, k], cin * k * k)
        };
        let weight = init_param(seed, format!("{name}.w"), &shape, fan_in, opts.act.gain());
        // instance norm removes any per-channel constant, so the bias would be dead
        let bias = (!opts.norm).then(|| const_param(format!("{name}.b"), &[cout], 0.0));
        let norm = opts.norm.then(|| Norm::new(&format!("{name}.norm"), cout));
        ConvLayer {
            weight,
            bias,
            norm,
            spec,
            transposed: opts.transposed,
            act: opts.act,
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>, track: bool) -> Result<Tensor<T>> {
        let w = self.weight.bind(track);
        let b = self.bias.as_ref().map(|b| b.bind(track));
        let y = if self.transposed {
            x.conv_transpose2d(&w, b.as_ref(), self.spec)?
        } else {
            x.conv2d(&w, b.as_ref(), self.spec)?
        };
        let y = match &self.norm {
            Some(n) => n.forward(&y, track)?,
            None => y,
        };
        Ok(self.act.apply(y))
    }

    pub(crate) fn out_size(&self, input: usize) -> Option<usize> {
        if self.transposed {
            self.spec.deconv_out(input)
        } else {
            self.spec.conv_out(input)
        }
    }

    pub(crate) fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        if let Some(n) = &self.norm {
            v.extend(n.params());
        }
        v
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        if let Some(n) = &mut self.norm {
            v.extend(n.params_mut());
        }
        v
    }
}

/// `x + IN(conv(relu(IN(conv(x)))))` at constant size and width.
#[derive(Clone)]
pub(crate) struct ResBlock<T: Scalar> {
    a: ConvLayer<T>,
    b: ConvLayer<T>,
}

impl<T: Scalar> ResBlock<T> {
    pub(crate) fn new(seed: u64, name: &str, channels: usize) -> Self {
        let spec = ConvSpec::new(3, 1, 1);
        ResBlock {
            a: ConvLayer::new(seed, &format!("{name}.a"), channels, channels, spec, ConvOpts::conv(true, Act::Relu)),
            b: ConvLayer::new(seed, &format!("{name}.b"), channels, channels, spec, ConvOpts::conv(true, Act::None)),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>, track: bool) -> Result<Tensor<T>> {
        let h = self.b.forward(&self.a.forward(x, track)?, track)?;
        Ok(x.add(&h)?)
    }

    pub(crate) fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.a.params();
        v.extend(self.b.params());
        v
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.a.params_mut();
        v.extend(self.b.params_mut());
        v
    }
}

#[derive(Clone)]
pub(crate) struct Linear<T: Scalar> {
    pub(crate) weight: Param<T>,
    pub(crate) bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub(crate) fn new(seed: u64, name: &str, fin: usize, fout: usize) -> Self {
        Linear {
            weight: init_param(seed, format!("{name}.w"), &[fout, fin], fin, 1.0),
            bias: const_param(format!("{name}.b"), &[fout], 0.0),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>, track: bool) -> Result<Tensor<T>> {
        Ok(x.linear(&self.weight.bind(track), &self.bias.bind(track))?)
    }

    pub(crate) fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Maps `[0, 1]` inputs to `[-1, 1]`.
pub(crate) fn to_signed<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.affine(T::from_f64_lossy(2.0), T::from_f64_lossy(-1.0))
}
