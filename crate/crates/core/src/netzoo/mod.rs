//! Network architectures: part encoders, label decoders, the label-to-face
//! transformer, patch discriminators, the perceptual feature network and the
//! identity embedder.
//!
//! Every forward takes `[0, 1]` tensors in NCHW layout and rescales them to
//! `[-1, 1]` internally. Generators use instance normalization; the last
//! layer of every network is unnormalized.

mod layers;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shapegene_tensor::{ConvSpec, Module, Param, Scalar, Tensor};

use crate::error::{Error, Result};
use crate::labelspace::{Part, PART_COUNT};
use crate::synthgen::HAIR_TEMPLATES;
use layers::{to_signed, Act, ConvLayer, ConvOpts, Linear, ResBlock};

const ARCH_VERSION: &str = "shapegene-arch-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub resolution: usize,
    /// Length of one gene slot.
    pub gene_slot_dim: usize,
    /// Base width of part encoders and decoders.
    pub width: usize,
    pub transformer_width: usize,
    pub disc_width: usize,
    pub encoder_res_blocks: usize,
    pub decoder_res_blocks: usize,
    pub transformer_res_blocks: usize,
    pub feature_widths: [usize; 5],
    pub identity_widths: [usize; 5],
    pub identity_embedding: usize,
    /// Number of identity classes seen by the feature and identity heads.
    pub identity_classes: usize,
    pub norm: NormKind,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            resolution: 64,
            gene_slot_dim: 32,
            width: 32,
            transformer_width: 32,
            disc_width: 32,
            encoder_res_blocks: 4,
            decoder_res_blocks: 5,
            transformer_res_blocks: 9,
            feature_widths: [8, 16, 32, 64, 64],
            identity_widths: [16, 32, 64, 96, 128],
            identity_embedding: 64,
            identity_classes: 200,
            norm: NormKind::Instance,
        }
    }
}

impl NetConfig {
    /// Paper-scale configuration: 256 pixels and 128-long gene slots.
    pub fn paper_scale() -> Self {
        NetConfig {
            resolution: 256,
            gene_slot_dim: 128,
            width: 64,
            transformer_width: 64,
            disc_width: 64,
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.gene_slot_dim < 4 {
            return bad(format!("gene_slot_dim {} < 4", self.gene_slot_dim));
        }
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return bad(format!("resolution {} is not a power of two >= 8", self.resolution));
        }
        let widths = [self.width, self.transformer_width, self.disc_width, self.identity_embedding, self.identity_classes];
        if widths.iter().chain(&self.feature_widths).chain(&self.identity_widths).any(|&w| w == 0) {
            return bad("all widths must be positive".into());
        }
        if !self.width.is_multiple_of(2) || !self.transformer_width.is_multiple_of(2) {
            return bad("width and transformer_width must be even".into());
        }
        Ok(())
    }

    pub fn gene_dim(&self) -> usize {
        PART_COUNT * self.gene_slot_dim
    }

    /// Short digest of the architecture; changes with any field.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(ARCH_VERSION.as_bytes());
        h.update(json.as_bytes());
        hex16(&h.finalize())
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>, channels: usize) -> Result<usize> {
        let (b, c, h, w) = x.dims4()?;
        if h != self.resolution || w != self.resolution {
            return Err(Error::ResolutionMismatch(h.max(w), self.resolution));
        }
        if c != channels {
            return Err(Error::Shape(format!("expected {channels} input channels, got {c}")));
        }
        Ok(b)
    }
}

fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// A network with a named architecture.
pub trait Network<T: Scalar>: Module<T> {
    fn config(&self) -> &NetConfig;
    /// Architecture kind including any input/output dimensions.
    fn kind(&self) -> String;

    fn fingerprint(&self) -> String {
        format!("{}/{}", self.config().fingerprint(), self.kind())
    }
}

macro_rules! collect_params {
    ($self:ident, $($field:ident),*) => {{
        let mut v: Vec<&Param<T>> = Vec::new();
        $( for l in $self.$field.iter() { v.extend(l.params()); } )*
        v
    }};
}

macro_rules! collect_params_mut {
    ($self:ident, $($field:ident),*) => {{
        let mut v: Vec<&mut Param<T>> = Vec::new();
        $( for l in $self.$field.iter_mut() { v.extend(l.params_mut()); } )*
        v
    }};
}

/// Stem geometry shared by the part encoder: stride 2 until the feature map
/// reaches `max(R/8, 4)`.
fn stem_spec(size: usize, kernel: usize, res_size: usize) -> ConvSpec {
    if size > res_size {
        ConvSpec::new(kernel, 2, (kernel - 1) / 2)
    } else {
        ConvSpec::new(3, 1, 1)
    }
}

/// Part encoder: 3 convolutions, residual blocks, 2 more convolutions down
/// to a `d x 1 x 1` code.
#[derive(Clone)]
pub struct PartEncoder<T: Scalar> {
    cfg: NetConfig,
    part: Part,
    stem: Vec<ConvLayer<T>>,
    res: Vec<ResBlock<T>>,
    tail: Vec<ConvLayer<T>>,
}

impl<T: Scalar> PartEncoder<T> {
    pub fn new(cfg: &NetConfig, part: Part, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let name = format!("enc.{}", part.name());
        let w = cfg.width;
        let res_size = (cfg.resolution / 8).max(4);
        let mut size = cfg.resolution;
        let mut stem = Vec::new();
        for (i, (cin, cout, k)) in [(3, w, 5), (w, 2 * w, 4), (2 * w, 2 * w, 4)].into_iter().enumerate() {
            let spec = stem_spec(size, k, res_size);
            let layer = ConvLayer::new(seed, &format!("{name}.c{}", i + 1), cin, cout, spec, ConvOpts::conv(true, Act::Relu));
            size = layer.out_size(size).expect("stem geometry");
            stem.push(layer);
        }
        let res = (0..cfg.encoder_res_blocks)
            .map(|i| ResBlock::new(seed, &format!("{name}.r{i}"), 2 * w))
            .collect();
        let c4 = ConvLayer::new(seed, &format!("{name}.c4"), 2 * w, 4 * w, ConvSpec::new(4, 2, 1), ConvOpts::conv(true, Act::Relu));
        size = c4.out_size(size).expect("encoder geometry");
        let c5 = ConvLayer::new(seed, &format!("{name}.c5"), 4 * w, cfg.gene_slot_dim, ConvSpec::new(size, 1, 0), ConvOpts::conv(false, Act::None));
        Ok(PartEncoder {
            cfg: cfg.clone(),
            part,
            stem,
            res,
            tail: vec![c4, c5],
        })
    }

    pub fn part(&self) -> Part {
        self.part
    }

    /// `[B, 3, R, R]` image batch to `[B, d]` gene slots.
    pub fn forward(&self, x: &Tensor<T>, track: bool) -> Result<Tensor<T>> {
        let b = self.cfg.check_input(x, 3)?;
        let mut h = to_signed(x);
        for l in &self.stem {
            h = l.forward(&h, track)?;
        }
        for r in &self.res {
            h = r.forward(&h, track)?;
        }
        for l in &self.tail {
            h = l.forward(&h, track)?;
        }
        Ok(h.reshape(&[b, self.cfg.gene_slot_dim])?)
    }
}

impl<T: Scalar> Module<T> for PartEncoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        collect_params!(self, stem, res, tail)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        collect_params_mut!(self, stem, res, tail)
    }
}

impl<T: Scalar> Network<T> for PartEncoder<T> {
    fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn kind(&self) -> String {
        format!("part_encoder:{}", self.part.name())
    }
}

/// Label decoder: 2 transposed convolutions, residual blocks, 2 more
/// transposed convolutions and an output convolution squashed to `[0, 1]`.
/// Part decoders take one slot, the overall decoder a whole gene.
#[derive(Clone)]
pub struct Decoder<T: Scalar> {
    cfg: NetConfig,
    name: String,
    input_dim: usize,
    head: Vec<ConvLayer<T>>,
    res: Vec<ResBlock<T>>,
    tail: Vec<ConvLayer<T>>,
}

impl<T: Scalar> Decoder<T> {
    pub fn part(cfg: &NetConfig, part: Part, seed: u64) -> Result<Self> {
        Self::build(cfg, format!("dec.{}", part.name()), cfg.gene_slot_dim, seed)
    }

    pub fn overall(cfg: &NetConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, "dec.overall".into(), cfg.gene_dim(), seed)
    }

    fn build(cfg: &NetConfig, name: String, input_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let s0 = cfg.resolution / 8;
        let up = ConvSpec::new(4, 2, 1);
        let relu = || ConvOpts::deconv(true, Act::Relu);
        let head = vec![
            ConvLayer::new(seed, &format!("{name}.t1"), input_dim, 2 * w, ConvSpec::new(s0, 1, 0), relu()),
            ConvLayer::new(seed, &format!("{name}.t2"), 2 * w, w, up, relu()),
        ];
        let res = (0..cfg.decoder_res_blocks)
            .map(|i| ResBlock::new(seed, &format!("{name}.r{i}"), w))
            .collect();
        let tail = vec![
            ConvLayer::new(seed, &format!("{name}.t3"), w, w, up, relu()),
            ConvLayer::new(seed, &format!("{name}.t4"), w, w / 2, up, relu()),
            ConvLayer::new(seed, &format!("{name}.out"), w / 2, 3, ConvSpec::new(3, 1, 1), ConvOpts::conv(false, Act::None)),
        ];
        Ok(Decoder {
            cfg: cfg.clone(),
            name,
            input_dim,
            head,
            res,
            tail,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// `[B, n]` codes to `[B, 3, R, R]` label maps in `[0, 1]`.
    pub fn forward(&self, z: &Tensor<T>, track: bool) -> Result<Tensor<T>> {
        let b = match z.shape() {
            &[b, n] if n == self.input_dim => b,
            s => return Err(Error::GeneDimension(s.last().copied().unwrap_or(0), self.input_dim)),
        };
        let mut h = z.reshape(&[b, self.input_dim, 1, 1])?;
        for l in &self.head {
            h = l.forward(&h, track)?;
        }
        for r in &self.res {
            h = r.forward(&h, track)?;
        }
        for l in &self.tail {
            h = l.forward(&h, track)?;
        }
        Ok(h.sigmoid())
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        collect_params!(self, head, res, tail)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        collect_params_mut!(self, head, res, tail)
    }
}

impl<T: Scalar> Network<T> for Decoder<T> {
    fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn kind(&self) -> String {
        format!("decoder:{}:{}", self.name, self.input_dim)
    }
}

/// Label-to-face transformer: 5 convolutions, residual blocks and 4
/// transposed convolutions over the 6-channel stack of label and
/// conditional image.
#[derive(Clone)]
pub struct Transformer<T: Scalar> {
    cfg: NetConfig,
    head: Vec<ConvLayer<T>>,
    res: Vec<ResBlock<T>>,
    tail: Vec<ConvLayer<T>>,
}

impl<T: Scalar> Transformer<T> {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.transformer_width;
        let name = "transformer";
        let conv = |i: usize, cin, cout, spec| ConvLayer::new(seed, &format!("{name}.c{i}"), cin, cout, spec, ConvOpts::conv(true, Act::Relu));
        let deconv = |i: usize, cin, cout, spec| ConvLayer::new(seed, &format!("{name}.t{i}"), cin, cout, spec, ConvOpts::deconv(true, Act::Relu));
        let down = ConvSpec::new(4, 2, 1);
        let same = ConvSpec::new(3, 1, 1);
        let head = vec![
            conv(1, 6, w / 2, ConvSpec::new(7, 1, 3)),
            conv(2, w / 2, w, down),
            conv(3, w, 2 * w, down),
            conv(4, 2 * w, 2 * w, same),
            conv(5, 2 * w, 2 * w, same),
        ];
        let res = (0..cfg.transformer_res_blocks)
            .map(|i| ResBlock::new(seed, &format!("{name}.r{i}"), 2 * w))
            .collect();
        let tail = vec![
            deconv(1, 2 * w, 2 * w, same),
            deconv(2, 2 * w, w, down),
            deconv(3, w, w / 2, down),
            ConvLayer::new(seed, &format!("{name}.t4"), w / 2, 3, ConvSpec::new(7, 1, 3), ConvOpts::deconv(false, Act::None)),
        ];
        Ok(Transformer {
            cfg: cfg.clone(),
            head,
            res,
            tail,
        })
    }

    /// Face from a label map and a background-removed conditional face, both
    /// `[B, 3, R, R]` in `[0, 1]`.
    pub fn forward(&self, label: &Tensor<T>, cond: &Tensor<T>, track: bool) -> Result<Tensor<T>> {
        let b = self.cfg.check_input(label, 3)?;
        if self.cfg.check_input(cond, 3)? != b {
            return Err(Error::Shape("label and conditional batches differ".into()));
        }
        let mut h = to_signed(&Tensor::cat_dim1(&[label, cond])?);
        for l in &self.head {
            h = l.forward(&h, track)?;
        }
        for r in &self.res {
            h = r.forward(&h, track)?;
        }
        for l in &self.tail {
            h = l.forward(&h, track)?;
        }
        Ok(h.sigmoid())
    }
}

impl<T: Scalar> Module<T> for Transformer<T> {
    fn params(&self) -> Vec<&Param<T>> {
        collect_params!(self, head, res, tail)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        collect_params_mut!(self, head, res, tail)
    }
}

impl<T: Scalar> Network<T> for Transformer<T> {
    fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn kind(&self) -> String {
        "transformer".into()
    }
}

/// PatchGAN discriminator. At 64 pixels the score map is 16x16 and each
/// score sees an 18x18 patch.
#[derive(Clone)]
pub struct PatchDisc<T: Scalar> {
    cfg: NetConfig,
    name: String,
    in_channels: usize,
    layers: Vec<ConvLayer<T>>,
}

impl<T: Scalar> PatchDisc<T> {
    pub fn new(cfg: &NetConfig, name: &str, in_channels: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.disc_width;
        let name = format!("disc.{name}");
        let down = ConvSpec::new(4, 2, 1);
        let layers = vec![
            ConvLayer::new(seed, &format!("{name}.c1"), in_channels, w, down, ConvOpts::conv(false, Act::Leaky)),
            ConvLayer::new(seed, &format!("{name}.c2"), w, 2 * w, down, ConvOpts::conv(true, Act::Leaky)),
            ConvLayer::new(seed, &format!("{name}.c3"), 2 * w, 1, ConvSpec::new(3, 1, 1), ConvOpts::conv(false, Act::None)),
        ];
        Ok(PatchDisc {
            cfg: cfg.clone(),
            name,
            in_channels,
            layers,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Side of the score map for this configuration.
    pub fn score_size(&self) -> usize {
        self.cfg.resolution / 4
    }

    /// `[B, C, R, R]` in `[0, 1]` to a `[B, 1, R/4, R/4]` score map.
    pub fn forward(&self, x: &Tensor<T>, track: bool) -> Result<Tensor<T>> {
        self.cfg.check_input(x, self.in_channels)?;
        let mut h = to_signed(x);
        for l in &self.layers {
            h = l.forward(&h, track)?;
        }
        Ok(h)
    }
}

impl<T: Scalar> Module<T> for PatchDisc<T> {
    fn params(&self) -> Vec<&Param<T>> {
        collect_params!(self, layers)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        collect_params_mut!(self, layers)
    }
}

impl<T: Scalar> Network<T> for PatchDisc<T> {
    fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn kind(&self) -> String {
        format!("patch_disc:{}:{}", self.name, self.in_channels)
    }
}

/// Multi-scale activations of the feature network, strides 1, 2, 4, 8, 16.
pub type FeatureStack<T> = Vec<Tensor<T>>;

/// Five-stage convolutional trunk without normalization.
#[derive(Clone)]
struct Trunk<T: Scalar> {
    stages: Vec<ConvLayer<T>>,
}

impl<T: Scalar> Trunk<T> {
    fn new(seed: u64, name: &str, widths: &[usize; 5]) -> Self {
        let mut cin = 3;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let stride = if i == 0 { 1 } else { 2 };
                let l = ConvLayer::new(seed, &format!("{name}.s{i}"), cin, w, ConvSpec::new(3, stride, 1), ConvOpts::conv(false, Act::Relu));
                cin = w;
                l
            })
            .collect();
        Trunk { stages }
    }

    fn forward(&self, x: &Tensor<T>, track: bool) -> Result<FeatureStack<T>> {
        let mut h = to_signed(x);
        let mut taps = Vec::with_capacity(self.stages.len());
        for l in &self.stages {
            h = l.forward(&h, track)?;
            taps.push(h.clone());
        }
        Ok(taps)
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.stages.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.stages.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// The perceptual feature network. Classification heads for identity and
/// hair template only exist to train the trunk.
#[derive(Clone)]
pub struct FeatureNet<T: Scalar> {
    cfg: NetConfig,
    trunk: Trunk<T>,
    identity_head: Linear<T>,
    hair_head: Linear<T>,
}

/// Outputs of one feature-network pass.
pub struct FeatureOutputs<T: Scalar> {
    pub taps: FeatureStack<T>,
    /// Global average of the last tap, `[B, C5]`.
    pub pooled: Tensor<T>,
    pub identity_logits: Tensor<T>,
    pub hair_logits: Tensor<T>,
}

impl<T: Scalar> FeatureNet<T> {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c5 = cfg.feature_widths[4];
        Ok(FeatureNet {
            cfg: cfg.clone(),
            trunk: Trunk::new(seed, "phi", &cfg.feature_widths),
            identity_head: Linear::new(seed, "phi.identity", c5, cfg.identity_classes),
            hair_head: Linear::new(seed, "phi.hair", c5, HAIR_TEMPLATES),
        })
    }

    /// Tap activations for `[B, 3, R, R]` inputs.
    pub fn features(&self, x: &Tensor<T>, track: bool) -> Result<FeatureStack<T>> {
        self.cfg.check_input(x, 3)?;
        self.trunk.forward(x, track)
    }

    pub fn forward_all(&self, x: &Tensor<T>, track: bool) -> Result<FeatureOutputs<T>> {
        let taps = self.features(x, track)?;
        let pooled = taps.last().expect("five taps").global_avg_pool()?;
        Ok(FeatureOutputs {
            identity_logits: self.identity_head.forward(&pooled, track)?,
            hair_logits: self.hair_head.forward(&pooled, track)?,
            pooled,
            taps,
        })
    }
}

impl<T: Scalar> Module<T> for FeatureNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.trunk.params();
        v.extend(self.identity_head.params());
        v.extend(self.hair_head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.trunk.params_mut();
        v.extend(self.identity_head.params_mut());
        v.extend(self.hair_head.params_mut());
        v
    }
}

impl<T: Scalar> Network<T> for FeatureNet<T> {
    fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn kind(&self) -> String {
        "feature_net".into()
    }
}

/// Identity embedder trained by identity classification; the embedding is
/// the penultimate activation.
#[derive(Clone)]
pub struct IdentityNet<T: Scalar> {
    cfg: NetConfig,
    trunk: Trunk<T>,
    embed: Linear<T>,
    classifier: Linear<T>,
}

impl<T: Scalar> IdentityNet<T> {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c5 = cfg.identity_widths[4];
        Ok(IdentityNet {
            cfg: cfg.clone(),
            trunk: Trunk::new(seed, "idnet", &cfg.identity_widths),
            embed: Linear::new(seed, "idnet.embed", c5, cfg.identity_embedding),
            classifier: Linear::new(seed, "idnet.classifier", cfg.identity_embedding, cfg.identity_classes),
        })
    }

    /// `[B, E]` embeddings (not normalized).
    pub fn embed(&self, x: &Tensor<T>, track: bool) -> Result<Tensor<T>> {
        self.cfg.check_input(x, 3)?;
        let taps = self.trunk.forward(x, track)?;
        let pooled = taps.last().expect("five taps").global_avg_pool()?;
        Ok(self.embed.forward(&pooled, track)?.relu())
    }

    pub fn logits(&self, x: &Tensor<T>, track: bool) -> Result<Tensor<T>> {
        let e = self.embed(x, track)?;
        self.classifier.forward(&e, track)
    }
}

impl<T: Scalar> Module<T> for IdentityNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.trunk.params();
        v.extend(self.embed.params());
        v.extend(self.classifier.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.trunk.params_mut();
        v.extend(self.embed.params_mut());
        v.extend(self.classifier.params_mut());
        v
    }
}

impl<T: Scalar> Network<T> for IdentityNet<T> {
    fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn kind(&self) -> String {
        "identity_net".into()
    }
}

/// One tensor of a parameter bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named parameters of one network plus its architecture fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBundle {
    pub fingerprint: String,
    pub tensors: Vec<NamedTensor>,
}

impl ParamBundle {
    pub fn from_network<N: Network<f32> + ?Sized>(net: &N) -> Self {
        ParamBundle {
            fingerprint: net.fingerprint(),
            tensors: net
                .params()
                .into_iter()
                .map(|p| NamedTensor {
                    name: p.name().to_string(),
                    shape: p.shape().to_vec(),
                    data: p.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Copies the bundle into `net`, checking the fingerprint, every name
    /// and shape, and finiteness.
    pub fn load_into<N: Network<f32> + ?Sized>(&self, net: &mut N) -> Result<()> {
        let expected = net.fingerprint();
        if self.fingerprint != expected {
            return Err(Error::Fingerprint {
                expected,
                found: self.fingerprint.clone(),
            });
        }
        let mut params = net.params_mut();
        if params.len() != self.tensors.len() {
            return Err(Error::Shape(format!("bundle has {} tensors, network {}", self.tensors.len(), params.len())));
        }
        for (p, t) in params.iter_mut().zip(&self.tensors) {
            if p.name() != t.name || p.shape() != t.shape.as_slice() {
                return Err(Error::Shape(format!("bundle tensor {} {:?} vs {} {:?}", t.name, t.shape, p.name(), p.shape())));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(t.name.clone()));
            }
            p.set_data(t.data.clone())?;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Content hash over parameter names and values.
pub fn param_digest<T: Scalar, M: Module<T> + ?Sized>(m: &M) -> String {
    let mut h = Sha256::new();
    for p in m.params() {
        h.update(p.name().as_bytes());
        for v in p.data() {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            resolution: 8,
            gene_slot_dim: 4,
            width: 4,
            transformer_width: 4,
            disc_width: 4,
            encoder_res_blocks: 1,
            decoder_res_blocks: 1,
            transformer_res_blocks: 1,
            feature_widths: [2, 3, 4, 4, 4],
            identity_widths: [2, 3, 4, 4, 4],
            identity_embedding: 4,
            identity_classes: 3,
            norm: NormKind::Instance,
        }
    }

    #[test]
    fn shapes_at_desk_scale() {
        let cfg = NetConfig::default();
        let x = Tensor::<f32>::full(&[1, 3, 64, 64], 0.3);
        let enc = PartEncoder::new(&cfg, Part::Nose, 1).unwrap();
        let z = enc.forward(&x, false).unwrap();
        assert_eq!(z.shape(), &[1, 32]);
        let dec = Decoder::<f32>::overall(&cfg, 1).unwrap();
        let y = dec.forward(&Tensor::zeros(&[1, 224]), false).unwrap();
        assert_eq!(y.shape(), &[1, 3, 64, 64]);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let d = PatchDisc::<f32>::new(&cfg, "image", 3, 1).unwrap();
        assert_eq!(d.forward(&x, false).unwrap().shape(), &[1, 1, 16, 16]);
        let phi = FeatureNet::<f32>::new(&cfg, 1).unwrap();
        let sizes: Vec<usize> = phi.features(&x, false).unwrap().iter().map(|t| t.shape()[2]).collect();
        assert_eq!(sizes, vec![64, 32, 16, 8, 4]);
    }

    #[test]
    fn wrong_inputs_are_rejected() {
        let cfg = tiny();
        let enc = PartEncoder::<f64>::new(&cfg, Part::Hair, 0).unwrap();
        assert!(matches!(enc.forward(&Tensor::zeros(&[1, 3, 16, 16]), false), Err(Error::ResolutionMismatch(16, 8))));
        let dec = Decoder::<f64>::part(&cfg, Part::Hair, 0).unwrap();
        assert!(matches!(dec.forward(&Tensor::zeros(&[1, 5]), false), Err(Error::GeneDimension(5, 4))));
        let d = PatchDisc::<f64>::new(&cfg, "x", 6, 0).unwrap();
        assert!(d.forward(&Tensor::zeros(&[1, 3, 8, 8]), false).is_err());
        let bad = NetConfig { gene_slot_dim: 3, ..tiny() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = NetConfig::default();
        let b = NetConfig { gene_slot_dim: 16, ..a.clone() };
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), NetConfig::default().fingerprint());
    }

    #[test]
    fn bundle_round_trip_and_mismatch() {
        let cfg = tiny();
        let src = Decoder::<f32>::part(&cfg, Part::Eyes, 3).unwrap();
        let bundle = ParamBundle::from_network(&src);
        let mut dst = Decoder::<f32>::part(&cfg, Part::Eyes, 4).unwrap();
        assert_ne!(param_digest(&src), param_digest(&dst));
        bundle.load_into(&mut dst).unwrap();
        assert_eq!(param_digest(&src), param_digest(&dst));
        let mut other = Decoder::<f32>::part(&NetConfig { width: 6, ..cfg }, Part::Eyes, 4).unwrap();
        assert!(matches!(bundle.load_into(&mut other), Err(Error::Fingerprint { .. })));
    }
}
