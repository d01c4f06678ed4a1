//! Network building blocks: parameter binding, conv/deconv/linear layers,
//! residual blocks, and the VAE encoder/decoder pair.
//!
//! Layers own plain tensors. Each forward pass mounts them onto the current
//! tape through a [`Binder`], which records (name, var) pairs so the trainer
//! can route gradients back by name. Binding and visiting use the same
//! naming scheme; construction order fixes both.

use crate::conv::Padding;
use crate::dist::GaussianParams;
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const LOG_VAR_CLAMP: f64 = 15.0;

// ── parameter traversal and binding ──────────────────────────────────

/// Anything that owns named parameter tensors.
pub trait Parameterized<E: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Mounts parameters onto a tape for one forward pass.
pub struct Binder<'t, E: Scalar> {
    tape: &'t Tape<E>,
    trainable: bool,
    bound: Vec<(String, Var<E>)>,
}

impl<'t, E: Scalar> Binder<'t, E> {
    pub fn new(tape: &'t Tape<E>, trainable: bool) -> Self {
        Binder { tape, trainable, bound: Vec::new() }
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn bind(&mut self, name: String, value: &Tensor<E>) -> Var<E> {
        let var = self.tape.leaf(value.clone(), self.trainable);
        if self.trainable {
            self.bound.push((name, var.clone()));
        }
        var
    }

    /// (name, var) pairs mounted so far, in bind order.
    pub fn bound(&self) -> &[(String, Var<E>)] {
        &self.bound
    }

    pub fn into_bound(self) -> Vec<(String, Var<E>)> {
        self.bound
    }
}

/// Fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
fn init_uniform<E: Scalar>(shape: &[usize], fan_in: usize, rng: &mut SeedRng) -> Tensor<E> {
    let limit = 1.0 / (fan_in.max(1) as f64).sqrt();
    rng.uniform_tensor(shape, -limit, limit)
}

// ── primitive layers ─────────────────────────────────────────────────

pub struct Conv2d<E: Scalar> {
    pub kernel: Tensor<E>,
    pub bias: Tensor<E>,
    pub stride: usize,
    pub padding: Padding,
}

impl<E: Scalar> Conv2d<E> {
    pub fn init(
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        padding: Padding,
        rng: &mut SeedRng,
    ) -> Self {
        Conv2d {
            kernel: init_uniform(&[kh, kw, cin, cout], kh * kw * cin, rng),
            bias: Tensor::zeros(&[cout]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, b: &mut Binder<E>, scope: &str, x: &Var<E>) -> Result<Var<E>> {
        let k = b.bind(join(scope, "kernel"), &self.kernel);
        let bias = b.bind(join(scope, "bias"), &self.bias);
        x.conv2d(&k, self.stride, self.padding)?.add(&bias)
    }
}

impl<E: Scalar> Parameterized<E> for Conv2d<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&join(prefix, "kernel"), &self.kernel);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "kernel"), &mut self.kernel);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub struct Deconv2d<E: Scalar> {
    pub kernel: Tensor<E>, // [kh,kw,Cout,Cin]
    pub bias: Tensor<E>,
    pub stride: usize,
}

impl<E: Scalar> Deconv2d<E> {
    pub fn init(
        kh: usize,
        kw: usize,
        cout: usize,
        cin: usize,
        stride: usize,
        rng: &mut SeedRng,
    ) -> Self {
        Deconv2d {
            kernel: init_uniform(&[kh, kw, cout, cin], kh * kw * cin, rng),
            bias: Tensor::zeros(&[cout]),
            stride,
        }
    }

    pub fn forward(&self, b: &mut Binder<E>, scope: &str, x: &Var<E>) -> Result<Var<E>> {
        let k = b.bind(join(scope, "kernel"), &self.kernel);
        let bias = b.bind(join(scope, "bias"), &self.bias);
        x.deconv2d(&k, self.stride)?.add(&bias)
    }
}

impl<E: Scalar> Parameterized<E> for Deconv2d<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&join(prefix, "kernel"), &self.kernel);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "kernel"), &mut self.kernel);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub struct Linear<E: Scalar> {
    pub weight: Tensor<E>, // [din, dout]
    pub bias: Tensor<E>,
}

impl<E: Scalar> Linear<E> {
    pub fn init(din: usize, dout: usize, rng: &mut SeedRng) -> Self {
        Linear {
            weight: init_uniform(&[din, dout], din, rng),
            bias: Tensor::zeros(&[dout]),
        }
    }

    pub fn forward(&self, b: &mut Binder<E>, scope: &str, x: &Var<E>) -> Result<Var<E>> {
        let w = b.bind(join(scope, "weight"), &self.weight);
        let bias = b.bind(join(scope, "bias"), &self.bias);
        x.matmul(&w)?.add(&bias)
    }
}

impl<E: Scalar> Parameterized<E> for Linear<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// x + gamma * conv(act(conv(x))). gamma starts at zero, so a fresh block
/// is an exact identity and stacks built from it start well-conditioned.
pub struct ResidualBlock<E: Scalar> {
    pub conv1: Conv2d<E>,
    pub conv2: Conv2d<E>,
    pub gamma: Tensor<E>, // per-channel branch scale
    width: usize,
}

impl<E: Scalar> ResidualBlock<E> {
    pub fn init(width: usize, rng: &mut SeedRng) -> Self {
        ResidualBlock {
            conv1: Conv2d::init(3, 3, width, width, 1, Padding::Same, rng),
            conv2: Conv2d::init(3, 3, width, width, 1, Padding::Same, rng),
            gamma: Tensor::zeros(&[width]),
            width,
        }
    }

    pub fn forward(&self, b: &mut Binder<E>, scope: &str, x: &Var<E>) -> Result<Var<E>> {
        let c = *x.shape().last().unwrap_or(&0);
        if c != self.width {
            return Err(Error::shape(format!(
                "residual block width {} but input has {} channels",
                self.width, c
            )));
        }
        let h = self.conv1.forward(b, &join(scope, "conv1"), x)?.leaky_relu(LEAKY_SLOPE);
        let h = self.conv2.forward(b, &join(scope, "conv2"), &h)?;
        let gamma = b.bind(join(scope, "gamma"), &self.gamma);
        x.add(&h.mul(&gamma)?)
    }
}

impl<E: Scalar> Parameterized<E> for ResidualBlock<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        f(&join(prefix, "gamma"), &self.gamma);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        f(&join(prefix, "gamma"), &mut self.gamma);
    }
}

// ── encoder / decoder ────────────────────────────────────────────────

/// Shared layer-count/width description for the conv stacks. Every even
/// layer (1-based) strides by 2; filters double once per layer pair.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    pub layers: usize,
    pub base_filters: usize,
    pub kernel: usize,
}

impl NetConfig {
    fn filters_at(&self, layer: usize) -> usize {
        // 1-based layer index; pairs share a width: B, B, 2B, 2B, 4B, ...
        self.base_filters << ((layer - 1) / 2)
    }

    pub fn halvings(&self) -> usize {
        self.layers / 2
    }

    pub fn last_filters(&self) -> usize {
        self.filters_at(self.layers)
    }
}

/// Convolutional encoder with two linear heads for the posterior over z.
pub struct Encoder<E: Scalar> {
    layers: Vec<Conv2d<E>>,
    head_mu: Linear<E>,
    head_log_var: Linear<E>,
    in_shape: (usize, usize, usize),
    feat_shape: (usize, usize, usize),
    pub z_dim: usize,
}

impl<E: Scalar> Encoder<E> {
    pub fn init(
        cfg: &NetConfig,
        in_shape: (usize, usize, usize),
        z_dim: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let (h, w, c) = in_shape;
        let div = 1usize << cfg.halvings();
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(format!(
                "input {}x{} not divisible by 2^{}",
                h,
                w,
                cfg.halvings()
            )));
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut cin = c;
        for i in 1..=cfg.layers {
            let cout = cfg.filters_at(i);
            let stride = if i % 2 == 0 { 2 } else { 1 };
            layers.push(Conv2d::init(cfg.kernel, cfg.kernel, cin, cout, stride, Padding::Same, rng));
            cin = cout;
        }
        let feat = (h / div, w / div, cin);
        let flat = feat.0 * feat.1 * feat.2;
        Ok(Encoder {
            layers,
            head_mu: Linear::init(flat, z_dim, rng),
            head_log_var: Linear::init(flat, z_dim, rng),
            in_shape,
            feat_shape: feat,
            z_dim,
        })
    }

    pub fn forward(&self, b: &mut Binder<E>, scope: &str, x: &Var<E>) -> Result<GaussianParams<E>> {
        let s = x.shape();
        if s.len() != 4 || (s[1], s[2], s[3]) != self.in_shape {
            return Err(Error::shape(format!(
                "encoder expects [N,{},{},{}], got {:?}",
                self.in_shape.0, self.in_shape.1, self.in_shape.2, s
            )));
        }
        let n = s[0];
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer
                .forward(b, &join(scope, &format!("conv{}", i + 1)), &h)?
                .leaky_relu(LEAKY_SLOPE);
        }
        let flat = h.reshape(&[n, self.feat_shape.0 * self.feat_shape.1 * self.feat_shape.2])?;
        let mu = self.head_mu.forward(b, &join(scope, "head_mu"), &flat)?;
        let log_var = self
            .head_log_var
            .forward(b, &join(scope, "head_log_var"), &flat)?
            .clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
        GaussianParams::new(mu, log_var)
    }
}

impl<E: Scalar> Parameterized<E> for Encoder<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("conv{}", i + 1)), f);
        }
        self.head_mu.visit(&join(prefix, "head_mu"), f);
        self.head_log_var.visit(&join(prefix, "head_log_var"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("conv{}", i + 1)), f);
        }
        self.head_mu.visit_mut(&join(prefix, "head_mu"), f);
        self.head_log_var.visit_mut(&join(prefix, "head_log_var"), f);
    }
}

enum UpLayer<E: Scalar> {
    /// stride-1 refinement at the same resolution
    Conv(Conv2d<E>),
    /// stride-2 doubling
    Deconv(Deconv2d<E>),
}

/// Mirror of the encoder: a linear projection of z to a 2x2 feature map,
/// alternating refine/double layers back to the input resolution, then two
/// convolutional heads for the Y-space Gaussian. Head outputs are squeezed
/// `squeezes` times so their layout matches the flow output exactly.
pub struct Decoder<E: Scalar> {
    proj: Linear<E>,
    layers: Vec<UpLayer<E>>,
    head_mu: Conv2d<E>,
    head_log_var: Conv2d<E>,
    start_filters: usize,
    out_channels: usize,
    squeezes: usize,
    pub z_dim: usize,
    out_spatial: (usize, usize),
}

impl<E: Scalar> Decoder<E> {
    pub fn init(
        cfg: &NetConfig,
        out_shape: (usize, usize, usize),
        z_dim: usize,
        squeezes: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let (h, w, c) = out_shape;
        let div = 1usize << cfg.halvings();
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(format!(
                "output {}x{} not reachable with {} doublings",
                h,
                w,
                cfg.halvings()
            )));
        }
        let (h0, w0) = (h / div, w / div);
        let start_filters = cfg.last_filters();
        let proj = Linear::init(z_dim, h0 * w0 * start_filters, rng);
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut cin = start_filters;
        for j in 1..=cfg.layers {
            // widths mirror the encoder: wide at the start, base at the end
            let cout = cfg.base_filters << ((cfg.layers - j) / 2);
            if j % 2 == 0 {
                layers.push(UpLayer::Deconv(Deconv2d::init(2, 2, cout, cin, 2, rng)));
            } else {
                layers.push(UpLayer::Conv(Conv2d::init(
                    cfg.kernel,
                    cfg.kernel,
                    cin,
                    cout,
                    1,
                    Padding::Same,
                    rng,
                )));
            }
            cin = cout;
        }
        let head_mu = Conv2d::init(cfg.kernel, cfg.kernel, cin, c, 1, Padding::Same, rng);
        let head_log_var = Conv2d::init(cfg.kernel, cfg.kernel, cin, c, 1, Padding::Same, rng);
        Ok(Decoder {
            proj,
            layers,
            head_mu,
            head_log_var,
            start_filters,
            out_channels: c,
            squeezes,
            z_dim,
            out_spatial: (h, w),
        })
    }

    /// Feature map plus the Y-space Gaussian parameters.
    pub fn forward(
        &self,
        b: &mut Binder<E>,
        scope: &str,
        z: &Var<E>,
    ) -> Result<(Var<E>, GaussianParams<E>)> {
        let s = z.shape();
        if s.len() != 2 || s[1] != self.z_dim {
            return Err(Error::shape(format!(
                "decoder expects [N,{}], got {:?}",
                self.z_dim, s
            )));
        }
        let n = s[0];
        let div = self.layers.iter().filter(|l| matches!(l, UpLayer::Deconv(_))).count();
        let (h0, w0) = (self.out_spatial.0 >> div, self.out_spatial.1 >> div);
        let mut h = self
            .proj
            .forward(b, &join(scope, "proj"), z)?
            .leaky_relu(LEAKY_SLOPE)
            .reshape(&[n, h0, w0, self.start_filters])?;
        for (j, layer) in self.layers.iter().enumerate() {
            let name = join(scope, &format!("up{}", j + 1));
            h = match layer {
                UpLayer::Conv(conv) => conv.forward(b, &name, &h)?,
                UpLayer::Deconv(deconv) => deconv.forward(b, &name, &h)?,
            }
            .leaky_relu(LEAKY_SLOPE);
        }
        let mut mu = self.head_mu.forward(b, &join(scope, "head_mu"), &h)?;
        let mut log_var = self
            .head_log_var
            .forward(b, &join(scope, "head_log_var"), &h)?
            .clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
        for _ in 0..self.squeezes {
            mu = mu.squeeze2x2()?;
            log_var = log_var.squeeze2x2()?;
        }
        Ok((h, GaussianParams::new(mu, log_var)?))
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
}

impl<E: Scalar> Parameterized<E> for Decoder<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.proj.visit(&join(prefix, "proj"), f);
        for (j, layer) in self.layers.iter().enumerate() {
            let name = join(prefix, &format!("up{}", j + 1));
            match layer {
                UpLayer::Conv(c) => c.visit(&name, f),
                UpLayer::Deconv(d) => d.visit(&name, f),
            }
        }
        self.head_mu.visit(&join(prefix, "head_mu"), f);
        self.head_log_var.visit(&join(prefix, "head_log_var"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        for (j, layer) in self.layers.iter_mut().enumerate() {
            let name = join(prefix, &format!("up{}", j + 1));
            match layer {
                UpLayer::Conv(c) => c.visit_mut(&name, f),
                UpLayer::Deconv(d) => d.visit_mut(&name, f),
            }
        }
        self.head_mu.visit_mut(&join(prefix, "head_mu"), f);
        self.head_log_var.visit_mut(&join(prefix, "head_log_var"), f);
    }
}
