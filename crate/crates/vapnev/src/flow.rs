//! Affine coupling layers, masking, squeeze, and the multi-scale flow stack.
//!
//! A coupling layer leaves the masked-in part of its input unchanged and
//! transforms the rest as x*exp(s) + t, where s and t are functions of the
//! masked-in part (and optionally the VAE latent z). The Jacobian is
//! triangular, so the log-determinant is just the sum of s over transformed
//! components, and the map inverts exactly for a known z.
//!
//! The conditioner combines a residual network on x with a small
//! deconvolution network on z through per-channel multiplicative
//! interactions: alpha*l1(x)*l2(z) + beta1*l1(x) + beta2*l2(z) + b.

use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::net::{join, Binder, Conv2d, Deconv2d, Linear, Parameterized, ResidualBlock, LEAKY_SLOPE};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

// ── masks ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MaskKind {
    Checkerboard,
    Channelwise,
}

/// Binary kept-part indicator over one image, realized as an [H,W,C] tensor.
#[derive(Debug, Clone)]
pub struct Mask<E: Scalar> {
    pub kind: MaskKind,
    pub parity: u8,
    keep: Tensor<E>,
}

impl<E: Scalar> Mask<E> {
    pub fn checkerboard(h: usize, w: usize, c: usize, parity: u8) -> Self {
        let mut data = vec![E::zero(); h * w * c];
        for y in 0..h {
            for x in 0..w {
                if (y + x) % 2 == parity as usize {
                    for ch in 0..c {
                        data[(y * w + x) * c + ch] = E::one();
                    }
                }
            }
        }
        Mask {
            kind: MaskKind::Checkerboard,
            parity,
            keep: Tensor::new(&[h, w, c], data).expect("counts match"),
        }
    }

    /// Splits channels into halves: parity 0 keeps the first half.
    pub fn channelwise(h: usize, w: usize, c: usize, parity: u8) -> Self {
        let half = c / 2;
        let mut data = vec![E::zero(); h * w * c];
        for p in 0..h * w {
            for ch in 0..c {
                let first = ch < half;
                if first == (parity == 0) {
                    data[p * c + ch] = E::one();
                }
            }
        }
        Mask {
            kind: MaskKind::Channelwise,
            parity,
            keep: Tensor::new(&[h, w, c], data).expect("counts match"),
        }
    }

    pub fn keep(&self) -> &Tensor<E> {
        &self.keep
    }

    pub fn complement(&self) -> Tensor<E> {
        self.keep.map(|v| E::one() - v)
    }
}

/// Partition x into (kept, transformed) against a binary mask; both keep the
/// full shape with zeros at the complementary positions, so merging is a sum.
pub fn mask_split<E: Scalar>(x: &Var<E>, mask: &Tensor<E>) -> Result<(Var<E>, Var<E>)> {
    if mask.data().iter().any(|&v| v != E::zero() && v != E::one()) {
        return Err(Error::contract("mask must be binary"));
    }
    let tape = x.tape().clone();
    let keep = tape.constant(mask.clone());
    let comp = tape.constant(mask.map(|v| E::one() - v));
    Ok((x.mul(&keep)?, x.mul(&comp)?))
}

pub fn mask_merge<E: Scalar>(kept: &Var<E>, transformed: &Var<E>) -> Result<Var<E>> {
    kept.add(transformed)
}

// ── affine core ──────────────────────────────────────────────────────

/// y = x * exp(s) + t with per-sample logdet = sum(s). Callers zero s and t
/// on the kept positions, which makes those positions pass through exactly.
pub fn affine_couple<E: Scalar>(x: &Var<E>, s: &Var<E>, t: &Var<E>) -> Result<(Var<E>, Var<E>)> {
    let y = x.mul(&s.exp()?)?.add(t)?;
    let logdet = s.sum_per_sample()?;
    Ok((y, logdet))
}

/// Exact inverse of [`affine_couple`]: x = (y - t) * exp(-s).
pub fn affine_uncouple<E: Scalar>(y: &Var<E>, s: &Var<E>, t: &Var<E>) -> Result<Var<E>> {
    y.sub(t)?.mul(&s.neg().exp()?)
}

// ── conditioners ─────────────────────────────────────────────────────

/// Residual network on the masked-in part: channel projection in, two
/// residual blocks, linear channel projection out. Preserves spatial shape.
pub struct ResNetConditioner<E: Scalar> {
    conv_in: Conv2d<E>,
    blocks: Vec<ResidualBlock<E>>,
    conv_out: Conv2d<E>,
}

impl<E: Scalar> ResNetConditioner<E> {
    pub fn init(c_in: usize, width: usize, c_out: usize, blocks: usize, rng: &mut SeedRng) -> Self {
        ResNetConditioner {
            conv_in: Conv2d::init(3, 3, c_in, width, 1, Padding::Same, rng),
            blocks: (0..blocks).map(|_| ResidualBlock::init(width, rng)).collect(),
            conv_out: Conv2d::init(3, 3, width, c_out, 1, Padding::Same, rng),
        }
    }

    fn forward(&self, b: &mut Binder<E>, scope: &str, x: &Var<E>) -> Result<Var<E>> {
        let mut h = self
            .conv_in
            .forward(b, &join(scope, "conv_in"), x)?
            .leaky_relu(LEAKY_SLOPE);
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(b, &join(scope, &format!("rb{}", i + 1)), &h)?;
        }
        self.conv_out.forward(b, &join(scope, "conv_out"), &h)
    }
}

impl<E: Scalar> Parameterized<E> for ResNetConditioner<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.conv_in.visit(&join(prefix, "conv_in"), f);
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&join(prefix, &format!("rb{}", i + 1)), f);
        }
        self.conv_out.visit(&join(prefix, "conv_out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.conv_in.visit_mut(&join(prefix, "conv_in"), f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&join(prefix, &format!("rb{}", i + 1)), f);
        }
        self.conv_out.visit_mut(&join(prefix, "conv_out"), f);
    }
}

/// Deconvolution network on z: linear projection to a 2x2xc seed, stride-2
/// doublings up to the target extents, a linear conv head, and a crop when
/// doubling overshoots.
pub struct DeconvConditioner<E: Scalar> {
    proj: Linear<E>,
    deconvs: Vec<Deconv2d<E>>,
    conv_out: Conv2d<E>,
    seed_filters: usize,
    target: (usize, usize),
    grown: (usize, usize),
}

impl<E: Scalar> DeconvConditioner<E> {
    pub fn init(
        z_dim: usize,
        width: usize,
        c_out: usize,
        target: (usize, usize),
        rng: &mut SeedRng,
    ) -> Self {
        let (th, tw) = target;
        let (mut gh, mut gw) = (2usize, 2usize);
        let mut deconvs = Vec::new();
        while gh < th || gw < tw {
            deconvs.push(Deconv2d::init(2, 2, width, width, 2, rng));
            gh *= 2;
            gw *= 2;
        }
        DeconvConditioner {
            proj: Linear::init(z_dim, 2 * 2 * width, rng),
            deconvs,
            conv_out: Conv2d::init(3, 3, width, c_out, 1, Padding::Same, rng),
            seed_filters: width,
            target,
            grown: (gh, gw),
        }
    }

    fn forward(&self, b: &mut Binder<E>, scope: &str, z: &Var<E>) -> Result<Var<E>> {
        let n = z.shape()[0];
        let mut h = self
            .proj
            .forward(b, &join(scope, "proj"), z)?
            .leaky_relu(LEAKY_SLOPE)
            .reshape(&[n, 2, 2, self.seed_filters])?;
        for (i, deconv) in self.deconvs.iter().enumerate() {
            h = deconv
                .forward(b, &join(scope, &format!("up{}", i + 1)), &h)?
                .leaky_relu(LEAKY_SLOPE);
        }
        let mut out = self.conv_out.forward(b, &join(scope, "conv_out"), &h)?;
        if self.grown != self.target {
            out = out.crop2d(0, 0, self.target.0, self.target.1)?;
        }
        Ok(out)
    }
}

impl<E: Scalar> Parameterized<E> for DeconvConditioner<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.proj.visit(&join(prefix, "proj"), f);
        for (i, d) in self.deconvs.iter().enumerate() {
            d.visit(&join(prefix, &format!("up{}", i + 1)), f);
        }
        self.conv_out.visit(&join(prefix, "conv_out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        for (i, d) in self.deconvs.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("up{}", i + 1)), f);
        }
        self.conv_out.visit_mut(&join(prefix, "conv_out"), f);
    }
}

/// One of the two conditioners (scale or shift) of a coupling layer:
/// f1 on the masked-in image part, optionally f2 on z, combined through
/// per-channel multipliers broadcast over H x W.
pub struct ConditionerPair<E: Scalar> {
    pub f1: ResNetConditioner<E>,
    pub f2: Option<DeconvConditioner<E>>,
    pub alpha: Option<Tensor<E>>, // [C], conditional only
    pub beta1: Tensor<E>,         // [C]
    pub beta2: Option<Tensor<E>>, // [C], conditional only
    pub bias: Tensor<E>,          // [C]
}

impl<E: Scalar> ConditionerPair<E> {
    pub fn init(
        channels: usize,
        width: usize,
        conditional: Option<(usize, (usize, usize))>, // (z_dim, target spatial)
        rng: &mut SeedRng,
    ) -> Self {
        let f1 = ResNetConditioner::init(channels, width, channels, 2, rng);
        let (f2, alpha, beta2) = match conditional {
            Some((z_dim, target)) => (
                Some(DeconvConditioner::init(z_dim, width, channels, target, rng)),
                Some(Tensor::zeros(&[channels])),
                Some(Tensor::zeros(&[channels])),
            ),
            None => (None, None, None),
        };
        ConditionerPair {
            f1,
            f2,
            alpha,
            beta1: Tensor::zeros(&[channels]),
            beta2,
            bias: Tensor::zeros(&[channels]),
        }
    }

    /// alpha*l1*l2 + beta1*l1 + beta2*l2 + b, or beta1*l1 + b without z.
    pub fn forward(
        &self,
        b: &mut Binder<E>,
        scope: &str,
        x_part: &Var<E>,
        z: Option<&Var<E>>,
    ) -> Result<Var<E>> {
        let l1 = self.f1.forward(b, &join(scope, "f1"), x_part)?;
        let beta1 = b.bind(join(scope, "beta1"), &self.beta1);
        let bias = b.bind(join(scope, "bias"), &self.bias);
        let mut out = l1.mul(&beta1)?.add(&bias)?;
        if let (Some(f2), Some(alpha), Some(beta2)) = (&self.f2, &self.alpha, &self.beta2) {
            let z = z.ok_or_else(|| {
                Error::contract("conditional coupling layer called without z")
            })?;
            let l2 = f2.forward(b, &join(scope, "f2"), z)?;
            if l2.shape() != l1.shape() {
                return Err(Error::shape(format!(
                    "conditioner outputs disagree: f1 {:?} vs f2 {:?}",
                    l1.shape(),
                    l2.shape()
                )));
            }
            let alpha = b.bind(join(scope, "alpha"), alpha);
            let beta2 = b.bind(join(scope, "beta2"), beta2);
            out = out
                .add(&l1.mul(&l2)?.mul(&alpha)?)?
                .add(&l2.mul(&beta2)?)?;
        }
        Ok(out)
    }

    pub fn is_conditional(&self) -> bool {
        self.f2.is_some()
    }
}

impl<E: Scalar> Parameterized<E> for ConditionerPair<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.f1.visit(&join(prefix, "f1"), f);
        if let Some(f2) = &self.f2 {
            f2.visit(&join(prefix, "f2"), f);
        }
        if let Some(alpha) = &self.alpha {
            f(&join(prefix, "alpha"), alpha);
        }
        f(&join(prefix, "beta1"), &self.beta1);
        if let Some(beta2) = &self.beta2 {
            f(&join(prefix, "beta2"), beta2);
        }
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.f1.visit_mut(&join(prefix, "f1"), f);
        if let Some(f2) = &mut self.f2 {
            f2.visit_mut(&join(prefix, "f2"), f);
        }
        if let Some(alpha) = &mut self.alpha {
            f(&join(prefix, "alpha"), alpha);
        }
        f(&join(prefix, "beta1"), &mut self.beta1);
        if let Some(beta2) = &mut self.beta2 {
            f(&join(prefix, "beta2"), beta2);
        }
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

// ── coupling layer ───────────────────────────────────────────────────

/// Affine coupling layer over a fixed [H,W,C] geometry. The raw scale is
/// passed through tanh and a learnable per-channel gate before exp, keeping
/// exp(s) bounded while training.
pub struct CouplingLayer<E: Scalar> {
    pub mask: Mask<E>,
    scale_net: ConditionerPair<E>,
    shift_net: ConditionerPair<E>,
    scale_gate: Tensor<E>, // [C]
    shape: (usize, usize, usize),
}

impl<E: Scalar> CouplingLayer<E> {
    pub fn init(
        shape: (usize, usize, usize),
        mask: Mask<E>,
        width: usize,
        conditional: Option<usize>, // z_dim
        rng: &mut SeedRng,
    ) -> Self {
        let (h, w, c) = shape;
        let cond = conditional.map(|z_dim| (z_dim, (h, w)));
        CouplingLayer {
            mask,
            scale_net: ConditionerPair::init(c, width, cond, rng),
            shift_net: ConditionerPair::init(c, width, cond, rng),
            scale_gate: Tensor::ones(&[c]),
            shape,
        }
    }

    pub fn is_conditional(&self) -> bool {
        self.scale_net.is_conditional()
    }

    fn check_input(&self, x: &Var<E>, z: Option<&Var<E>>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || (s[1], s[2], s[3]) != self.shape {
            return Err(Error::shape(format!(
                "coupling expects [N,{},{},{}], got {:?}",
                self.shape.0, self.shape.1, self.shape.2, s
            )));
        }
        if self.is_conditional() && z.is_none() {
            return Err(Error::contract("conditional coupling layer needs z"));
        }
        Ok(())
    }

    /// s and t evaluated from the masked-in part, both zeroed on the kept
    /// positions.
    fn scale_shift(
        &self,
        b: &mut Binder<E>,
        scope: &str,
        x_in: &Var<E>,
        z: Option<&Var<E>>,
    ) -> Result<(Var<E>, Var<E>)> {
        let tape = x_in.tape().clone();
        let comp = tape.constant(self.mask.complement());
        let gate = b.bind(join(scope, "gate"), &self.scale_gate);
        let s_raw = self.scale_net.forward(b, &join(scope, "scale"), x_in, z)?;
        let s = s_raw.tanh().mul(&gate)?.mul(&comp)?;
        let t = self.shift_net.forward(b, &join(scope, "shift"), x_in, z)?.mul(&comp)?;
        Ok((s, t))
    }

    pub fn forward(
        &self,
        b: &mut Binder<E>,
        scope: &str,
        x: &Var<E>,
        z: Option<&Var<E>>,
    ) -> Result<(Var<E>, Var<E>)> {
        self.check_input(x, z)?;
        let keep = x.tape().constant(self.mask.keep().clone());
        let x_in = x.mul(&keep)?;
        let (s, t) = self.scale_shift(b, scope, &x_in, z)?;
        affine_couple(x, &s, &t)
    }

    pub fn inverse(
        &self,
        b: &mut Binder<E>,
        scope: &str,
        y: &Var<E>,
        z: Option<&Var<E>>,
    ) -> Result<Var<E>> {
        self.check_input(y, z)?;
        let keep = y.tape().constant(self.mask.keep().clone());
        let y_in = y.mul(&keep)?;
        let (s, t) = self.scale_shift(b, scope, &y_in, z)?;
        affine_uncouple(y, &s, &t)
    }
}

impl<E: Scalar> Parameterized<E> for CouplingLayer<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&join(prefix, "gate"), &self.scale_gate);
        self.scale_net.visit(&join(prefix, "scale"), f);
        self.shift_net.visit(&join(prefix, "shift"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "gate"), &mut self.scale_gate);
        self.scale_net.visit_mut(&join(prefix, "scale"), f);
        self.shift_net.visit_mut(&join(prefix, "shift"), f);
    }
}

// ── flow stack ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlowConfig {
    /// Number of squeeze scales. 0 builds a plain checkerboard chain.
    pub scales: usize,
    pub checkerboard_per_scale: usize,
    pub channelwise_per_scale: usize,
    /// Residual width at the first scale; doubles each scale.
    pub filters: usize,
    pub conditional: bool,
}

enum Stage<E: Scalar> {
    Coupling { name: String, layer: CouplingLayer<E> },
    Squeeze,
}

/// The full invertible map from X to Y. Per scale: checkerboard couplings,
/// squeeze, channelwise couplings. All variables reach the final Y space;
/// no factoring happens between scales.
pub struct FlowStack<E: Scalar> {
    stages: Vec<Stage<E>>,
    in_shape: (usize, usize, usize),
    out_shape: (usize, usize, usize),
    conditional: bool,
}

impl<E: Scalar> FlowStack<E> {
    pub fn init(
        cfg: &FlowConfig,
        in_shape: (usize, usize, usize),
        z_dim: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let (mut h, mut w, mut c) = in_shape;
        let cond = if cfg.conditional { Some(z_dim) } else { None };
        let mut stages = Vec::new();
        if cfg.scales == 0 {
            for i in 0..cfg.checkerboard_per_scale {
                let mask = Mask::checkerboard(h, w, c, (i % 2) as u8);
                stages.push(Stage::Coupling {
                    name: format!("ckbd{}", i + 1),
                    layer: CouplingLayer::init((h, w, c), mask, cfg.filters, cond, rng),
                });
            }
        } else {
            for scale in 0..cfg.scales {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape(format!(
                        "scale {} needs even extents, got {}x{}",
                        scale, h, w
                    )));
                }
                let width = cfg.filters << scale;
                for i in 0..cfg.checkerboard_per_scale {
                    let mask = Mask::checkerboard(h, w, c, (i % 2) as u8);
                    stages.push(Stage::Coupling {
                        name: format!("s{}.ckbd{}", scale + 1, i + 1),
                        layer: CouplingLayer::init((h, w, c), mask, width, cond, rng),
                    });
                }
                stages.push(Stage::Squeeze);
                h /= 2;
                w /= 2;
                c *= 4;
                for i in 0..cfg.channelwise_per_scale {
                    let mask = Mask::channelwise(h, w, c, (i % 2) as u8);
                    stages.push(Stage::Coupling {
                        name: format!("s{}.chw{}", scale + 1, i + 1),
                        layer: CouplingLayer::init((h, w, c), mask, width, cond, rng),
                    });
                }
            }
        }
        Ok(FlowStack {
            stages,
            in_shape,
            out_shape: (h, w, c),
            conditional: cfg.conditional,
        })
    }

    pub fn in_shape(&self) -> (usize, usize, usize) {
        self.in_shape
    }

    /// Shape of the Y space (after all squeezes).
    pub fn out_shape(&self) -> (usize, usize, usize) {
        self.out_shape
    }

    pub fn is_conditional(&self) -> bool {
        self.conditional
    }

    pub fn num_couplings(&self) -> usize {
        self.stages.iter().filter(|s| matches!(s, Stage::Coupling { .. })).count()
    }

    /// Maps x (and optionally z) to (y, total logdet). The logdet is the sum
    /// of per-layer logdets in stage order; squeezes are volume-preserving
    /// permutations and contribute zero.
    pub fn forward(
        &self,
        b: &mut Binder<E>,
        scope: &str,
        x: &Var<E>,
        z: Option<&Var<E>>,
    ) -> Result<(Var<E>, Var<E>)> {
        self.check_shape(x, true)?;
        let n = x.shape()[0];
        let mut cur = x.clone();
        let mut total = x.tape().constant(Tensor::zeros(&[n]));
        for stage in &self.stages {
            match stage {
                Stage::Coupling { name, layer } => {
                    let (y, ld) = layer.forward(b, &join(scope, name), &cur, z)?;
                    cur = y;
                    total = total.add(&ld)?;
                }
                Stage::Squeeze => cur = cur.squeeze2x2()?,
            }
        }
        Ok((cur, total))
    }

    /// Exact inverse of [`FlowStack::forward`] for the same z.
    pub fn inverse(
        &self,
        b: &mut Binder<E>,
        scope: &str,
        y: &Var<E>,
        z: Option<&Var<E>>,
    ) -> Result<Var<E>> {
        self.check_shape(y, false)?;
        let mut cur = y.clone();
        for stage in self.stages.iter().rev() {
            match stage {
                Stage::Coupling { name, layer } => {
                    cur = layer.inverse(b, &join(scope, name), &cur, z)?;
                }
                Stage::Squeeze => cur = cur.unsqueeze2x2()?,
            }
        }
        Ok(cur)
    }

    fn check_shape(&self, v: &Var<E>, input_side: bool) -> Result<()> {
        let want = if input_side { self.in_shape } else { self.out_shape };
        let s = v.shape();
        if s.len() != 4 || (s[1], s[2], s[3]) != want {
            return Err(Error::shape(format!(
                "flow expects [N,{},{},{}], got {:?}",
                want.0, want.1, want.2, s
            )));
        }
        Ok(())
    }
}

impl<E: Scalar> Parameterized<E> for FlowStack<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        for stage in &self.stages {
            if let Stage::Coupling { name, layer } = stage {
                layer.visit(&join(prefix, name), f);
            }
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        for stage in &mut self.stages {
            if let Stage::Coupling { name, layer } = stage {
                layer.visit_mut(&join(prefix, name), f);
            }
        }
    }
}

/// Overwrite every parameter with small random values; used by tests and
/// verification suites that need a non-identity map.
pub fn randomize_params<E: Scalar>(
    target: &mut dyn Parameterized<E>,
    scale: f64,
    rng: &mut SeedRng,
) {
    target.visit_mut("", &mut |_, t| {
        for v in t.data_mut() {
            *v = E::from_f64(scale * rng.normal());
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn checkerboard_partitions_components() {
        let m = Mask::<f64>::checkerboard(2, 2, 1, 0);
        assert_eq!(m.keep().data(), &[1.0, 0.0, 0.0, 1.0]);
        let kept = m.keep().data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(kept, 2);
        let comp = m.complement();
        for (a, b) in m.keep().data().iter().zip(comp.data()) {
            assert_eq!(a + b, 1.0);
        }
    }

    #[test]
    fn channelwise_splits_halves() {
        let m = Mask::<f64>::channelwise(1, 1, 4, 0);
        assert_eq!(m.keep().data(), &[1.0, 1.0, 0.0, 0.0]);
        let m1 = Mask::<f64>::channelwise(1, 1, 4, 1);
        assert_eq!(m1.keep().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn mask_split_merge_roundtrip() {
        let mut rng = SeedRng::from_seed(2);
        let tape = Tape::<f64>::new();
        let x = tape.constant(rng.normal_tensor(&[3, 2, 2, 2]));
        let mask = Mask::checkerboard(2, 2, 2, 1);
        let (kept, rest) = mask_split(&x, mask.keep()).unwrap();
        let merged = mask_merge(&kept, &rest).unwrap();
        assert_eq!(merged.value().data(), x.value().data());
    }

    #[test]
    fn all_ones_mask_makes_transformed_part_empty() {
        let mut rng = SeedRng::from_seed(3);
        let tape = Tape::<f64>::new();
        let x = tape.constant(rng.normal_tensor(&[1, 2, 2, 1]));
        let ones = Tensor::ones(&[2, 2, 1]);
        let (kept, rest) = mask_split(&x, &ones).unwrap();
        assert_eq!(kept.value().data(), x.value().data());
        assert!(rest.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_binary_mask_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 1]));
        let bad = Tensor::full(&[2, 2, 1], 0.5);
        assert!(matches!(mask_split(&x, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn affine_couple_identity_when_zero() {
        let mut rng = SeedRng::from_seed(4);
        let tape = Tape::<f64>::new();
        let x = tape.constant(rng.normal_tensor(&[2, 1, 4, 1]));
        let zero = tape.constant(Tensor::zeros(&[2, 1, 4, 1]));
        let (y, ld) = affine_couple(&x, &zero, &zero).unwrap();
        assert_eq!(y.value().data(), x.value().data());
        assert_eq!(ld.value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn affine_couple_hand_example() {
        // D=2, d=1: x=(1,1), l(x1)=1, m(x1)=1 -> y=(1, e+1), logdet=1
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64s(&[1, 1, 2, 1], &[1.0, 1.0]).unwrap());
        let s = tape.constant(Tensor::from_f64s(&[1, 1, 2, 1], &[0.0, 1.0]).unwrap());
        let t = tape.constant(Tensor::from_f64s(&[1, 1, 2, 1], &[0.0, 1.0]).unwrap());
        let (y, ld) = affine_couple(&x, &s, &t).unwrap();
        assert!((y.value().data()[0] - 1.0).abs() < 1e-15);
        assert!((y.value().data()[1] - (std::f64::consts::E + 1.0)).abs() < 1e-12);
        assert!((ld.value().data()[0] - 1.0).abs() < 1e-15);

        let x_back = affine_uncouple(&y, &s, &t).unwrap();
        assert!((x_back.value().data()[0] - 1.0).abs() < 1e-12);
        assert!((x_back.value().data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fresh_coupling_layer_is_identity() {
        let mut rng = SeedRng::from_seed(5);
        let tape = Tape::<f64>::new();
        let layer = CouplingLayer::init((4, 4, 2), Mask::checkerboard(4, 4, 2, 0), 4, None, &mut rng);
        let x = tape.constant(rng.normal_tensor(&[2, 4, 4, 2]));
        let mut b = Binder::new(&tape, false);
        let (y, ld) = layer.forward(&mut b, "c", &x, None).unwrap();
        assert_eq!(y.value().data(), x.value().data());
        assert!(ld.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conditional_layer_requires_z() {
        let mut rng = SeedRng::from_seed(6);
        let tape = Tape::<f64>::new();
        let layer =
            CouplingLayer::init((2, 2, 1), Mask::checkerboard(2, 2, 1, 0), 4, Some(3), &mut rng);
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 1]));
        let mut b = Binder::new(&tape, false);
        assert!(matches!(
            layer.forward(&mut b, "c", &x, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_multipliers_decouple_from_z() {
        // beta2 = alpha = 0 leaves the output independent of z
        let mut rng = SeedRng::from_seed(7);
        let tape = Tape::<f64>::new();
        let mut layer =
            CouplingLayer::init((2, 2, 1), Mask::checkerboard(2, 2, 1, 0), 4, Some(3), &mut rng);
        randomize_params(&mut layer, 0.4, &mut rng);
        layer.scale_net.alpha = Some(Tensor::zeros(&[1]));
        layer.scale_net.beta2 = Some(Tensor::zeros(&[1]));
        layer.shift_net.alpha = Some(Tensor::zeros(&[1]));
        layer.shift_net.beta2 = Some(Tensor::zeros(&[1]));
        let x = tape.constant(rng.normal_tensor(&[1, 2, 2, 1]));
        let z1 = tape.constant(rng.normal_tensor(&[1, 3]));
        let z2 = tape.constant(rng.normal_tensor(&[1, 3]));
        let mut b = Binder::new(&tape, false);
        let (y1, _) = layer.forward(&mut b, "c", &x, Some(&z1)).unwrap();
        let (y2, _) = layer.forward(&mut b, "c", &x, Some(&z2)).unwrap();
        assert_eq!(y1.value().data(), y2.value().data());
    }

    #[test]
    fn channel_multipliers_broadcast_uniformly() {
        // a [C] multiplier must act identically on every spatial location:
        // compare against an explicitly tiled evaluation
        let mut rng = SeedRng::from_seed(8);
        let tape = Tape::<f64>::new();
        let c = 3;
        let l1 = rng.normal_tensor::<f64>(&[2, 4, 4, c]);
        let mult = rng.normal_tensor::<f64>(&[c]);
        let a = tape.constant(l1.clone());
        let m = tape.constant(mult.clone());
        let got = a.mul(&m).unwrap();

        let mut tiled = vec![0.0; 2 * 4 * 4 * c];
        for (i, v) in l1.data().iter().enumerate() {
            tiled[i] = v * mult.data()[i % c];
        }
        assert_eq!(got.value().data(), &tiled[..]);
    }

    #[test]
    fn coupling_roundtrip_with_random_params() {
        let mut rng = SeedRng::from_seed(9);
        for trial in 0..20 {
            let tape = Tape::<f64>::new();
            let parity = (trial % 2) as u8;
            let mut layer = CouplingLayer::init(
                (4, 4, 2),
                Mask::checkerboard(4, 4, 2, parity),
                6,
                Some(5),
                &mut rng,
            );
            randomize_params(&mut layer, 0.5, &mut rng);
            let x = tape.constant(rng.normal_tensor(&[2, 4, 4, 2]));
            let z = tape.constant(rng.normal_tensor(&[2, 5]));
            let mut b = Binder::new(&tape, false);
            let (y, _) = layer.forward(&mut b, "c", &x, Some(&z)).unwrap();
            let back = layer.inverse(&mut b, "c", &y, Some(&z)).unwrap();
            for (a, bk) in x.value().data().iter().zip(back.value().data()) {
                assert!((a - bk).abs() < 1e-12, "{a} vs {bk}");
            }
        }
    }

    #[test]
    fn flow_stack_shapes_and_identity() {
        let mut rng = SeedRng::from_seed(10);
        let cfg = FlowConfig {
            scales: 1,
            checkerboard_per_scale: 2,
            channelwise_per_scale: 2,
            filters: 4,
            conditional: false,
        };
        let stack = FlowStack::<f64>::init(&cfg, (8, 8, 3), 0, &mut rng).unwrap();
        assert_eq!(stack.out_shape(), (4, 4, 12));
        assert_eq!(stack.num_couplings(), 4);

        let tape = Tape::new();
        let x = tape.constant(rng.normal_tensor(&[2, 8, 8, 3]));
        let mut b = Binder::new(&tape, false);
        let (y, ld) = stack.forward(&mut b, "flow", &x, None).unwrap();
        // identity at init: y is exactly the squeezed x and logdet is zero
        assert_eq!(ld.value().data(), &[0.0, 0.0]);
        let back = stack.inverse(&mut b, "flow", &y, None).unwrap();
        assert_eq!(back.value().data(), x.value().data());
    }

    #[test]
    fn flow_logdet_adds_over_layers() {
        let mut rng = SeedRng::from_seed(11);
        let cfg = FlowConfig {
            scales: 0,
            checkerboard_per_scale: 2,
            channelwise_per_scale: 0,
            filters: 4,
            conditional: false,
        };
        let mut stack = FlowStack::<f64>::init(&cfg, (1, 4, 1), 0, &mut rng).unwrap();
        randomize_params(&mut stack, 0.5, &mut rng);
        let xt = rng.normal_tensor::<f64>(&[1, 1, 4, 1]);

        let tape = Tape::new();
        let x = tape.constant(xt.clone());
        let mut b = Binder::new(&tape, false);
        let (_, total) = stack.forward(&mut b, "flow", &x, None).unwrap();

        // measure each layer in isolation
        let mut sum = 0.0;
        let mut cur = xt;
        for (i, stage) in stack.stages.iter().enumerate() {
            let Stage::Coupling { layer, .. } = stage else { continue };
            let tape_i = Tape::new();
            let xi = tape_i.constant(cur.clone());
            let mut bi = Binder::new(&tape_i, false);
            let (yi, ldi) = layer.forward(&mut bi, &format!("l{i}"), &xi, None).unwrap();
            sum += ldi.value().data()[0];
            cur = yi.value().clone();
        }
        assert!((total.value().data()[0] - sum).abs() < 1e-12);
    }

    #[test]
    fn conditional_roundtrip_breaks_with_wrong_z() {
        let mut rng = SeedRng::from_seed(12);
        let cfg = FlowConfig {
            scales: 1,
            checkerboard_per_scale: 2,
            channelwise_per_scale: 2,
            filters: 4,
            conditional: true,
        };
        let mut stack = FlowStack::<f64>::init(&cfg, (4, 4, 1), 6, &mut rng).unwrap();
        randomize_params(&mut stack, 0.5, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(rng.normal_tensor(&[1, 4, 4, 1]));
        let z = tape.constant(rng.normal_tensor(&[1, 6]));
        let z_other = tape.constant(rng.normal_tensor(&[1, 6]));
        let mut b = Binder::new(&tape, false);
        let (y, _) = stack.forward(&mut b, "flow", &x, Some(&z)).unwrap();

        let back_good = stack.inverse(&mut b, "flow", &y, Some(&z)).unwrap();
        let err_good: f64 = back_good
            .value()
            .data()
            .iter()
            .zip(x.value().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err_good < 1e-10);

        let back_bad = stack.inverse(&mut b, "flow", &y, Some(&z_other)).unwrap();
        let err_bad: f64 = back_bad
            .value()
            .data()
            .iter()
            .zip(x.value().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err_bad > 1e-4, "wrong z should break the inverse, err {err_bad}");
    }

    #[test]
    fn alternating_masks_transform_every_component() {
        // with randomized parameters no component survives both layers
        // untouched: y differs from x everywhere
        let mut rng = SeedRng::from_seed(13);
        let cfg = FlowConfig {
            scales: 0,
            checkerboard_per_scale: 2,
            channelwise_per_scale: 0,
            filters: 4,
            conditional: false,
        };
        let mut stack = FlowStack::<f64>::init(&cfg, (2, 2, 1), 0, &mut rng).unwrap();
        randomize_params(&mut stack, 0.6, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(rng.normal_tensor(&[1, 2, 2, 1]));
        let mut b = Binder::new(&tape, false);
        let (y, _) = stack.forward(&mut b, "flow", &x, None).unwrap();
        for (a, bv) in x.value().data().iter().zip(y.value().data()) {
            assert!((a - bv).abs() > 1e-12, "component untouched: {a}");
        }
    }
}
