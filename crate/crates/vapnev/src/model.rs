//! End-to-end model: ELBO assembly, the KL-annealed training loop,
//! generation, reconstruction, and bits/dim evaluation.
//!
//! One forward pass: encode x to a posterior over z, draw z by
//! reparametrization, decode z into the Y-space Gaussian, push x through the
//! conditional flow, and score the flow output under that Gaussian. The
//! reconstruction term plus the flow log-determinant minus the KL is the
//! per-sample evidence lower bound. With no latent configured the same code
//! degenerates to plain maximum-likelihood flow training against a
//! standard-normal base.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::adam::{AdamHyper, AdamState};
use crate::data::{
    dequantize, hflip_augment, inverse_logit_transform, logit_transform, CorrectionFactor, Domain,
    ImageBatch,
};
use crate::dist::{diag_gaussian_log_prob, kl_to_standard_normal, reparam_sample, GaussianParams};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowStack};
use crate::net::{Binder, Decoder, Encoder, NetConfig, Parameterized};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_256: f64 = 5.545177444479562;

// ── configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    /// (H, W, C) of the modeled inputs.
    pub input: (usize, usize, usize),
    /// 0 disables the VAE half: unconditional flow with a standard-normal base.
    pub z_dim: usize,
    pub encoder: Option<NetConfig>,
    pub decoder: Option<NetConfig>,
    pub flow: FlowConfig,
    /// Logit-transform boundary parameter for image data.
    pub alpha: f64,
    /// True for the image pipeline (dequantize + logit); false for raw points.
    pub image_data: bool,
    /// Loader-side area downscale factor for 32x32 sources (1 = none).
    pub downscale: usize,
}

impl ModelConfig {
    /// Full-size architecture: 8-layer encoder/decoder from 32 filters,
    /// z_dim 256, two flow scales of 3+3 couplings from 64 filters.
    pub fn paper() -> Self {
        ModelConfig {
            preset: "paper".to_string(),
            input: (32, 32, 3),
            z_dim: 256,
            encoder: Some(NetConfig { layers: 8, base_filters: 32, kernel: 3 }),
            decoder: Some(NetConfig { layers: 8, base_filters: 32, kernel: 3 }),
            flow: FlowConfig {
                scales: 2,
                checkerboard_per_scale: 3,
                channelwise_per_scale: 3,
                filters: 64,
                conditional: true,
            },
            alpha: 0.05,
            image_data: true,
            downscale: 1,
        }
    }

    /// Trains in minutes on a CPU: 8x8 inputs, 4-layer nets from 16 filters,
    /// z_dim 64, one flow scale of 2+2 couplings.
    pub fn desk() -> Self {
        ModelConfig {
            preset: "desk".to_string(),
            input: (8, 8, 3),
            z_dim: 64,
            encoder: Some(NetConfig { layers: 4, base_filters: 16, kernel: 3 }),
            decoder: Some(NetConfig { layers: 4, base_filters: 16, kernel: 3 }),
            flow: FlowConfig {
                scales: 1,
                checkerboard_per_scale: 2,
                channelwise_per_scale: 2,
                filters: 16,
                conditional: true,
            },
            alpha: 0.05,
            image_data: true,
            downscale: 4,
        }
    }

    /// Unconditional flow on 2-d points, for density-fit and normalization
    /// checks without any image data.
    pub fn toy2d() -> Self {
        ModelConfig {
            preset: "toy2d".to_string(),
            input: (1, 2, 1),
            z_dim: 0,
            encoder: None,
            decoder: None,
            flow: FlowConfig {
                scales: 0,
                checkerboard_per_scale: 6,
                channelwise_per_scale: 0,
                filters: 16,
                conditional: false,
            },
            alpha: 0.0,
            image_data: false,
            downscale: 1,
        }
    }

    /// Miniature image model used by the end-to-end gradient oracle.
    pub fn toy4x4() -> Self {
        ModelConfig {
            preset: "toy4x4".to_string(),
            input: (4, 4, 1),
            z_dim: 4,
            encoder: Some(NetConfig { layers: 2, base_filters: 4, kernel: 3 }),
            decoder: Some(NetConfig { layers: 2, base_filters: 4, kernel: 3 }),
            flow: FlowConfig {
                scales: 1,
                checkerboard_per_scale: 1,
                channelwise_per_scale: 1,
                filters: 4,
                conditional: true,
            },
            alpha: 0.05,
            image_data: true,
            downscale: 8,
        }
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "toy2d" => Ok(Self::toy2d()),
            "toy4x4" => Ok(Self::toy4x4()),
            other => Err(Error::config(format!(
                "unknown preset '{other}' (expected paper, desk or toy2d)"
            ))),
        }
    }

    /// Dimensionality D of one sample.
    pub fn sample_dim(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    /// Canonical sorted-key JSON, the form stored in checkpoints.
    pub fn canonical_text(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string_pretty(&value).expect("value prints")
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(format!("bad config blob: {e}")))
    }
}

// ── breakdown ────────────────────────────────────────────────────────

/// Per-sample ELBO terms in nats. `elbo = recon_ll + flow_logdet - kl`
/// holds exactly; the correction converts logit-space likelihoods back to
/// pixel space and only enters reported numbers.
#[derive(Debug, Clone)]
pub struct ElboBreakdown {
    pub recon_ll: Vec<f64>,
    pub flow_logdet: Vec<f64>,
    pub kl: Vec<f64>,
    pub correction: Vec<f64>,
    pub elbo: Vec<f64>,
}

impl ElboBreakdown {
    fn mean(v: &[f64]) -> f64 {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn mean_elbo(&self) -> f64 {
        Self::mean(&self.elbo)
    }
    pub fn mean_recon_ll(&self) -> f64 {
        Self::mean(&self.recon_ll)
    }
    pub fn mean_flow_logdet(&self) -> f64 {
        Self::mean(&self.flow_logdet)
    }
    pub fn mean_kl(&self) -> f64 {
        Self::mean(&self.kl)
    }
    pub fn mean_correction(&self) -> f64 {
        Self::mean(&self.correction)
    }

    /// Upper bound on bits/dim of the original data.
    pub fn bits_per_dim(&self, dim: usize) -> f64 {
        bits_per_dim(self.mean_elbo(), self.mean_correction(), dim)
    }
}

/// -(elbo + correction) / (D ln 2): nats-to-bits conversion per dimension.
pub fn bits_per_dim(elbo: f64, correction: f64, dim: usize) -> f64 {
    -(elbo + correction) / (dim.max(1) as f64 * LN_2)
}

/// Linear KL warmup: min(1, step/warmup); warmup 0 means no annealing.
pub fn kl_anneal_weight(step: u64, warmup: u64) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        (step as f64 / warmup as f64).min(1.0)
    }
}

// ── the model ────────────────────────────────────────────────────────

pub struct VapnevModel<E: Scalar> {
    pub cfg: ModelConfig,
    pub encoder: Option<Encoder<E>>,
    pub decoder: Option<Decoder<E>>,
    pub flow: FlowStack<E>,
}

pub struct ElboOutput<E: Scalar> {
    pub loss: Var<E>,
    pub breakdown: ElboBreakdown,
    pub bound: Vec<(String, Var<E>)>,
}

impl<E: Scalar> VapnevModel<E> {
    pub fn init(cfg: ModelConfig, rng: &mut SeedRng) -> Result<Self> {
        let flow = FlowStack::init(&cfg.flow, cfg.input, cfg.z_dim, rng)?;
        let (encoder, decoder) = if cfg.z_dim > 0 {
            let enc_cfg = cfg
                .encoder
                .as_ref()
                .ok_or_else(|| Error::config("z_dim > 0 needs an encoder config"))?;
            let dec_cfg = cfg
                .decoder
                .as_ref()
                .ok_or_else(|| Error::config("z_dim > 0 needs a decoder config"))?;
            let enc = Encoder::init(enc_cfg, cfg.input, cfg.z_dim, rng)?;
            let dec = Decoder::init(dec_cfg, cfg.input, cfg.z_dim, cfg.flow.scales, rng)?;
            (Some(enc), Some(dec))
        } else {
            if cfg.flow.conditional {
                return Err(Error::config("conditional flow needs z_dim > 0"));
            }
            (None, None)
        };
        let model = VapnevModel { cfg, encoder, decoder, flow };
        model.check_decoder_matches_flow(rng)?;
        Ok(model)
    }

    /// Structural invariant: decoder heads must emit exactly the flow's
    /// Y-space shape. Checked once with a throwaway pass at build time.
    fn check_decoder_matches_flow(&self, rng: &mut SeedRng) -> Result<()> {
        let Some(decoder) = &self.decoder else { return Ok(()) };
        let tape = Tape::new();
        let mut b = Binder::new(&tape, false);
        let z = tape.constant(rng.normal_tensor(&[1, self.cfg.z_dim]));
        let (_, p) = decoder.forward(&mut b, "dec", &z)?;
        let (h, w, c) = self.flow.out_shape();
        if p.mu.shape() != [1, h, w, c] {
            return Err(Error::shape(format!(
                "decoder heads produce {:?}, flow output is [N,{},{},{}]",
                p.mu.shape(),
                h,
                w,
                c
            )));
        }
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit("", &mut |_, t| count += t.numel());
        count
    }

    /// Single-sample Monte Carlo ELBO of a logit-space (or raw point) batch.
    /// The training loss is -(recon_ll + flow_logdet - kl_weight * kl); the
    /// reported elbo always uses weight 1.
    pub fn elbo(
        &self,
        tape: &Tape<E>,
        x: &Var<E>,
        correction: Option<&CorrectionFactor<E>>,
        rng: &mut SeedRng,
        kl_weight: f64,
        trainable: bool,
    ) -> Result<ElboOutput<E>> {
        if !(0.0..=1.0).contains(&kl_weight) {
            return Err(Error::contract(format!("kl_weight must be in [0,1], got {kl_weight}")));
        }
        if !x.value().all_finite() {
            return Err(Error::numerics("elbo input contains non-finite values"));
        }
        let n = x.shape()[0];
        let dim = self.cfg.sample_dim();
        let mut b = Binder::new(tape, trainable);

        let (z, kl) = match &self.encoder {
            Some(encoder) => {
                let q = encoder.forward(&mut b, "enc", x)?;
                let z = reparam_sample(&q, rng)?;
                let kl = kl_to_standard_normal(&q)?;
                (Some(z), Some(kl))
            }
            None => (None, None),
        };

        let (y, logdet) = self.flow.forward(&mut b, "flow", x, z.as_ref())?;

        let recon_ll = match (&self.decoder, &z) {
            (Some(decoder), Some(z)) => {
                let (_, p) = decoder.forward(&mut b, "dec", z)?;
                diag_gaussian_log_prob(&y, &p)?
            }
            _ => {
                // standard-normal base
                let zero = tape.constant(Tensor::zeros(y.shape()));
                let p = GaussianParams::new(zero.clone(), zero)?;
                diag_gaussian_log_prob(&y, &p)?
            }
        };

        check_term(&recon_ll, "recon_ll")?;
        check_term(&logdet, "flow_logdet")?;
        if let Some(kl) = &kl {
            check_term(kl, "kl")?;
        }

        let objective = recon_ll.add(&logdet)?;
        let loss = match &kl {
            Some(kl) => objective.sub(&kl.mul_scalar(kl_weight))?,
            None => objective,
        }
        .mean_all()
        .neg();
        check_term(&loss, "loss")?;

        let to_f64 = |v: &Var<E>| v.value().data().iter().map(|e| e.to_f64()).collect::<Vec<_>>();
        let recon_v = to_f64(&recon_ll);
        let logdet_v = to_f64(&logdet);
        let kl_v = kl.as_ref().map(|k| to_f64(k)).unwrap_or_else(|| vec![0.0; n]);
        let corr_v: Vec<f64> = match correction {
            Some(c) => c
                .per_sample()
                .iter()
                .map(|v| v.to_f64() - dim as f64 * LN_256)
                .collect(),
            None => vec![0.0; n],
        };
        let elbo_v: Vec<f64> = (0..n)
            .map(|i| recon_v[i] + logdet_v[i] - kl_v[i])
            .collect();
        Ok(ElboOutput {
            loss,
            breakdown: ElboBreakdown {
                recon_ll: recon_v,
                flow_logdet: logdet_v,
                kl: kl_v,
                correction: corr_v,
                elbo: elbo_v,
            },
            bound: b.into_bound(),
        })
    }

    /// Draw n samples from the model: z from the prior, Y from the decoder
    /// heads (or its mean when `deterministic_y`), then the inverse flow.
    pub fn generate(
        &self,
        n: usize,
        rng: &mut SeedRng,
        deterministic_y: bool,
    ) -> Result<Tensor<E>> {
        let tape = Tape::new();
        let mut b = Binder::new(&tape, false);
        let (y, z) = match &self.decoder {
            Some(decoder) => {
                let z = tape.constant(rng.normal_tensor(&[n, self.cfg.z_dim]));
                let (_, p) = decoder.forward(&mut b, "dec", &z)?;
                let y = if deterministic_y { p.mu.clone() } else { reparam_sample(&p, rng)? };
                (y, Some(z))
            }
            None => {
                let (h, w, c) = self.flow.out_shape();
                let y = if deterministic_y {
                    tape.constant(Tensor::zeros(&[n, h, w, c]))
                } else {
                    tape.constant(rng.normal_tensor(&[n, h, w, c]))
                };
                (y, None)
            }
        };
        let x = self.flow.inverse(&mut b, "flow", &y, z.as_ref())?;
        Ok(x.value().clone())
    }

    /// Sample images in the unit interval.
    pub fn generate_images(
        &self,
        n: usize,
        rng: &mut SeedRng,
        deterministic_y: bool,
    ) -> Result<ImageBatch<E>> {
        if !self.cfg.image_data {
            return Err(Error::config("image generation needs an image preset"));
        }
        let x_logit = self.generate(n, rng, deterministic_y)?;
        let batch = ImageBatch::new(x_logit, Domain::LogitSpace)?;
        inverse_logit_transform(&batch, self.cfg.alpha)
    }

    /// Encode, redraw z, decode and invert the flow: the reconstruction path.
    /// Accepts discrete or already-dequantized images.
    pub fn reconstruct(
        &self,
        x: &ImageBatch<E>,
        rng: &mut SeedRng,
        deterministic_y: bool,
    ) -> Result<ImageBatch<E>> {
        if !self.cfg.image_data {
            return Err(Error::config("reconstruction needs an image preset"));
        }
        let (Some(encoder), Some(decoder)) = (&self.encoder, &self.decoder) else {
            return Err(Error::config("reconstruction needs the VAE half"));
        };
        let unit = match x.domain {
            Domain::DiscreteU8 => dequantize(x, rng)?,
            Domain::UnitInterval => x.clone(),
            Domain::LogitSpace => {
                return Err(Error::domain("reconstruct expects discrete or unit-interval input"))
            }
        };
        let (logit, _) = logit_transform(&unit, self.cfg.alpha)?;
        let tape = Tape::new();
        let mut b = Binder::new(&tape, false);
        let xv = tape.constant(logit.pixels.clone());
        let q = encoder.forward(&mut b, "enc", &xv)?;
        let z = reparam_sample(&q, rng)?;
        let (_, p) = decoder.forward(&mut b, "dec", &z)?;
        let y = if deterministic_y { p.mu.clone() } else { reparam_sample(&p, rng)? };
        let back = self.flow.inverse(&mut b, "flow", &y, Some(&z))?;
        let batch = ImageBatch::new(back.value().clone(), Domain::LogitSpace)?;
        inverse_logit_transform(&batch, self.cfg.alpha)
    }
}

fn check_term<E: Scalar>(v: &Var<E>, name: &str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::numerics(format!("non-finite values in {name}")))
    }
}

impl<E: Scalar> Parameterized<E> for VapnevModel<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        if let Some(enc) = &self.encoder {
            enc.visit(&crate::net::join(prefix, "enc"), f);
        }
        if let Some(dec) = &self.decoder {
            dec.visit(&crate::net::join(prefix, "dec"), f);
        }
        self.flow.visit(&crate::net::join(prefix, "flow"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        if let Some(enc) = &mut self.encoder {
            enc.visit_mut(&crate::net::join(prefix, "enc"), f);
        }
        if let Some(dec) = &mut self.decoder {
            dec.visit_mut(&crate::net::join(prefix, "dec"), f);
        }
        self.flow.visit_mut(&crate::net::join(prefix, "flow"), f);
    }
}

// ── datasets and training ────────────────────────────────────────────

pub enum Dataset<E: Scalar> {
    /// Discrete images; dequantized freshly at every batch draw.
    Images(ImageBatch<E>),
    /// Raw 2-d points, shape [N, 2].
    Points(Tensor<E>),
}

impl<E: Scalar> Dataset<E> {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Images(b) => b.len(),
            Dataset::Points(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub warmup: u64,
    pub seed: u64,
    pub hyper: AdamHyper,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub ckpt_every: u64,
    /// Horizontal flips during training (image data only).
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch: 64,
            warmup: 500,
            seed: 0,
            hyper: AdamHyper::default(),
            ckpt_every: 0,
            hflip: true,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: u64,
    pub elbo: f64,
    pub recon_ll: f64,
    pub flow_logdet: f64,
    pub kl: f64,
    pub bits_per_dim: f64,
}

impl StepRecord {
    pub fn header() -> &'static str {
        "step,elbo,recon_ll,flow_logdet,kl,bits_per_dim"
    }

    pub fn line(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.elbo, self.recon_ll, self.flow_logdet, self.kl, self.bits_per_dim
        )
        .expect("write to string");
        s
    }
}

pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub final_step: u64,
    pub last_checkpoint: Option<PathBuf>,
}

/// Owns the model plus everything mutable during optimization. One trainer
/// per parameter set; single-threaded stepping is bit-deterministic.
pub struct Trainer<E: Scalar> {
    pub model: VapnevModel<E>,
    pub adam: AdamState<E>,
    pub rng: SeedRng,
    pub train_cfg: TrainConfig,
    pub step: u64,
}

impl<E: Scalar> Trainer<E> {
    pub fn new(model: VapnevModel<E>, train_cfg: TrainConfig) -> Self {
        let rng = SeedRng::from_seed(train_cfg.seed);
        Trainer { model, adam: AdamState::new(), rng, train_cfg, step: 0 }
    }

    /// Prepare one training batch: select with replacement, then for images
    /// flip, dequantize with fresh noise, and move to logit space.
    fn draw_batch(
        &mut self,
        data: &Dataset<E>,
    ) -> Result<(Tensor<E>, Option<CorrectionFactor<E>>)> {
        let n = data.len();
        let batch = self.train_cfg.batch.max(1);
        let idx: Vec<usize> = (0..batch).map(|_| self.rng.below(n)).collect();
        match data {
            Dataset::Images(images) => {
                let mut sel = images.select(&idx);
                if self.train_cfg.hflip {
                    sel = hflip_augment(&sel, &mut self.rng, 0.5);
                }
                let unit = dequantize(&sel, &mut self.rng)?;
                let (logit, corr) = logit_transform(&unit, self.model.cfg.alpha)?;
                Ok((logit.pixels, Some(corr)))
            }
            Dataset::Points(points) => {
                let (h, w, c) = self.model.cfg.input;
                let dim = h * w * c;
                let mut out = Vec::with_capacity(batch * dim);
                for &i in &idx {
                    out.extend_from_slice(&points.data()[i * dim..(i + 1) * dim]);
                }
                Ok((Tensor::new(&[batch, h, w, c], out)?, None))
            }
        }
    }

    /// elbo -> backward -> adam. Returns the step record.
    pub fn train_step(&mut self, data: &Dataset<E>) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::contract("dataset is empty"));
        }
        let (x, corr) = self.draw_batch(data)?;
        let kl_weight = kl_anneal_weight(self.step, self.train_cfg.warmup);
        let tape = Tape::new();
        let xv = tape.constant(x);
        let out = self.model.elbo(&tape, &xv, corr.as_ref(), &mut self.rng, kl_weight, true)?;
        let grads = tape.backward(&out.loss)?;
        let mut by_name: BTreeMap<String, Tensor<E>> = BTreeMap::new();
        for (name, var) in &out.bound {
            by_name.insert(name.clone(), grads.of(var));
        }
        let mut pairs: Vec<(String, *mut Tensor<E>)> = Vec::new();
        self.model.visit_mut("", &mut |name, t| pairs.push((name.to_string(), t as *mut _)));
        // SAFETY: visit_mut yields each parameter exactly once; pointers stay
        // valid for this call because the model is not touched in between.
        let iter = pairs
            .iter()
            .map(|(name, ptr)| (name.as_str(), unsafe { &mut **ptr }));
        self.adam.step(iter, &by_name, &self.train_cfg.hyper)?;
        self.step += 1;

        let b = &out.breakdown;
        Ok(StepRecord {
            step: self.step,
            elbo: b.mean_elbo(),
            recon_ll: b.mean_recon_ll(),
            flow_logdet: b.mean_flow_logdet(),
            kl: b.mean_kl(),
            bits_per_dim: b.bits_per_dim(self.model.cfg.sample_dim()),
        })
    }

    /// Run the full step budget, logging every step and checkpointing
    /// periodically when an output directory is given. On a numerics error
    /// training aborts and the last good checkpoint stays on disk.
    pub fn train(&mut self, data: &Dataset<E>, out_dir: Option<&Path>) -> Result<TrainReport> {
        let mut records = Vec::new();
        let mut last_checkpoint = None;
        let every = self.train_cfg.ckpt_every;
        while self.step < self.train_cfg.steps {
            let record = self.train_step(data)?;
            records.push(record);
            if let Some(dir) = out_dir {
                if (every > 0 && self.step % every == 0) || self.step == self.train_cfg.steps {
                    let path = dir.join(format!("ckpt_{:08}.vpnv", self.step));
                    crate::ckpt::save_trainer(self, &path)?;
                    last_checkpoint = Some(path);
                }
            }
        }
        Ok(TrainReport { records, final_step: self.step, last_checkpoint })
    }
}

// ── evaluation ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mean_elbo: f64,
    pub mean_recon_ll: f64,
    pub mean_flow_logdet: f64,
    pub mean_kl: f64,
    pub mean_correction: f64,
    pub bits_per_dim: f64,
    /// Negative corrected log-likelihood bound per sample, nats.
    pub nll: f64,
    pub samples: usize,
}

/// Score a dataset with kl_weight 1, fresh dequantization noise and no
/// augmentation, averaging over fixed-size chunks.
pub fn evaluate<E: Scalar>(
    model: &VapnevModel<E>,
    data: &Dataset<E>,
    rng: &mut SeedRng,
    batch: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    let n = data.len();
    let batch = batch.max(1);
    let mut sums = [0.0f64; 5];
    let mut count = 0usize;
    let mut start = 0usize;
    while start < n {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let (x, corr) = match data {
            Dataset::Images(images) => {
                let sel = images.select(&idx);
                let unit = dequantize(&sel, rng)?;
                let (logit, corr) = logit_transform(&unit, model.cfg.alpha)?;
                (logit.pixels, Some(corr))
            }
            Dataset::Points(points) => {
                let (h, w, c) = model.cfg.input;
                let dim = h * w * c;
                let mut out = Vec::with_capacity(idx.len() * dim);
                for &i in &idx {
                    out.extend_from_slice(&points.data()[i * dim..(i + 1) * dim]);
                }
                (Tensor::new(&[idx.len(), h, w, c], out)?, None)
            }
        };
        let tape = Tape::new();
        let xv = tape.constant(x);
        let out = model.elbo(&tape, &xv, corr.as_ref(), rng, 1.0, false)?;
        let b = &out.breakdown;
        for i in 0..b.elbo.len() {
            sums[0] += b.elbo[i];
            sums[1] += b.recon_ll[i];
            sums[2] += b.flow_logdet[i];
            sums[3] += b.kl[i];
            sums[4] += b.correction[i];
        }
        count += b.elbo.len();
        start += batch;
    }
    let m = count as f64;
    let (elbo, recon, logdet, kl, corr) =
        (sums[0] / m, sums[1] / m, sums[2] / m, sums[3] / m, sums[4] / m);
    Ok(EvalReport {
        mean_elbo: elbo,
        mean_recon_ll: recon,
        mean_flow_logdet: logdet,
        mean_kl: kl,
        mean_correction: corr,
        bits_per_dim: bits_per_dim(elbo, corr, model.cfg.sample_dim()),
        nll: -(elbo + corr),
        samples: count,
    })
}
