//! Dataset ingestion and the image-domain transform chain.
//!
//! Images move through three tagged domains: discrete 8-bit pixels,
//! the unit interval after dequantization, and logit space where the
//! density is modeled. Transitions happen only through the ops here,
//! and the logit transform returns the per-sample likelihood
//! correction that converts logit-space densities back to pixel space.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 3073; // 1 label + 32*32*3 pixels
pub const CIFAR_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Integer pixel values in {0..255}.
    DiscreteU8,
    /// Dequantized values in [0, 1).
    UnitInterval,
    /// Real line after the logit transform.
    LogitSpace,
}

/// A batch of images with its domain tag. Pixels are NHWC.
#[derive(Debug, Clone)]
pub struct ImageBatch<E: Scalar> {
    pub pixels: Tensor<E>,
    pub domain: Domain,
}

impl<E: Scalar> ImageBatch<E> {
    pub fn new(pixels: Tensor<E>, domain: Domain) -> Result<Self> {
        if pixels.shape().len() != 4 {
            return Err(Error::shape(format!(
                "image batch must be NHWC, got {:?}",
                pixels.shape()
            )));
        }
        Ok(ImageBatch { pixels, domain })
    }

    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (H, W, C) of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[1], s[2], s[3])
    }

    /// Dimensionality D of one image.
    pub fn sample_dim(&self) -> usize {
        let (h, w, c) = self.image_shape();
        h * w * c
    }

    /// Copy a subset of images by index.
    pub fn select(&self, indices: &[usize]) -> Self {
        let (h, w, c) = self.image_shape();
        let block = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * block);
        for &i in indices {
            data.extend_from_slice(&self.pixels.data()[i * block..(i + 1) * block]);
        }
        ImageBatch {
            pixels: Tensor::new(&[indices.len(), h, w, c], data).expect("block copy"),
            domain: self.domain,
        }
    }
}

/// Per-sample log-density adjustment (nats) of the logit transform.
#[derive(Debug, Clone)]
pub struct CorrectionFactor<E: Scalar>(pub Tensor<E>);

impl<E: Scalar> CorrectionFactor<E> {
    pub fn per_sample(&self) -> &[E] {
        self.0.data()
    }

    pub fn mean(&self) -> f64 {
        let n = self.0.numel().max(1);
        self.0.data().iter().map(|v| v.to_f64()).sum::<f64>() / n as f64
    }
}

// ── CIFAR-10 binary format ───────────────────────────────────────────

/// Read a CIFAR-10 binary batch file: 3073-byte records of label byte plus
/// channel-planar 32x32 RGB. Returns NHWC pixels and labels.
pub fn load_cifar_binary<E: Scalar>(path: &Path) -> Result<(ImageBatch<E>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    parse_cifar_bytes(&bytes)
}

pub fn parse_cifar_bytes<E: Scalar>(bytes: &[u8]) -> Result<(ImageBatch<E>, Vec<u8>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::format(format!(
            "CIFAR batch length {} is not a positive multiple of {}",
            bytes.len(),
            CIFAR_RECORD_BYTES
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let hw = CIFAR_DIM * CIFAR_DIM;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = vec![E::zero(); n * hw * 3];
    for rec in 0..n {
        let record = &bytes[rec * CIFAR_RECORD_BYTES..(rec + 1) * CIFAR_RECORD_BYTES];
        labels.push(record[0]);
        let planes = &record[1..];
        for y in 0..CIFAR_DIM {
            for x in 0..CIFAR_DIM {
                let p = y * CIFAR_DIM + x;
                let dst = (rec * hw + p) * 3;
                pixels[dst] = E::from_f64(planes[p] as f64);
                pixels[dst + 1] = E::from_f64(planes[hw + p] as f64);
                pixels[dst + 2] = E::from_f64(planes[2 * hw + p] as f64);
            }
        }
    }
    let batch = ImageBatch::new(
        Tensor::new(&[n, CIFAR_DIM, CIFAR_DIM, 3], pixels)?,
        Domain::DiscreteU8,
    )?;
    Ok((batch, labels))
}

/// Write a discrete-u8 batch back into CIFAR binary records.
pub fn write_cifar_binary<E: Scalar>(
    batch: &ImageBatch<E>,
    labels: &[u8],
    path: &Path,
) -> Result<()> {
    if batch.domain != Domain::DiscreteU8 {
        return Err(Error::domain("CIFAR writer needs discrete-u8 pixels"));
    }
    let (h, w, c) = batch.image_shape();
    if (h, w, c) != (CIFAR_DIM, CIFAR_DIM, 3) {
        return Err(Error::shape(format!(
            "CIFAR records are 32x32x3, got {}x{}x{}",
            h, w, c
        )));
    }
    if labels.len() != batch.len() {
        return Err(Error::contract("one label per image required"));
    }
    let hw = CIFAR_DIM * CIFAR_DIM;
    let mut out = Vec::with_capacity(batch.len() * CIFAR_RECORD_BYTES);
    for (i, &label) in labels.iter().enumerate() {
        out.push(label);
        let img = &batch.pixels.data()[i * hw * 3..(i + 1) * hw * 3];
        for ch in 0..3 {
            for p in 0..hw {
                out.push(img[p * 3 + ch].to_f64().round() as u8);
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

// ── domain transforms ────────────────────────────────────────────────

/// Largest E strictly below 1. Keeps dequantized values out of the closed
/// endpoints in single precision.
fn below_one<E: Scalar>() -> E {
    let one = 1.0f64;
    let eps = match E::DTYPE {
        crate::scalar::DType::F32 => f32::EPSILON as f64,
        crate::scalar::DType::F64 => f64::EPSILON,
    };
    E::from_f64(one - eps)
}

/// (pixel + u) / 256 with u ~ Uniform[0,1), drawn fresh per call.
pub fn dequantize<E: Scalar>(batch: &ImageBatch<E>, rng: &mut SeedRng) -> Result<ImageBatch<E>> {
    if batch.domain != Domain::DiscreteU8 {
        return Err(Error::domain("dequantize expects discrete-u8 input"));
    }
    let cap = below_one::<E>();
    let data = batch
        .pixels
        .data()
        .iter()
        .map(|p| {
            let mut u = rng.uniform();
            // u = 0 exactly would put pixel 0 at exactly 0
            while u == 0.0 {
                u = rng.uniform();
            }
            let v = E::from_f64((p.to_f64() + u) / 256.0);
            v.min_val(cap)
        })
        .collect();
    Ok(ImageBatch {
        pixels: Tensor::new(batch.pixels.shape(), data)?,
        domain: Domain::UnitInterval,
    })
}

/// x' = alpha + (1-alpha) x, y = log(x'/(1-x')), with the per-sample
/// correction sum(log((1-alpha)/(x'(1-x')))).
pub fn logit_transform<E: Scalar>(
    batch: &ImageBatch<E>,
    alpha: f64,
) -> Result<(ImageBatch<E>, CorrectionFactor<E>)> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must be in [0,1), got {alpha}")));
    }
    if batch.domain != Domain::UnitInterval {
        return Err(Error::domain("logit transform expects unit-interval input"));
    }
    let n = batch.len();
    let dim = batch.sample_dim();
    let a = E::from_f64(alpha);
    let one_m_a = E::from_f64(1.0 - alpha);
    let mut out = Vec::with_capacity(batch.pixels.numel());
    let mut corr = vec![E::zero(); n];
    for (i, &x) in batch.pixels.data().iter().enumerate() {
        let xp = a + one_m_a * x;
        let one_m_xp = E::one() - xp;
        if xp <= E::zero() || one_m_xp <= E::zero() {
            return Err(Error::domain(format!(
                "logit transform needs x' in (0,1), got {}",
                xp.to_f64()
            )));
        }
        out.push((xp / one_m_xp).ln());
        corr[i / dim] += (one_m_a / (xp * one_m_xp)).ln();
    }
    Ok((
        ImageBatch { pixels: Tensor::new(batch.pixels.shape(), out)?, domain: Domain::LogitSpace },
        CorrectionFactor(Tensor::new(&[n], corr)?),
    ))
}

/// x = (sigmoid(y) - alpha) / (1 - alpha), clamped into [0,1].
pub fn inverse_logit_transform<E: Scalar>(
    batch: &ImageBatch<E>,
    alpha: f64,
) -> Result<ImageBatch<E>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must be in [0,1), got {alpha}")));
    }
    if batch.domain != Domain::LogitSpace {
        return Err(Error::domain("inverse logit expects logit-space input"));
    }
    let a = E::from_f64(alpha);
    let one_m_a = E::one() - a;
    let data = batch
        .pixels
        .data()
        .iter()
        .map(|&y| {
            let s = E::one() / (E::one() + (-y).exp());
            ((s - a) / one_m_a).max_val(E::zero()).min_val(E::one())
        })
        .collect();
    Ok(ImageBatch {
        pixels: Tensor::new(batch.pixels.shape(), data)?,
        domain: Domain::UnitInterval,
    })
}

/// Mirror each image across the vertical axis independently with
/// probability `p`. Valid in any domain.
pub fn hflip_augment<E: Scalar>(batch: &ImageBatch<E>, rng: &mut SeedRng, p: f64) -> ImageBatch<E> {
    let (h, w, c) = batch.image_shape();
    let mut pixels = batch.pixels.clone();
    let block = h * w * c;
    for i in 0..batch.len() {
        if !rng.coin(p) {
            continue;
        }
        let img = &mut pixels.data_mut()[i * block..(i + 1) * block];
        for y in 0..h {
            for x in 0..w / 2 {
                for ch in 0..c {
                    let l = (y * w + x) * c + ch;
                    let r = (y * w + (w - 1 - x)) * c + ch;
                    img.swap(l, r);
                }
            }
        }
    }
    ImageBatch { pixels, domain: batch.domain }
}

/// Area-average downscale of discrete pixels by an integer factor,
/// re-rounded to u8 so the result stays in the discrete domain.
pub fn downscale_area<E: Scalar>(batch: &ImageBatch<E>, factor: usize) -> Result<ImageBatch<E>> {
    if batch.domain != Domain::DiscreteU8 {
        return Err(Error::domain("downscale expects discrete-u8 input"));
    }
    if factor == 0 {
        return Err(Error::config("downscale factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(batch.clone());
    }
    let (h, w, c) = batch.image_shape();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "extents {}x{} not divisible by factor {}",
            h, w, factor
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let n = batch.len();
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![E::zero(); n * oh * ow * c];
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let src = ((img * h + oy * factor + dy) * w + ox * factor + dx) * c + ch;
                            acc += batch.pixels.data()[src].to_f64();
                        }
                    }
                    out[((img * oh + oy) * ow + ox) * c + ch] =
                        E::from_f64((acc * inv).round().clamp(0.0, 255.0));
                }
            }
        }
    }
    Ok(ImageBatch {
        pixels: Tensor::new(&[n, oh, ow, c], out)?,
        domain: Domain::DiscreteU8,
    })
}

// ── image export ─────────────────────────────────────────────────────

/// Render unit-interval images as a binary PPM (P6) grid, row-major,
/// `cols` tiles per row, bytes round(x*255).
pub fn write_ppm_grid<E: Scalar>(images: &ImageBatch<E>, cols: usize, path: &Path) -> Result<()> {
    let bytes = ppm_grid_bytes(images, cols)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn ppm_grid_bytes<E: Scalar>(images: &ImageBatch<E>, cols: usize) -> Result<Vec<u8>> {
    if images.domain != Domain::UnitInterval {
        return Err(Error::domain("PPM export expects unit-interval images"));
    }
    let n = images.len();
    if n == 0 || cols == 0 {
        return Err(Error::contract("need at least one image and one column"));
    }
    let (h, w, c) = images.image_shape();
    if c != 1 && c != 3 {
        return Err(Error::shape(format!("PPM export supports 1 or 3 channels, got {c}")));
    }
    let rows = (n + cols - 1) / cols;
    let (gw, gh) = (cols * w, rows * h);
    let mut body = vec![0u8; gw * gh * 3];
    for i in 0..n {
        let (ty, tx) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                let src = ((i * h + y) * w + x) * c;
                let dst = (((ty * h + y) * gw) + tx * w + x) * 3;
                for ch in 0..3 {
                    let v = images.pixels.data()[src + if c == 3 { ch } else { 0 }].to_f64();
                    body[dst + ch] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    let mut out = format!("P6\n{} {}\n255\n", gw, gh).into_bytes();
    out.extend_from_slice(&body);
    Ok(out)
}

// ── raw tensor fixtures (VFT1) ───────────────────────────────────────

/// Write the raw tensor dataset format: magic "VFT1", u32 N,H,W,C
/// little-endian, then f32 data. Values are raw pixel levels in [0,255].
pub fn write_raw_tensor<E: Scalar>(batch: &ImageBatch<E>, path: &Path) -> Result<()> {
    if batch.domain != Domain::DiscreteU8 {
        return Err(Error::domain("VFT1 stores discrete pixel tensors"));
    }
    let s = batch.pixels.shape();
    let mut out = Vec::with_capacity(16 + batch.pixels.numel() * 4);
    out.extend_from_slice(b"VFT1");
    for &d in s {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in batch.pixels.data() {
        out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_raw_tensor<E: Scalar>(path: &Path) -> Result<ImageBatch<E>> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|_| Error::format("VFT1 header truncated"))?;
    if &magic != b"VFT1" {
        return Err(Error::format("bad VFT1 magic"));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        f.read_exact(&mut b).map_err(|_| Error::format("VFT1 header truncated"))?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let numel: usize = dims.iter().product();
    let mut raw = vec![0u8; numel * 4];
    f.read_exact(&mut raw).map_err(|_| Error::format("VFT1 payload truncated"))?;
    let data: Vec<E> = raw
        .chunks_exact(4)
        .map(|b| E::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    ImageBatch::new(Tensor::new(&dims, data)?, Domain::DiscreteU8)
}

// ── synthetic corpora ────────────────────────────────────────────────

/// Two-mode 2-d point cloud: an equal mixture of isotropic Gaussians at
/// (-2, 0) and (2, 0) with the given spread.
pub fn two_mode_points<E: Scalar>(n: usize, spread: f64, rng: &mut SeedRng) -> Tensor<E> {
    let mut data = Vec::with_capacity(n * 2);
    for _ in 0..n {
        let cx = if rng.coin(0.5) { -2.0 } else { 2.0 };
        data.push(E::from_f64(cx + spread * rng.normal()));
        data.push(E::from_f64(spread * rng.normal()));
    }
    Tensor::new(&[n, 2], data).expect("count matches")
}

/// Smooth random images quantized to u8: low-frequency sinusoid mixtures
/// shared across channels so neighboring pixels and channels correlate.
/// Stands in for natural images where no real corpus is on disk.
pub fn synthetic_image_corpus<E: Scalar>(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    rng: &mut SeedRng,
) -> ImageBatch<E> {
    let mut pixels = vec![E::zero(); n * h * w * c];
    for img in 0..n {
        // two shared luminance fields, per-channel mixing weights
        let mut fields = [[0.0f64; 4]; 2]; // (fx, fy, phase, amp) per field
        for field in fields.iter_mut() {
            field[0] = rng.uniform() * 3.0;
            field[1] = rng.uniform() * 3.0;
            field[2] = rng.uniform() * std::f64::consts::TAU;
            field[3] = 0.5 + 0.5 * rng.uniform();
        }
        let base: Vec<f64> = (0..c).map(|_| 0.25 + 0.5 * rng.uniform()).collect();
        let mix: Vec<(f64, f64)> = (0..c)
            .map(|_| (0.6 * (rng.uniform() - 0.5), 0.6 * (rng.uniform() - 0.5)))
            .collect();
        let noise_amp = 0.02 + 0.03 * rng.uniform();
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
                let f0 = fields[0][3]
                    * (std::f64::consts::TAU * (fields[0][0] * u + fields[0][1] * v) + fields[0][2])
                        .sin();
                let f1 = fields[1][3]
                    * (std::f64::consts::TAU * (fields[1][0] * u + fields[1][1] * v) + fields[1][2])
                        .sin();
                for ch in 0..c {
                    let val = base[ch] + mix[ch].0 * f0 + mix[ch].1 * f1
                        + noise_amp * rng.normal();
                    let q = (val * 255.0).round().clamp(0.0, 255.0);
                    pixels[((img * h + y) * w + x) * c + ch] = E::from_f64(q);
                }
            }
        }
    }
    ImageBatch {
        pixels: Tensor::new(&[n, h, w, c], pixels).expect("count matches"),
        domain: Domain::DiscreteU8,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_single_zero_record() {
        let bytes = vec![0u8; CIFAR_RECORD_BYTES];
        let (batch, labels) = parse_cifar_bytes::<f32>(&bytes).unwrap();
        assert_eq!(batch.len(), 1);
        assert_eq!(labels, vec![0]);
        assert!(batch.pixels.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cifar_truncated_rejected() {
        let bytes = vec![0u8; CIFAR_RECORD_BYTES - 1];
        assert!(matches!(parse_cifar_bytes::<f32>(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn cifar_write_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut rng = SeedRng::from_seed(4);
        let batch = synthetic_image_corpus::<f32>(3, CIFAR_DIM, CIFAR_DIM, 3, &mut rng);
        let labels = vec![1u8, 2, 3];
        write_cifar_binary(&batch, &labels, &path).unwrap();
        let (back, lback) = load_cifar_binary::<f32>(&path).unwrap();
        assert_eq!(lback, labels);
        assert_eq!(back.pixels.data(), batch.pixels.data());
        // and the bytes round-trip too
        let bytes1 = fs::read(&path).unwrap();
        write_cifar_binary(&back, &lback, &path).unwrap();
        assert_eq!(bytes1, fs::read(&path).unwrap());
    }

    #[test]
    fn cifar_full_batch_file_is_10000_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        fs::write(&path, vec![0u8; 30_730_000]).unwrap();
        let (batch, labels) = load_cifar_binary::<f32>(&path).unwrap();
        assert_eq!(batch.len(), 10_000);
        assert_eq!(labels.len(), 10_000);
    }

    #[test]
    fn dequantize_ranges() {
        let mut rng = SeedRng::from_seed(7);
        let pixels = Tensor::from_f64s(&[1, 1, 2, 1], &[0.0, 255.0]).unwrap();
        let batch = ImageBatch::new(pixels, Domain::DiscreteU8).unwrap();
        for _ in 0..200 {
            let d = dequantize::<f64>(&batch, &mut rng).unwrap();
            let v0 = d.pixels.data()[0];
            let v1 = d.pixels.data()[1];
            assert!(v0 > 0.0 && v0 < 1.0 / 256.0);
            assert!((255.0 / 256.0..1.0).contains(&v1));
            assert_eq!(d.domain, Domain::UnitInterval);
        }
    }

    #[test]
    fn dequantize_never_hits_endpoints_f32() {
        let mut rng = SeedRng::from_seed(8);
        let pixels = Tensor::from_f64s(&[1, 1, 2, 1], &[0.0, 255.0]).unwrap();
        let batch = ImageBatch::new(pixels, Domain::DiscreteU8).unwrap();
        for _ in 0..2000 {
            let d = dequantize::<f32>(&batch, &mut rng).unwrap();
            for &v in d.pixels.data() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn dequantize_wrong_domain_rejected() {
        let mut rng = SeedRng::from_seed(1);
        let batch = ImageBatch::new(Tensor::<f64>::zeros(&[1, 1, 1, 1]), Domain::UnitInterval).unwrap();
        assert!(matches!(dequantize(&batch, &mut rng), Err(Error::Domain(_))));
    }

    #[test]
    fn dequantize_mean_of_midpixel() {
        let mut rng = SeedRng::from_seed(13);
        let pixels = Tensor::from_f64s(&[1, 1, 1, 1], &[128.0]).unwrap();
        let batch = ImageBatch::new(pixels, Domain::DiscreteU8).unwrap();
        let trials = 200_000;
        let mut acc = 0.0;
        for _ in 0..trials {
            acc += dequantize::<f64>(&batch, &mut rng).unwrap().pixels.data()[0];
        }
        let mean = acc / trials as f64;
        assert!((mean - 128.5 / 256.0).abs() < 1e-3, "mean {mean}");
    }

    #[test]
    fn logit_transform_hand_values() {
        let pixels = Tensor::from_f64s(&[1, 1, 1, 1], &[0.5]).unwrap();
        let batch = ImageBatch::new(pixels, Domain::UnitInterval).unwrap();
        let (y, corr) = logit_transform::<f64>(&batch, 0.05).unwrap();
        assert!((y.pixels.data()[0] - 0.100083).abs() < 1e-5);
        assert!((corr.per_sample()[0] - 1.337504).abs() < 1e-5);
    }

    #[test]
    fn logit_transform_alpha_zero_midpoint() {
        let pixels = Tensor::from_f64s(&[1, 1, 1, 1], &[0.5]).unwrap();
        let batch = ImageBatch::new(pixels, Domain::UnitInterval).unwrap();
        let (y, corr) = logit_transform::<f64>(&batch, 0.0).unwrap();
        assert!(y.pixels.data()[0].abs() < 1e-12);
        assert!((corr.per_sample()[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn logit_alpha_out_of_range() {
        let batch =
            ImageBatch::new(Tensor::<f64>::zeros(&[1, 1, 1, 1]), Domain::UnitInterval).unwrap();
        assert!(matches!(logit_transform(&batch, 1.0), Err(Error::Config(_))));
        assert!(matches!(logit_transform(&batch, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn inverse_logit_hand_value_and_limit() {
        let pixels = Tensor::from_f64s(&[1, 1, 2, 1], &[0.0, 500.0]).unwrap();
        let batch = ImageBatch::new(pixels, Domain::LogitSpace).unwrap();
        let x = inverse_logit_transform::<f64>(&batch, 0.05).unwrap();
        assert!((x.pixels.data()[0] - 0.473684).abs() < 1e-5);
        assert_eq!(x.pixels.data()[1], 1.0); // clamp absorbs the overflow
    }

    #[test]
    fn transform_chain_roundtrip() {
        let mut rng = SeedRng::from_seed(21);
        let corpus = synthetic_image_corpus::<f64>(4, 8, 8, 3, &mut rng);
        let deq = dequantize(&corpus, &mut rng).unwrap();
        let (y, corr) = logit_transform(&deq, 0.05).unwrap();
        // correction strictly positive for alpha = 0.05
        assert!(corr.per_sample().iter().all(|&c| c > 0.0));
        let back = inverse_logit_transform(&y, 0.05).unwrap();
        for (a, b) in deq.pixels.data().iter().zip(back.pixels.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hflip_identity_involution_and_hand_case() {
        let mut rng = SeedRng::from_seed(2);
        let pixels = Tensor::<f64>::from_f64s(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let batch = ImageBatch::new(pixels, Domain::DiscreteU8).unwrap();

        let same = hflip_augment(&batch, &mut rng, 0.0);
        assert_eq!(same.pixels.data(), batch.pixels.data());

        let once = hflip_augment(&batch, &mut rng, 1.0);
        assert_eq!(once.pixels.data(), &[2.0, 1.0, 4.0, 3.0]);
        let twice = hflip_augment(&once, &mut rng, 1.0);
        assert_eq!(twice.pixels.data(), batch.pixels.data());
    }

    #[test]
    fn ppm_all_white_single_tile() {
        let pixels = Tensor::<f64>::from_f64s(&[1, 2, 2, 1], &[1.0; 4]).unwrap();
        let batch = ImageBatch::new(pixels, Domain::UnitInterval).unwrap();
        let bytes = ppm_grid_bytes(&batch, 1).unwrap();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        let body = &bytes[b"P6\n2 2\n255\n".len()..];
        assert_eq!(body.len(), 12);
        assert!(body.iter().all(|&b| b == 255));
    }

    #[test]
    fn ppm_grid_shape_and_midgray() {
        let pixels = Tensor::<f64>::from_f64s(&[4, 2, 3, 1], &[0.5; 24]).unwrap();
        let batch = ImageBatch::new(pixels, Domain::UnitInterval).unwrap();
        let bytes = ppm_grid_bytes(&batch, 2).unwrap();
        // 2x2 tile grid of 2x3 images -> 6x4 canvas
        assert!(bytes.starts_with(b"P6\n6 4\n255\n"));
        assert!(bytes[b"P6\n6 4\n255\n".len()..].iter().all(|&b| b == 128));
    }

    #[test]
    fn vft1_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.vft");
        let mut rng = SeedRng::from_seed(5);
        let batch = synthetic_image_corpus::<f32>(2, 4, 4, 3, &mut rng);
        write_raw_tensor(&batch, &path).unwrap();
        let back = load_raw_tensor::<f32>(&path).unwrap();
        assert_eq!(back.pixels.shape(), batch.pixels.shape());
        assert_eq!(back.pixels.data(), batch.pixels.data());

        // truncated payload is a format error
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_raw_tensor::<f32>(&path), Err(Error::Format(_))));
    }

    #[test]
    fn downscale_area_blocks() {
        let pixels = Tensor::<f64>::from_f64s(&[1, 2, 2, 1], &[0.0, 10.0, 20.0, 30.0]).unwrap();
        let batch = ImageBatch::new(pixels, Domain::DiscreteU8).unwrap();
        let down = downscale_area(&batch, 2).unwrap();
        assert_eq!(down.pixels.shape(), &[1, 1, 1, 1]);
        assert_eq!(down.pixels.data(), &[15.0]);
    }

    #[test]
    fn two_mode_points_are_bimodal() {
        let mut rng = SeedRng::from_seed(3);
        let pts = two_mode_points::<f64>(1000, 0.5, &mut rng);
        let xs: Vec<f64> = pts.data().chunks(2).map(|p| p[0]).collect();
        let left = xs.iter().filter(|&&x| x < 0.0).count();
        assert!(left > 300 && left < 700);
        assert!(xs.iter().all(|&x| x.abs() > 0.2 || x.abs() < 4.5));
    }
}
