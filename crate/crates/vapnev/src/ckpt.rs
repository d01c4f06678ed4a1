//! Bit-exact checkpointing: "VPNV" binary format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic  b"VPNV"
//! version u32 (currently 1)
//! config  u32 length + canonical sorted-key JSON (model + train config)
//! step    u64 optimizer step counter
//! rng     32-byte seed, u64 stream, u128 word position
//! params  tensor section
//! adam_m  tensor section (first moments)
//! adam_v  tensor section (second moments)
//! ```
//!
//! A tensor section is a u32 count followed by a table of
//! (name, dtype u8, ndim u32, dims u32..., byte length u64) entries and then
//! the raw payloads in table order. Save -> load -> save reproduces files
//! byte for byte: parameter order is model visit order and optimizer entries
//! are name-sorted.

use std::fs;
use std::path::Path;

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainConfig, Trainer, VapnevModel};
use crate::net::Parameterized;
use crate::rng::{RngState, SeedRng};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VPNV";
pub const VERSION: u32 = 1;

/// Everything a resumed run needs to know.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FullConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl FullConfig {
    pub fn canonical_text(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string_pretty(&value).expect("value prints")
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(format!("bad config blob: {e}")))
    }
}

/// Type-erased named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawTensor {
    pub fn from_tensor<E: Scalar>(name: &str, t: &Tensor<E>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * E::DTYPE.size());
        for v in t.data() {
            v.to_le_bytes(&mut bytes);
        }
        RawTensor { name: name.to_string(), dtype: E::DTYPE, shape: t.shape().to_vec(), bytes }
    }

    pub fn to_tensor<E: Scalar>(&self) -> Result<Tensor<E>> {
        if self.dtype != E::DTYPE {
            return Err(Error::format(format!(
                "tensor {} stored as {:?}, expected {:?}",
                self.name,
                self.dtype,
                E::DTYPE
            )));
        }
        let size = self.dtype.size();
        if self.bytes.len() % size != 0 {
            return Err(Error::format(format!("tensor {} payload misaligned", self.name)));
        }
        let data: Vec<E> = self.bytes.chunks_exact(size).map(E::from_le_slice).collect();
        Tensor::new(&self.shape, data)
            .map_err(|_| Error::format(format!("tensor {} shape/payload mismatch", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_text: String,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<RawTensor>,
    pub adam_m: Vec<RawTensor>,
    pub adam_v: Vec<RawTensor>,
}

// ── byte plumbing ────────────────────────────────────────────────────

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("checkpoint truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn write_section(out: &mut Vec<u8>, tensors: &[RawTensor]) {
    put_u32(out, tensors.len() as u32);
    for t in tensors {
        put_u32(out, t.name.len() as u32);
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dtype.code());
        put_u32(out, t.shape.len() as u32);
        for &d in &t.shape {
            put_u32(out, d as u32);
        }
        put_u64(out, t.bytes.len() as u64);
    }
    for t in tensors {
        out.extend_from_slice(&t.bytes);
    }
}

fn read_section(r: &mut Reader) -> Result<Vec<RawTensor>> {
    let count = r.u32()? as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format("tensor name is not utf-8"))?;
        let dtype = DType::from_code(r.take(1)?[0])
            .ok_or_else(|| Error::format("unknown dtype code"))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len = r.u64()? as usize;
        headers.push((name, dtype, shape, len));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, dtype, shape, len) in headers {
        let numel: usize = shape.iter().product();
        if numel * dtype.size() != len {
            return Err(Error::format(format!("tensor {name} length disagrees with shape")));
        }
        let bytes = r.take(len)?.to_vec();
        tensors.push(RawTensor { name, dtype, shape, bytes });
    }
    Ok(tensors)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.version);
        put_u32(&mut out, self.config_text.len() as u32);
        out.extend_from_slice(self.config_text.as_bytes());
        put_u64(&mut out, self.step);
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        put_u64(&mut out, self.rng.word_pos as u64);
        put_u64(&mut out, (self.rng.word_pos >> 64) as u64);
        write_section(&mut out, &self.params);
        write_section(&mut out, &self.adam_m);
        write_section(&mut out, &self.adam_v);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("not a VPNV checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let config_len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| Error::format("config blob is not utf-8"))?;
        let step = r.u64()?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let stream = r.u64()?;
        let lo = r.u64()? as u128;
        let hi = r.u64()? as u128;
        let rng = RngState { seed, stream, word_pos: lo | (hi << 64) };
        let params = read_section(&mut r)?;
        let adam_m = read_section(&mut r)?;
        let adam_v = read_section(&mut r)?;
        if r.pos != bytes.len() {
            return Err(Error::format("trailing bytes after checkpoint payload"));
        }
        Ok(Checkpoint { version, config_text, step, rng, params, adam_m, adam_v })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

// ── trainer <-> checkpoint ───────────────────────────────────────────

pub fn trainer_to_checkpoint<E: Scalar>(trainer: &Trainer<E>) -> Checkpoint {
    let cfg = FullConfig { model: trainer.model.cfg.clone(), train: trainer.train_cfg.clone() };
    let mut params = Vec::new();
    trainer.model.visit("", &mut |name, t| params.push(RawTensor::from_tensor(name, t)));
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();
    for (name, (m, v)) in &trainer.adam.moments {
        adam_m.push(RawTensor::from_tensor(name, m));
        adam_v.push(RawTensor::from_tensor(name, v));
    }
    Checkpoint {
        version: VERSION,
        config_text: cfg.canonical_text(),
        step: trainer.step,
        rng: trainer.rng.state(),
        params,
        adam_m,
        adam_v,
    }
}

pub fn save_trainer<E: Scalar>(trainer: &Trainer<E>, path: &Path) -> Result<()> {
    trainer_to_checkpoint(trainer).save(path)
}

/// Rebuild a model from a checkpoint, validating every stored tensor
/// against the architecture the config describes.
pub fn model_from_checkpoint<E: Scalar>(ckpt: &Checkpoint) -> Result<(VapnevModel<E>, FullConfig)> {
    let cfg = FullConfig::from_canonical_text(&ckpt.config_text)?;
    // weight-init rng is irrelevant: every parameter is overwritten below
    let mut build_rng = SeedRng::from_seed(0);
    let mut model = VapnevModel::init(cfg.model.clone(), &mut build_rng)?;

    let mut expected = std::collections::BTreeMap::new();
    model.visit("", &mut |name, t| {
        expected.insert(name.to_string(), t.shape().to_vec());
    });
    if expected.len() != ckpt.params.len() {
        return Err(Error::format(format!(
            "checkpoint has {} parameters, config implies {}",
            ckpt.params.len(),
            expected.len()
        )));
    }
    let mut loaded = std::collections::BTreeMap::new();
    for raw in &ckpt.params {
        let want = expected
            .get(&raw.name)
            .ok_or_else(|| Error::format(format!("unexpected parameter {}", raw.name)))?;
        if want != &raw.shape {
            return Err(Error::format(format!(
                "parameter {} has shape {:?}, config implies {:?}",
                raw.name, raw.shape, want
            )));
        }
        loaded.insert(raw.name.clone(), raw.to_tensor::<E>()?);
    }
    model.visit_mut("", &mut |name, t| {
        if let Some(v) = loaded.remove(name) {
            *t = v;
        }
    });
    Ok((model, cfg))
}

/// Full resume: model, optimizer moments, step counter and RNG position.
pub fn load_trainer<E: Scalar>(path: &Path) -> Result<Trainer<E>> {
    let ckpt = Checkpoint::load(path)?;
    let (model, cfg) = model_from_checkpoint::<E>(&ckpt)?;
    let mut adam = AdamState::new();
    adam.t = ckpt.step;
    if ckpt.adam_m.len() != ckpt.adam_v.len() {
        return Err(Error::format("optimizer moment sections disagree"));
    }
    for (m, v) in ckpt.adam_m.iter().zip(&ckpt.adam_v) {
        if m.name != v.name {
            return Err(Error::format("optimizer moment names disagree"));
        }
        adam.moments.insert(m.name.clone(), (m.to_tensor::<E>()?, v.to_tensor::<E>()?));
    }
    Ok(Trainer {
        model,
        adam,
        rng: SeedRng::restore(&ckpt.rng),
        train_cfg: cfg.train,
        step: ckpt.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_image_corpus;
    use crate::model::{Dataset, ModelConfig, TrainConfig};

    fn toy_trainer(steps: u64) -> (Trainer<f32>, Dataset<f32>) {
        let mut rng = SeedRng::from_seed(1);
        let model = VapnevModel::<f32>::init(ModelConfig::toy4x4(), &mut rng).unwrap();
        let mut corpus_rng = SeedRng::from_seed(9);
        let data = Dataset::Images(synthetic_image_corpus::<f32>(24, 4, 4, 1, &mut corpus_rng));
        let cfg = TrainConfig {
            steps,
            batch: 6,
            warmup: 10,
            seed: 5,
            ckpt_every: 0,
            hflip: true,
            ..Default::default()
        };
        (Trainer::new(model, cfg), data)
    }

    #[test]
    fn empty_parameter_checkpoint_roundtrips() {
        let ckpt = Checkpoint {
            version: VERSION,
            config_text: "{}".to_string(),
            step: 0,
            rng: SeedRng::from_seed(3).state(),
            params: vec![],
            adam_m: vec![],
            adam_v: vec![],
        };
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt, back);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (mut trainer, data) = toy_trainer(3);
        trainer.train(&data, None).unwrap();
        let bytes1 = trainer_to_checkpoint(&trainer).to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.vpnv");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.to_bytes(), bytes1);
    }

    #[test]
    fn load_restores_every_field() {
        let (mut trainer, data) = toy_trainer(4);
        trainer.train(&data, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vpnv");
        save_trainer(&trainer, &path).unwrap();
        let restored = load_trainer::<f32>(&path).unwrap();
        assert_eq!(restored.step, trainer.step);
        assert_eq!(restored.adam.t, trainer.adam.t);
        assert_eq!(restored.rng.state(), trainer.rng.state());
        let mut a = Vec::new();
        trainer.model.visit("", &mut |n, t| a.push((n.to_string(), t.data().to_vec())));
        let mut b = Vec::new();
        restored.model.visit("", &mut |n, t| b.push((n.to_string(), t.data().to_vec())));
        assert_eq!(a, b);
    }

    #[test]
    fn resume_reproduces_uninterrupted_trace() {
        let (mut straight, data) = toy_trainer(8);
        let full = straight.train(&data, None).unwrap();

        let (mut half, data2) = toy_trainer(8);
        half.train_cfg.steps = 4;
        half.train(&data2, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.vpnv");
        save_trainer(&half, &path).unwrap();

        let mut resumed = load_trainer::<f32>(&path).unwrap();
        resumed.train_cfg.steps = 8;
        let rest = resumed.train(&data2, None).unwrap();

        let full_lines: Vec<String> = full.records.iter().map(|r| r.line()).collect();
        let rest_lines: Vec<String> = rest.records.iter().map(|r| r.line()).collect();
        assert_eq!(&full_lines[4..], &rest_lines[..]);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let (trainer, _) = toy_trainer(1);
        let mut bytes = trainer_to_checkpoint(&trainer).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch_rejected() {
        let (trainer, _) = toy_trainer(1);
        let mut bytes = trainer_to_checkpoint(&trainer).to_bytes();
        bytes[4] = 99;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_rejected() {
        let (trainer, _) = toy_trainer(1);
        let bytes = trainer_to_checkpoint(&trainer).to_bytes();
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::Format(_))));
    }

    #[test]
    fn shape_mismatch_against_config_rejected() {
        let (trainer, _) = toy_trainer(1);
        let mut ckpt = trainer_to_checkpoint(&trainer);
        ckpt.params[0].shape[0] += 1;
        ckpt.params[0].bytes.extend(vec![0u8; 1000]);
        // reconstructing must fail even though the blob itself parses
        let bytes = ckpt.to_bytes();
        let parsed = Checkpoint::from_bytes(&bytes);
        match parsed {
            Ok(p) => {
                assert!(model_from_checkpoint::<f32>(&p).is_err());
            }
            Err(Error::Format(_)) => {} // header/shape disagreement caught early
            Err(e) => panic!("unexpected error {e:?}"),
        }
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let (trainer, _) = toy_trainer(1);
        let ckpt = trainer_to_checkpoint(&trainer);
        // trained in f32; loading as f64 must fail
        assert!(model_from_checkpoint::<f64>(&ckpt).is_err());
    }
}
