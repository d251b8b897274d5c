//! Trained-model file.
//!
//! Little-endian, no padding:
//!
//! ```text
//! "T2IC" | u16 version=1 | u32 C | u32 D | u32 D_tok | u32 M | u32 N_im | u32 N_te
//! u64 encoder seed | f64 γ | f64 α | f64 β | f64 η | f64 τ
//! f32 global context (M×D_tok) | f32 local context (M×D_tok) | f32 prototypes (C×D)
//! C × (u32 byte length | UTF-8 class name)
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Params, TrainConfig};
use crate::corpus::CategorySet;
use crate::encoders::io::dim_u32;
use crate::encoders::{EncoderSpec, TextEncoder};
use crate::error::{Error, Result};
use crate::model::{self, ClassEmbeddings, HyperParams, PromptBank, PrototypeMatrix};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::wire::ByteReader;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"T2IC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Everything inference needs. Synthesis noise is not part of a model, so
/// `encoder.noise_sigma` is always 0 here.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub classes: Vec<String>,
    pub encoder: EncoderSpec,
    pub hyper: HyperParams,
    pub global_context: Tensor<T>,
    pub local_context: Tensor<T>,
    pub prototypes: Tensor<T>,
}

fn round_to_f32<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|x| T::lit(x.to_f32_lossy() as f64))
}

impl<T: Scalar> Checkpoint<T> {
    /// Values are rounded to storage precision so that an in-memory
    /// checkpoint scores exactly like its saved copy.
    pub fn from_params(config: &TrainConfig, classes: &CategorySet, params: &Params<T>) -> Result<Self> {
        let ckpt = Self {
            classes: classes.names().to_vec(),
            encoder: EncoderSpec { noise_sigma: 0.0, ..config.encoder_spec() },
            hyper: config.hyper(),
            global_context: round_to_f32(&params.global_context),
            local_context: round_to_f32(&params.local_context),
            prototypes: round_to_f32(&params.prototypes),
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn context_length(&self) -> usize {
        self.global_context.rows()
    }

    pub fn category_set(&self) -> Result<CategorySet> {
        CategorySet::new(&self.classes)
    }

    pub fn text_encoder(&self) -> Result<TextEncoder<T>> {
        TextEncoder::new(&self.encoder)
    }

    pub fn params(&self) -> Params<T> {
        Params {
            global_context: self.global_context.clone(),
            local_context: self.local_context.clone(),
            prototypes: self.prototypes.clone(),
        }
    }

    pub fn prototype_matrix(&self) -> PrototypeMatrix<T> {
        PrototypeMatrix(self.prototypes.clone())
    }

    /// Rebuilds the frozen encoder and class tokens and encodes `G` and `L`.
    pub fn class_embeddings(&self) -> Result<ClassEmbeddings<T>> {
        let encoder = self.text_encoder()?;
        let bank = PromptBank {
            global_context: self.global_context.clone(),
            local_context: self.local_context.clone(),
            class_tokens: model::class_tokens(&self.category_set()?, &encoder)?,
        };
        Ok(model::encode_class_embeddings(&bank, &encoder)?.embeddings)
    }

    /// Errors unless `classes` lists the same names in the same order.
    pub fn check_classes(&self, classes: &CategorySet) -> Result<()> {
        if classes.names() != self.classes.as_slice() {
            return Err(Error::Consistency(format!(
                "class list ({} names) does not match the checkpoint ({} names)",
                classes.len(),
                self.classes.len()
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.encoder.validate()?;
        self.category_set()?;
        let (c, d, d_tok) = (self.classes.len(), self.encoder.d, self.encoder.d_tok);
        let m = self.global_context.rows();
        let expect = |t: &Tensor<T>, shape: [usize; 2], what: &str| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Consistency(format!("{what} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(())
        };
        expect(&self.global_context, [m, d_tok], "global context")?;
        expect(&self.local_context, [m, d_tok], "local context")?;
        expect(&self.prototypes, [c, d], "prototype matrix")?;
        if m == 0 {
            return Err(Error::Consistency("empty prompt context".into()));
        }
        Ok(())
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    ckpt.validate()?;
    let e = &ckpt.encoder;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [ckpt.classes.len(), e.d, e.d_tok, ckpt.context_length(), e.n_im, e.n_te] {
        out.write_all(&dim_u32(v)?.to_le_bytes())?;
    }
    out.write_all(&e.seed.to_le_bytes())?;
    let h = &ckpt.hyper;
    for v in [h.gamma, h.alpha, h.beta, h.eta, h.tau] {
        out.write_all(&v.to_le_bytes())?;
    }
    for t in [&ckpt.global_context, &ckpt.local_context, &ckpt.prototypes] {
        for &x in t.data() {
            out.write_all(&x.to_f32_lossy().to_le_bytes())?;
        }
    }
    for name in &ckpt.classes {
        out.write_all(&dim_u32(name.len())?.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    r.expect_version(CHECKPOINT_VERSION)?;
    let mut dims = [0usize; 6];
    for v in dims.iter_mut() {
        *v = r.u32()? as usize;
    }
    let [c, d, d_tok, m, n_im, n_te] = dims;
    let seed = r.u64()?;
    let hp = r.f64s(5)?;
    let hyper = HyperParams { gamma: hp[0], alpha: hp[1], beta: hp[2], eta: hp[3], tau: hp[4] };
    let mut tensor = |rows: usize, cols: usize| -> Result<Tensor<T>> {
        let count = rows.checked_mul(cols).ok_or_else(|| Error::Format {
            offset: r.offset(),
            message: format!("tensor {rows}×{cols} overflows"),
        })?;
        let data = r.f32s(count)?.into_iter().map(|x| T::lit(x as f64)).collect();
        Tensor::matrix(rows, cols, data)
    };
    let global_context = tensor(m, d_tok)?;
    let local_context = tensor(m, d_tok)?;
    let prototypes = tensor(c, d)?;
    let mut classes = Vec::with_capacity(c.min(1 << 16));
    while !r.is_at_end() {
        let len = r.u32()? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format { offset: at, message: format!("class name is not UTF-8: {e}") })?;
        classes.push(name.to_string());
    }
    if classes.len() != c {
        return Err(Error::Consistency(format!("header declares C={c} but {} class names follow", classes.len())));
    }
    let ckpt = Checkpoint {
        classes,
        encoder: EncoderSpec { seed, d_tok, d, n_im, n_te, noise_sigma: 0.0 },
        hyper,
        global_context,
        local_context,
        prototypes,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::init_params;

    fn sample() -> (TrainConfig, Checkpoint<f64>) {
        let cfg = TrainConfig { d_tok: 6, d: 8, n_im: 4, n_te: 5, context_length: 3, seed: 11, ..TrainConfig::default() };
        let classes = CategorySet::new(&["dog", "cat", "traffic light"]).unwrap();
        let enc = TextEncoder::new(&cfg.encoder_spec()).unwrap();
        let params = init_params(&cfg, &classes, &enc).unwrap();
        (cfg.clone(), Checkpoint::from_params(&cfg, &classes, &params).unwrap())
    }

    #[test]
    fn round_trip_is_exact() {
        let (_, ckpt) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.t2ic");
        save_checkpoint(&ckpt, &path).unwrap();
        let back: Checkpoint<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        let header = 4 + 2 + 6 * 4 + 8 + 5 * 8;
        let tensors = 4 * (2 * 3 * 6 + 3 * 8);
        let names = 3 * 4 + "dog".len() + "cat".len() + "traffic light".len();
        assert_eq!(fs::read(&path).unwrap().len(), header + tensors + names);
    }

    #[test]
    fn class_count_mismatch_is_a_consistency_error() {
        let (_, ckpt) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.t2ic");
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(b"cow");
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Consistency(_))));
    }

    #[test]
    fn corrupted_files_rejected() {
        let (_, ckpt) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.t2ic");
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..40]).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn class_list_check() {
        let (_, ckpt) = sample();
        assert!(ckpt.check_classes(&CategorySet::new(&["dog", "cat", "traffic light"]).unwrap()).is_ok());
        assert!(ckpt.check_classes(&CategorySet::new(&["dog", "cat"]).unwrap()).is_err());
    }
}
