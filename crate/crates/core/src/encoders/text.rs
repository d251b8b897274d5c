use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::{EncoderSpec, FeatureSet};
use crate::corpus::tokenize;
use crate::error::{Error, Result};
use crate::numerics::{self, l2_normalize, l2_normalize_rows, l2_normalize_rows_vjp, l2_normalize_vjp, Tensor};
use crate::scalar::Scalar;
use crate::seed;

/// Filler token for captions shorter than the text capacity.
pub const PAD_TOKEN: &str = "<pad>";

/// Norm of the constant text-side offset, relative to the expected norm of
/// one projected token (`sqrt(D/3)`).
pub const TEXT_OFFSET_RATIO: f64 = 0.25;

/// Deterministic `[-1, 1]` embeddings, one row per word, keyed by `(seed, word)`.
pub fn embed_tokens<T: Scalar, S: AsRef<str>>(words: &[S], spec: &EncoderSpec) -> Result<Tensor<T>> {
    if words.is_empty() {
        return Err(Error::invalid("cannot embed an empty word list"));
    }
    if words.len() > spec.n_te {
        return Err(Error::invalid(format!("{} words exceed text capacity {}", words.len(), spec.n_te)));
    }
    let mut data = Vec::with_capacity(words.len() * spec.d_tok);
    for w in words {
        data.extend(word_vector::<T>(w.as_ref(), spec));
    }
    Tensor::matrix(words.len(), spec.d_tok, data)
}

fn word_vector<T: Scalar>(word: &str, spec: &EncoderSpec) -> Vec<T> {
    let mut hasher = Sha256::new();
    hasher.update(spec.seed.to_le_bytes());
    hasher.update(b"token:");
    hasher.update(word.as_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&hasher.finalize());
    let mut rng = ChaCha8Rng::from_seed(key);
    (0..spec.d_tok).map(|_| T::lit(rng.random_range(-1.0..=1.0))).collect()
}

/// Intermediates of one [`TextEncoder::encode`] call, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TextEncoding<T> {
    /// `n×D` normalized token features.
    pub local: Tensor<T>,
    /// Normalized mean of the projected tokens.
    pub global: Vec<T>,
    projected: Tensor<T>,
    pooled: Vec<T>,
}

/// Frozen surrogate text encoder: `x ↦ W x + b` per token, then L2 normalization.
#[derive(Debug, Clone)]
pub struct TextEncoder<T> {
    spec: EncoderSpec,
    /// `D×D_tok`
    projection: Tensor<T>,
    offset: Vec<T>,
}

impl<T: Scalar> TextEncoder<T> {
    pub fn new(spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::stream(spec.seed, "text-projection");
        let std = (spec.d_tok as f64).sqrt().recip();
        let proj: Vec<T> =
            (0..spec.d * spec.d_tok).map(|_| T::lit(std * rng.sample::<f64, _>(StandardNormal))).collect();
        let projection = Tensor::matrix(spec.d, spec.d_tok, proj)?;

        let mut rng = seed::stream(spec.seed, "text-offset");
        let z: Vec<T> = (0..spec.d_tok).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
        let dir = l2_normalize(&project(&projection, &z))?;
        let norm = T::lit(TEXT_OFFSET_RATIO * (spec.d as f64 / 3.0).sqrt());
        let offset = dir.iter().map(|&x| x * norm).collect();
        Ok(Self { spec: *spec, projection, offset })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn projection(&self) -> &Tensor<T> {
        &self.projection
    }

    pub fn offset(&self) -> &[T] {
        &self.offset
    }

    /// `W x` without the offset.
    pub fn project(&self, token: &[T]) -> Vec<T> {
        project(&self.projection, token)
    }

    /// Encodes an `n×D_tok` token matrix. Captions are capped at `N_te`
    /// tokens before they get here; prompts are `M + 1` tokens long.
    pub fn encode(&self, tokens: &Tensor<T>) -> Result<TextEncoding<T>> {
        let n = tokens.rows();
        if n == 0 {
            return Err(Error::invalid("cannot encode an empty token sequence"));
        }
        if tokens.cols() != self.spec.d_tok {
            return Err(Error::shape(format!("token width {}", self.spec.d_tok), tokens.cols()));
        }
        let mut projected = numerics::matmul_bt(tokens, &self.projection)?;
        for r in 0..n {
            numerics::axpy(T::one(), &self.offset, projected.row_mut(r));
        }
        let local = l2_normalize_rows(&projected)?;
        let pooled = numerics::mean_rows(&projected);
        let global = l2_normalize(&pooled)?;
        Ok(TextEncoding { local, global, projected, pooled })
    }

    /// Gradient with respect to the token matrix, given cotangents of the
    /// local rows and/or the global vector.
    pub fn encode_vjp(
        &self,
        enc: &TextEncoding<T>,
        d_local: Option<&Tensor<T>>,
        d_global: Option<&[T]>,
    ) -> Result<Tensor<T>> {
        let n = enc.projected.rows();
        let mut d_proj = match d_local {
            Some(g) => {
                enc.local.check_same_shape(g)?;
                l2_normalize_rows_vjp(&enc.projected, g)
            }
            None => Tensor::zeros(vec![n, self.spec.d]),
        };
        if let Some(g) = d_global {
            if g.len() != self.spec.d {
                return Err(Error::shape(self.spec.d, g.len()));
            }
            let d_pooled = l2_normalize_vjp(&enc.pooled, g);
            let spread = numerics::mean_rows_vjp(n, &d_pooled);
            d_proj = numerics::add(&d_proj, &spread)?;
        }
        numerics::matmul(&d_proj, &self.projection)
    }

    /// Embeds and encodes a word sequence.
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Result<TextEncoding<T>> {
        self.encode(&embed_tokens(words, &self.spec)?)
    }

    /// Frozen class token: the mean token embedding of the class name's words.
    pub fn class_token(&self, name: &str) -> Result<Vec<T>> {
        let words = tokenize(name);
        let emb = embed_tokens::<T, _>(&words, &EncoderSpec { n_te: words.len().max(1), ..self.spec })?;
        Ok(numerics::mean_rows(&emb))
    }

    /// Text-branch features of a caption: tokens truncated or padded to `N_te`.
    pub fn encode_caption(&self, text: &str, labels: Vec<bool>) -> Result<FeatureSet<T>> {
        let mut words = tokenize(text);
        words.truncate(self.spec.n_te);
        words.resize(self.spec.n_te, PAD_TOKEN.to_string());
        let enc = self.encode_words(&words)?;
        Ok(FeatureSet { global: enc.global, local: enc.local, labels })
    }
}

fn project<T: Scalar>(projection: &Tensor<T>, token: &[T]) -> Vec<T> {
    projection.row_iter().map(|row| numerics::dot(row, token)).collect()
}
