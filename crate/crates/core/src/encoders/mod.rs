//! Frozen feature producers.
//!
//! The text side is a seeded hashed token embedding followed by a fixed
//! linear projection; the image side synthesizes multi-object feature maps
//! around per-class directions. Both live in one `D`-dimensional space, with
//! the text side displaced by a constant offset (the modality gap) and the
//! image class directions only partially aligned with the text encoding of
//! the class names.

mod image;
pub(crate) mod io;
mod text;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub use image::{
    synth_image_features, synth_image_features_with_background, ClassDirections, DEFAULT_BACKGROUND_PROB,
    IMAGE_TEXT_ALIGNMENT,
};
pub use io::{read_feature_file, write_feature_file, FEATURE_MAGIC, FEATURE_VERSION};
pub use text::{embed_tokens, TextEncoder, TextEncoding, PAD_TOKEN, TEXT_OFFSET_RATIO};

/// Dimensions and seed of the frozen encoders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub seed: u64,
    /// Token embedding width.
    pub d_tok: usize,
    /// Feature width.
    pub d: usize,
    /// Number of local slots in an image feature map.
    pub n_im: usize,
    /// Text token capacity.
    pub n_te: usize,
    /// Norm of the isotropic noise added to each synthesized image slot.
    pub noise_sigma: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { seed: 0, d_tok: 64, d: 64, n_im: 49, n_te: 16, noise_sigma: 0.3 }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_tok == 0 || self.d == 0 || self.n_im == 0 || self.n_te == 0 {
            return Err(Error::invalid(format!("encoder dimensions must be positive: {self:?}")));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid(format!("noise_sigma must be finite and nonnegative, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// One sample's encoded features: a global vector, a local map, and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet<T> {
    pub global: Vec<T>,
    /// `N×D`, one row per local slot or token.
    pub local: Tensor<T>,
    pub labels: Vec<bool>,
}

impl<T: Scalar> FeatureSet<T> {
    pub fn dim(&self) -> usize {
        self.global.len()
    }

    pub fn slots(&self) -> usize {
        self.local.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().enumerate().filter_map(|(i, &l)| l.then_some(i)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> FeatureSet<U> {
        FeatureSet {
            global: self.global.iter().map(|&x| U::lit(x.to_f64_lossy())).collect(),
            local: self.local.cast(),
            labels: self.labels.clone(),
        }
    }

    pub(crate) fn check_dims(&self, d: usize, c: usize) -> Result<()> {
        if self.global.len() != d || self.local.cols() != d {
            return Err(Error::Consistency(format!(
                "feature width {} / {} does not match D={d}",
                self.global.len(),
                self.local.cols()
            )));
        }
        if self.labels.len() != c {
            return Err(Error::Consistency(format!("{} labels but C={c}", self.labels.len())));
        }
        Ok(())
    }
}
