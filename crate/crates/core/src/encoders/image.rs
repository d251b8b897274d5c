use rand::Rng;
use rand_distr::StandardNormal;

use super::{EncoderSpec, FeatureSet, TextEncoder};
use crate::corpus::CategorySet;
use crate::error::{Error, Result};
use crate::numerics::{self, l2_normalize, Tensor};
use crate::scalar::Scalar;
use crate::seed;

/// Probability that a synthesized slot shows background instead of an object.
pub const DEFAULT_BACKGROUND_PROB: f64 = 0.2;

/// Cosine between an image class direction and the (offset-free) text
/// projection of its class token.
pub const IMAGE_TEXT_ALIGNMENT: f64 = 0.5;

const MAX_DIRECTION_COS: f64 = 0.5;
const MAX_RESAMPLES: usize = 10_000;

/// Per-class unit directions of the image feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDirections<T> {
    directions: Tensor<T>,
}

impl<T: Scalar> ClassDirections<T> {
    /// Each direction mixes the projected class token with a seeded residual
    /// orthogonal to it. For `D ≥ 64` the residuals are redrawn until every
    /// pair of directions has `|cos| < 0.5`.
    pub fn new(encoder: &TextEncoder<T>, classes: &CategorySet) -> Result<Self> {
        let spec = encoder.spec();
        let d = spec.d;
        let anchors = classes
            .names()
            .iter()
            .map(|name| l2_normalize(&encoder.project(&encoder.class_token(name)?)))
            .collect::<Result<Vec<_>>>()?;
        let rho = T::lit(IMAGE_TEXT_ALIGNMENT);
        let rest = (T::one() - rho * rho).sqrt();
        let mut rng = seed::stream(spec.seed, "class-directions");
        for _ in 0..MAX_RESAMPLES {
            let mut rows = Vec::with_capacity(anchors.len());
            for anchor in &anchors {
                let residual = loop {
                    let mut r: Vec<T> = (0..d).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
                    let along = numerics::dot(&r, anchor);
                    numerics::axpy(-along, anchor, &mut r);
                    if let Ok(unit) = l2_normalize(&r) {
                        break unit;
                    }
                    if d == 1 {
                        break vec![T::zero()];
                    }
                };
                let mixed: Vec<T> = anchor.iter().zip(&residual).map(|(&a, &r)| rho * a + rest * r).collect();
                rows.push(l2_normalize(&mixed)?);
            }
            let directions = Tensor::from_rows(&rows)?;
            if d < 64 || max_abs_pairwise_cos(&directions) < MAX_DIRECTION_COS {
                return Ok(Self { directions });
            }
        }
        Err(Error::Consistency(format!(
            "could not draw {} class directions with pairwise |cos| < {MAX_DIRECTION_COS} in D={d}",
            classes.len()
        )))
    }

    pub fn from_matrix(directions: Tensor<T>) -> Result<Self> {
        Ok(Self { directions: numerics::l2_normalize_rows(&directions)? })
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.directions
    }

    pub fn direction(&self, class: usize) -> &[T] {
        self.directions.row(class)
    }

    pub fn len(&self) -> usize {
        self.directions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn max_abs_pairwise_cos<T: Scalar>(m: &Tensor<T>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.rows() {
        for j in i + 1..m.rows() {
            worst = worst.max(numerics::dot(m.row(i), m.row(j)).to_f64_lossy().abs());
        }
    }
    worst
}

/// Surrogate synthetic-image features for a label set.
pub fn synth_image_features<T: Scalar, R: Rng + ?Sized>(
    labels: &[bool],
    spec: &EncoderSpec,
    directions: &ClassDirections<T>,
    rng: &mut R,
) -> Result<FeatureSet<T>> {
    synth_image_features_with_background(labels, spec, directions, DEFAULT_BACKGROUND_PROB, rng)
}

/// Every slot independently shows a uniformly chosen present class (or, with
/// probability `background_prob`, a random background direction), plus
/// isotropic Gaussian noise of expected norm `noise_sigma`.
pub fn synth_image_features_with_background<T: Scalar, R: Rng + ?Sized>(
    labels: &[bool],
    spec: &EncoderSpec,
    directions: &ClassDirections<T>,
    background_prob: f64,
    rng: &mut R,
) -> Result<FeatureSet<T>> {
    if labels.len() != directions.len() {
        return Err(Error::shape(format!("{} labels", directions.len()), labels.len()));
    }
    let present: Vec<usize> = labels.iter().enumerate().filter_map(|(i, &l)| l.then_some(i)).collect();
    if present.is_empty() {
        return Err(Error::invalid("cannot synthesize features for an empty label set"));
    }
    if !(0.0..=1.0).contains(&background_prob) {
        return Err(Error::invalid(format!("background probability {background_prob} outside [0, 1]")));
    }
    if directions.matrix().cols() != spec.d {
        return Err(Error::shape(format!("direction width {}", spec.d), directions.matrix().cols()));
    }
    let d = spec.d;
    let coord_std = spec.noise_sigma / (d as f64).sqrt();
    let mut local = Vec::with_capacity(spec.n_im * d);
    for _ in 0..spec.n_im {
        let mut slot: Vec<T> = if rng.random_bool(background_prob) {
            let bg: Vec<T> = (0..d).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
            l2_normalize(&bg)?
        } else {
            let class = present[rng.random_range(0..present.len())];
            directions.direction(class).to_vec()
        };
        if coord_std > 0.0 {
            for x in slot.iter_mut() {
                *x += T::lit(coord_std * rng.sample::<f64, _>(StandardNormal));
            }
        }
        local.extend(l2_normalize(&slot)?);
    }
    let local = Tensor::matrix(spec.n_im, d, local)?;
    let global = l2_normalize(&numerics::mean_rows(&local))?;
    Ok(FeatureSet { global, local, labels: labels.to_vec() })
}
