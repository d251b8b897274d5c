//! Prompt construction, class embeddings, heatmap-aggregated similarities
//! and the shared prototype adapter, together with their adjoints.
//!
//! A branch forward pass for one sample with global feature `f^g` and local
//! map `f^l` (N×D), given class embeddings `G`, `L` and prototypes `A`:
//!
//! ```text
//! s_i   = ⟨f^g, G_i⟩                 S_ij = ⟨f^l_j, L_i⟩        (cosines)
//! h_i   = softmax_j(S_ij / τ)        s'_i = Σ_j h_ij S_ij
//! ℋ_i   = Σ_j h_ij f^l_j             q_i  = exp(−β (1 − ⟨ℋ_i, A_i⟩))
//! s̃'_i  = α q_i + s'_i
//! ```

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::CategorySet;
use crate::encoders::{FeatureSet, TextEncoder, TextEncoding};
use crate::error::{Error, Result};
use crate::numerics::{self, dot, l2_normalize, l2_normalize_vjp, Tensor};
use crate::scalar::Scalar;

/// Standard deviation of the prompt context initialization.
pub const CONTEXT_INIT_STD: f64 = 0.02;
pub const DEFAULT_CONTEXT_LENGTH: usize = 16;

/// Loss and scoring hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Image-branch weight in the joint loss.
    pub gamma: f64,
    /// Adapter residual ratio.
    pub alpha: f64,
    /// Adapter sharpness.
    pub beta: f64,
    /// Ranking margin.
    pub eta: f64,
    /// Heatmap temperature.
    pub tau: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self { gamma: 0.2, alpha: 1.0, beta: 3.5, eta: 1.0, tau: 0.02 }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma, self.alpha, self.beta, self.eta, self.tau];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite hyperparameter in {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.eta < 0.0 {
            return Err(Error::invalid("alpha, beta and eta must be nonnegative"));
        }
        if self.tau <= 0.0 {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Learnable global/local prompt contexts and the frozen class tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank<T> {
    /// `M×D_tok`, learnable.
    pub global_context: Tensor<T>,
    /// `M×D_tok`, learnable.
    pub local_context: Tensor<T>,
    /// `C×D_tok`, frozen.
    pub class_tokens: Tensor<T>,
}

impl<T: Scalar> PromptBank<T> {
    pub fn context_length(&self) -> usize {
        self.global_context.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_tokens.rows()
    }
}

/// Frozen class tokens for every class name.
pub fn class_tokens<T: Scalar>(classes: &CategorySet, encoder: &TextEncoder<T>) -> Result<Tensor<T>> {
    let rows = classes.names().iter().map(|n| encoder.class_token(n)).collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Contexts drawn i.i.d. from `N(0, 0.02²)`; class tokens from the encoder.
pub fn build_prompts<T: Scalar, R: Rng + ?Sized>(
    classes: &CategorySet,
    context_length: usize,
    encoder: &TextEncoder<T>,
    rng: &mut R,
) -> Result<PromptBank<T>> {
    if context_length == 0 {
        return Err(Error::invalid("context length must be at least 1"));
    }
    let d_tok = encoder.spec().d_tok;
    let mut draw = || -> Result<Tensor<T>> {
        let data = (0..context_length * d_tok)
            .map(|_| T::lit(CONTEXT_INIT_STD * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor::matrix(context_length, d_tok, data)
    };
    let global_context = draw()?;
    let local_context = draw()?;
    Ok(PromptBank { global_context, local_context, class_tokens: class_tokens(classes, encoder)? })
}

/// Global (`G`) and local (`L`) class embeddings, `C×D` each.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings<T> {
    pub global: Tensor<T>,
    pub local: Tensor<T>,
}

/// Class embeddings plus the per-class encodings needed for the backward pass.
#[derive(Debug, Clone)]
pub struct ClassEmbeddingPass<T> {
    pub embeddings: ClassEmbeddings<T>,
    global_enc: Vec<TextEncoding<T>>,
    local_enc: Vec<TextEncoding<T>>,
}

fn prompt_tokens<T: Scalar>(context: &Tensor<T>, class_token: &[T]) -> Result<Tensor<T>> {
    let mut data = context.data().to_vec();
    data.extend_from_slice(class_token);
    Tensor::matrix(context.rows() + 1, context.cols(), data)
}

/// `G_i` / `L_i` are the global outputs of the encoder on `[context…, CLS_i]`.
pub fn encode_class_embeddings<T: Scalar>(
    prompts: &PromptBank<T>,
    encoder: &TextEncoder<T>,
) -> Result<ClassEmbeddingPass<T>> {
    let encode_all = |context: &Tensor<T>| -> Result<Vec<TextEncoding<T>>> {
        prompts
            .class_tokens
            .row_iter()
            .map(|cls| encoder.encode(&prompt_tokens(context, cls)?))
            .collect()
    };
    let global_enc = encode_all(&prompts.global_context)?;
    let local_enc = encode_all(&prompts.local_context)?;
    let stack = |encs: &[TextEncoding<T>]| {
        Tensor::from_rows(&encs.iter().map(|e| e.global.clone()).collect::<Vec<_>>())
    };
    Ok(ClassEmbeddingPass {
        embeddings: ClassEmbeddings { global: stack(&global_enc)?, local: stack(&local_enc)? },
        global_enc,
        local_enc,
    })
}

impl<T: Scalar> ClassEmbeddingPass<T> {
    /// Maps cotangents of `G` and `L` to gradients of the two contexts.
    pub fn backward(
        &self,
        encoder: &TextEncoder<T>,
        d_global: &Tensor<T>,
        d_local: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let back = |encs: &[TextEncoding<T>], d: &Tensor<T>| -> Result<Tensor<T>> {
            let m = encs[0].local.rows() - 1;
            let mut grad = Tensor::zeros(vec![m, encoder.spec().d_tok]);
            for (enc, g) in encs.iter().zip(d.row_iter()) {
                let d_tokens = encoder.encode_vjp(enc, None, Some(g))?;
                numerics::axpy(T::one(), &d_tokens.data()[..grad.len()], grad.data_mut());
            }
            Ok(grad)
        };
        Ok((back(&self.global_enc, d_global)?, back(&self.local_enc, d_local)?))
    }
}

/// The shared learnable class prototypes `A` (`C×D`).
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMatrix<T>(pub Tensor<T>);

impl<T: Scalar> PrototypeMatrix<T> {
    /// Rows drawn from `N(0, I/D)`, so each row has roughly unit norm.
    pub fn random<R: Rng + ?Sized>(num_classes: usize, d: usize, rng: &mut R) -> Result<Self> {
        let std = (d as f64).sqrt().recip();
        let data = (0..num_classes * d).map(|_| T::lit(std * rng.sample::<f64, _>(StandardNormal))).collect();
        Ok(Self(Tensor::matrix(num_classes, d, data)?))
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Every intermediate of one branch forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBundle<T> {
    /// Global similarities `s` (C).
    pub s: Vec<T>,
    /// Local similarities `S` (C×N).
    pub local_sim: Tensor<T>,
    /// Class-wise heatmap `h` (C×N).
    pub heatmap: Tensor<T>,
    /// Attended features `ℋ` (C×D).
    pub attended: Tensor<T>,
    /// Prototype affinities `q` (C).
    pub q: Vec<T>,
    /// Aggregated local similarity `s'` (C).
    pub s_local: Vec<T>,
    /// Joint logits `s̃'` (C).
    pub s_combined: Vec<T>,
}

fn cosine_rows<T: Scalar>(rows: &Tensor<T>, against: &Tensor<T>) -> Result<Tensor<T>> {
    if rows.cols() != against.cols() {
        return Err(Error::shape(format!("width {}", against.cols()), rows.cols()));
    }
    let a = numerics::l2_normalize_rows(against)?;
    let r = numerics::l2_normalize_rows(rows)?;
    numerics::matmul_bt(&a, &r)
}

/// `s_i = cos(f^g, G_i)`.
pub fn global_similarity<T: Scalar>(global_feature: &[T], class_global: &Tensor<T>) -> Result<Vec<T>> {
    let f = Tensor::vector(global_feature.to_vec())?;
    Ok(cosine_rows(&f, class_global)?.into_data())
}

/// `S_ij = cos(f^l_j, L_i)`, shape `C×N`.
pub fn local_similarity<T: Scalar>(local_features: &Tensor<T>, class_local: &Tensor<T>) -> Result<Tensor<T>> {
    cosine_rows(local_features, class_local)
}

/// `h = softmax_rows(S / τ)`.
pub fn class_heatmap<T: Scalar>(local_sim: &Tensor<T>, tau: T) -> Result<Tensor<T>> {
    numerics::softmax_rows(local_sim, tau)
}

/// `s'_i = Σ_j h_ij S_ij`.
pub fn aggregate_local<T: Scalar>(local_sim: &Tensor<T>, heatmap: &Tensor<T>) -> Result<Vec<T>> {
    local_sim.check_same_shape(heatmap)?;
    Ok(local_sim.row_iter().zip(heatmap.row_iter()).map(|(s, h)| dot(s, h)).collect())
}

/// `ℋ = h · f^l`, shape `C×D`.
pub fn attended_features<T: Scalar>(heatmap: &Tensor<T>, local_features: &Tensor<T>) -> Result<Tensor<T>> {
    numerics::matmul(heatmap, local_features)
}

/// Diagonal of `exp(−β (1 − ℋ̂ Âᵀ))` with rows of both normalized.
pub fn adapter_affinity<T: Scalar>(attended: &Tensor<T>, prototypes: &PrototypeMatrix<T>, beta: T) -> Result<Vec<T>> {
    let a = prototypes.matrix();
    attended.check_same_shape(a)?;
    attended
        .row_iter()
        .zip(a.row_iter())
        .map(|(h, p)| Ok((-beta * (T::one() - dot(&l2_normalize(h)?, &l2_normalize(p)?))).exp()))
        .collect()
}

/// `s̃'_i = α q_i + s'_i`.
pub fn combined_logits<T: Scalar>(q: &[T], s_local: &[T], alpha: T) -> Result<Vec<T>> {
    if q.len() != s_local.len() {
        return Err(Error::shape(q.len(), s_local.len()));
    }
    Ok(q.iter().zip(s_local).map(|(&qi, &si)| alpha * qi + si).collect())
}

/// Runs the whole scoring path for one sample of either branch.
pub fn forward_branch<T: Scalar>(
    features: &FeatureSet<T>,
    embeddings: &ClassEmbeddings<T>,
    prototypes: &PrototypeMatrix<T>,
    hp: &HyperParams,
) -> Result<SimilarityBundle<T>> {
    let c = embeddings.global.rows();
    features.check_dims(embeddings.global.cols(), c)?;
    if prototypes.matrix().shape() != embeddings.local.shape() {
        return Err(Error::shape(format!("{:?}", embeddings.local.shape()), format!("{:?}", prototypes.matrix().shape())));
    }
    let s = global_similarity(&features.global, &embeddings.global)?;
    let local_sim = local_similarity(&features.local, &embeddings.local)?;
    let heatmap = class_heatmap(&local_sim, T::lit(hp.tau))?;
    let s_local = aggregate_local(&local_sim, &heatmap)?;
    let attended = attended_features(&heatmap, &features.local)?;
    let q = adapter_affinity(&attended, prototypes, T::lit(hp.beta))?;
    let s_combined = combined_logits(&q, &s_local, T::lit(hp.alpha))?;
    Ok(SimilarityBundle { s, local_sim, heatmap, attended, q, s_local, s_combined })
}

/// Gradients of a branch objective with respect to `G`, `L` and `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchGrads<T> {
    pub class_global: Tensor<T>,
    pub class_local: Tensor<T>,
    pub prototypes: Tensor<T>,
}

/// Backpropagates cotangents of `s` and `s̃'` through one forward pass.
///
/// `L` reaches the objective twice: through `S` directly in `s'`, and through
/// the heatmap that weights both `s'` and `ℋ`.
pub fn branch_backward<T: Scalar>(
    features: &FeatureSet<T>,
    embeddings: &ClassEmbeddings<T>,
    prototypes: &PrototypeMatrix<T>,
    hp: &HyperParams,
    bundle: &SimilarityBundle<T>,
    d_s: &[T],
    d_combined: &[T],
) -> Result<BranchGrads<T>> {
    let (c, d) = (embeddings.global.rows(), embeddings.global.cols());
    let n = features.local.rows();
    if d_s.len() != c || d_combined.len() != c {
        return Err(Error::shape(c, format!("{} / {}", d_s.len(), d_combined.len())));
    }
    let (alpha, beta, tau) = (T::lit(hp.alpha), T::lit(hp.beta), T::lit(hp.tau));

    // s_i = ĝ · Ĝ_i
    let f_hat = l2_normalize(&features.global)?;
    let mut d_class_global = Vec::with_capacity(c * d);
    for i in 0..c {
        let d_hat: Vec<T> = f_hat.iter().map(|&x| x * d_s[i]).collect();
        d_class_global.extend(l2_normalize_vjp(embeddings.global.row(i), &d_hat));
    }

    // q_i = exp(−β(1 − Ĥ_i·Â_i)), s̃' = α q + s'
    let a = prototypes.matrix();
    let mut d_prototypes = Vec::with_capacity(c * d);
    let mut d_attended = Vec::with_capacity(c * d);
    for i in 0..c {
        let h_row = bundle.attended.row(i);
        let a_row = a.row(i);
        let (h_hat, a_hat) = (l2_normalize(h_row)?, l2_normalize(a_row)?);
        let d_cos = alpha * d_combined[i] * beta * bundle.q[i];
        let d_a_hat: Vec<T> = h_hat.iter().map(|&x| x * d_cos).collect();
        let d_h_hat: Vec<T> = a_hat.iter().map(|&x| x * d_cos).collect();
        d_prototypes.extend(l2_normalize_vjp(a_row, &d_a_hat));
        d_attended.extend(l2_normalize_vjp(h_row, &d_h_hat));
    }
    let d_attended = Tensor::matrix(c, d, d_attended)?;

    // ℋ = h · f^l  and  s'_i = Σ_j h_ij S_ij
    let mut d_heat = numerics::matmul_bt(&d_attended, &features.local)?;
    let mut d_sim = Tensor::zeros(vec![c, n]);
    for i in 0..c {
        let ds_local = d_combined[i];
        for j in 0..n {
            let dh = d_heat.get(i, j) + ds_local * bundle.local_sim.get(i, j);
            d_heat.set(i, j, dh);
            d_sim.set(i, j, ds_local * bundle.heatmap.get(i, j));
        }
    }
    let d_sim_softmax = numerics::softmax_rows_vjp(&bundle.heatmap, &d_heat, tau);
    let d_sim = numerics::add(&d_sim, &d_sim_softmax)?;

    // S_ij = f̂_j · L̂_i
    let f_local_hat = numerics::l2_normalize_rows(&features.local)?;
    let d_l_hat = numerics::matmul(&d_sim, &f_local_hat)?;
    let d_class_local = numerics::l2_normalize_rows_vjp(&embeddings.local, &d_l_hat);

    Ok(BranchGrads {
        class_global: Tensor::matrix(c, d, d_class_global)?,
        class_local: d_class_local,
        prototypes: Tensor::matrix(c, d, d_prototypes)?,
    })
}
