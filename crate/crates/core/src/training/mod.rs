//! Joint optimisation of the prompt contexts and the prototype matrix.

mod checkpoint;
mod config;
mod gradcheck;
mod loss;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{LrSchedule, TrainConfig};
pub use gradcheck::{gradient_check, GradcheckOptions, TensorCheck};
pub use loss::{branch_loss, joint_loss, ranking_loss, ranking_loss_grad, RankingForm};

use std::f64::consts::PI;

use rand::seq::SliceRandom;

use crate::corpus::CategorySet;
use crate::encoders::{FeatureSet, TextEncoder};
use crate::error::{Error, Result};
use crate::model::{self, ClassEmbeddingPass, HyperParams, PromptBank, PrototypeMatrix};
use crate::numerics::{self, Tensor};
use crate::scalar::Scalar;
use crate::seed;

/// The learnable tensors. Everything else (encoder, class tokens) is frozen
/// and never reaches the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub global_context: Tensor<T>,
    pub local_context: Tensor<T>,
    pub prototypes: Tensor<T>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros_like(other: &Self) -> Self {
        Self {
            global_context: Tensor::zeros(other.global_context.shape().to_vec()),
            local_context: Tensor::zeros(other.local_context.shape().to_vec()),
            prototypes: Tensor::zeros(other.prototypes.shape().to_vec()),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 3] {
        [
            ("global_context", &self.global_context),
            ("local_context", &self.local_context),
            ("prototypes", &self.prototypes),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 3] {
        [&mut self.global_context, &mut self.local_context, &mut self.prototypes]
    }

    /// `a·x + b·y`, elementwise over all three tensors.
    pub fn combine(a: T, x: &Self, b: T, y: &Self) -> Result<Self> {
        let mix = |p: &Tensor<T>, q: &Tensor<T>| -> Result<Tensor<T>> {
            numerics::add(&numerics::scale(p, a), &numerics::scale(q, b))
        };
        Ok(Self {
            global_context: mix(&x.global_context, &y.global_context)?,
            local_context: mix(&x.local_context, &y.local_context)?,
            prototypes: mix(&x.prototypes, &y.prototypes)?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn prompt_bank(&self, class_tokens: &Tensor<T>) -> PromptBank<T> {
        PromptBank {
            global_context: self.global_context.clone(),
            local_context: self.local_context.clone(),
            class_tokens: class_tokens.clone(),
        }
    }
}

/// `p ← p − lr·g`.
pub fn sgd_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, lr: T) -> Result<()> {
    if !(lr > T::zero()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    param.check_same_shape(grad)?;
    numerics::axpy(-lr, grad.data(), param.data_mut());
    Ok(())
}

/// Plain SGD with optional heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    momentum: T,
    weight_decay: T,
    velocity: Option<Params<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum: T::lit(momentum), weight_decay: T::lit(weight_decay), velocity: None }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: T) -> Result<()> {
        let mut g = grads.clone();
        if self.weight_decay > T::zero() {
            g = Params::combine(T::one(), &g, self.weight_decay, params)?;
        }
        if self.momentum > T::zero() {
            let v = match self.velocity.take() {
                Some(v) => Params::combine(self.momentum, &v, T::one(), &g)?,
                None => g,
            };
            g = v.clone();
            self.velocity = Some(v);
        }
        let updates = [&g.global_context, &g.local_context, &g.prototypes];
        for (p, u) in params.tensors_mut().into_iter().zip(updates) {
            sgd_step(p, u, lr)?;
        }
        Ok(())
    }
}

/// The frozen pieces a loss evaluation needs.
#[derive(Debug, Clone)]
pub struct FrozenModel<T> {
    pub encoder: TextEncoder<T>,
    pub class_tokens: Tensor<T>,
    pub hyper: HyperParams,
    pub form: RankingForm,
}

impl<T: Scalar> FrozenModel<T> {
    pub fn class_pass(&self, params: &Params<T>) -> Result<ClassEmbeddingPass<T>> {
        model::encode_class_embeddings(&params.prompt_bank(&self.class_tokens), &self.encoder)
    }
}

/// Mean branch loss over a batch and its gradient for every learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchGradient<T> {
    pub loss: T,
    pub grads: Params<T>,
}

/// `(1/B)·Σ_b [ℛ(s_b) + ℛ(s̃'_b)]` over one branch's batch, with gradients.
pub fn branch_gradient<T: Scalar>(
    params: &Params<T>,
    frozen: &FrozenModel<T>,
    pass: &ClassEmbeddingPass<T>,
    batch: &[&FeatureSet<T>],
) -> Result<BranchGradient<T>> {
    let emb = &pass.embeddings;
    let (c, d) = (emb.global.rows(), emb.global.cols());
    if batch.is_empty() {
        return Ok(BranchGradient { loss: T::zero(), grads: Params::zeros_like(params) });
    }
    let prototypes = PrototypeMatrix(params.prototypes.clone());
    let eta = T::lit(frozen.hyper.eta);
    let inv_b = T::lit(batch.len() as f64).recip();
    let mut loss = T::zero();
    let mut d_global = Tensor::zeros(vec![c, d]);
    let mut d_local = Tensor::zeros(vec![c, d]);
    let mut d_proto = Tensor::zeros(vec![c, d]);
    for sample in batch {
        let bundle = model::forward_branch(sample, emb, &prototypes, &frozen.hyper)?;
        let (lg, dg) = ranking_loss_grad(&bundle.s, &sample.labels, eta, frozen.form)?;
        let (ll, dl) = ranking_loss_grad(&bundle.s_combined, &sample.labels, eta, frozen.form)?;
        loss += (lg + ll) * inv_b;
        let ds: Vec<T> = dg.iter().map(|&x| x * inv_b).collect();
        let dc: Vec<T> = dl.iter().map(|&x| x * inv_b).collect();
        let g = model::branch_backward(sample, emb, &prototypes, &frozen.hyper, &bundle, &ds, &dc)?;
        numerics::axpy(T::one(), g.class_global.data(), d_global.data_mut());
        numerics::axpy(T::one(), g.class_local.data(), d_local.data_mut());
        numerics::axpy(T::one(), g.prototypes.data(), d_proto.data_mut());
    }
    let (global_context, local_context) = pass.backward(&frozen.encoder, &d_global, &d_local)?;
    Ok(BranchGradient { loss, grads: Params { global_context, local_context, prototypes: d_proto } })
}

/// Both branch gradients and their `γ`-weighted sum.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGradient<T> {
    pub loss: T,
    pub image: BranchGradient<T>,
    pub text: BranchGradient<T>,
    pub total: Params<T>,
}

/// A branch whose weight is zero is never evaluated.
pub fn joint_gradient<T: Scalar>(
    params: &Params<T>,
    frozen: &FrozenModel<T>,
    image_batch: &[&FeatureSet<T>],
    text_batch: &[&FeatureSet<T>],
) -> Result<JointGradient<T>> {
    let gamma = T::lit(frozen.hyper.gamma);
    let pass = frozen.class_pass(params)?;
    let skip = || BranchGradient { loss: T::zero(), grads: Params::zeros_like(params) };
    let image = if gamma > T::zero() { branch_gradient(params, frozen, &pass, image_batch)? } else { skip() };
    let text = if gamma < T::one() { branch_gradient(params, frozen, &pass, text_batch)? } else { skip() };
    let loss = joint_loss(image.loss, text.loss, gamma)?;
    let total = Params::combine(gamma, &image.grads, T::one() - gamma, &text.grads)?;
    Ok(JointGradient { loss, image, text, total })
}

/// Mean losses over one epoch's steps.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub image_loss: f64,
    pub text_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    /// Unrounded parameters after the last step.
    pub params: Params<T>,
    pub log: Vec<EpochLog>,
    pub steps: usize,
}

/// Initial contexts (`N(0, 0.02²)`) and prototypes (`N(0, I/D)`), seeded from `seed`.
pub fn init_params<T: Scalar>(config: &TrainConfig, classes: &CategorySet, encoder: &TextEncoder<T>) -> Result<Params<T>> {
    let bank = model::build_prompts(classes, config.context_length, encoder, &mut seed::stream(config.seed, "prompts"))?;
    let prototypes = PrototypeMatrix::<T>::random(classes.len(), config.d, &mut seed::stream(config.seed, "prototypes"))?;
    Ok(Params { global_context: bank.global_context, local_context: bank.local_context, prototypes: prototypes.0 })
}

pub fn frozen_model<T: Scalar>(config: &TrainConfig, classes: &CategorySet) -> Result<FrozenModel<T>> {
    let encoder = TextEncoder::new(&config.encoder_spec())?;
    let class_tokens = model::class_tokens(classes, &encoder)?;
    Ok(FrozenModel { encoder, class_tokens, hyper: config.hyper(), form: config.ranking_form })
}

fn check_samples<T: Scalar>(what: &str, samples: &[FeatureSet<T>], d: usize, c: usize) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        s.check_dims(d, c).map_err(|e| Error::Consistency(format!("{what} sample {i}: {e}")))?;
    }
    Ok(())
}

fn learning_rate(config: &TrainConfig, step: usize, total: usize) -> f64 {
    match config.lr_schedule {
        LrSchedule::Constant => config.learning_rate,
        LrSchedule::Cosine => config.learning_rate * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos()),
    }
}

/// Runs `epochs` passes of minibatch SGD on the joint objective.
///
/// Each epoch shuffles both lists, takes `ceil(max(|image|, |text|)/batch)`
/// steps, and cycles the shorter list. A branch with zero weight is not read.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    classes: &CategorySet,
    image: &[FeatureSet<T>],
    text: &[FeatureSet<T>],
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let c = classes.len();
    if let Some(expected) = config.num_classes {
        if expected != c {
            return Err(Error::Consistency(format!("config expects {expected} classes, class list has {c}")));
        }
    }
    let use_image = config.gamma > 0.0;
    let use_text = config.gamma < 1.0;
    let image: &[FeatureSet<T>] = if use_image { image } else { &[] };
    let text: &[FeatureSet<T>] = if use_text { text } else { &[] };
    if use_image && image.is_empty() {
        return Err(Error::invalid("gamma > 0 but no image samples were given"));
    }
    if use_text && text.is_empty() {
        return Err(Error::invalid("gamma < 1 but no text samples were given"));
    }
    check_samples("image", image, config.d, c)?;
    check_samples("text", text, config.d, c)?;

    let frozen = frozen_model::<T>(config, classes)?;
    let mut params = init_params(config, classes, &frozen.encoder)?;
    let mut optimizer = Sgd::new(config.momentum, config.weight_decay);
    let mut rng = seed::stream(config.seed, "shuffle");

    let longest = image.len().max(text.len());
    let steps_per_epoch = longest.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut image_order: Vec<usize> = (0..image.len()).collect();
    let mut text_order: Vec<usize> = (0..text.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        image_order.shuffle(&mut rng);
        text_order.shuffle(&mut rng);
        let (mut sum, mut sum_im, mut sum_te) = (0.0, 0.0, 0.0);
        for k in 0..steps_per_epoch {
            let pick = |order: &[usize], pool: &'_ [FeatureSet<T>]| -> Vec<usize> {
                if pool.is_empty() {
                    return Vec::new();
                }
                let start = k * config.batch_size;
                let end = (start + config.batch_size).min(longest);
                (start..end).map(|i| order[i % order.len()]).collect()
            };
            let image_batch: Vec<&FeatureSet<T>> = pick(&image_order, image).into_iter().map(|i| &image[i]).collect();
            let text_batch: Vec<&FeatureSet<T>> = pick(&text_order, text).into_iter().map(|i| &text[i]).collect();
            let g = joint_gradient(&params, &frozen, &image_batch, &text_batch)?;
            let loss = g.loss.to_f64_lossy();
            if !loss.is_finite() || !g.total.is_finite() {
                return Err(Error::NumericFailure(format!("non-finite loss or gradient at epoch {epoch}, step {k}")));
            }
            optimizer.step(&mut params, &g.total, T::lit(learning_rate(config, step, total_steps)))?;
            sum += loss;
            sum_im += g.image.loss.to_f64_lossy();
            sum_te += g.text.loss.to_f64_lossy();
            step += 1;
        }
        let n = steps_per_epoch as f64;
        log.push(EpochLog { epoch, loss: sum / n, image_loss: sum_im / n, text_loss: sum_te / n });
    }
    let checkpoint = Checkpoint::from_params(config, classes, &params)?;
    Ok(TrainOutcome { checkpoint, params, log, steps: step })
}
