use rand::Rng;
use rand_distr::StandardNormal;

use super::{joint_gradient, FrozenModel, Params, RankingForm, TrainConfig};
use crate::corpus::CategorySet;
use crate::encoders::{FeatureSet, TextEncoder};
use crate::error::Result;
use crate::model::{self, HyperParams};
use crate::numerics::{self, GradientReport, Tensor};
use crate::seed;

/// Size of the instance used by [`gradient_check`].
const CLASSES: [&str; 3] = ["dog", "cat", "bird"];
const CONTEXT: usize = 2;
const D: usize = 8;
const D_TOK: usize = 6;
const SLOTS: usize = 4;
const BATCH: usize = 2;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub hyper: HyperParams,
    pub form: RankingForm,
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Negates the analytic prototype gradient. Only useful to prove that the
    /// check can fail.
    pub inject_sign_error: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            hyper: HyperParams::default(),
            form: RankingForm::Hinge,
            step: 1e-6,
            rtol: 1e-4,
            atol: 1e-7,
            inject_sign_error: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: &'static str,
    pub report: GradientReport,
}

fn random_sample<R: Rng>(rng: &mut R) -> Result<FeatureSet<f64>> {
    let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let global = gauss(D);
    let local = Tensor::matrix(SLOTS, D, gauss(SLOTS * D))?;
    let mut labels: Vec<bool> = (0..CLASSES.len()).map(|_| rng.random_bool(0.5)).collect();
    let flip = rng.random_range(0..CLASSES.len());
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        labels[flip] = !labels[flip];
    }
    Ok(FeatureSet { global, local, labels })
}

/// Compares the analytic joint-loss gradient of every learnable tensor with
/// central finite differences on a small random instance.
pub fn gradient_check(seed: u64, options: &GradcheckOptions) -> Result<Vec<TensorCheck>> {
    let config = TrainConfig {
        seed,
        d: D,
        d_tok: D_TOK,
        n_im: SLOTS,
        n_te: SLOTS,
        context_length: CONTEXT,
        ..TrainConfig::default()
    };
    let classes = CategorySet::new(&CLASSES)?;
    let encoder = TextEncoder::new(&config.encoder_spec())?;
    let class_tokens = model::class_tokens(&classes, &encoder)?;
    let frozen = FrozenModel { encoder, class_tokens, hyper: options.hyper, form: options.form };

    let mut rng = seed::stream(seed, "gradcheck");
    let params = Params {
        global_context: Tensor::matrix(CONTEXT, D_TOK, (0..CONTEXT * D_TOK).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect())?,
        local_context: Tensor::matrix(CONTEXT, D_TOK, (0..CONTEXT * D_TOK).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect())?,
        prototypes: Tensor::matrix(CLASSES.len(), D, (0..CLASSES.len() * D).map(|_| rng.sample(StandardNormal)).collect())?,
    };
    let image = (0..BATCH).map(|_| random_sample(&mut rng)).collect::<Result<Vec<_>>>()?;
    let text = (0..BATCH).map(|_| random_sample(&mut rng)).collect::<Result<Vec<_>>>()?;
    let image: Vec<&FeatureSet<f64>> = image.iter().collect();
    let text: Vec<&FeatureSet<f64>> = text.iter().collect();

    let mut analytic = joint_gradient(&params, &frozen, &image, &text)?.total;
    if options.inject_sign_error {
        analytic.prototypes = numerics::scale(&analytic.prototypes, -1.0);
    }
    let objective = |p: &Params<f64>| -> f64 {
        joint_gradient(p, &frozen, &image, &text).map_or(f64::NAN, |g| g.loss)
    };

    let mut checks = Vec::with_capacity(3);
    let analytic_tensors = analytic.tensors();
    for (k, (name, tensor)) in params.tensors().into_iter().enumerate() {
        let numeric = numerics::finite_diff_grad(
            |x| {
                let mut probe = params.clone();
                let target = match k {
                    0 => &mut probe.global_context,
                    1 => &mut probe.local_context,
                    _ => &mut probe.prototypes,
                };
                target.data_mut().copy_from_slice(x);
                objective(&probe)
            },
            tensor.data(),
            options.step,
        )?;
        let report = numerics::check_gradients(analytic_tensors[k].1.data(), &numeric, options.rtol, options.atol)?;
        checks.push(TensorCheck { name, report });
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for seed in 0..3 {
            for check in gradient_check(seed, &GradcheckOptions::default()).unwrap() {
                assert!(check.report.passed, "seed {seed} {}: {:?}", check.name, check.report);
            }
        }
    }

    #[test]
    fn injected_sign_error_is_caught() {
        let opts = GradcheckOptions { inject_sign_error: true, ..GradcheckOptions::default() };
        let checks = gradient_check(0, &opts).unwrap();
        assert!(!checks.iter().find(|c| c.name == "prototypes").unwrap().report.passed);
    }
}
