use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SimilarityBundle;
use crate::scalar::Scalar;

/// Pairwise penalty between a positive score `s_p` and a negative score `s_n`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingForm {
    /// `max(0, η − (s_p − s_n))`
    #[default]
    Hinge,
    /// `max(0, η − |s_p − s_n|)`, blind to which side scores higher.
    AbsoluteGap,
}

/// Summed pairwise ranking loss and its gradient with respect to `scores`.
///
/// Zero when the sample has no positives or no negatives. The subgradient at
/// the hinge kink is taken as zero.
pub fn ranking_loss_grad<T: Scalar>(scores: &[T], labels: &[bool], eta: T, form: RankingForm) -> Result<(T, Vec<T>)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(labels.len(), scores.len()));
    }
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); scores.len()];
    for (p, _) in labels.iter().enumerate().filter(|(_, &l)| l) {
        for (n, _) in labels.iter().enumerate().filter(|(_, &l)| !l) {
            let gap = scores[p] - scores[n];
            let (margin, slope) = match form {
                RankingForm::Hinge => (eta - gap, T::one()),
                RankingForm::AbsoluteGap => {
                    let sign = if gap > T::zero() {
                        T::one()
                    } else if gap < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    (eta - gap.abs(), sign)
                }
            };
            if margin > T::zero() {
                loss += margin;
                grad[p] -= slope;
                grad[n] += slope;
            }
        }
    }
    Ok((loss, grad))
}

pub fn ranking_loss<T: Scalar>(scores: &[T], labels: &[bool], eta: T, form: RankingForm) -> Result<T> {
    Ok(ranking_loss_grad(scores, labels, eta, form)?.0)
}

/// Global and local ranking terms of one sample: over `s` and over `s̃'`.
pub fn branch_loss<T: Scalar>(bundle: &SimilarityBundle<T>, labels: &[bool], eta: T, form: RankingForm) -> Result<(T, T)> {
    Ok((ranking_loss(&bundle.s, labels, eta, form)?, ranking_loss(&bundle.s_combined, labels, eta, form)?))
}

/// `γ·ℒ_im + (1 − γ)·ℒ_te`.
pub fn joint_loss<T: Scalar>(loss_im: T, loss_te: T, gamma: T) -> Result<T> {
    if !(gamma >= T::zero() && gamma <= T::one()) {
        return Err(Error::invalid(format!("gamma {gamma} outside [0, 1]")));
    }
    Ok(gamma * loss_im + (T::one() - gamma) * loss_te)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn ranking_examples() {
        let h = RankingForm::Hinge;
        assert_eq!(ranking_loss(&[2.5, 1.0], &[true, false], 1.0, h).unwrap(), 0.0);
        let l = ranking_loss(&[0.2, 0.5], &[true, false], 1.0, h).unwrap();
        assert!((l - 1.3f64).abs() < 1e-15);
        assert_eq!(ranking_loss(&[0.2, 0.5], &[true, true], 1.0, h).unwrap(), 0.0);
        assert_eq!(ranking_loss(&[0.2, 0.5], &[false, false], 1.0, h).unwrap(), 0.0);
        assert!(ranking_loss(&[0.2], &[true, false], 1.0, h).is_err());
    }

    #[test]
    fn absolute_gap_is_direction_blind() {
        let a = ranking_loss(&[0.0, 3.0], &[true, false], 1.0, RankingForm::AbsoluteGap).unwrap();
        assert_eq!(a, 0.0);
        let b = ranking_loss(&[0.0, 3.0], &[true, false], 1.0, RankingForm::Hinge).unwrap();
        assert_eq!(b, 4.0);
    }

    #[test]
    fn gradient_signs_and_kink() {
        let (_, g) = ranking_loss_grad(&[0.2, 0.5, 0.1], &[true, false, false], 1.0, RankingForm::Hinge).unwrap();
        assert_eq!(g, vec![-2.0, 1.0, 1.0]);
        let (l, g) = ranking_loss_grad(&[1.0, 0.0], &[true, false], 1.0, RankingForm::Hinge).unwrap();
        assert_eq!((l, g), (0.0, vec![0.0, 0.0]));
    }

    #[test]
    fn joint_loss_examples() {
        assert_eq!(joint_loss(1.0, 2.0, 0.0).unwrap(), 2.0);
        assert_eq!(joint_loss(1.0, 2.0, 1.0).unwrap(), 1.0);
        assert!((joint_loss(1.0f64, 2.0, 0.2).unwrap() - 1.8).abs() < 1e-15);
        assert!(joint_loss(1.0, 2.0, 1.2).is_err());
    }

    fn bundle(s: Vec<f64>, s_local: Vec<f64>, q: Vec<f64>, alpha: f64) -> SimilarityBundle<f64> {
        let c = s.len();
        let s_combined = q.iter().zip(&s_local).map(|(q, l)| alpha * q + l).collect();
        SimilarityBundle {
            s,
            local_sim: Tensor::zeros(vec![c, 1]),
            heatmap: Tensor::zeros(vec![c, 1]),
            attended: Tensor::zeros(vec![c, 1]),
            q,
            s_local,
            s_combined,
        }
    }

    #[test]
    fn branch_loss_examples() {
        let labels = [true, false];
        let b = bundle(vec![1.0, -0.5], vec![0.9, -0.6], vec![0.5, 0.5], 1.0);
        assert_eq!(branch_loss(&b, &labels, 1.0, RankingForm::Hinge).unwrap(), (0.0, 0.0));

        let b0 = bundle(vec![0.1, 0.0], vec![0.3, 0.2], vec![0.9, 0.1], 0.0);
        let (_, l) = branch_loss(&b0, &labels, 1.0, RankingForm::Hinge).unwrap();
        assert_eq!(l, ranking_loss(&b0.s_local, &labels, 1.0, RankingForm::Hinge).unwrap());

        let b1 = bundle(vec![0.1, 0.0], vec![0.3, 0.2], vec![0.9, 0.1], 0.5);
        let (g0, l0) = branch_loss(&b0, &labels, 1.0, RankingForm::Hinge).unwrap();
        let (g1, l1) = branch_loss(&b1, &labels, 1.0, RankingForm::Hinge).unwrap();
        assert_eq!(g0, g1);
        assert_ne!(l0, l1);
    }
}
