//! Per-category linear classifier and the dual binary cross-entropy objective.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::car::CategoryRepresentation;
use crate::nn::{sigmoid, slice_of, slice_of_mut, softplus, Parameters};
use crate::{Error, Result};

/// Log clamp used by the cross-entropy.
pub const LOG_EPS: f64 = 1e-12;

/// One weight row and bias per category.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParameters {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ClassifierParameters {
    pub fn init(categories: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        ClassifierParameters {
            weight: Array2::from_shape_simple_fn((categories, dim), || rng.random_range(-bound..bound)),
            bias: Array1::from_shape_simple_fn(categories, || rng.random_range(-bound..bound)),
        }
    }

    pub fn zeros(categories: usize, dim: usize) -> Self {
        ClassifierParameters {
            weight: Array2::zeros((categories, dim)),
            bias: Array1::zeros(categories),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.weight.nrows(), self.weight.ncols())
    }

    pub fn categories(&self) -> usize {
        self.weight.nrows()
    }

    pub fn logit(&self, c: usize, rep: ArrayView1<f64>) -> f64 {
        self.weight.row(c).dot(&rep) + self.bias[c]
    }

    /// Accumulates gradients for `logit_c = w_c . rep + b_c`; returns `dL/d rep`.
    pub fn logit_backward(&self, c: usize, rep: ArrayView1<f64>, grad: f64, grads: &mut Self) -> Array1<f64> {
        grads.weight.row_mut(c).scaled_add(grad, &rep);
        grads.bias[c] += grad;
        self.weight.row(c).mapv(|w| w * grad)
    }
}

impl Parameters for ClassifierParameters {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        vec![
            ("weight".into(), slice_of(&self.weight)),
            ("bias".into(), slice_of(&self.bias)),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("weight".into(), slice_of_mut(&mut self.weight)),
            ("bias".into(), slice_of_mut(&mut self.bias)),
        ]
    }
}

/// Probabilities in (0, 1), one per category.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(pub Array1<f64>);

/// Binary ground truth, one entry per category.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector(pub Array1<f64>);

impl LabelVector {
    pub fn from_indices(categories: usize, positives: &[usize]) -> Self {
        let mut y = Array1::zeros(categories);
        for &c in positives {
            y[c] = 1.0;
        }
        LabelVector(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ori: f64,
    pub l_era: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn new(l_ori: f64, l_era: f64) -> Self {
        LossReport {
            l_ori,
            l_era,
            l_total: l_ori + l_era,
        }
    }
}

pub fn classify(reps: &[CategoryRepresentation], params: &ClassifierParameters) -> Result<ScoreVector> {
    if reps.len() != params.categories() {
        return Err(Error::shape("representations", params.categories(), reps.len()));
    }
    let d = params.weight.ncols();
    reps.iter()
        .enumerate()
        .map(|(c, rep)| {
            if rep.0.len() != d {
                return Err(Error::shape("representation length", d, rep.0.len()));
            }
            Ok(sigmoid(params.logit(c, rep.0.view())))
        })
        .collect::<Result<Vec<_>>>()
        .map(|p| ScoreVector(Array1::from(p)))
}

/// Mean binary cross-entropy over categories, logs clamped at [`LOG_EPS`].
pub fn bce(p: &ScoreVector, y: &LabelVector) -> Result<f64> {
    if p.0.len() != y.0.len() {
        return Err(Error::shape("bce", p.0.len(), y.0.len()));
    }
    if p.0.iter().chain(&y.0).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("bce input"));
    }
    let total: f64 = p
        .0
        .iter()
        .zip(&y.0)
        .map(|(&p, &y)| -(y * p.max(LOG_EPS).ln() + (1.0 - y) * (1.0 - p).max(LOG_EPS).ln()))
        .sum();
    Ok(total / p.0.len() as f64)
}

/// Cross-entropy of one logit against a binary target, in the numerically
/// stable logits form, with the same clamp as [`bce`]. Returns
/// `(loss, dloss/dlogit)`.
pub fn bce_logit(logit: f64, target: f64) -> (f64, f64) {
    let cap = -LOG_EPS.ln();
    // -log p = softplus(-z), -log(1-p) = softplus(z)
    let pos = softplus(-logit);
    let neg = softplus(logit);
    let p = sigmoid(logit);
    let (pos, dpos) = if pos > cap { (cap, 0.0) } else { (pos, p - 1.0) };
    let (neg, dneg) = if neg > cap { (cap, 0.0) } else { (neg, p) };
    (
        target * pos + (1.0 - target) * neg,
        target * dpos + (1.0 - target) * dneg,
    )
}

pub fn total_loss(p: &ScoreVector, p_hat: &ScoreVector, y: &LabelVector) -> Result<LossReport> {
    Ok(LossReport::new(bce(p, y)?, bce(p_hat, y)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_classifier_is_half() {
        let params = ClassifierParameters::zeros(3, 4);
        let reps = vec![CategoryRepresentation(Array1::ones(4)); 3];
        let p = classify(&reps, &params).unwrap();
        assert!(p.0.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn aligned_weights_saturate() {
        let mut params = ClassifierParameters::zeros(2, 3);
        let rep = array![1.0, -2.0, 0.5];
        params.weight.row_mut(0).assign(&(&rep * 10.0));
        let p = classify(&[CategoryRepresentation(rep.clone()), CategoryRepresentation(rep)], &params).unwrap();
        assert!(p.0[0] > 0.999_999);
        assert_eq!(p.0[1], 0.5);
    }

    #[test]
    fn classify_rejects_wrong_count() {
        let params = ClassifierParameters::zeros(3, 2);
        assert!(classify(&[CategoryRepresentation(Array1::ones(2))], &params).is_err());
    }

    #[test]
    fn bce_reference_points() {
        let y = LabelVector(array![1.0, 0.0, 1.0]);
        let half = ScoreVector(Array1::from_elem(3, 0.5));
        assert!((bce(&half, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let perfect = ScoreVector(y.0.clone());
        let l = bce(&perfect, &y).unwrap();
        assert!((0.0..1e-11).contains(&l));
        let nan = ScoreVector(array![f64::NAN, 0.5, 0.5]);
        assert!(bce(&nan, &y).is_err());
    }

    #[test]
    fn logit_form_matches_probability_form() {
        for &z in &[-30.0, -5.0, -0.3, 0.0, 0.7, 4.0, 30.0] {
            for &t in &[0.0, 1.0] {
                let (loss, grad) = bce_logit(z, t);
                let via_p = bce(&ScoreVector(array![sigmoid(z)]), &LabelVector(array![t])).unwrap();
                assert!((loss - via_p).abs() < 1e-9, "z={z} t={t}");
                let h = 1e-6;
                let fd = (bce_logit(z + h, t).0 - bce_logit(z - h, t).0) / (2.0 * h);
                assert!((grad - fd).abs() < 1e-6, "z={z} t={t}");
            }
        }
    }

    #[test]
    fn total_is_sum_of_components() {
        let y = LabelVector(array![1.0, 0.0]);
        let p = ScoreVector(array![0.7, 0.2]);
        let p_hat = ScoreVector(array![0.4, 0.5]);
        let r = total_loss(&p, &p_hat, &y).unwrap();
        assert_eq!(r.l_total, r.l_ori + r.l_era);
        let same = total_loss(&p, &p, &y).unwrap();
        assert_eq!(same.l_ori, same.l_era);
        assert_eq!(same.l_total, 2.0 * same.l_ori);
    }
}
