//! Loss terms: patch-discriminator loss, reviser loss with gradient-norm
//! penalty, full-image and region L1, and the λ-balanced generator objective.
//!
//! Expectations are means over the batch (and over score-map cells for the
//! patch terms). Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]`
//! before every logarithm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Var};
use crate::error::{Error, Result};
use crate::models::Reviser;
use crate::nn::Pass;
use crate::tensor::{Scalar, Tensor};

pub const PROB_EPS: f64 = 1e-7;
/// Added under the square root of the gradient norm so its derivative stays finite at 0.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveWeights {
    /// Gradient-penalty coefficient.
    pub alpha: f64,
    /// Full-image L1 weight.
    pub beta: f64,
    /// Region L1 weight.
    pub gamma: f64,
    /// Balance between the reviser (λ) and the patch discriminator (1 − λ).
    pub lambda: f64,
    /// Magnitude of the penalty perturbation relative to the data spread.
    pub delta_scale: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            alpha: 10.0,
            beta: 100.0,
            gamma: 100.0,
            lambda: 0.5,
            delta_scale: 0.5,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("delta_scale", self.delta_scale),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("weights.{name} = {v} must be finite and >= 0")));
            }
        }
        if self.lambda > 1.0 {
            return Err(Error::Config(format!("weights.lambda = {} must be in [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// One row of training telemetry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub d_loss: f64,
    pub r_loss: f64,
    pub g_adv_patch: f64,
    pub g_adv_reviser: f64,
    pub l1_full: f64,
    pub l1_region: f64,
    pub penalty: f64,
    pub total_g: f64,
    /// Mean patch probability on the generated samples of this step.
    pub scoremap_mean: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 9] = [
        "d_loss",
        "r_loss",
        "g_adv_patch",
        "g_adv_reviser",
        "l1_full",
        "l1_region",
        "penalty",
        "total_g",
        "scoremap_mean",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.d_loss,
            self.r_loss,
            self.g_adv_patch,
            self.g_adv_reviser,
            self.l1_full,
            self.l1_region,
            self.penalty,
            self.total_g,
            self.scoremap_mean,
        ]
    }

    /// Name of the first non-finite field, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

fn check_probabilities<T: Scalar>(v: &Var<T>, what: &str) -> Result<()> {
    if let Some(p) = v
        .value()
        .data()
        .iter()
        .map(|p| p.to_f64())
        .find(|p| !(0.0..=1.0).contains(p))
    {
        return Err(Error::Range(format!("{what}: {p} is not a probability")));
    }
    Ok(())
}

/// Clamps probabilities into `[PROB_EPS, 1 − PROB_EPS]`; clamped entries carry no gradient.
fn clamp_prob<T: Scalar>(p: &Var<T>) -> Var<T> {
    let (lo, hi) = (PROB_EPS, 1.0 - PROB_EPS);
    let inside = p
        .value()
        .map(|v| if v.to_f64() >= lo && v.to_f64() <= hi { T::one() } else { T::zero() });
    if inside.data().iter().all(|&m| m == T::one()) {
        return p.clone();
    }
    let clamped = p.value().map(|v| T::from_f64(v.to_f64().clamp(lo, hi)));
    Var::select(&inside, p, &Var::constant(clamped))
}

/// `−mean log p`
fn neg_log_mean<T: Scalar>(p: &Var<T>) -> Var<T> {
    clamp_prob(p).ln().mean_all().neg()
}

/// `−mean log (1 − p)`
fn neg_log1m_mean<T: Scalar>(p: &Var<T>) -> Var<T> {
    clamp_prob(p).neg().add_scalar(T::one()).ln().mean_all().neg()
}

/// `−E[log D(x, y)] − E[log(1 − D(x, G(x)))]` over every cell and sample.
pub fn patch_d_loss_var<T: Scalar>(scores_real: &Var<T>, scores_fake: &Var<T>) -> Result<Var<T>> {
    if scores_real.shape() != scores_fake.shape() {
        return Err(Error::Shape(format!(
            "real scores {:?} vs fake scores {:?}",
            scores_real.shape(),
            scores_fake.shape()
        )));
    }
    check_probabilities(scores_real, "real scores")?;
    check_probabilities(scores_fake, "fake scores")?;
    Ok(neg_log_mean(scores_real).add(&neg_log1m_mean(scores_fake)))
}

/// Adversarial part of the reviser loss: `−E[log R(x, y)] − E[log(1 − R(x, y_mask))]`.
pub fn reviser_adversarial_var<T: Scalar>(p_real: &Var<T>, p_masked_fake: &Var<T>) -> Result<Var<T>> {
    check_probabilities(p_real, "reviser real")?;
    check_probabilities(p_masked_fake, "reviser masked fake")?;
    Ok(neg_log_mean(p_real).add(&neg_log1m_mean(p_masked_fake)))
}

/// `E[(‖g‖ − 1)²]` over per-sample gradient norms.
pub fn penalty_from_norms_var<T: Scalar>(norms: &Var<T>) -> Var<T> {
    norms.add_scalar(-T::one()).square().mean_all()
}

/// Per-sample `‖∇ R(x, ŷ)‖` with respect to the perturbed candidate `ŷ`,
/// differentiable with respect to the reviser parameters bound in `pass`.
pub fn reviser_gradient_norms<T: Scalar>(
    reviser: &Reviser<T>,
    pass: &mut Pass<T>,
    condition: &Var<T>,
    perturbed: &Tensor<T>,
) -> Result<Var<T>> {
    let probe = Var::leaf(perturbed.clone());
    let out = reviser.forward(pass, condition, &probe)?;
    let g = grad(&out.sum_all(), &[&probe], true).remove(0);
    let n = perturbed.shape()[0];
    let per_sample = g.square().sum_to(&[n, 1, 1, 1]).reshape(&[n]);
    Ok(per_sample.add_scalar(T::from_f64(NORM_EPS)).sqrt())
}

/// `(β · mean|y − G(x)|, γ · mean|y_r − crop(G(x))|)`.
pub fn l1_terms_var<T: Scalar>(
    real: &Var<T>,
    fake: &Var<T>,
    real_crop: &Var<T>,
    fake_crop: &Var<T>,
    weights: &ObjectiveWeights,
) -> Result<(Var<T>, Var<T>)> {
    if real.shape() != fake.shape() || real_crop.shape() != fake_crop.shape() {
        return Err(Error::Shape(format!(
            "L1 operands {:?}/{:?} and crops {:?}/{:?}",
            real.shape(),
            fake.shape(),
            real_crop.shape(),
            fake_crop.shape()
        )));
    }
    let full = real.sub(fake).abs().mean_all().mul_scalar(T::from_f64(weights.beta));
    let region = real_crop
        .sub(fake_crop)
        .abs()
        .mean_all()
        .mul_scalar(T::from_f64(weights.gamma));
    Ok((full, region))
}

/// Unweighted generator adversarial term: `−E log p`, or `−E log(1 − p)` when `literal`.
pub fn generator_adversarial_term<T: Scalar>(p: &Var<T>, literal: bool) -> Result<Var<T>> {
    check_probabilities(p, "generator adversarial input")?;
    Ok(if literal { neg_log1m_mean(p) } else { neg_log_mean(p) })
}

/// Generator adversarial terms, each already multiplied by its balance coefficient.
pub struct GeneratorTerms<T> {
    /// `(1 − λ) · adv_patch`, or `None` when the coefficient is zero.
    pub patch: Option<Var<T>>,
    /// `λ · adv_reviser`, or `None` when the coefficient is zero.
    pub reviser: Option<Var<T>>,
}

/// Adversarial generator terms. The default is the non-saturating form
/// `−E log D`; `literal` uses `−E log(1 − D)` instead.
pub fn generator_adversarial_var<T: Scalar>(
    scores_fake: Option<&Var<T>>,
    p_masked_fake: Option<&Var<T>>,
    lambda: f64,
    literal: bool,
) -> Result<GeneratorTerms<T>> {
    let adv = |p: &Var<T>| if literal { neg_log1m_mean(p) } else { neg_log_mean(p) };
    let patch = match scores_fake {
        Some(s) if lambda < 1.0 => {
            check_probabilities(s, "fake scores")?;
            Some(adv(s).mul_scalar(T::from_f64(1.0 - lambda)))
        }
        _ => None,
    };
    let reviser = match p_masked_fake {
        Some(p) if lambda > 0.0 => {
            check_probabilities(p, "reviser masked fake")?;
            Some(adv(p).mul_scalar(T::from_f64(lambda)))
        }
        _ => None,
    };
    Ok(GeneratorTerms { patch, reviser })
}

fn constant(values: &[f64]) -> Var<f64> {
    Var::constant(Tensor::from_vec(vec![values.len()], values.to_vec()).expect("1-D"))
}

/// Patch-discriminator loss on plain probabilities.
pub fn patch_d_loss(scores_real: &[f64], scores_fake: &[f64]) -> Result<f64> {
    Ok(patch_d_loss_var(&constant(scores_real), &constant(scores_fake))?.item())
}

/// Reviser loss on plain values: adversarial part plus `α · E[(‖g‖ − 1)²]`.
pub fn reviser_loss(p_real: &[f64], p_masked_fake: &[f64], grad_norms: &[f64], alpha: f64) -> Result<f64> {
    if let Some(g) = grad_norms.iter().find(|g| !(**g >= 0.0)) {
        return Err(Error::Range(format!("gradient norm {g} is negative")));
    }
    let adv = reviser_adversarial_var(&constant(p_real), &constant(p_masked_fake))?.item();
    let penalty = if grad_norms.is_empty() {
        0.0
    } else {
        penalty_from_norms_var(&constant(grad_norms)).item()
    };
    Ok(adv + alpha * penalty)
}

/// `(β · mean|y − G(x)|, γ · mean|y_r − F(G(x))|)` on plain tensors.
pub fn l1_terms<T: Scalar>(
    real: &Tensor<T>,
    fake: &Tensor<T>,
    real_crop: &Tensor<T>,
    fake_crop: &Tensor<T>,
    weights: &ObjectiveWeights,
) -> Result<(f64, f64)> {
    let c = |t: &Tensor<T>| Var::constant(t.clone());
    let (a, b) = l1_terms_var(&c(real), &c(fake), &c(real_crop), &c(fake_crop), weights)?;
    Ok((a.item().to_f64(), b.item().to_f64()))
}

/// Full generator loss on plain values: weighted adversarial terms plus the two L1 terms.
pub fn generator_loss(
    scores_fake: &[f64],
    p_masked_fake: &[f64],
    l1_full: f64,
    l1_region: f64,
    weights: &ObjectiveWeights,
    literal: bool,
) -> Result<f64> {
    let (s, p) = (constant(scores_fake), constant(p_masked_fake));
    let terms = generator_adversarial_var(Some(&s), Some(&p), weights.lambda, literal)?;
    let adv: f64 = [terms.patch, terms.reviser]
        .into_iter()
        .flatten()
        .map(|v| v.item())
        .sum();
    Ok(adv + l1_full + l1_region)
}

/// `x + δ` with `δ = delta_scale · std(x) · u`, `u ~ U[0, 1)` per element.
/// `std` is the unbiased standard deviation over the whole batch.
pub fn gradient_penalty_inputs<T: Scalar>(x: &Tensor<T>, delta_scale: f64, seed: u64) -> Tensor<T> {
    if delta_scale == 0.0 || x.numel() < 2 {
        return x.clone();
    }
    let n = x.numel() as f64;
    let mean = x.mean();
    let var = x
        .data()
        .iter()
        .map(|v| (v.to_f64() - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    let scale = delta_scale * var.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    x.map(|v| T::from_f64(v.to_f64() + scale * rng.random::<f64>()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn weights(lambda: f64) -> ObjectiveWeights {
        ObjectiveWeights {
            lambda,
            ..ObjectiveWeights::default()
        }
    }

    /// Scalar-by-scalar reimplementation used as the oracle below.
    fn oracle_bce(real: &[f64], fake: &[f64]) -> f64 {
        let c = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let mut a = 0.0;
        for &p in real {
            a -= c(p).ln();
        }
        let mut b = 0.0;
        for &p in fake {
            b -= (1.0 - c(p)).ln();
        }
        a / real.len() as f64 + b / fake.len() as f64
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 0.98 + 0.01
            })
            .collect()
    }

    #[test]
    fn patch_loss_uniform_discriminator() {
        let v = patch_d_loss(&[0.5; 36], &[0.5; 36]).unwrap();
        assert!((v - 2.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn patch_loss_perfect_discriminator_limit() {
        let v = patch_d_loss(&[1.0 - 1e-9; 4], &[1e-9; 4]).unwrap();
        assert!(v > 0.0 && v < 1e-6, "{v}");
    }

    #[test]
    fn patch_loss_matches_elementwise_oracle() {
        for seed in 0..10 {
            let (r, f) = (lcg(seed, 50), lcg(seed + 100, 50));
            let v = patch_d_loss(&r, &f).unwrap();
            assert!((v - oracle_bce(&r, &f)).abs() < 1e-6);
        }
    }

    #[test]
    fn patch_loss_rejects_non_probabilities() {
        assert!(patch_d_loss(&[1.2], &[0.5]).is_err());
        assert!(patch_d_loss(&[0.5], &[f64::NAN]).is_err());
        assert!(patch_d_loss(&[0.5, 0.5], &[0.5]).is_err());
        // exact 0 and 1 are clamped, not rejected
        assert!(patch_d_loss(&[1.0], &[0.0]).unwrap().is_finite());
    }

    #[test]
    fn reviser_loss_examples() {
        let v = reviser_loss(&[0.5; 4], &[0.5; 4], &[1.0; 4], 10.0).unwrap();
        assert!((v - 2.0 * LN2).abs() < 1e-12);
        let base = reviser_loss(&[0.5; 4], &[0.5; 4], &[1.0; 4], 0.0).unwrap();
        let with_zero_grads = reviser_loss(&[0.5; 4], &[0.5; 4], &[0.0; 4], 10.0).unwrap();
        assert!((with_zero_grads - base - 10.0).abs() < 1e-12);
        assert!(reviser_loss(&[0.5], &[0.5], &[-1.0], 10.0).is_err());
    }

    #[test]
    fn reviser_loss_matches_scalar_oracle() {
        for seed in 0..10 {
            let (r, f) = (lcg(seed, 8), lcg(seed + 7, 8));
            let norms: Vec<f64> = lcg(seed + 99, 8).iter().map(|v| v * 3.0).collect();
            let alpha = 10.0;
            let mut pen = 0.0;
            for g in &norms {
                pen += (g - 1.0) * (g - 1.0);
            }
            let expect = oracle_bce(&r, &f) + alpha * pen / norms.len() as f64;
            let v = reviser_loss(&r, &f, &norms, alpha).unwrap();
            assert!((v - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn l1_examples() {
        let real = Tensor::<f64>::full(&[2, 3, 4, 4], 0.1);
        let crop = Tensor::<f64>::full(&[2, 3, 2, 2], 0.1);
        let w = ObjectiveWeights::default();
        assert_eq!(l1_terms(&real, &real, &crop, &crop, &w).unwrap(), (0.0, 0.0));
        let shifted = real.map(|v| v + 0.5);
        let (full, _) = l1_terms(&real, &shifted, &crop, &crop, &w).unwrap();
        assert!((full - 50.0).abs() < 1e-12);
        assert!(l1_terms(&real, &crop, &crop, &crop, &w).is_err());
    }

    #[test]
    fn l1_matches_mean_absolute_difference_oracle() {
        let a = lcg(3, 48);
        let b = lcg(4, 48);
        let ta = Tensor::from_vec(vec![1, 3, 4, 4], a.clone()).unwrap();
        let tb = Tensor::from_vec(vec![1, 3, 4, 4], b.clone()).unwrap();
        let ca = ta.slice(&[0, 0, 1, 1], &[1, 3, 2, 2]);
        let cb = tb.slice(&[0, 0, 1, 1], &[1, 3, 2, 2]);
        let w = ObjectiveWeights {
            beta: 3.0,
            gamma: 7.0,
            ..Default::default()
        };
        let (full, region) = l1_terms(&ta, &tb, &ca, &cb, &w).unwrap();
        let mad: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 48.0;
        let mut rmad = 0.0;
        for c in 0..3 {
            for y in 1..3 {
                for x in 1..3 {
                    let i = c * 16 + y * 4 + x;
                    rmad += (a[i] - b[i]).abs();
                }
            }
        }
        rmad /= 12.0;
        assert!((full - 3.0 * mad).abs() < 1e-6);
        assert!((region - 7.0 * rmad).abs() < 1e-6);
    }

    #[test]
    fn generator_loss_examples() {
        let v = generator_loss(&[0.5; 9], &[0.5; 2], 0.0, 0.0, &weights(1.0), false).unwrap();
        assert!((v - LN2).abs() < 1e-12);
        // lambda = 0: the reviser term drops out no matter what R says
        let a = generator_loss(&[0.3; 9], &[0.01; 2], 0.0, 0.0, &weights(0.0), false).unwrap();
        let b = generator_loss(&[0.3; 9], &[0.99; 2], 0.0, 0.0, &weights(0.0), false).unwrap();
        assert_eq!(a, b);
        assert!((a + 0.3f64.ln()).abs() < 1e-12);
        // lambda = 0.5, both adversarial terms ln 2, L1 terms 50 and 5
        let v = generator_loss(&[0.5; 9], &[0.5; 2], 50.0, 5.0, &weights(0.5), false).unwrap();
        assert!((v - (LN2 + 55.0)).abs() < 1e-9);
    }

    #[test]
    fn lambda_one_removes_patch_term() {
        let a = generator_loss(&[0.01; 4], &[0.4; 2], 0.0, 0.0, &weights(1.0), false).unwrap();
        let b = generator_loss(&[0.99; 4], &[0.4; 2], 0.0, 0.0, &weights(1.0), false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn literal_generator_objective_flips_log_argument() {
        let v = generator_loss(&[0.2; 4], &[0.2; 2], 0.0, 0.0, &weights(1.0), true).unwrap();
        assert!((v + 0.8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn losses_are_batch_permutation_invariant() {
        let r = lcg(1, 6);
        let f = lcg(2, 6);
        let mut rr = r.clone();
        rr.reverse();
        let mut fr = f.clone();
        fr.rotate_left(2);
        assert!((patch_d_loss(&r, &f).unwrap() - patch_d_loss(&rr, &fr).unwrap()).abs() < 1e-12);
        let g = [0.3, 1.2, 0.0, 2.0, 0.9, 1.0];
        let mut gr = g;
        gr.reverse();
        let a = reviser_loss(&r, &f, &g, 10.0).unwrap();
        let b = reviser_loss(&rr, &fr, &gr, 10.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn perturbation_examples() {
        let x = Tensor::<f64>::from_vec(vec![4], vec![-1.0, 0.0, 0.5, 1.0]).unwrap();
        assert_eq!(gradient_penalty_inputs(&x, 0.0, 1), x);
        assert_eq!(gradient_penalty_inputs(&x, 0.5, 9), gradient_penalty_inputs(&x, 0.5, 9));
        assert_ne!(gradient_penalty_inputs(&x, 0.5, 9), gradient_penalty_inputs(&x, 0.5, 10));
    }

    #[test]
    fn perturbation_statistics_match_uniform_sampler() {
        // delta = s * std(x) * U[0, 1): mean s * std(x) / 2, std s * std(x) / sqrt(12)
        let n = 200_000;
        let x: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { -0.6 } else { 0.6 }).collect();
        let xt = Tensor::from_vec(vec![n], x.clone()).unwrap();
        let std_x = (x.iter().map(|v| v * v).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        let s = 0.5;
        let p = gradient_penalty_inputs(&xt, s, 42);
        let d: Vec<f64> = p.data().iter().zip(&x).map(|(a, b)| a - b).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(d.iter().all(|&v| v >= 0.0 && v < s * std_x));
        assert!((mean - s * std_x * 0.5).abs() < 0.005 * s * std_x, "mean {mean}");
        assert!((sd - s * std_x / 12f64.sqrt()).abs() < 0.005 * s * std_x, "std {sd}");
    }

    #[test]
    fn weights_validation() {
        assert!(ObjectiveWeights::default().validate().is_ok());
        assert!(weights(1.5).validate().is_err());
        assert!(ObjectiveWeights { alpha: -1.0, ..Default::default() }.validate().is_err());
    }
}
