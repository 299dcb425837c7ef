//! Evidential training losses and their gradients with respect to `α`.
//!
//! The supervised term is the Dirichlet negative log likelihood plus a KL
//! regularizer that pulls the evidence of wrong classes towards the uniform
//! Dirichlet. Unlabeled samples contribute the uncertainty-guidance term
//! `λ_a·U^alea + λ_e·U^epis`. Gradients are taken w.r.t. `α`; the trainer
//! applies the chain rule through the output activation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence::{DirichletPrediction, QuantificationMode};
use crate::special::{digamma_unchecked, ln_gamma_unchecked, trigamma_unchecked};

/// Ground-truth class of a sample, stored as an index in `0..num_classes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneHotLabel {
    class_index: usize,
    num_classes: usize,
}

impl OneHotLabel {
    pub fn new(class_index: usize, num_classes: usize) -> Result<Self> {
        if class_index >= num_classes {
            return Err(Error::ClassOutOfRange {
                class: class_index,
                num_classes,
            });
        }
        Ok(Self {
            class_index,
            num_classes,
        })
    }

    pub fn class_index(&self) -> usize {
        self.class_index
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn as_vector(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_classes];
        v[self.class_index] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the KL regularizer.
    pub lambda_reg: f64,
    /// Weight of aleatoric uncertainty in the guidance loss.
    pub lambda_a: f64,
    /// Weight of epistemic uncertainty in the guidance loss.
    pub lambda_e: f64,
    pub mode: QuantificationMode,
    #[serde(default)]
    pub reduction: Reduction,
    /// Weight of pseudo-labeled samples in the supervised term.
    #[serde(default = "one")]
    pub pseudo_label_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl LossConfig {
    /// `λ_reg = 1/C`, `λ_a = 0.05`, and `λ_e = 1` (entropy) or `50` (variance).
    pub fn for_classes(num_classes: usize, mode: QuantificationMode) -> Self {
        Self {
            lambda_reg: 1.0 / num_classes as f64,
            lambda_a: 0.05,
            lambda_e: match mode {
                QuantificationMode::Entropy => 1.0,
                QuantificationMode::Variance => 50.0,
            },
            mode,
            reduction: Reduction::Mean,
            pseudo_label_weight: 1.0,
        }
    }

    /// Names of fields holding out-of-range values.
    pub fn invalid_fields(&self) -> Vec<String> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("lambda_reg", self.lambda_reg),
            ("lambda_a", self.lambda_a),
            ("lambda_e", self.lambda_e),
            ("pseudo_label_weight", self.pseudo_label_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                bad.push(format!("loss.{name} must be a finite value >= 0 (got {v})"));
            }
        }
        bad
    }

    pub fn guidance_enabled(&self) -> bool {
        self.lambda_a > 0.0 || self.lambda_e > 0.0
    }
}

fn check_dims(pred: &DirichletPrediction, label: &OneHotLabel) -> Result<()> {
    if pred.num_classes() != label.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: pred.num_classes(),
            actual: label.num_classes(),
        });
    }
    Ok(())
}

/// `ln α₀ − ln α_{c_g}`.
pub fn nll_loss(pred: &DirichletPrediction, label: &OneHotLabel) -> Result<f64> {
    check_dims(pred, label)?;
    Ok(pred.strength().ln() - pred.alpha()[label.class_index()].ln())
}

/// Parameters with the true-class entry replaced by one.
fn tilde_alpha(pred: &DirichletPrediction, label: &OneHotLabel) -> Vec<f64> {
    let mut t = pred.alpha().to_vec();
    t[label.class_index()] = 1.0;
    t
}

/// `KL(Dir(α̃) ‖ Dir(1, …, 1))` where `α̃` is `α` with the true class set to 1.
pub fn kl_regularizer(pred: &DirichletPrediction, label: &OneHotLabel) -> Result<f64> {
    check_dims(pred, label)?;
    let t = tilde_alpha(pred, label);
    let c = t.len() as f64;
    let s: f64 = t.iter().sum();
    let psi_s = digamma_unchecked(s);
    let mut kl = ln_gamma_unchecked(s) - ln_gamma_unchecked(c);
    for &a in &t {
        kl -= ln_gamma_unchecked(a);
        kl += (a - 1.0) * (digamma_unchecked(a) - psi_s);
    }
    Ok(kl)
}

pub fn edl_loss(pred: &DirichletPrediction, label: &OneHotLabel, cfg: &LossConfig) -> Result<f64> {
    let nll = nll_loss(pred, label)?;
    if cfg.lambda_reg == 0.0 {
        return Ok(nll);
    }
    Ok(nll + cfg.lambda_reg * kl_regularizer(pred, label)?)
}

/// `λ_a·U^alea + λ_e·U^epis` in the configured quantification mode.
pub fn ug_loss(pred: &DirichletPrediction, cfg: &LossConfig) -> f64 {
    if !cfg.guidance_enabled() {
        return 0.0;
    }
    let u = pred.uncertainty(cfg.mode);
    cfg.lambda_a * u.aleatoric + cfg.lambda_e * u.epistemic
}

/// A prediction on a labeled sample; `weight` scales its supervised loss.
#[derive(Debug, Clone)]
pub struct LabeledPrediction {
    pub prediction: DirichletPrediction,
    pub label: OneHotLabel,
    pub weight: f64,
}

/// Supervised loss over `labeled` plus guidance loss over `unlabeled`.
///
/// With [`Reduction::Mean`] each of the two terms is averaged over its own
/// batch. Summation runs in slice order.
pub fn total_loss(
    labeled: &[LabeledPrediction],
    unlabeled: &[DirichletPrediction],
    cfg: &LossConfig,
) -> Result<f64> {
    let mut supervised = 0.0;
    for lp in labeled {
        supervised += lp.weight * edl_loss(&lp.prediction, &lp.label, cfg)?;
    }
    let mut guidance = 0.0;
    for p in unlabeled {
        guidance += ug_loss(p, cfg);
    }
    Ok(match cfg.reduction {
        Reduction::Sum => supervised + guidance,
        Reduction::Mean => {
            mean_term(supervised, labeled.len()) + mean_term(guidance, unlabeled.len())
        }
    })
}

fn mean_term(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn nll_gradient(pred: &DirichletPrediction, label: &OneHotLabel) -> Result<Vec<f64>> {
    check_dims(pred, label)?;
    let inv_strength = 1.0 / pred.strength();
    let mut g = vec![inv_strength; pred.num_classes()];
    let gc = label.class_index();
    g[gc] -= 1.0 / pred.alpha()[gc];
    Ok(g)
}

/// The true-class coordinate is always zero: `α̃` does not depend on it.
pub fn kl_gradient(pred: &DirichletPrediction, label: &OneHotLabel) -> Result<Vec<f64>> {
    check_dims(pred, label)?;
    let t = tilde_alpha(pred, label);
    let c = t.len() as f64;
    let s: f64 = t.iter().sum();
    let common = (s - c) * trigamma_unchecked(s);
    Ok(t.iter()
        .enumerate()
        .map(|(k, &a)| {
            if k == label.class_index() {
                0.0
            } else {
                (a - 1.0) * trigamma_unchecked(a) - common
            }
        })
        .collect())
}

pub fn edl_gradient(
    pred: &DirichletPrediction,
    label: &OneHotLabel,
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    let mut g = nll_gradient(pred, label)?;
    if cfg.lambda_reg != 0.0 {
        for (gi, ki) in g.iter_mut().zip(kl_gradient(pred, label)?) {
            *gi += cfg.lambda_reg * ki;
        }
    }
    Ok(g)
}

pub fn ug_gradient(pred: &DirichletPrediction, cfg: &LossConfig) -> Vec<f64> {
    let c = pred.num_classes();
    if !cfg.guidance_enabled() {
        return vec![0.0; c];
    }
    let (d_alea, d_epis) = match cfg.mode {
        QuantificationMode::Variance => variance_uncertainty_gradients(pred),
        QuantificationMode::Entropy => entropy_uncertainty_gradients(pred),
    };
    d_alea
        .iter()
        .zip(&d_epis)
        .map(|(a, e)| cfg.lambda_a * a + cfg.lambda_e * e)
        .collect()
}

/// Gradients of (U^alea, U^epis) in variance mode.
fn variance_uncertainty_gradients(pred: &DirichletPrediction) -> (Vec<f64>, Vec<f64>) {
    let s = pred.strength();
    let alpha = pred.alpha();
    let sq: f64 = alpha.iter().map(|a| (a / s) * (a / s)).sum();
    let u = 1.0 - sq;
    let scale_a = s / (s + 1.0);
    let scale_e = 1.0 / (s + 1.0);
    // d(scale_a)/dα_k = 1/(s+1)², d(scale_e)/dα_k = −1/(s+1)²
    let d_scale = scale_e * scale_e;
    let mut ga = Vec::with_capacity(alpha.len());
    let mut ge = Vec::with_capacity(alpha.len());
    for &a in alpha {
        let du = 2.0 * sq / s - 2.0 * a / (s * s);
        ga.push(scale_a * du + d_scale * u);
        ge.push(scale_e * du - d_scale * u);
    }
    (ga, ge)
}

/// Gradients of (U^alea, U^epis) in entropy mode.
fn entropy_uncertainty_gradients(pred: &DirichletPrediction) -> (Vec<f64>, Vec<f64>) {
    let s = pred.strength();
    let alpha = pred.alpha();
    let mut entropy = 0.0;
    let mut weighted_psi = 0.0;
    for &a in alpha {
        let m = a / s;
        entropy -= m * m.ln();
        weighted_psi += m * digamma_unchecked(a + 1.0);
    }
    let tri_s = trigamma_unchecked(s + 1.0);
    let mut ga = Vec::with_capacity(alpha.len());
    let mut ge = Vec::with_capacity(alpha.len());
    for &a in alpha {
        let m = a / s;
        let d_total = (-m.ln() - entropy) / s;
        let d_alea = tri_s
            - (digamma_unchecked(a + 1.0) - weighted_psi) / s
            - m * trigamma_unchecked(a + 1.0);
        ga.push(d_alea);
        ge.push(d_total - d_alea);
    }
    (ga, ge)
}

/// `∂L/∂α` for a labeled sample (EDL loss) or an unlabeled one (guidance loss).
pub fn loss_gradients(
    pred: &DirichletPrediction,
    label: Option<&OneHotLabel>,
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    match label {
        Some(label) => edl_gradient(pred, label, cfg),
        None => Ok(ug_gradient(pred, cfg)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pred(alpha: &[f64]) -> DirichletPrediction {
        DirichletPrediction::new(alpha.to_vec()).unwrap()
    }

    fn label(c: usize, n: usize) -> OneHotLabel {
        OneHotLabel::new(c, n).unwrap()
    }

    fn cfg(lambda_reg: f64, lambda_a: f64, lambda_e: f64, mode: QuantificationMode) -> LossConfig {
        LossConfig {
            lambda_reg,
            lambda_a,
            lambda_e,
            mode,
            reduction: Reduction::Sum,
            pseudo_label_weight: 1.0,
        }
    }

    fn finite_difference(f: impl Fn(&[f64]) -> f64, alpha: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..alpha.len())
            .map(|k| {
                let mut plus = alpha.to_vec();
                let mut minus = alpha.to_vec();
                plus[k] += h;
                minus[k] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        diff / norm.max(1e-12)
    }

    #[test]
    fn label_validation() {
        assert!(OneHotLabel::new(2, 2).is_err());
        assert_eq!(label(1, 3).as_vector(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn nll_examples() {
        let p = pred(&[3.0, 1.0]);
        assert!((nll_loss(&p, &label(0, 2)).unwrap() - 0.287_682_072_451_780_9).abs() < 1e-12);
        assert!((nll_loss(&p, &label(1, 2)).unwrap() - 1.3862943611198906).abs() < 1e-12);
        let sharp = pred(&[1e12, 1.0, 1.0]);
        assert!(nll_loss(&sharp, &label(0, 3)).unwrap() < 1e-11);
        assert!(matches!(
            nll_loss(&p, &label(0, 3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn kl_examples() {
        let ones = pred(&[5.0, 1.0, 1.0]);
        assert!(kl_regularizer(&ones, &label(0, 3)).unwrap().abs() < 1e-12);
        let p = pred(&[3.0, 4.0]);
        let kl = kl_regularizer(&p, &label(0, 2)).unwrap();
        assert!((kl - 0.636_294_361_119_890_6).abs() < 1e-12);
        for a in [0.5, 1.5, 3.0] {
            let q = pred(&[2.0, 1.0, a]);
            assert!(kl_regularizer(&q, &label(0, 3)).unwrap() > 0.0);
        }
    }

    #[test]
    fn edl_examples() {
        let p = pred(&[3.0, 4.0]);
        let l = label(0, 2);
        let zero = cfg(0.0, 0.0, 0.0, QuantificationMode::Variance);
        assert_eq!(edl_loss(&p, &l, &zero).unwrap(), nll_loss(&p, &l).unwrap());
        let half = cfg(0.5, 0.0, 0.0, QuantificationMode::Variance);
        assert!((edl_loss(&p, &l, &half).unwrap() - 1.165_445_040_947_148_8).abs() < 1e-12);
    }

    #[test]
    fn ug_examples() {
        let p = pred(&[1.0, 1.0]);
        let var = cfg(0.0, 0.05, 1.0, QuantificationMode::Variance);
        assert!((ug_loss(&p, &var) - (0.05 / 3.0 + 1.0 / 6.0)).abs() < 1e-15);
        let ent = cfg(0.0, 0.05, 1.0, QuantificationMode::Entropy);
        assert!((ug_loss(&p, &ent) - 0.218_147_180_559_945_3).abs() < 1e-12);
        let off = cfg(0.0, 0.0, 0.0, QuantificationMode::Entropy);
        assert_eq!(ug_loss(&p, &off), 0.0);
    }

    #[test]
    fn ug_vanishes_as_evidence_concentrates() {
        for mode in [QuantificationMode::Variance, QuantificationMode::Entropy] {
            let c = cfg(0.0, 0.05, 1.0, mode);
            let mut prev = f64::INFINITY;
            for k in [1e1, 1e3, 1e6, 1e9] {
                let v = ug_loss(&pred(&[k, 1.0, 1.0]), &c);
                assert!(v < prev);
                prev = v;
            }
            assert!(prev < 1e-6);
        }
    }

    #[test]
    fn total_loss_examples() {
        let c = cfg(0.5, 0.05, 1.0, QuantificationMode::Variance);
        let lp = LabeledPrediction {
            prediction: pred(&[3.0, 4.0]),
            label: label(0, 2),
            weight: 1.0,
        };
        let u = pred(&[1.0, 1.0]);
        let sup = edl_loss(&lp.prediction, &lp.label, &c).unwrap();
        let ug = ug_loss(&u, &c);
        assert_eq!(total_loss(std::slice::from_ref(&lp), &[], &c).unwrap(), sup);
        assert_eq!(total_loss(&[], std::slice::from_ref(&u), &c).unwrap(), ug);
        assert_eq!(total_loss(std::slice::from_ref(&lp), std::slice::from_ref(&u), &c).unwrap(), sup + ug);

        let mean = LossConfig { reduction: Reduction::Mean, ..c };
        let two = total_loss(&[lp.clone(), lp.clone()], std::slice::from_ref(&u), &mean).unwrap();
        assert!((two - (sup + ug)).abs() < 1e-15);
    }

    #[test]
    fn nll_gradient_example() {
        let g = nll_gradient(&pred(&[3.0, 1.0]), &label(0, 2)).unwrap();
        assert!((g[0] + 1.0 / 12.0).abs() < 1e-15);
        assert!((g[1] - 0.25).abs() < 1e-15);
        let fd = finite_difference(
            |a| nll_loss(&pred(a), &label(0, 2)).unwrap(),
            &[3.0, 1.0],
        );
        assert!(rel_err(&g, &fd) < 1e-8);
    }

    #[test]
    fn kl_gradient_ignores_true_class() {
        let g = kl_gradient(&pred(&[3.0, 0.4, 2.0]), &label(0, 3)).unwrap();
        assert_eq!(g[0], 0.0);
        assert!(g[1] != 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &c in &[2usize, 5, 10] {
            for _ in 0..100 {
                let alpha: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..20.0)).collect();
                let l = label(rng.random_range(0..c), c);
                for mode in [QuantificationMode::Variance, QuantificationMode::Entropy] {
                    let cf = cfg(1.0 / c as f64, 0.05, 1.0, mode);
                    let edl_fd = finite_difference(|a| edl_loss(&pred(a), &l, &cf).unwrap(), &alpha);
                    let edl_an = edl_gradient(&pred(&alpha), &l, &cf).unwrap();
                    assert!(rel_err(&edl_an, &edl_fd) < 1e-5, "edl {alpha:?}");
                    let ug_fd = finite_difference(|a| ug_loss(&pred(a), &cf), &alpha);
                    let ug_an = ug_gradient(&pred(&alpha), &cf);
                    assert!(rel_err(&ug_an, &ug_fd) < 1e-5, "ug {mode} {alpha:?}");
                }
            }
        }
    }

    fn alpha_and_label() -> impl Strategy<Value = (Vec<f64>, usize)> {
        (2usize..8).prop_flat_map(|c| (prop::collection::vec(0.1f64..50.0, c), 0..c))
    }

    proptest! {
        #[test]
        fn edl_is_permutation_invariant((alpha, cls) in alpha_and_label(), rot in 0usize..8) {
            let c = alpha.len();
            let perm: Vec<usize> = (0..c).map(|i| (i + rot) % c).collect();
            let mut permuted = vec![0.0; c];
            for (i, &p) in perm.iter().enumerate() {
                permuted[p] = alpha[i];
            }
            let cf = cfg(1.0 / c as f64, 0.0, 0.0, QuantificationMode::Variance);
            let a = edl_loss(&pred(&alpha), &label(cls, c), &cf).unwrap();
            let b = edl_loss(&pred(&permuted), &label(perm[cls], c), &cf).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn total_loss_is_additive(
            sup in prop::collection::vec(((0.1f64..30.0), (0.1f64..30.0), 0usize..2), 0..12),
            unl in prop::collection::vec(((0.1f64..30.0), (0.1f64..30.0)), 0..12),
            split_s in 0usize..12,
            split_u in 0usize..12,
        ) {
            let cf = cfg(0.5, 0.05, 1.0, QuantificationMode::Entropy);
            let labeled: Vec<LabeledPrediction> = sup.iter().map(|&(a, b, c)| LabeledPrediction {
                prediction: pred(&[a, b]), label: label(c, 2), weight: 1.0,
            }).collect();
            let unlabeled: Vec<DirichletPrediction> = unl.iter().map(|&(a, b)| pred(&[a, b])).collect();
            let ss = split_s.min(labeled.len());
            let su = split_u.min(unlabeled.len());
            let whole = total_loss(&labeled, &unlabeled, &cf).unwrap();
            let parts = total_loss(&labeled[..ss], &unlabeled[..su], &cf).unwrap()
                + total_loss(&labeled[ss..], &unlabeled[su..], &cf).unwrap();
            prop_assert!((whole - parts).abs() <= 1e-12 * whole.abs().max(1.0));
        }
    }
}
