//! Closed-form uncertainty, covariance and correlation of a Dirichlet
//! prediction.
//!
//! A classifier that outputs Dirichlet parameters `α` induces a bi-level
//! model of the one-hot label: `μ ~ Dir(α)`, `y ~ Cat(μ)`. Everything here is
//! a function of `α` alone:
//!
//! * the label covariance `Cov[y] = Diag(μ̄) − μ̄μ̄ᵀ` with `μ̄ = α/α₀`, and its
//!   split by the law of total covariance into an aleatoric part
//!   `α₀/(α₀+1)·Cov[y]` and an epistemic part `1/(α₀+1)·Cov[y]`;
//! * per-class uncertainties (the diagonals) and per-sample uncertainties
//!   (the traces);
//! * the class correlation matrix;
//! * the entropy-based sample uncertainties, for comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::digamma_unchecked;

/// Floor applied to externally supplied Dirichlet parameters.
pub const ALPHA_FLOOR: f64 = 1e-8;

/// Class standard deviations below this are treated as zero when forming
/// correlations.
pub const CORRELATION_EPS: f64 = 1e-12;

/// How sample uncertainties are quantified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantificationMode {
    Variance,
    Entropy,
}

impl std::fmt::Display for QuantificationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Variance => "variance",
            Self::Entropy => "entropy",
        })
    }
}

impl std::str::FromStr for QuantificationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "variance" => Ok(Self::Variance),
            "entropy" => Ok(Self::Entropy),
            other => Err(format!("unknown quantification mode `{other}`")),
        }
    }
}

/// Dirichlet parameters predicted for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DirichletPrediction {
    alpha: Vec<f64>,
    strength: f64,
}

impl DirichletPrediction {
    /// Requires at least two classes and every `α_c` finite and positive.
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::InvalidAlpha(format!(
                "need at least 2 classes, got {}",
                alpha.len()
            )));
        }
        if let Some((c, &a)) = alpha
            .iter()
            .enumerate()
            .find(|(_, a)| !(a.is_finite() && **a > 0.0))
        {
            return Err(Error::InvalidAlpha(format!(
                "alpha[{c}] = {a} is not a finite positive number"
            )));
        }
        let strength = alpha.iter().sum();
        Ok(Self { alpha, strength })
    }

    /// Like [`new`](Self::new), then lifts every entry to at least
    /// [`ALPHA_FLOOR`]. Used for vectors read from files.
    pub fn from_external(alpha: Vec<f64>) -> Result<Self> {
        let checked = Self::new(alpha)?;
        Self::new(
            checked
                .alpha
                .into_iter()
                .map(|a| a.max(ALPHA_FLOOR))
                .collect(),
        )
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }

    /// Dirichlet strength `α₀ = Σ α_c`.
    pub fn strength(&self) -> f64 {
        self.strength
    }

    /// Expected class probabilities `μ̄ = α / α₀`.
    pub fn mean_probabilities(&self) -> ProbabilityVector {
        ProbabilityVector(self.alpha.iter().map(|a| a / self.strength).collect())
    }

    /// Index of the largest `α_c`; ties go to the lowest index.
    pub fn predict_class(&self) -> usize {
        let mut best = 0;
        for (c, &a) in self.alpha.iter().enumerate().skip(1) {
            if a > self.alpha[best] {
                best = c;
            }
        }
        best
    }

    fn aleatoric_scale(&self) -> f64 {
        self.strength / (self.strength + 1.0)
    }

    fn epistemic_scale(&self) -> f64 {
        1.0 / (self.strength + 1.0)
    }

    pub fn covariance_bundle(&self) -> CovarianceBundle {
        let mu = self.mean_probabilities();
        let mu = mu.as_slice();
        let c = mu.len();
        let mut total = vec![vec![0.0; c]; c];
        for i in 0..c {
            for j in 0..c {
                total[i][j] = if i == j {
                    mu[i] - mu[i] * mu[i]
                } else {
                    -mu[i] * mu[j]
                };
            }
        }
        let scaled = |s: f64| -> Vec<Vec<f64>> {
            total
                .iter()
                .map(|row| row.iter().map(|v| s * v).collect())
                .collect()
        };
        let aleatoric = scaled(self.aleatoric_scale());
        let epistemic = scaled(self.epistemic_scale());
        let correlation = correlation_from_covariance(&total);
        CovarianceBundle {
            total,
            aleatoric,
            epistemic,
            correlation,
        }
    }

    /// Diagonals of the three covariance matrices.
    pub fn class_uncertainties(&self) -> ClassUncertainties {
        let total: Vec<f64> = self
            .alpha
            .iter()
            .map(|a| {
                let m = a / self.strength;
                m * (1.0 - m)
            })
            .collect();
        let (sa, se) = (self.aleatoric_scale(), self.epistemic_scale());
        ClassUncertainties {
            aleatoric: total.iter().map(|u| sa * u).collect(),
            epistemic: total.iter().map(|u| se * u).collect(),
            total,
        }
    }

    /// Variance-based sample uncertainties, with the class-level part attached.
    pub fn variance_uncertainty(&self) -> UncertaintyBundle {
        let class = self.class_uncertainties();
        UncertaintyBundle {
            mode: QuantificationMode::Variance,
            total: class.total.iter().sum(),
            aleatoric: class.aleatoric.iter().sum(),
            epistemic: class.epistemic.iter().sum(),
            class: Some(class),
        }
    }

    /// Entropy-based sample uncertainties. There is no class-level split.
    pub fn entropy_uncertainty(&self) -> UncertaintyBundle {
        let psi_strength = digamma_unchecked(self.strength + 1.0);
        let mut total = 0.0;
        let mut aleatoric = 0.0;
        for &a in &self.alpha {
            let m = a / self.strength;
            if m > 0.0 {
                total -= m * m.ln();
            }
            aleatoric += m * (psi_strength - digamma_unchecked(a + 1.0));
        }
        UncertaintyBundle {
            mode: QuantificationMode::Entropy,
            total,
            aleatoric,
            epistemic: total - aleatoric,
            class: None,
        }
    }

    pub fn uncertainty(&self, mode: QuantificationMode) -> UncertaintyBundle {
        match mode {
            QuantificationMode::Variance => self.variance_uncertainty(),
            QuantificationMode::Entropy => self.entropy_uncertainty(),
        }
    }
}

impl TryFrom<Vec<f64>> for DirichletPrediction {
    type Error = Error;

    fn try_from(alpha: Vec<f64>) -> Result<Self> {
        Self::new(alpha)
    }
}

impl From<DirichletPrediction> for Vec<f64> {
    fn from(p: DirichletPrediction) -> Self {
        p.alpha
    }
}

/// Expected class probabilities; entries in `[0, 1]` summing to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Covariance matrices of the one-hot label and the derived correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceBundle {
    pub total: Vec<Vec<f64>>,
    pub aleatoric: Vec<Vec<f64>>,
    pub epistemic: Vec<Vec<f64>>,
    pub correlation: Vec<Vec<f64>>,
}

/// `Cov / (σ σᵀ)` with `σ = sqrt(diag Cov)`. Rows or columns whose standard
/// deviation is below [`CORRELATION_EPS`] get 0 off the diagonal.
pub fn correlation_from_covariance(cov: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = cov.len();
    let sigma: Vec<f64> = (0..c).map(|i| cov[i][i].max(0.0).sqrt()).collect();
    let mut corr = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            corr[i][j] = if i == j {
                1.0
            } else if sigma[i] < CORRELATION_EPS || sigma[j] < CORRELATION_EPS {
                0.0
            } else {
                (cov[i][j] / (sigma[i] * sigma[j])).clamp(-1.0, 1.0)
            };
        }
    }
    corr
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassUncertainties {
    pub total: Vec<f64>,
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
}

/// Sample-level total/aleatoric/epistemic uncertainty, plus the class-level
/// vectors in variance mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBundle {
    pub mode: QuantificationMode,
    pub total: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class: Option<ClassUncertainties>,
}

/// Everything computed for one α vector, in the shape written by
/// `evid quantify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantifiedRecord {
    pub alpha: Vec<f64>,
    pub predicted_class: usize,
    pub mean_probabilities: Vec<f64>,
    pub uncertainty: ModeUncertainties,
    pub covariance: Vec<Vec<f64>>,
    pub covariance_aleatoric: Vec<Vec<f64>>,
    pub covariance_epistemic: Vec<Vec<f64>>,
    pub correlation: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeUncertainties {
    pub variance: UncertaintyBundle,
    pub entropy: UncertaintyBundle,
}

impl QuantifiedRecord {
    pub fn new(pred: &DirichletPrediction) -> Self {
        let cov = pred.covariance_bundle();
        Self {
            alpha: pred.alpha().to_vec(),
            predicted_class: pred.predict_class(),
            mean_probabilities: pred.mean_probabilities().into_vec(),
            uncertainty: ModeUncertainties {
                variance: pred.variance_uncertainty(),
                entropy: pred.entropy_uncertainty(),
            },
            covariance: cov.total,
            covariance_aleatoric: cov.aleatoric,
            covariance_epistemic: cov.epistemic,
            correlation: cov.correlation,
        }
    }
}
