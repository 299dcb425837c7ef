//! Synthetic source/target domain pairs.
//!
//! Each class is an isotropic Gaussian blob around its mean. The target
//! domain uses the same class means, pushed through an affine shift
//! (rotation in the first two coordinates, then translation) with the noise
//! scaled by a multiplier. Cluster overlap controls aleatoric uncertainty;
//! the shift controls how far the target drifts from what a source-trained
//! model has seen.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::SamplePool;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub domain: Domain,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes `sample_id,domain,label,f1..fd`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["sample_id".to_string(), "domain".into(), "label".into()];
        header.extend((1..=self.feature_dim).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![s.id.to_string(), self.domain.to_string(), s.label.to_string()];
            row.extend(s.features.iter().map(|f| f.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads rows in the format written by [`write_csv`](Self::write_csv),
    /// keeping only rows of `domain`. Labels must lie in `0..num_classes`.
    pub fn read_csv<R: Read>(reader: R, domain: Domain, num_classes: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let feature_dim = r.headers()?.len().saturating_sub(3);
        if feature_dim == 0 {
            return Err(Error::Parse {
                line: 1,
                message: "expected columns sample_id,domain,label,f1..fd".into(),
            });
        }
        let mut samples = Vec::new();
        for (i, record) in r.records().enumerate() {
            let line = i + 2;
            let record = record?;
            let parse_err = |message: String| Error::Parse { line, message };
            if record.len() != feature_dim + 3 {
                return Err(parse_err(format!(
                    "expected {} fields, found {}",
                    feature_dim + 3,
                    record.len()
                )));
            }
            let row_domain = match &record[1] {
                "source" => Domain::Source,
                "target" => Domain::Target,
                other => return Err(parse_err(format!("unknown domain `{other}`"))),
            };
            if row_domain != domain {
                continue;
            }
            let id = record[0]
                .parse()
                .map_err(|e| parse_err(format!("sample_id: {e}")))?;
            let label: usize = record[2]
                .parse()
                .map_err(|e| parse_err(format!("label: {e}")))?;
            if label >= num_classes {
                return Err(parse_err(format!(
                    "label {label} out of range for {num_classes} classes"
                )));
            }
            let features = (3..record.len())
                .map(|k| {
                    record[k]
                        .parse::<f64>()
                        .map_err(|e| parse_err(format!("f{}: {e}", k - 2)))
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                id,
                features,
                label,
            });
        }
        Ok(Self {
            domain,
            num_classes,
            feature_dim,
            samples,
        })
    }

    pub fn load_csv(path: &Path, domain: Domain, num_classes: usize) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, domain, num_classes)
    }
}

/// Affine transform applied to the target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub translation: Vec<f64>,
    /// Rotation in the plane of the first two features, in degrees.
    pub rotation_degrees: f64,
    pub noise_multiplier: f64,
}

impl DomainShift {
    pub fn none(feature_dim: usize) -> Self {
        Self {
            translation: vec![0.0; feature_dim],
            rotation_degrees: 0.0,
            noise_multiplier: 1.0,
        }
    }

    fn apply(&self, x: &mut [f64]) {
        if self.rotation_degrees != 0.0 {
            let (s, c) = self.rotation_degrees.to_radians().sin_cos();
            let (a, b) = (x[0], x[1]);
            x[0] = c * a - s * b;
            x[1] = s * a + c * b;
        }
        for (xi, t) in x.iter_mut().zip(&self.translation) {
            *xi += t;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub samples_per_domain: usize,
    pub class_means: Vec<Vec<f64>>,
    /// Standard deviation of every class blob.
    pub class_std: f64,
    pub shift: DomainShift,
    pub seed: u64,
}

impl DomainSpec {
    /// Class means evenly spaced on a circle of `radius` in the first two
    /// features; remaining features centred at zero.
    pub fn ring(
        num_classes: usize,
        feature_dim: usize,
        samples_per_domain: usize,
        radius: f64,
        class_std: f64,
        shift: DomainShift,
        seed: u64,
    ) -> Self {
        let class_means = (0..num_classes)
            .map(|c| {
                let theta = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
                let mut m = vec![0.0; feature_dim];
                if feature_dim >= 2 {
                    m[0] = radius * theta.cos();
                    m[1] = radius * theta.sin();
                }
                m
            })
            .collect();
        Self {
            num_classes,
            feature_dim,
            samples_per_domain,
            class_means,
            class_std,
            shift,
            seed,
        }
    }

    pub fn invalid_fields(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.num_classes < 2 {
            bad.push("domain.num_classes must be >= 2".to_string());
        }
        if self.feature_dim < 2 {
            bad.push("domain.feature_dim must be >= 2".to_string());
        }
        if self.samples_per_domain < self.num_classes {
            bad.push("domain.samples_per_domain must be >= num_classes".to_string());
        }
        if self.class_means.len() != self.num_classes
            || self.class_means.iter().any(|m| m.len() != self.feature_dim)
        {
            bad.push("domain.class_means must hold num_classes vectors of feature_dim".into());
        }
        if self.class_means.iter().flatten().any(|v| !v.is_finite()) {
            bad.push("domain.class_means must be finite".into());
        }
        if !(self.class_std.is_finite() && self.class_std >= 0.0) {
            bad.push("domain.class_std must be finite and >= 0".into());
        }
        if self.shift.translation.len() != self.feature_dim {
            bad.push("domain.shift.translation must have feature_dim entries".into());
        }
        if !self.shift.rotation_degrees.is_finite() {
            bad.push("domain.shift.rotation_degrees must be finite".into());
        }
        if !(self.shift.noise_multiplier.is_finite() && self.shift.noise_multiplier >= 0.0) {
            bad.push("domain.shift.noise_multiplier must be finite and >= 0".into());
        }
        bad
    }
}

/// Draws the source and target datasets for `spec`. Deterministic in
/// `spec.seed`; the two domains use independent random streams.
pub fn generate_domain_pair(spec: &DomainSpec) -> Result<(Dataset, Dataset)> {
    let bad = spec.invalid_fields();
    if !bad.is_empty() {
        return Err(Error::Config(bad));
    }
    let source = draw_domain(spec, Domain::Source, 0);
    let target = draw_domain(spec, Domain::Target, 1);
    Ok((source, target))
}

fn draw_domain(spec: &DomainSpec, domain: Domain, stream: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let n = spec.samples_per_domain;
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut rng);
    let noise_scale = match domain {
        Domain::Source => spec.class_std,
        Domain::Target => spec.class_std * spec.shift.noise_multiplier,
    };
    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(id, label)| {
            let mut features: Vec<f64> = spec.class_means[label]
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + noise_scale * z
                })
                .collect();
            if domain == Domain::Target {
                spec.shift.apply(&mut features);
            }
            Sample {
                id,
                features,
                label,
            }
        })
        .collect();
    Dataset {
        domain,
        num_classes: spec.num_classes,
        feature_dim: spec.feature_dim,
        samples,
    }
}

/// All target samples start unlabeled except an optional oracle-labeled
/// prefix of `initial_labeled_fraction · |T|`. The budget is
/// `round(budget_fraction · |T|)`.
pub fn split_pools(
    source: Dataset,
    target: Dataset,
    initial_labeled_fraction: f64,
    budget_fraction: f64,
) -> Result<SamplePool> {
    SamplePool::new(source, target, initial_labeled_fraction, budget_fraction)
}
