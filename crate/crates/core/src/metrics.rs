//! Misclassification AUROC, dataset-level class correlations, uncertainty
//! exports and summaries.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, Domain};
use crate::enn::EvidentialMlp;
use crate::error::{Error, Result};
use crate::evidence::{ClassUncertainties, DirichletPrediction, QuantificationMode};

/// Rank-based (Mann–Whitney) AUROC: the probability that a positive sample
/// scores above a negative one, ties counted as one half.
pub fn auroc(scores: &[f64], is_positive: &[bool]) -> Result<f64> {
    if scores.len() != is_positive.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            actual: is_positive.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("AUROC scores contain NaN".into()));
    }
    let n_pos = is_positive.iter().filter(|p| **p).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuroc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of positive ranks, using mid-ranks for tie groups. Ranks are
    // half-integers so the sum is exact in f64.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        let positives = order[i..j].iter().filter(|&&k| is_positive[k]).count();
        rank_sum += mid_rank * positives as f64;
        i = j;
    }
    let n_pos_f = n_pos as f64;
    let u = rank_sum - n_pos_f * (n_pos_f + 1.0) / 2.0;
    Ok(u / (n_pos_f * n_neg as f64))
}

/// Whether class assignments used for correlation averaging come from
/// ground truth or from the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassSource {
    Labels,
    Predictions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPairCorrelation {
    pub class_i: usize,
    pub class_j: usize,
    pub correlation: f64,
    /// Number of samples that contributed to the average.
    pub support: usize,
}

/// Mean of `Corr[y]_{i,j}` over the samples assigned to class `i` or `j`.
pub fn dataset_class_correlation(
    samples: &[(DirichletPrediction, usize)],
    class_i: usize,
    class_j: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (pred, class) in samples {
        if *class != class_i && *class != class_j {
            continue;
        }
        let c = pred.num_classes();
        if class_i >= c || class_j >= c {
            return Err(Error::ClassOutOfRange {
                class: class_i.max(class_j),
                num_classes: c,
            });
        }
        sum += pred.covariance_bundle().correlation[class_i][class_j];
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("no samples belong to either class of the pair"));
    }
    Ok(sum / n as f64)
}

/// Dataset-level correlation of every class pair with at least one
/// qualifying sample. Each sample's correlation matrix is computed once.
pub fn all_class_correlations(
    samples: &[(DirichletPrediction, usize)],
    num_classes: usize,
) -> Result<Vec<ClassPairCorrelation>> {
    let mut sums = vec![vec![0.0; num_classes]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (pred, class) in samples {
        if pred.num_classes() != num_classes {
            return Err(Error::DimensionMismatch {
                expected: num_classes,
                actual: pred.num_classes(),
            });
        }
        if *class >= num_classes {
            return Err(Error::ClassOutOfRange {
                class: *class,
                num_classes,
            });
        }
        let corr = pred.covariance_bundle().correlation;
        counts[*class] += 1;
        for (j, v) in corr[*class].iter().enumerate() {
            sums[*class][j] += v;
        }
    }
    let mut pairs = Vec::new();
    for i in 0..num_classes {
        for j in i + 1..num_classes {
            let support = counts[i] + counts[j];
            if support == 0 {
                continue;
            }
            pairs.push(ClassPairCorrelation {
                class_i: i,
                class_j: j,
                correlation: (sums[i][j] + sums[j][i]) / support as f64,
                support,
            });
        }
    }
    Ok(pairs)
}

/// Most negative correlation first; equal values in lexicographic pair order.
pub fn rank_class_pairs(pairs: &[ClassPairCorrelation]) -> Vec<ClassPairCorrelation> {
    let mut ranked = pairs.to_vec();
    ranked.sort_by(|a, b| {
        a.correlation
            .total_cmp(&b.correlation)
            .then((a.class_i, a.class_j).cmp(&(b.class_i, b.class_j)))
    });
    ranked
}

pub fn write_correlations_csv<W: Write>(writer: W, pairs: &[ClassPairCorrelation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["rank", "class_i", "class_j", "correlation", "support"])?;
    for (rank, p) in pairs.iter().enumerate() {
        w.serialize((rank + 1, p.class_i, p.class_j, p.correlation, p.support))?;
    }
    w.flush()?;
    Ok(())
}

/// Predictions for every sample of a dataset, in sample order.
pub fn predict_dataset(model: &EvidentialMlp, dataset: &Dataset) -> Result<Vec<DirichletPrediction>> {
    model.forward_many(dataset.samples.par_iter().map(|s| s.features.as_slice()))
}

/// Dataset-level correlations with samples grouped by label or by
/// prediction.
pub fn dataset_correlations(
    model: &EvidentialMlp,
    dataset: &Dataset,
    source: ClassSource,
) -> Result<Vec<ClassPairCorrelation>> {
    let preds = predict_dataset(model, dataset)?;
    let samples: Vec<(DirichletPrediction, usize)> = preds
        .into_iter()
        .zip(&dataset.samples)
        .map(|(p, s)| {
            let class = match source {
                ClassSource::Labels => s.label,
                ClassSource::Predictions => p.predict_class(),
            };
            (p, class)
        })
        .collect();
    all_class_correlations(&samples, dataset.num_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub domain: Domain,
    pub sample_id: usize,
    pub aleatoric: f64,
    pub epistemic: f64,
}

/// One row per source and target sample with its aleatoric and epistemic
/// uncertainty.
pub fn export_uncertainty_histograms(
    model: &EvidentialMlp,
    source: &Dataset,
    target: &Dataset,
    mode: QuantificationMode,
) -> Result<Vec<HistogramRow>> {
    let mut rows = Vec::with_capacity(source.len() + target.len());
    for ds in [source, target] {
        let preds = predict_dataset(model, ds)?;
        rows.extend(preds.iter().zip(&ds.samples).map(|(p, s)| {
            let u = p.uncertainty(mode);
            HistogramRow {
                domain: ds.domain,
                sample_id: s.id,
                aleatoric: u.aleatoric,
                epistemic: u.epistemic,
            }
        }));
    }
    Ok(rows)
}

pub fn write_histograms_csv<W: Write>(writer: W, rows: &[HistogramRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["domain", "sample_id", "aleatoric", "epistemic"])?;
    for r in rows {
        w.serialize((r.domain.to_string(), r.sample_id, r.aleatoric, r.epistemic))?;
    }
    w.flush()?;
    Ok(())
}

/// Mean class-level uncertainty vectors over a dataset.
pub fn class_level_uncertainty_summary(
    model: &EvidentialMlp,
    dataset: &Dataset,
) -> Result<ClassUncertainties> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset for class-level summary"));
    }
    mean_class_uncertainties(&predict_dataset(model, dataset)?)
}

pub fn mean_class_uncertainties(preds: &[DirichletPrediction]) -> Result<ClassUncertainties> {
    let first = preds.first().ok_or(Error::Empty("predictions"))?;
    let c = first.num_classes();
    let mut acc = ClassUncertainties {
        total: vec![0.0; c],
        aleatoric: vec![0.0; c],
        epistemic: vec![0.0; c],
    };
    for p in preds {
        if p.num_classes() != c {
            return Err(Error::DimensionMismatch {
                expected: c,
                actual: p.num_classes(),
            });
        }
        let u = p.class_uncertainties();
        for k in 0..c {
            acc.total[k] += u.total[k];
            acc.aleatoric[k] += u.aleatoric[k];
            acc.epistemic[k] += u.epistemic[k];
        }
    }
    let n = preds.len() as f64;
    for v in [&mut acc.total, &mut acc.aleatoric, &mut acc.epistemic] {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    Ok(acc)
}

/// AUROC of aleatoric and epistemic scores for detecting misclassified
/// samples. `None` when every sample is classified correctly (or every one
/// wrongly).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyAuroc {
    pub aleatoric: Option<f64>,
    pub epistemic: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisclassificationAuroc {
    pub variance: UncertaintyAuroc,
    pub entropy: UncertaintyAuroc,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedAuroc) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn misclassification_auroc(
    model: &EvidentialMlp,
    dataset: &Dataset,
) -> Result<MisclassificationAuroc> {
    let preds = predict_dataset(model, dataset)?;
    let wrong: Vec<bool> = preds
        .iter()
        .zip(&dataset.samples)
        .map(|(p, s)| p.predict_class() != s.label)
        .collect();
    let per_mode = |mode: QuantificationMode| -> Result<UncertaintyAuroc> {
        let (au, eu): (Vec<f64>, Vec<f64>) = preds
            .iter()
            .map(|p| {
                let u = p.uncertainty(mode);
                (u.aleatoric, u.epistemic)
            })
            .unzip();
        Ok(UncertaintyAuroc {
            aleatoric: defined(auroc(&au, &wrong))?,
            epistemic: defined(auroc(&eu, &wrong))?,
        })
    };
    Ok(MisclassificationAuroc {
        variance: per_mode(QuantificationMode::Variance)?,
        entropy: per_mode(QuantificationMode::Entropy)?,
    })
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Sample;
    use proptest::prelude::*;

    fn brute_force(scores: &[f64], pos: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if pos[i] && !pos[j] {
                    pairs += 1.0;
                    if si > sj {
                        wins += 1.0;
                    } else if si == sj {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    fn pred(alpha: &[f64]) -> DirichletPrediction {
        DirichletPrediction::new(alpha.to_vec()).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.1, 0.8], &[true, false, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap(), 0.75);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedAuroc)));
        assert!(auroc(&[f64::NAN, 0.2], &[true, false]).is_err());
        assert!(auroc(&[0.1], &[true, false]).is_err());
    }

    proptest! {
        #[test]
        fn auroc_equals_pair_counting(
            data in prop::collection::vec((0u8..20, any::<bool>()), 2..200)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 4.0).collect();
            let pos: Vec<bool> = data.iter().map(|(_, p)| *p).collect();
            prop_assume!(pos.iter().any(|p| *p) && pos.iter().any(|p| !*p));
            prop_assert_eq!(auroc(&scores, &pos).unwrap(), brute_force(&scores, &pos));
        }

        #[test]
        fn auroc_ignores_monotone_transforms(
            data in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..100)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s).collect();
            let pos: Vec<bool> = data.iter().map(|(_, p)| *p).collect();
            prop_assume!(pos.iter().any(|p| *p) && pos.iter().any(|p| !*p));
            let squashed: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(auroc(&scores, &pos).unwrap(), auroc(&squashed, &pos).unwrap());
        }

        #[test]
        fn pair_correlation_is_bounded_and_symmetric(
            rows in prop::collection::vec((prop::collection::vec(0.1f64..20.0, 4), 0usize..4), 1..30),
            i in 0usize..4, j in 0usize..4,
        ) {
            prop_assume!(i != j);
            let samples: Vec<(DirichletPrediction, usize)> =
                rows.iter().map(|(a, c)| (pred(a), *c)).collect();
            prop_assume!(samples.iter().any(|(_, c)| *c == i || *c == j));
            let a = dataset_class_correlation(&samples, i, j).unwrap();
            let b = dataset_class_correlation(&samples, j, i).unwrap();
            prop_assert!((-1.0..=1.0).contains(&a));
            prop_assert!((a - b).abs() < 1e-15);
            let all = all_class_correlations(&samples, 4).unwrap();
            let (lo, hi) = (i.min(j), i.max(j));
            let entry = all.iter().find(|p| p.class_i == lo && p.class_j == hi).unwrap();
            prop_assert!((entry.correlation - a).abs() < 1e-12);
        }
    }

    #[test]
    fn binary_dataset_correlation_is_minus_one() {
        let samples = vec![(pred(&[3.0, 1.0]), 0), (pred(&[0.5, 9.0]), 1), (pred(&[2.0, 2.0]), 1)];
        assert!((dataset_class_correlation(&samples, 0, 1).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_sample_correlation_value() {
        let samples = vec![(pred(&[2.0, 3.0, 5.0]), 0)];
        let v = dataset_class_correlation(&samples, 0, 1).unwrap();
        assert!((v - (-0.06 / (0.16f64 * 0.21).sqrt())).abs() < 1e-12);
        assert!((v + 0.3273).abs() < 1e-4);
    }

    #[test]
    fn other_classes_are_excluded_and_order_is_irrelevant() {
        let a = (pred(&[2.0, 3.0, 5.0]), 0);
        let b = (pred(&[1.0, 8.0, 1.0]), 1);
        let other = (pred(&[1.0, 1.0, 30.0]), 2);
        let with = dataset_class_correlation(&[a.clone(), b.clone(), other], 0, 1).unwrap();
        let without = dataset_class_correlation(&[b.clone(), a.clone()], 0, 1).unwrap();
        assert!((with - without).abs() < 1e-15);
        assert!(dataset_class_correlation(&[a], 1, 2).is_err());
    }

    fn pair(i: usize, j: usize, c: f64) -> ClassPairCorrelation {
        ClassPairCorrelation { class_i: i, class_j: j, correlation: c, support: 1 }
    }

    #[test]
    fn ranking_order() {
        let ranked = rank_class_pairs(&[pair(0, 1, -0.226), pair(0, 2, -0.364), pair(1, 2, -0.239)]);
        let c: Vec<f64> = ranked.iter().map(|p| p.correlation).collect();
        assert_eq!(c, vec![-0.364, -0.239, -0.226]);
        let tied = rank_class_pairs(&[pair(1, 2, -0.1), pair(0, 2, -0.1), pair(0, 1, -0.1)]);
        let idx: Vec<(usize, usize)> = tied.iter().map(|p| (p.class_i, p.class_j)).collect();
        assert_eq!(idx, vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(rank_class_pairs(&[pair(0, 1, 0.3)]), vec![pair(0, 1, 0.3)]);
    }

    #[test]
    fn class_summary_examples() {
        let one = [pred(&[3.0, 1.0, 2.0])];
        assert_eq!(mean_class_uncertainties(&one).unwrap(), one[0].class_uncertainties());
        let two = [pred(&[1.0, 1.0]), pred(&[3.0, 1.0])];
        let m = mean_class_uncertainties(&two).unwrap();
        // hand-averaged: ((0.25 + 0.1875)/2, …), alea ((1/6 + 0.15)/2), epis ((1/12 + 0.0375)/2)
        for k in 0..2 {
            assert!((m.total[k] - 0.21875).abs() < 1e-15);
            assert!((m.aleatoric[k] - (1.0 / 6.0 + 0.15) / 2.0).abs() < 1e-15);
            assert!((m.epistemic[k] - (1.0 / 12.0 + 0.0375) / 2.0).abs() < 1e-15);
        }
        let sample_mean = (0.5 + 0.375) / 2.0;
        assert!((m.total.iter().sum::<f64>() - sample_mean).abs() < 1e-15);
        assert!(mean_class_uncertainties(&[]).is_err());
    }

    #[test]
    fn histogram_rows_cover_both_domains() {
        let mk = |domain, n: usize| Dataset {
            domain,
            num_classes: 3,
            feature_dim: 2,
            samples: (0..n).map(|id| Sample { id, features: vec![id as f64, 1.0], label: id % 3 }).collect(),
        };
        let model = EvidentialMlp::from_parameters(vec![2, 3], vec![0.1, 0.0, -0.2, 0.3, 0.0, 0.1, 0.0, 0.0, 0.0]).unwrap();
        let rows = export_uncertainty_histograms(&model, &mk(Domain::Source, 7), &mk(Domain::Target, 5), QuantificationMode::Variance).unwrap();
        assert_eq!(rows.len(), 12);
        assert_eq!(rows.iter().filter(|r| r.domain == Domain::Target).count(), 5);
        assert!(rows.iter().all(|r| r.aleatoric >= 0.0 && r.epistemic >= 0.0));
        let mut buf = Vec::new();
        write_histograms_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 13);
    }

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
