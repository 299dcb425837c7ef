//! The multi-round active domain adaptation loop.
//!
//! Training runs epoch by epoch. At the start of each scheduled epoch the
//! current model scores `T^u` and a sampling round moves uncertain samples
//! (oracle labels) and certain samples (pseudo labels) into `T^l`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::domain::Dataset;
use crate::enn::{evaluate, EpochLoss, EvidentialMlp, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::evidence::ClassUncertainties;
use crate::loss::LossConfig;
use crate::metrics::{
    class_level_uncertainty_summary, dataset_correlations, misclassification_auroc,
    rank_class_pairs, ClassPairCorrelation, ClassSource, MisclassificationAuroc,
};
use crate::pool::{Provenance, SamplePool};
use crate::sampler::{sampling_round_scored, score_unlabeled, RoundPlan, RoundSteps, SelectionKind};

/// Ablation switches. All off is source-only training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSwitches {
    /// Uncertainty guidance on unlabeled target samples.
    pub guidance: bool,
    pub uncertainty_sampling: bool,
    pub certainty_sampling: bool,
    pub class_balanced: bool,
}

impl AblationSwitches {
    pub const ALL: Self = Self {
        guidance: true,
        uncertainty_sampling: true,
        certainty_sampling: true,
        class_balanced: false,
    };

    pub fn source_only() -> Self {
        Self {
            guidance: false,
            uncertainty_sampling: false,
            certainty_sampling: false,
            class_balanced: false,
        }
    }

    /// Short label such as `UG+US+CS`, or `source-only`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.guidance {
            parts.push("UG");
        }
        if self.uncertainty_sampling {
            parts.push("US");
        }
        if self.certainty_sampling {
            parts.push(if self.class_balanced { "CS(balanced)" } else { "CS" });
        }
        if parts.is_empty() {
            "source-only".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for AblationSwitches {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaConfig {
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Epochs (zero-based) at whose start a sampling round runs.
    pub schedule: Vec<usize>,
    /// One plan per scheduled epoch.
    pub plans: Vec<RoundPlan>,
    pub switches: AblationSwitches,
    /// Epoch at whose start misclassification AUROC is measured. Defaults
    /// to the first sampling epoch.
    pub auroc_epoch: Option<usize>,
}

impl AdaConfig {
    pub fn effective_loss(&self) -> LossConfig {
        let mut loss = self.loss.clone();
        if !self.switches.guidance {
            loss.lambda_a = 0.0;
            loss.lambda_e = 0.0;
        }
        loss
    }

    pub fn effective_auroc_epoch(&self) -> Option<usize> {
        self.auroc_epoch.or_else(|| self.schedule.first().copied())
    }

    /// Checks the schedule against the epoch count and the plans against
    /// the pool's remaining budget.
    pub fn validate(&self, pool: &SamplePool) -> Result<()> {
        if self.schedule.len() != self.plans.len() {
            return Err(Error::Schedule(format!(
                "{} sampling epochs but {} round plans",
                self.schedule.len(),
                self.plans.len()
            )));
        }
        if let Some(&e) = self.schedule.iter().find(|&&e| e >= self.train.epochs) {
            return Err(Error::Schedule(format!(
                "sampling epoch {e} is not before the final epoch {}",
                self.train.epochs
            )));
        }
        if self.schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schedule("sampling epochs must be strictly increasing".into()));
        }
        if let Some(e) = self.auroc_epoch {
            if e >= self.train.epochs {
                return Err(Error::Schedule(format!("auroc_epoch {e} is past the last epoch")));
            }
        }
        if self.plans.iter().any(|p| p.uncertain > 0 && p.kappa == 0) {
            return Err(Error::Schedule("kappa must be >= 1".into()));
        }
        if self.switches.uncertainty_sampling {
            let total: usize = self.plans.iter().map(|p| p.uncertain).sum();
            if total > pool.budget_remaining() {
                return Err(Error::BudgetExhausted {
                    requested: total,
                    remaining: pool.budget_remaining(),
                });
            }
        }
        Ok(())
    }
}

/// `b_u = B/K` per round (earlier rounds take the remainder) and
/// `b_c = round(k · certain_fraction · |T|)` in round `k`.
pub fn default_round_plans(
    budget: usize,
    rounds: usize,
    kappa: usize,
    certain_fraction_per_round: f64,
    target_size: usize,
) -> Vec<RoundPlan> {
    (0..rounds)
        .map(|i| RoundPlan {
            round: i + 1,
            uncertain: budget / rounds + usize::from(i < budget % rounds),
            certain: ((i + 1) as f64 * certain_fraction_per_round * target_size as f64).round()
                as usize,
            kappa,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub epoch: usize,
    /// Model accuracy on `T^u` right before selection.
    pub unlabeled_accuracy: f64,
    pub uncertain_selected: usize,
    pub certain_selected: usize,
    /// Fraction of this round's pseudo labels that are correct.
    pub pseudo_label_accuracy: Option<f64>,
    pub budget_spent: usize,
    pub epistemic_sorts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionLogRow {
    pub round: usize,
    pub sample_id: usize,
    pub selection_type: SelectionKind,
    pub epistemic: f64,
    pub aleatoric: f64,
    pub predicted_class: usize,
    pub true_class: usize,
}

pub fn write_selection_log<W: Write>(writer: W, rows: &[SelectionLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "round",
        "sample_id",
        "selection_type",
        "epistemic",
        "aleatoric",
        "predicted_class",
        "true_class",
    ])?;
    for r in rows {
        w.serialize((
            r.round,
            r.sample_id,
            r.selection_type.to_string(),
            r.epistemic,
            r.aleatoric,
            r.predicted_class,
            r.true_class,
        ))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AurocRecord {
    pub epoch: usize,
    pub auroc: MisclassificationAuroc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainClassUncertainty {
    pub source: ClassUncertainties,
    pub target: ClassUncertainties,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaRunReport {
    pub switches: AblationSwitches,
    /// Accuracy on the whole target domain after each epoch.
    pub epoch_accuracy: Vec<f64>,
    pub final_accuracy: f64,
    pub rounds: Vec<RoundRecord>,
    /// Fraction of all pseudo labels that are correct.
    pub pseudo_label_accuracy: Option<f64>,
    pub auroc: Option<AurocRecord>,
    pub budget_total: usize,
    pub oracle_labeled: usize,
    pub pseudo_labeled: usize,
    pub class_uncertainty: DomainClassUncertainty,
    pub correlation_source: ClassSource,
    /// The four most negatively correlated class pairs on the target domain.
    pub top_correlated_pairs: Vec<ClassPairCorrelation>,
    pub losses: Vec<EpochLoss>,
}

#[derive(Debug, Clone)]
pub struct AdaOutcome {
    pub report: AdaRunReport,
    pub selection_log: Vec<SelectionLogRow>,
    pub model: EvidentialMlp,
    pub pool: SamplePool,
}

const TOP_PAIRS: usize = 4;

/// Trains `model` for `cfg.train.epochs` epochs, sampling at the scheduled
/// epochs. `source` and `target` are the full datasets for evaluation only;
/// the loop reads target labels solely through the pool's oracle.
pub fn run_ada(
    model: EvidentialMlp,
    mut pool: SamplePool,
    source: &Dataset,
    target: &Dataset,
    cfg: &AdaConfig,
) -> Result<AdaOutcome> {
    cfg.validate(&pool)?;
    let loss_cfg = cfg.effective_loss();
    let mode = loss_cfg.mode;
    let auroc_epoch = cfg.effective_auroc_epoch();
    let steps = RoundSteps {
        uncertainty: cfg.switches.uncertainty_sampling,
        certainty: cfg.switches.certainty_sampling,
        class_balanced: cfg.switches.class_balanced,
    };
    let mut trainer = Trainer::new(model, cfg.train.clone(), loss_cfg)?;
    let mut epoch_accuracy = Vec::with_capacity(cfg.train.epochs);
    let mut losses = Vec::with_capacity(cfg.train.epochs);
    let mut rounds = Vec::new();
    let mut selection_log = Vec::new();
    let mut auroc = None;
    let mut next_round = 0;

    for epoch in 0..cfg.train.epochs {
        if auroc_epoch == Some(epoch) {
            auroc = Some(AurocRecord {
                epoch,
                auroc: misclassification_auroc(trainer.model(), target)?,
            });
        }
        if cfg.schedule.get(next_round) == Some(&epoch) {
            let plan = &cfg.plans[next_round];
            next_round += 1;
            if steps.uncertainty || steps.certainty {
                let candidates = score_unlabeled(trainer.model(), &pool, mode)?;
                let truth = |id: usize| pool.true_label(id).ok_or(Error::UnknownSample(id));
                let mut correct = 0usize;
                for c in &candidates {
                    correct += usize::from(truth(c.id)? == c.predicted);
                }
                let unlabeled_accuracy = if candidates.is_empty() {
                    0.0
                } else {
                    correct as f64 / candidates.len() as f64
                };
                let selection = sampling_round_scored(&mut pool, candidates, plan, steps)?;
                let mut pseudo_correct = 0usize;
                for s in selection.selections() {
                    let true_class = pool
                        .true_label(s.candidate.id)
                        .ok_or(Error::UnknownSample(s.candidate.id))?;
                    if s.kind == SelectionKind::Certain && true_class == s.candidate.predicted {
                        pseudo_correct += 1;
                    }
                    selection_log.push(SelectionLogRow {
                        round: plan.round,
                        sample_id: s.candidate.id,
                        selection_type: s.kind,
                        epistemic: s.candidate.epistemic,
                        aleatoric: s.candidate.aleatoric,
                        predicted_class: s.candidate.predicted,
                        true_class,
                    });
                }
                rounds.push(RoundRecord {
                    round: plan.round,
                    epoch,
                    unlabeled_accuracy,
                    uncertain_selected: selection.uncertain.len(),
                    certain_selected: selection.certain.len(),
                    pseudo_label_accuracy: (!selection.certain.is_empty())
                        .then(|| pseudo_correct as f64 / selection.certain.len() as f64),
                    budget_spent: pool.budget_spent(),
                    epistemic_sorts: selection.stats.epistemic_sorts,
                });
            }
        }
        losses.push(trainer.run_epoch(&pool)?);
        epoch_accuracy.push(evaluate(trainer.model(), target)?);
    }

    let model = trainer.into_model();
    let final_accuracy = match epoch_accuracy.last() {
        Some(&a) => a,
        None => evaluate(&model, target)?,
    };
    let pseudo: Vec<_> = pool
        .target_labeled()
        .iter()
        .filter(|s| s.provenance == Provenance::Pseudo)
        .collect();
    let pseudo_label_accuracy = (!pseudo.is_empty()).then(|| {
        pseudo
            .iter()
            .filter(|s| pool.true_label(s.id) == Some(s.label))
            .count() as f64
            / pseudo.len() as f64
    });
    let mut pairs = rank_class_pairs(&dataset_correlations(&model, target, ClassSource::Labels)?);
    pairs.truncate(TOP_PAIRS);
    let report = AdaRunReport {
        switches: cfg.switches,
        epoch_accuracy,
        final_accuracy,
        rounds,
        pseudo_label_accuracy,
        auroc,
        budget_total: pool.budget_total(),
        oracle_labeled: pool.count_provenance(Provenance::Oracle),
        pseudo_labeled: pseudo.len(),
        class_uncertainty: DomainClassUncertainty {
            source: class_level_uncertainty_summary(&model, source)?,
            target: class_level_uncertainty_summary(&model, target)?,
        },
        correlation_source: ClassSource::Labels,
        top_correlated_pairs: pairs,
        losses,
    };
    Ok(AdaOutcome {
        report,
        selection_log,
        model,
        pool,
    })
}
