//! Source data plus the labeled/unlabeled split of the target domain.
//!
//! Target labels are held back: a sampler can only obtain one by spending
//! budget through [`SamplePool::query_oracle`] or by pseudo-labeling through
//! [`SamplePool::assign_pseudo_labels`]. [`SamplePool::true_label`] exists for
//! simulation metrics only.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Oracle,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTarget {
    pub id: usize,
    pub features: Vec<f64>,
    /// Oracle label, or the model's prediction for pseudo-labeled samples.
    pub label: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledTarget {
    pub id: usize,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SamplePool {
    num_classes: usize,
    feature_dim: usize,
    source: Vec<Sample>,
    target_labeled: Vec<LabeledTarget>,
    target_unlabeled: Vec<UnlabeledTarget>,
    truth: HashMap<usize, usize>,
    target_size: usize,
    budget_total: usize,
    budget_spent: usize,
}

impl SamplePool {
    pub fn new(
        source: Dataset,
        target: Dataset,
        initial_labeled_fraction: f64,
        budget_fraction: f64,
    ) -> Result<Self> {
        let mut bad = Vec::new();
        if !(0.0..=1.0).contains(&initial_labeled_fraction) {
            bad.push("initial_labeled_fraction must lie in [0, 1]".to_string());
        }
        if !(0.0..=1.0).contains(&budget_fraction) {
            bad.push("budget_fraction must lie in [0, 1]".to_string());
        }
        if source.num_classes != target.num_classes && !target.is_empty() {
            bad.push("source and target disagree on num_classes".into());
        }
        if source.feature_dim != target.feature_dim && !target.is_empty() {
            bad.push("source and target disagree on feature_dim".into());
        }
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        let mut truth = HashMap::with_capacity(target.len());
        for s in &target.samples {
            if truth.insert(s.id, s.label).is_some() {
                return Err(Error::Config(vec![format!(
                    "duplicate target sample id {}",
                    s.id
                )]));
            }
        }
        let target_size = target.len();
        let budget_total = (budget_fraction * target_size as f64).round() as usize;
        let initial = (initial_labeled_fraction * target_size as f64).round() as usize;
        let mut pool = Self {
            num_classes: source.num_classes,
            feature_dim: source.feature_dim,
            source: source.samples,
            target_labeled: Vec::new(),
            target_unlabeled: target
                .samples
                .into_iter()
                .map(|s| UnlabeledTarget {
                    id: s.id,
                    features: s.features,
                })
                .collect(),
            truth,
            target_size,
            // initial labels are paid for out of the budget
            budget_total: budget_total.max(initial),
            budget_spent: 0,
        };
        if initial > 0 {
            let ids: Vec<usize> = pool.target_unlabeled[..initial].iter().map(|s| s.id).collect();
            pool.query_oracle(&ids)?;
        }
        Ok(pool)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn source(&self) -> &[Sample] {
        &self.source
    }

    pub fn target_labeled(&self) -> &[LabeledTarget] {
        &self.target_labeled
    }

    pub fn target_unlabeled(&self) -> &[UnlabeledTarget] {
        &self.target_unlabeled
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    pub fn budget_total(&self) -> usize {
        self.budget_total
    }

    pub fn budget_spent(&self) -> usize {
        self.budget_spent
    }

    pub fn budget_remaining(&self) -> usize {
        self.budget_total - self.budget_spent
    }

    /// Ground truth of a target sample. For evaluating a simulated run; a
    /// sampler must not consult it.
    pub fn true_label(&self, id: usize) -> Option<usize> {
        self.truth.get(&id).copied()
    }

    fn take_unlabeled(&mut self, ids: &[usize]) -> Result<Vec<UnlabeledTarget>> {
        let wanted: HashSet<usize> = ids.iter().copied().collect();
        if wanted.len() != ids.len() {
            return Err(Error::Config(vec!["duplicate sample ids in selection".into()]));
        }
        let present: HashSet<usize> = self.target_unlabeled.iter().map(|s| s.id).collect();
        if let Some(&missing) = ids.iter().find(|id| !present.contains(id)) {
            return Err(Error::UnknownSample(missing));
        }
        let mut taken: HashMap<usize, UnlabeledTarget> = HashMap::with_capacity(ids.len());
        let mut kept = Vec::with_capacity(self.target_unlabeled.len() - ids.len());
        for s in self.target_unlabeled.drain(..) {
            if wanted.contains(&s.id) {
                taken.insert(s.id, s);
            } else {
                kept.push(s);
            }
        }
        self.target_unlabeled = kept;
        Ok(ids.iter().map(|id| taken.remove(id).unwrap()).collect())
    }

    /// Moves `ids` from the unlabeled to the labeled target set with their
    /// true labels, spending one unit of budget each. Returns the labels.
    pub fn query_oracle(&mut self, ids: &[usize]) -> Result<Vec<usize>> {
        if ids.len() > self.budget_remaining() {
            return Err(Error::BudgetExhausted {
                requested: ids.len(),
                remaining: self.budget_remaining(),
            });
        }
        let taken = self.take_unlabeled(ids)?;
        let mut labels = Vec::with_capacity(taken.len());
        for s in taken {
            let label = self.truth[&s.id];
            labels.push(label);
            self.target_labeled.push(LabeledTarget {
                id: s.id,
                features: s.features,
                label,
                provenance: Provenance::Oracle,
            });
        }
        self.budget_spent += labels.len();
        Ok(labels)
    }

    /// Moves `(id, predicted_class)` pairs into the labeled set as pseudo
    /// labels. Costs no budget.
    pub fn assign_pseudo_labels(&mut self, picks: &[(usize, usize)]) -> Result<()> {
        if let Some(&(_, c)) = picks.iter().find(|(_, c)| *c >= self.num_classes) {
            return Err(Error::ClassOutOfRange {
                class: c,
                num_classes: self.num_classes,
            });
        }
        let ids: Vec<usize> = picks.iter().map(|(id, _)| *id).collect();
        let taken = self.take_unlabeled(&ids)?;
        for (s, &(_, label)) in taken.into_iter().zip(picks) {
            self.target_labeled.push(LabeledTarget {
                id: s.id,
                features: s.features,
                label,
                provenance: Provenance::Pseudo,
            });
        }
        Ok(())
    }

    pub fn count_provenance(&self, p: Provenance) -> usize {
        self.target_labeled.iter().filter(|s| s.provenance == p).count()
    }

    /// Checks the split and budget invariants.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let labeled: HashSet<usize> = self.target_labeled.iter().map(|s| s.id).collect();
        let unlabeled: HashSet<usize> = self.target_unlabeled.iter().map(|s| s.id).collect();
        if labeled.len() != self.target_labeled.len() || unlabeled.len() != self.target_unlabeled.len() {
            return Err("duplicate ids in target pools".into());
        }
        if !labeled.is_disjoint(&unlabeled) {
            return Err("labeled and unlabeled target sets overlap".into());
        }
        if labeled.len() + unlabeled.len() != self.target_size {
            return Err(format!(
                "target pools hold {} samples, expected {}",
                labeled.len() + unlabeled.len(),
                self.target_size
            ));
        }
        if labeled.iter().chain(&unlabeled).any(|id| !self.truth.contains_key(id)) {
            return Err("pool holds an id outside the original target set".into());
        }
        if self.budget_spent > self.budget_total {
            return Err("budget overspent".into());
        }
        if self.budget_spent != self.count_provenance(Provenance::Oracle) {
            return Err("budget_spent differs from the oracle-labeled count".into());
        }
        Ok(())
    }
}
