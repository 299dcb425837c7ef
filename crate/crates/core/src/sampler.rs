//! Two-step uncertainty sampling and certainty sampling over the unlabeled
//! target pool.
//!
//! A round sorts the scored pool by epistemic uncertainty once. Uncertainty
//! sampling reads candidates from the top of that ordering and certainty
//! sampling from the bottom.

use std::cmp::Ordering;
use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enn::EvidentialMlp;
use crate::error::{Error, Result};
use crate::evidence::QuantificationMode;
use crate::pool::SamplePool;

/// Uncertainties of one unlabeled target sample under the current model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub id: usize,
    pub epistemic: f64,
    pub aleatoric: f64,
    pub predicted: usize,
}

/// Scores every sample of `T^u`, in pool order.
pub fn score_unlabeled(
    model: &EvidentialMlp,
    pool: &SamplePool,
    mode: QuantificationMode,
) -> Result<Vec<ScoredCandidate>> {
    let unlabeled = pool.target_unlabeled();
    let preds = model.forward_many(unlabeled.par_iter().map(|s| s.features.as_slice()))?;
    Ok(preds
        .iter()
        .zip(unlabeled)
        .map(|(p, s)| {
            let u = p.uncertainty(mode);
            ScoredCandidate {
                id: s.id,
                epistemic: u.epistemic,
                aleatoric: u.aleatoric,
                predicted: p.predict_class(),
            }
        })
        .collect())
}

/// Counts of the sorts performed, for checking that a round sorts by EU
/// only once.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SortStats {
    pub epistemic_sorts: usize,
    pub aleatoric_sorts: usize,
}

/// Descending by `key`, equal keys by ascending id.
fn by_key_desc(a: &ScoredCandidate, b: &ScoredCandidate, key: fn(&ScoredCandidate) -> f64) -> Ordering {
    key(b).total_cmp(&key(a)).then(a.id.cmp(&b.id))
}

/// Candidates ordered by descending EU, ties by ascending id.
#[derive(Debug, Clone)]
pub struct EpistemicRanking {
    ranked: Vec<ScoredCandidate>,
    /// Order for least-uncertain-first traversal: ascending EU, ties still
    /// by ascending id.
    ascending: Vec<usize>,
}

impl EpistemicRanking {
    pub fn new(mut candidates: Vec<ScoredCandidate>, stats: &mut SortStats) -> Self {
        candidates.sort_by(|a, b| by_key_desc(a, b, |c| c.epistemic));
        stats.epistemic_sorts += 1;
        // Reverse the tie groups but keep id order inside each group. This
        // reuses the single sort.
        let mut ascending = Vec::with_capacity(candidates.len());
        let mut end = candidates.len();
        while end > 0 {
            let mut start = end - 1;
            while start > 0 && candidates[start - 1].epistemic == candidates[end - 1].epistemic {
                start -= 1;
            }
            ascending.extend(start..end);
            end = start;
        }
        Self {
            ranked: candidates,
            ascending,
        }
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }

    /// Most uncertain first.
    pub fn descending(&self) -> &[ScoredCandidate] {
        &self.ranked
    }

    /// Least uncertain first.
    pub fn ascending(&self) -> impl Iterator<Item = &ScoredCandidate> + '_ {
        self.ascending.iter().map(|&i| &self.ranked[i])
    }
}

/// Selection sizes for one sampling round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    /// One-based round index.
    pub round: usize,
    /// Samples sent to the oracle.
    pub uncertain: usize,
    /// Samples pseudo-labeled.
    pub certain: usize,
    /// Candidate multiplier of the first selection step.
    pub kappa: usize,
}

impl RoundPlan {
    pub fn candidates(&self) -> usize {
        self.kappa * self.uncertain
    }
}

/// Top `κ·b_u` by EU, then the top `b_u` of those by AU.
pub fn select_uncertain(
    ranking: &EpistemicRanking,
    plan: &RoundPlan,
    stats: &mut SortStats,
) -> Result<Vec<ScoredCandidate>> {
    if plan.uncertain == 0 {
        return Ok(Vec::new());
    }
    let needed = plan.candidates();
    if plan.kappa == 0 || ranking.len() < needed {
        return Err(Error::PoolTooSmall {
            needed: needed.max(plan.uncertain),
            available: ranking.len(),
        });
    }
    let mut shortlist = ranking.descending()[..needed].to_vec();
    shortlist.sort_by(|a, b| by_key_desc(a, b, |c| c.aleatoric));
    stats.aleatoric_sorts += 1;
    shortlist.truncate(plan.uncertain);
    Ok(shortlist)
}

/// The `b_c` least-EU candidates not in `exclude`. With `class_balanced`,
/// first `⌊b_c/C⌋` per predicted class, then the rest by global EU order.
/// Returns fewer than `b_c` when the pool runs short.
pub fn select_certain(
    ranking: &EpistemicRanking,
    count: usize,
    num_classes: usize,
    class_balanced: bool,
    exclude: &HashSet<usize>,
) -> Vec<ScoredCandidate> {
    let mut chosen: Vec<ScoredCandidate> = Vec::with_capacity(count);
    let mut taken: HashSet<usize> = HashSet::with_capacity(count);
    if class_balanced && num_classes > 0 {
        let per_class = count / num_classes;
        let mut per_class_taken = vec![0usize; num_classes];
        for c in ranking.ascending() {
            if exclude.contains(&c.id) || c.predicted >= num_classes {
                continue;
            }
            if per_class_taken[c.predicted] < per_class {
                per_class_taken[c.predicted] += 1;
                taken.insert(c.id);
                chosen.push(c.clone());
            }
        }
    }
    // Remainder, plus any shortfall of classes with too few predictions.
    for c in ranking.ascending() {
        if chosen.len() >= count {
            break;
        }
        if !exclude.contains(&c.id) && !taken.contains(&c.id) {
            taken.insert(c.id);
            chosen.push(c.clone());
        }
    }
    chosen
}

/// A sample moved into `T^l` during a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub candidate: ScoredCandidate,
    pub kind: SelectionKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionKind {
    Uncertain,
    Certain,
}

impl std::fmt::Display for SelectionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionKind::Uncertain => "uncertain",
            SelectionKind::Certain => "certain",
        })
    }
}

fn check_uncertain(pool: &SamplePool, ranking: &EpistemicRanking, plan: &RoundPlan) -> Result<()> {
    if plan.uncertain == 0 {
        return Ok(());
    }
    if plan.kappa == 0 || ranking.len() < plan.candidates() {
        return Err(Error::PoolTooSmall {
            needed: plan.candidates().max(plan.uncertain),
            available: ranking.len(),
        });
    }
    if plan.uncertain > pool.budget_remaining() {
        return Err(Error::BudgetExhausted {
            requested: plan.uncertain,
            remaining: pool.budget_remaining(),
        });
    }
    Ok(())
}

/// Two-step uncertainty sampling on its own: scores `T^u`, selects and
/// queries the oracle. Returns the selected ids in AU order.
pub fn uncertainty_sampling(
    pool: &mut SamplePool,
    model: &EvidentialMlp,
    plan: &RoundPlan,
    mode: QuantificationMode,
) -> Result<Vec<usize>> {
    if plan.uncertain == 0 {
        return Ok(Vec::new());
    }
    let mut stats = SortStats::default();
    let ranking = EpistemicRanking::new(score_unlabeled(model, pool, mode)?, &mut stats);
    check_uncertain(pool, &ranking, plan)?;
    let ids: Vec<usize> = select_uncertain(&ranking, plan, &mut stats)?
        .iter()
        .map(|c| c.id)
        .collect();
    pool.query_oracle(&ids)?;
    Ok(ids)
}

/// Certainty sampling on its own: pseudo-labels the `b_c` least-EU samples
/// with the model's predictions. Returns `(id, pseudo_label)` pairs.
pub fn certainty_sampling(
    pool: &mut SamplePool,
    model: &EvidentialMlp,
    plan: &RoundPlan,
    mode: QuantificationMode,
    class_balanced: bool,
) -> Result<Vec<(usize, usize)>> {
    if plan.certain == 0 {
        return Ok(Vec::new());
    }
    let mut stats = SortStats::default();
    let ranking = EpistemicRanking::new(score_unlabeled(model, pool, mode)?, &mut stats);
    let picks: Vec<(usize, usize)> =
        select_certain(&ranking, plan.certain, pool.num_classes(), class_balanced, &HashSet::new())
            .iter()
            .map(|c| (c.id, c.predicted))
            .collect();
    pool.assign_pseudo_labels(&picks)?;
    Ok(picks)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundSelection {
    pub uncertain: Vec<ScoredCandidate>,
    pub certain: Vec<ScoredCandidate>,
    pub stats: SortStats,
}

impl RoundSelection {
    pub fn selections(&self) -> impl Iterator<Item = Selection> + '_ {
        self.uncertain
            .iter()
            .map(|c| Selection {
                candidate: c.clone(),
                kind: SelectionKind::Uncertain,
            })
            .chain(self.certain.iter().map(|c| Selection {
                candidate: c.clone(),
                kind: SelectionKind::Certain,
            }))
    }
}

/// Which selection steps a round performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundSteps {
    pub uncertainty: bool,
    pub certainty: bool,
    pub class_balanced: bool,
}

/// One round over pre-scored candidates: a single EU sort feeds both
/// selection steps. The pool is updated with oracle and pseudo labels.
pub fn sampling_round_scored(
    pool: &mut SamplePool,
    candidates: Vec<ScoredCandidate>,
    plan: &RoundPlan,
    steps: RoundSteps,
) -> Result<RoundSelection> {
    let mut stats = SortStats::default();
    let ranking = EpistemicRanking::new(candidates, &mut stats);
    let uncertain_plan = if steps.uncertainty { plan.uncertain } else { 0 };
    let certain_plan = if steps.certainty { plan.certain } else { 0 };
    if uncertain_plan > 0 && certain_plan > 0 && certain_plan + plan.candidates() > ranking.len() {
        return Err(Error::PoolTooSmall {
            needed: certain_plan + plan.candidates(),
            available: ranking.len(),
        });
    }
    let us_plan = RoundPlan {
        uncertain: uncertain_plan,
        ..*plan
    };
    check_uncertain(pool, &ranking, &us_plan)?;
    let uncertain = select_uncertain(&ranking, &us_plan, &mut stats)?;
    let exclude: HashSet<usize> = uncertain.iter().map(|c| c.id).collect();
    let certain = select_certain(
        &ranking,
        certain_plan,
        pool.num_classes(),
        steps.class_balanced,
        &exclude,
    );
    pool.query_oracle(&uncertain.iter().map(|c| c.id).collect::<Vec<_>>())?;
    pool.assign_pseudo_labels(&certain.iter().map(|c| (c.id, c.predicted)).collect::<Vec<_>>())?;
    Ok(RoundSelection {
        uncertain,
        certain,
        stats,
    })
}

/// Scores `T^u` with `model` and runs [`sampling_round_scored`].
pub fn sampling_round(
    pool: &mut SamplePool,
    model: &EvidentialMlp,
    plan: &RoundPlan,
    mode: QuantificationMode,
    steps: RoundSteps,
) -> Result<RoundSelection> {
    let candidates = score_unlabeled(model, pool, mode)?;
    sampling_round_scored(pool, candidates, plan, steps)
}
