//! Adaptive merging of `B` matrices.
//!
//! Each live group keeps a running mean of its `B` over all training steps.
//! From the merge start step on, every `interval` steps the pair of groups
//! whose running means are closest in entrywise L2 distance is merged, the
//! lower group adopting the upper group's `B`, until the per-type budget is
//! spent.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterBank, GroupId, MergeEvent, ProjectionType};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Incremental arithmetic mean of a group's `B` snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningAverage<T: Scalar = f32> {
    pub group: GroupId,
    mean: Tensor<T>,
    count: usize,
}

impl<T: Scalar> RunningAverage<T> {
    pub fn new(group: GroupId, shape: &[usize]) -> Self {
        Self {
            group,
            mean: Tensor::zeros(shape),
            count: 0,
        }
    }

    pub(crate) fn from_parts(group: GroupId, mean: Tensor<T>, count: usize) -> Self {
        Self { group, mean, count }
    }

    pub fn mean(&self) -> &Tensor<T> {
        &self.mean
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Folds in one more snapshot: `mean += (w − mean) / t`.
    pub fn observe(&mut self, current: &Tensor<T>) -> Result<()> {
        if current.shape() != self.mean.shape() {
            return Err(Error::Shape {
                op: "observe",
                lhs: self.mean.shape().to_vec(),
                rhs: current.shape().to_vec(),
            });
        }
        self.count += 1;
        let inv = T::from_f64(1.0 / self.count as f64);
        for (m, &w) in self.mean.data_mut().iter_mut().zip(current.data()) {
            *m += (w - *m) * inv;
        }
        Ok(())
    }
}

/// Entrywise L2 distance between two running means; smaller is more similar.
pub fn similarity<T: Scalar>(a: &RunningAverage<T>, b: &RunningAverage<T>) -> Result<f64> {
    if a.mean.shape() != b.mean.shape() {
        return Err(Error::Shape {
            op: "similarity",
            lhs: a.mean.shape().to_vec(),
            rhs: b.mean.shape().to_vec(),
        });
    }
    Ok(a.mean
        .data()
        .iter()
        .zip(b.mean.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Distance between two live groups, oriented so `high` has the greater
/// representative layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub low: GroupId,
    pub low_representative: usize,
    pub high: GroupId,
    pub high_representative: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub step: usize,
    #[serde(rename = "type")]
    pub projection: ProjectionType,
    pub entries: Vec<PairSimilarity>,
}

impl SimilarityReport {
    /// Looks up S(i, j) in either order; S(i, i) is 0.
    pub fn get(&self, i: GroupId, j: GroupId) -> Option<f64> {
        if i == j {
            return Some(0.0);
        }
        self.entries
            .iter()
            .find(|e| (e.low == i && e.high == j) || (e.low == j && e.high == i))
            .map(|e| e.similarity)
    }
}

/// Which group pairs are eligible for merging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairScope {
    #[default]
    AllPairs,
    /// Only groups whose representatives are neighbours in sorted order.
    AdjacentOnly,
}

/// Picks the most similar eligible pair as `(low, high)`.
///
/// Ties go to the lexicographically smallest `(low_rep, high_rep)`.
pub fn select_pair(report: &SimilarityReport, scope: PairScope) -> Result<(GroupId, GroupId)> {
    let adjacent: Option<Vec<(usize, usize)>> = match scope {
        PairScope::AllPairs => None,
        PairScope::AdjacentOnly => {
            let mut reps: Vec<usize> = report
                .entries
                .iter()
                .flat_map(|e| [e.low_representative, e.high_representative])
                .collect();
            reps.sort_unstable();
            reps.dedup();
            Some(reps.windows(2).map(|w| (w[0], w[1])).collect())
        }
    };
    report
        .entries
        .iter()
        .filter(|e| {
            adjacent.as_ref().is_none_or(|adj| {
                adj.contains(&(e.low_representative, e.high_representative))
            })
        })
        .min_by(|a, b| {
            a.similarity
                .total_cmp(&b.similarity)
                .then(a.low_representative.cmp(&b.low_representative))
                .then(a.high_representative.cmp(&b.high_representative))
        })
        .map(|e| (e.low, e.high))
        .ok_or(Error::Exhausted)
}

/// When merges fire and how many.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeSchedule {
    pub start_step: usize,
    pub interval: usize,
    /// Merges per projection type.
    pub budget: usize,
    pub pair_scope: PairScope,
}

impl MergeSchedule {
    /// `t > T_s` and `(t − T_s) mod m = 0`.
    pub fn fires_at(&self, step: usize) -> bool {
        self.interval > 0 && step > self.start_step && (step - self.start_step).is_multiple_of(self.interval)
    }

    /// Step of the final merge, when the budget is positive.
    pub fn last_merge_step(&self) -> Option<usize> {
        (self.budget > 0).then(|| self.start_step + self.budget * self.interval)
    }
}

/// Merge bookkeeping for one projection type.
#[derive(Clone, Debug)]
pub struct TypeState<T: Scalar = f32> {
    pub projection: ProjectionType,
    pub remaining: usize,
    pub merges_done: usize,
    averages: BTreeMap<GroupId, RunningAverage<T>>,
}

impl<T: Scalar> TypeState<T> {
    pub fn averages(&self) -> impl Iterator<Item = &RunningAverage<T>> {
        self.averages.values()
    }

    pub fn average(&self, id: GroupId) -> Option<&RunningAverage<T>> {
        self.averages.get(&id)
    }

    /// Entries held by running averages.
    pub fn tracked_entries(&self) -> usize {
        self.averages.values().map(|a| a.mean.numel()).sum()
    }
}

/// What one call to [`MergeEngine::step_hook`] did.
#[derive(Clone, Debug, Default)]
pub struct HookOutcome {
    pub events: Vec<MergeEvent>,
    pub reports: Vec<SimilarityReport>,
}

/// Drives the merge schedule over a set of adapter banks.
#[derive(Clone, Debug)]
pub struct MergeEngine<T: Scalar = f32> {
    schedule: MergeSchedule,
    states: Vec<TypeState<T>>,
}

impl<T: Scalar> MergeEngine<T> {
    pub fn new(schedule: MergeSchedule, projections: &[ProjectionType]) -> Self {
        let states = projections
            .iter()
            .map(|&projection| TypeState {
                projection,
                remaining: schedule.budget,
                merges_done: 0,
                averages: BTreeMap::new(),
            })
            .collect();
        Self { schedule, states }
    }

    pub fn schedule(&self) -> &MergeSchedule {
        &self.schedule
    }

    pub fn states(&self) -> &[TypeState<T>] {
        &self.states
    }

    pub fn state(&self, projection: ProjectionType) -> Option<&TypeState<T>> {
        self.states.iter().find(|s| s.projection == projection)
    }

    /// True once every type has spent its budget.
    pub fn finished(&self) -> bool {
        self.states.iter().all(|s| s.remaining == 0)
    }

    pub(crate) fn restore_state(
        &mut self,
        projection: ProjectionType,
        remaining: usize,
        merges_done: usize,
        averages: Vec<RunningAverage<T>>,
    ) -> Result<()> {
        let state = self
            .states
            .iter_mut()
            .find(|s| s.projection == projection)
            .ok_or_else(|| Error::contract(format!("no merge state for {projection}")))?;
        state.remaining = remaining;
        state.merges_done = merges_done;
        state.averages = averages.into_iter().map(|a| (a.group, a)).collect();
        Ok(())
    }

    /// Runs once per optimizer step, after the weight update.
    ///
    /// While a type has budget left its running averages absorb the current
    /// `B`s; on firing steps the closest pair is merged.
    pub fn step_hook(&mut self, banks: &mut [AdapterBank<T>], step: usize) -> Result<HookOutcome> {
        let mut outcome = HookOutcome::default();
        for bank in banks.iter_mut() {
            let state = self
                .states
                .iter_mut()
                .find(|s| s.projection == bank.projection())
                .ok_or_else(|| {
                    Error::contract(format!("no merge state for {}", bank.projection()))
                })?;
            if state.remaining == 0 {
                continue;
            }
            for group in bank.groups() {
                state
                    .averages
                    .entry(group.id)
                    .or_insert_with(|| RunningAverage::new(group.id, group.b.shape()))
                    .observe(&group.b)?;
            }
            if !self.schedule.fires_at(step) {
                continue;
            }
            if bank.live_groups() < 2 {
                log::warn!(
                    "step {step}: {} has a single live group, merge skipped",
                    bank.projection()
                );
                continue;
            }
            let report = similarity_report(bank, state, step)?;
            let (low, high) = select_pair(&report, self.schedule.pair_scope)?;
            let s = report.get(low, high).expect("selected pair is in the report");
            let mut event = bank.apply_merge(low, high)?;
            event.step = step;
            event.similarity = s;
            state.averages.remove(&low);
            state.remaining -= 1;
            state.merges_done += 1;
            if state.remaining == 0 {
                state.averages.clear();
            }
            outcome.reports.push(report);
            outcome.events.push(event);
        }
        Ok(outcome)
    }
}

fn similarity_report<T: Scalar>(
    bank: &AdapterBank<T>,
    state: &TypeState<T>,
    step: usize,
) -> Result<SimilarityReport> {
    let mut groups: Vec<(GroupId, usize)> = bank
        .groups()
        .map(|g| (g.id, g.representative()))
        .collect();
    groups.sort_by_key(|&(_, rep)| rep);
    let mut entries = Vec::with_capacity(groups.len() * (groups.len() - 1) / 2);
    for (i, &(low, low_rep)) in groups.iter().enumerate() {
        for &(high, high_rep) in &groups[i + 1..] {
            let (a, b) = match (state.averages.get(&low), state.averages.get(&high)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::contract("live group without a running average")),
            };
            entries.push(PairSimilarity {
                low,
                low_representative: low_rep,
                high,
                high_representative: high_rep,
                similarity: similarity(a, b)?,
            });
        }
    }
    Ok(SimilarityReport {
        step,
        projection: bank.projection(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{AdapterConfig, AdapterMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_avg(values: &[f32]) -> RunningAverage<f32> {
        let mut avg = RunningAverage::new(GroupId(0), &[1]);
        for &v in values {
            avg.observe(&Tensor::scalar(v)).unwrap();
        }
        avg
    }

    #[test]
    fn observe_is_arithmetic_mean() {
        let avg = scalar_avg(&[2.0, 4.0]);
        assert_eq!(avg.mean().data(), &[3.0]);
        assert_eq!(avg.count(), 2);
        for k in 1..20 {
            let avg = scalar_avg(&vec![0.375; k]);
            assert_eq!(avg.mean().data(), &[0.375]);
        }
    }

    #[test]
    fn observe_rejects_wrong_shape() {
        let mut avg = RunningAverage::<f32>::new(GroupId(0), &[2, 2]);
        assert!(avg.observe(&Tensor::zeros(&[4, 1])).is_err());
    }

    #[test]
    fn similarity_examples() {
        let eye = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let mut a = RunningAverage::new(GroupId(0), &[2, 2]);
        a.observe(&eye).unwrap();
        let mut b = RunningAverage::new(GroupId(1), &[2, 2]);
        b.observe(&Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(similarity(&a, &a).unwrap(), 0.0);
        assert!((similarity(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let c = RunningAverage::<f64>::new(GroupId(2), &[4]);
        assert!(similarity(&a, &c).is_err());
    }

    fn entry(low: usize, high: usize, s: f64) -> PairSimilarity {
        PairSimilarity {
            low: GroupId(low),
            low_representative: low,
            high: GroupId(high),
            high_representative: high,
            similarity: s,
        }
    }

    fn report(entries: Vec<PairSimilarity>) -> SimilarityReport {
        SimilarityReport {
            step: 0,
            projection: ProjectionType::Query,
            entries,
        }
    }

    #[test]
    fn select_pair_argmin() {
        let r = report(vec![entry(0, 1, 0.5), entry(0, 2, 0.3), entry(1, 2, 0.9)]);
        assert_eq!(
            select_pair(&r, PairScope::AllPairs).unwrap(),
            (GroupId(0), GroupId(2))
        );
        // (0,2) is not adjacent, so the best adjacent pair wins.
        assert_eq!(
            select_pair(&r, PairScope::AdjacentOnly).unwrap(),
            (GroupId(0), GroupId(1))
        );
    }

    #[test]
    fn select_pair_tie_break() {
        let r = report(vec![entry(1, 2, 0.5), entry(0, 1, 0.5)]);
        assert_eq!(
            select_pair(&r, PairScope::AllPairs).unwrap(),
            (GroupId(0), GroupId(1))
        );
    }

    #[test]
    fn select_pair_needs_two_groups() {
        assert!(matches!(
            select_pair(&report(vec![]), PairScope::AllPairs),
            Err(Error::Exhausted)
        ));
    }

    #[test]
    fn schedule_firing() {
        let s = MergeSchedule {
            start_step: 400,
            interval: 10,
            budget: 3,
            pair_scope: PairScope::AllPairs,
        };
        assert!(!s.fires_at(400));
        assert!(!s.fires_at(405));
        assert!(s.fires_at(410));
        assert!(s.fires_at(420));
        assert_eq!(s.last_merge_step(), Some(430));
    }

    fn banks(l: usize, seed: u64) -> Vec<AdapterBank<f32>> {
        let cfg = AdapterConfig {
            rank: 2,
            alpha: 2.0,
            num_layers: l,
            model_dim: 4,
            adapted_types: ProjectionType::ALL.to_vec(),
            mode: AdapterMode::Aslora,
            a_init_std: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ProjectionType::ALL
            .iter()
            .map(|&p| AdapterBank::init(&cfg, p, &mut rng).unwrap())
            .collect()
    }

    fn perturb(banks: &mut [AdapterBank<f32>], rng: &mut ChaCha8Rng) {
        for bank in banks {
            let ids: Vec<GroupId> = bank.groups().map(|g| g.id).collect();
            for id in ids {
                let noise = Tensor::<f32>::randn(&[4, 2], 0.1, rng);
                let b = &mut bank.group_mut(id).unwrap().b;
                for (w, n) in b.data_mut().iter_mut().zip(noise.data()) {
                    *w += n;
                }
            }
        }
    }

    #[test]
    fn hook_merges_on_schedule_and_respects_budget() {
        let mut banks = banks(6, 3);
        let schedule = MergeSchedule {
            start_step: 5,
            interval: 3,
            budget: 4,
            pair_scope: PairScope::AllPairs,
        };
        let mut engine = MergeEngine::new(schedule, &ProjectionType::ALL);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut fired = Vec::new();
        for t in 1..=40 {
            perturb(&mut banks, &mut rng);
            let survivors: Vec<_> = banks
                .iter()
                .map(|b| b.groups().map(|g| (g.id, g.b.clone())).collect::<Vec<_>>())
                .collect();
            let out = engine.step_hook(&mut banks, t).unwrap();
            for ev in &out.events {
                fired.push((t, ev.projection));
                assert!(ev.survivor_representative() > ev.absorbed_representative());
                let bank = banks.iter().find(|b| b.projection() == ev.projection).unwrap();
                let idx = ProjectionType::ALL.iter().position(|&p| p == ev.projection).unwrap();
                let before = survivors[idx]
                    .iter()
                    .find(|(id, _)| *id == ev.survivor_group)
                    .unwrap();
                assert_eq!(bank.group(ev.survivor_group).unwrap().b, before.1);
            }
        }
        let steps: Vec<usize> = fired
            .iter()
            .filter(|(_, p)| *p == ProjectionType::Query)
            .map(|(t, _)| *t)
            .collect();
        assert_eq!(steps, vec![8, 11, 14, 17]);
        assert!(banks.iter().all(|b| b.live_groups() == 2));
        assert!(engine.finished());
        assert!(engine.states().iter().all(|s| s.tracked_entries() == 0));
    }

    #[test]
    fn averages_shrink_with_merges() {
        let mut banks = banks(5, 4);
        let schedule = MergeSchedule {
            start_step: 1,
            interval: 1,
            budget: 3,
            pair_scope: PairScope::AdjacentOnly,
        };
        let mut engine = MergeEngine::new(schedule, &ProjectionType::ALL);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        perturb(&mut banks, &mut rng);
        engine.step_hook(&mut banks, 1).unwrap();
        assert_eq!(engine.states()[0].tracked_entries(), 5 * 8);
        perturb(&mut banks, &mut rng);
        engine.step_hook(&mut banks, 2).unwrap();
        assert_eq!(engine.states()[0].tracked_entries(), 4 * 8);
        // Survivor keeps its own count.
        assert!(engine.states()[0].averages().all(|a| a.count() == 2));
    }

    #[test]
    fn zero_budget_never_merges() {
        let mut banks = banks(4, 5);
        let schedule = MergeSchedule {
            start_step: 0,
            interval: 1,
            budget: 0,
            pair_scope: PairScope::AllPairs,
        };
        let mut engine = MergeEngine::new(schedule, &ProjectionType::ALL);
        let before: Vec<_> = banks.iter().map(|b| b.snapshot_assignment()).collect();
        for t in 1..50 {
            assert!(engine.step_hook(&mut banks, t).unwrap().events.is_empty());
        }
        let after: Vec<_> = banks.iter().map(|b| b.snapshot_assignment()).collect();
        assert_eq!(before, after);
        assert_eq!(engine.states()[0].tracked_entries(), 0);
    }
}
