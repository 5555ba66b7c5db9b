//! Training loop: shared phase, scheduled merging, final optimization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterMode, AssignmentSnapshot, MergeEvent, ProjectionType};
use crate::error::{Error, Result};
use crate::merge::{HookOutcome, MergeEngine, MergeSchedule, PairScope, SimilarityReport};
use crate::model::Model;
use crate::optim::{AdamW, AdamWConfig};
use crate::task::{evaluate, Dataset, Example, Metrics};
use crate::tensor::Scalar;

/// RNG stream for minibatch sampling; model init uses streams 0..=2.
pub(crate) const STREAM_BATCHES: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub total_steps: usize,
    /// Steps of shared training before merging may start (`T_s`).
    pub merge_start: usize,
    /// Steps between merges (`m`).
    pub merge_interval: usize,
    /// Merges per adapted type (`N`); only used in adaptive mode.
    pub merge_budget: usize,
    pub pair_scope: PairScope,
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate on the held-out split every this many steps; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            merge_start: 400,
            merge_interval: 10,
            merge_budget: 8,
            pair_scope: PairScope::AllPairs,
            lr: 1e-3,
            warmup_steps: 100,
            batch_size: 8,
            weight_decay: 0.01,
            seed: 0,
            eval_every: 500,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self, mode: AdapterMode, num_layers: usize) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be positive"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config("warmup_steps", "must be below total_steps"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if mode == AdapterMode::Aslora && self.merge_budget > 0 {
            if self.merge_budget >= num_layers {
                return Err(Error::config(
                    "merge_budget",
                    format!("must be below num_layers ({num_layers})"),
                ));
            }
            if self.merge_interval == 0 {
                return Err(Error::config("merge_interval", "must be positive"));
            }
            let last = self.merge_start + self.merge_budget * self.merge_interval;
            if self.total_steps <= last {
                return Err(Error::config(
                    "total_steps",
                    format!("must exceed merge_start + merge_budget * merge_interval = {last}"),
                ));
            }
        }
        Ok(())
    }

    /// Merge schedule for `mode`; non-adaptive modes get a zero budget.
    pub fn schedule(&self, mode: AdapterMode) -> MergeSchedule {
        MergeSchedule {
            start_step: self.merge_start,
            interval: self.merge_interval,
            budget: if mode == AdapterMode::Aslora {
                self.merge_budget
            } else {
                0
            },
            pair_scope: self.pair_scope,
        }
    }

    /// Linear warmup to `lr`, then linear decay to zero at the last step.
    pub fn lr_at(&self, t: usize) -> Result<f64> {
        let total = self.total_steps;
        if t == 0 || t > total {
            return Err(Error::Index {
                what: "training step",
                index: t,
                len: total,
            });
        }
        let w = self.warmup_steps;
        Ok(if t <= w {
            self.lr * t as f64 / w as f64
        } else {
            self.lr * (total - t) as f64 / (total - w) as f64
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Adaptive mode before merging starts.
    Shared,
    /// Adaptive mode up to and including the last merge step.
    Merging,
    /// Adaptive mode after the last merge.
    Final,
    /// Any non-adaptive mode.
    Train,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Shared => "shared",
            Phase::Merging => "merging",
            Phase::Final => "final",
            Phase::Train => "train",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    /// Minibatch loss before the update.
    pub loss: f64,
    pub lr: f64,
    /// Live share groups per adapted type, after any merge at this step.
    pub live_groups: Vec<(ProjectionType, usize)>,
    /// Trainable adapter entries after this step.
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub record: StepRecord,
    pub hook: HookOutcome,
}

/// Receives progress from [`Trainer::run`].
pub trait RunSink {
    fn on_step(&mut self, _out: &StepOutput) -> Result<()> {
        Ok(())
    }

    fn on_eval(&mut self, _rec: &EvalRecord) -> Result<()> {
        Ok(())
    }
}

impl RunSink for () {}

#[derive(Clone, Debug)]
pub struct RunReport {
    /// Mean loss over the whole training split before the first step.
    pub initial_train_loss: f64,
    /// Same quantity after the last step.
    pub final_train_loss: f64,
    pub final_eval: Metrics,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub merges: Vec<MergeEvent>,
    pub similarity: Vec<SimilarityReport>,
    pub assignments: Vec<AssignmentSnapshot>,
    pub final_params: usize,
}

/// Resumable training state.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar = f32> {
    pub(crate) plan: TrainPlan,
    pub(crate) model: Model<T>,
    pub(crate) engine: MergeEngine<T>,
    pub(crate) optimizer: AdamW<T>,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) data: Dataset,
    pub(crate) step: usize,
    pub(crate) finished_at: Option<usize>,
    pub(crate) initial_train_loss: Option<f64>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(plan: TrainPlan, model: Model<T>, data: Dataset) -> Result<Self> {
        let ac = model.adapter_config();
        plan.validate(ac.mode, ac.num_layers)?;
        if data.train.is_empty() {
            return Err(Error::Input("empty training split".into()));
        }
        let engine = MergeEngine::new(plan.schedule(ac.mode), &ac.adapted_types);
        let optimizer = AdamW::new(AdamWConfig {
            weight_decay: plan.weight_decay,
            ..AdamWConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        rng.set_stream(STREAM_BATCHES);
        Ok(Self {
            plan,
            model,
            engine,
            optimizer,
            rng,
            data,
            step: 0,
            finished_at: None,
            initial_train_loss: None,
        })
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn engine(&self) -> &MergeEngine<T> {
        &self.engine
    }

    pub fn optimizer(&self) -> &AdamW<T> {
        &self.optimizer
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Steps completed so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn done(&self) -> bool {
        self.step >= self.plan.total_steps
    }

    pub fn phase_at(&self, t: usize) -> Phase {
        let s = self.engine.schedule();
        if self.model.adapter_config().mode != AdapterMode::Aslora {
            Phase::Train
        } else if t <= s.start_step || s.budget == 0 {
            Phase::Shared
        } else if self.finished_at.is_some_and(|f| t > f) {
            Phase::Final
        } else {
            Phase::Merging
        }
    }

    fn sample_batch(&mut self) -> Vec<Example> {
        let n = self.data.train.len();
        (0..self.plan.batch_size)
            .map(|_| self.data.train[self.rng.random_range(0..n)].clone())
            .collect()
    }

    /// Mean loss over the training split.
    pub fn train_loss(&self) -> Result<f64> {
        Ok(evaluate(&self.model, &self.data.train)?.loss)
    }

    /// Runs one step: forward, backward, AdamW update, then the merge hook.
    pub fn step(&mut self) -> Result<StepOutput> {
        let t = self.step + 1;
        let lr = self.plan.lr_at(t)?;
        let batch = self.sample_batch();
        self.model.zero_grads();
        let loss = self.model.accumulate_gradients(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Numerical {
                step: t,
                detail: format!("minibatch loss is {loss}"),
            });
        }
        self.optimizer.step(self.model.trainable_parameters_mut(), lr)?;
        let hook = self.engine.step_hook(self.model.banks_mut(), t)?;
        for ev in &hook.events {
            if let Some(bank) = self.model.bank(ev.projection) {
                let name = bank.b_name(ev.absorbed_group);
                self.optimizer.state.forget(&name);
            }
        }
        if self.finished_at.is_none() && self.engine.schedule().budget > 0 && self.engine.finished()
        {
            self.finished_at = Some(t);
        }
        self.step = t;
        let record = StepRecord {
            step: t,
            phase: self.phase_at(t),
            loss,
            lr,
            live_groups: self
                .model
                .banks()
                .iter()
                .map(|b| (b.projection(), b.live_groups()))
                .collect(),
            params: self.model.adapter_param_count(),
        };
        Ok(StepOutput { record, hook })
    }

    pub fn evaluate(&self) -> Result<EvalRecord> {
        let split = if self.data.eval.is_empty() {
            &self.data.train
        } else {
            &self.data.eval
        };
        Ok(EvalRecord {
            step: self.step,
            metrics: evaluate(&self.model, split)?,
        })
    }

    fn ensure_initial_loss(&mut self) -> Result<f64> {
        match self.initial_train_loss {
            Some(v) => Ok(v),
            None => {
                let v = self.train_loss()?;
                self.initial_train_loss = Some(v);
                Ok(v)
            }
        }
    }

    /// Trains to `total_steps`, streaming progress into `sink`.
    pub fn run(&mut self, sink: &mut dyn RunSink) -> Result<RunReport> {
        self.run_to(self.plan.total_steps, sink)
    }

    /// Trains until `stop` steps are complete (capped at `total_steps`).
    ///
    /// The report covers only the steps taken by this call; losses and the
    /// final assignment describe the trainer's state when it returns.
    pub fn run_to(&mut self, stop: usize, sink: &mut dyn RunSink) -> Result<RunReport> {
        let initial = self.ensure_initial_loss()?;
        let stop = stop.min(self.plan.total_steps);
        let mut steps = Vec::new();
        let mut evals = Vec::new();
        let mut merges = Vec::new();
        let mut similarity = Vec::new();
        while self.step < stop {
            let out = self.step()?;
            sink.on_step(&out)?;
            let t = out.record.step;
            steps.push(out.record);
            merges.extend(out.hook.events);
            similarity.extend(out.hook.reports);
            let every = self.plan.eval_every;
            if (every > 0 && t % every == 0) || t == self.plan.total_steps {
                let rec = self.evaluate()?;
                sink.on_eval(&rec)?;
                evals.push(rec);
            }
        }
        let final_eval = match evals.last() {
            Some(r) => r.metrics,
            None => self.evaluate()?.metrics,
        };
        Ok(RunReport {
            initial_train_loss: initial,
            final_train_loss: self.train_loss()?,
            final_eval,
            steps,
            evals,
            merges,
            similarity,
            assignments: self
                .model
                .banks()
                .iter()
                .map(|b| b.snapshot_assignment())
                .collect(),
            final_params: self.model.adapter_param_count(),
        })
    }

    /// Steps without reporting until `stop` steps are complete.
    pub fn run_until(&mut self, stop: usize) -> Result<()> {
        self.ensure_initial_loss()?;
        while self.step < stop.min(self.plan.total_steps) {
            self.step()?;
        }
        Ok(())
    }

    /// Merges performed so far, summed over adapted types.
    pub fn merges_done(&self) -> usize {
        self.engine.states().iter().map(|s| s.merges_done).sum()
    }

    pub fn into_model(self) -> Model<T> {
        self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_shape() {
        let p = TrainPlan {
            total_steps: 1000,
            warmup_steps: 100,
            lr: 3e-4,
            ..TrainPlan::default()
        };
        assert_eq!(p.lr_at(100).unwrap(), 3e-4);
        assert_eq!(p.lr_at(1000).unwrap(), 0.0);
        assert!((p.lr_at(50).unwrap() - 1.5e-4).abs() < 1e-18);
        assert!((p.lr_at(550).unwrap() - 1.5e-4).abs() < 1e-12);
        assert!(p.lr_at(0).is_err());
        assert!(p.lr_at(1001).is_err());
    }

    #[test]
    fn no_warmup() {
        let p = TrainPlan {
            total_steps: 10,
            warmup_steps: 0,
            lr: 1.0,
            ..TrainPlan::default()
        };
        assert_eq!(p.lr_at(1).unwrap(), 0.9);
    }

    #[test]
    fn plan_must_fit_all_merges() {
        let p = TrainPlan {
            total_steps: 120,
            merge_start: 50,
            merge_interval: 10,
            merge_budget: 7,
            ..TrainPlan::default()
        };
        assert!(matches!(
            p.validate(AdapterMode::Aslora, 12),
            Err(Error::Config { .. })
        ));
        assert!(p.validate(AdapterMode::Lora, 12).is_ok());
        let ok = TrainPlan {
            total_steps: 121,
            ..p.clone()
        };
        assert!(ok.validate(AdapterMode::Aslora, 12).is_ok());
        let too_many = TrainPlan {
            merge_budget: 12,
            total_steps: 10_000,
            ..p
        };
        assert!(too_many.validate(AdapterMode::Aslora, 12).is_err());
    }

    #[test]
    fn non_adaptive_modes_never_merge() {
        let p = TrainPlan::default();
        assert_eq!(p.schedule(AdapterMode::FixedShare(3)).budget, 0);
        assert_eq!(p.schedule(AdapterMode::Aslora).budget, 8);
    }
}
