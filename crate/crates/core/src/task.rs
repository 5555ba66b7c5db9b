//! Deterministic synthetic tasks.
//!
//! * `copy_class`: one marker token from `0..C` is planted among filler
//!   tokens; the label is the marker's class.
//! * `layerwise_probe(k)`: `k` value tokens from `0..8` are planted; the label
//!   says whether their values sum above the midpoint `3.5·k`.
//! * `seq_regression`: the target is the mean token value over the sequence.
//!
//! Classification labels are balanced by construction: example `i` is drawn
//! for class `i mod C`. Label noise replaces the sequence with one drawn for a
//! different class while keeping the label, so balance survives.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{hex, Model, TaskHead};
use crate::tensor::Scalar;

/// Number of distinct value tokens used by the probe and regression tasks.
pub const VALUE_LEVELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CopyClass,
    LayerwiseProbe { depth: usize },
    SeqRegression,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::CopyClass => "copy_class",
            TaskKind::LayerwiseProbe { .. } => "layerwise_probe",
            TaskKind::SeqRegression => "seq_regression",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub num_train: usize,
    pub num_eval: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Class count for `copy_class`; the probe is always binary.
    pub num_classes: usize,
    /// Fraction of mislabeled examples, or the target noise std for regression.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::LayerwiseProbe { depth: 2 },
            num_train: 1000,
            num_eval: 200,
            seq_len: 16,
            vocab_size: 64,
            num_classes: 2,
            noise_rate: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Real(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

impl Dataset {
    /// SHA-256 over the token ids and targets of both splits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (tag, split) in [(0u8, &self.train), (1u8, &self.eval)] {
            h.update([tag]);
            for ex in split {
                for &t in &ex.tokens {
                    h.update((t as u32).to_le_bytes());
                }
                match ex.target {
                    Target::Class(c) => h.update((c as u64).to_le_bytes()),
                    Target::Real(v) => h.update(v.to_le_bytes()),
                }
            }
        }
        hex(&h.finalize())
    }
}

impl TaskSpec {
    /// Head the model needs for this task.
    pub fn head(&self) -> TaskHead {
        match self.kind {
            TaskKind::CopyClass => TaskHead::Classification(self.num_classes),
            TaskKind::LayerwiseProbe { .. } => TaskHead::Classification(2),
            TaskKind::SeqRegression => TaskHead::Regression,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_train == 0 {
            return Err(Error::config("num_train", "must be positive"));
        }
        if self.seq_len == 0 {
            return Err(Error::config("seq_len", "must be positive"));
        }
        if !(self.noise_rate.is_finite() && self.noise_rate >= 0.0) {
            return Err(Error::config("noise_rate", "must be non-negative"));
        }
        match self.kind {
            TaskKind::CopyClass => {
                if self.num_classes < 2 {
                    return Err(Error::config("num_classes", "need at least two classes"));
                }
                if self.vocab_size <= self.num_classes {
                    return Err(Error::config(
                        "vocab_size",
                        "needs room for filler tokens beyond the class markers",
                    ));
                }
                if self.noise_rate > 1.0 {
                    return Err(Error::config("noise_rate", "must be at most 1"));
                }
            }
            TaskKind::LayerwiseProbe { depth } => {
                if depth == 0 || depth > self.seq_len {
                    return Err(Error::config(
                        "probe_depth",
                        format!("must be in 1..={}", self.seq_len),
                    ));
                }
                if self.vocab_size <= VALUE_LEVELS {
                    return Err(Error::config(
                        "vocab_size",
                        format!("must exceed {VALUE_LEVELS}"),
                    ));
                }
                if self.noise_rate > 1.0 {
                    return Err(Error::config("noise_rate", "must be at most 1"));
                }
            }
            TaskKind::SeqRegression => {
                if self.vocab_size < 2 {
                    return Err(Error::config("vocab_size", "need at least two tokens"));
                }
            }
        }
        Ok(())
    }

    fn filler<R: Rng>(&self, rng: &mut R, reserved: usize) -> usize {
        rng.random_range(reserved..self.vocab_size)
    }

    /// A sequence whose clean label is `class`.
    fn draw_class<R: Rng>(&self, rng: &mut R, class: usize) -> Vec<usize> {
        match self.kind {
            TaskKind::CopyClass => {
                let mut toks: Vec<usize> = (0..self.seq_len)
                    .map(|_| self.filler(rng, self.num_classes))
                    .collect();
                let at = rng.random_range(0..self.seq_len);
                toks[at] = class;
                toks
            }
            TaskKind::LayerwiseProbe { depth } => loop {
                let mut toks: Vec<usize> = (0..self.seq_len)
                    .map(|_| self.filler(rng, VALUE_LEVELS))
                    .collect();
                let slots = rand::seq::index::sample(rng, self.seq_len, depth);
                let mut twice_sum = 0;
                for at in slots.iter() {
                    let v = rng.random_range(0..VALUE_LEVELS);
                    toks[at] = v;
                    twice_sum += 2 * v;
                }
                let midpoint = depth * (VALUE_LEVELS - 1);
                if twice_sum == midpoint {
                    continue;
                }
                if usize::from(twice_sum > midpoint) == class {
                    return toks;
                }
            },
            TaskKind::SeqRegression => unreachable!("regression has no classes"),
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R, index: usize) -> Example {
        if let TaskKind::SeqRegression = self.kind {
            let tokens: Vec<usize> = (0..self.seq_len)
                .map(|_| rng.random_range(0..self.vocab_size))
                .collect();
            let noise: f64 = StandardNormal.sample(rng);
            let target = regression_target(&tokens) + self.noise_rate * noise;
            return Example {
                tokens,
                target: Target::Real(target),
            };
        }
        let classes = self.head().outputs();
        let label = index % classes;
        let noisy = rng.random::<f64>() < self.noise_rate;
        let drawn_for = if noisy {
            (label + rng.random_range(1..classes)) % classes
        } else {
            label
        };
        Example {
            tokens: self.draw_class(rng, drawn_for),
            target: Target::Class(label),
        }
    }

    /// Generates both splits. Pure in `self`; no sequence appears twice.
    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut seen = HashSet::new();
        let mut split = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Example>> {
            let mut out = Vec::with_capacity(n);
            let mut attempts = 0usize;
            while out.len() < n {
                attempts += 1;
                if attempts > 100 * n + 1000 {
                    return Err(Error::config(
                        "seq_len",
                        "too few distinct sequences for the requested dataset size",
                    ));
                }
                let ex = self.draw(rng, out.len());
                if seen.insert(ex.tokens.clone()) {
                    out.push(ex);
                }
            }
            Ok(out)
        };
        let train = split(self.num_train, &mut rng)?;
        let eval = split(self.num_eval, &mut rng)?;
        Ok(Dataset { train, eval })
    }
}

/// Mean of `(token mod 8)/7 − 0.5` over the sequence.
pub fn regression_target(tokens: &[usize]) -> f64 {
    let scale = (VALUE_LEVELS - 1) as f64;
    tokens
        .iter()
        .map(|&t| (t % VALUE_LEVELS) as f64 / scale - 0.5)
        .sum::<f64>()
        / tokens.len() as f64
}

/// Evaluation metrics over one split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
}

const EVAL_CHUNK: usize = 64;

/// Mean loss plus accuracy (classification) or MSE (regression). Records no tape.
pub fn evaluate<T: Scalar>(model: &Model<T>, examples: &[Example]) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let head = model.config().task_head;
    let (mut loss, mut hits, mut sq) = (0.0, 0usize, 0.0);
    for chunk in examples.chunks(EVAL_CHUNK) {
        loss += model.eval_loss(chunk)? * chunk.len() as f64;
        let out = model.predict(chunk)?;
        let k = head.outputs();
        for (row, ex) in out.data().chunks(k).zip(chunk) {
            match ex.target {
                Target::Class(c) => {
                    let best = row
                        .iter()
                        .enumerate()
                        .fold(0, |best, (j, v)| if *v > row[best] { j } else { best });
                    hits += usize::from(best == c);
                }
                Target::Real(y) => {
                    let e = row[0].as_f64() - y;
                    sq += e * e;
                }
            }
        }
    }
    let n = examples.len() as f64;
    Ok(match head {
        TaskHead::Classification(_) => Metrics {
            loss: loss / n,
            accuracy: Some(hits as f64 / n),
            mse: None,
        },
        TaskHead::Regression => Metrics {
            loss: loss / n,
            accuracy: None,
            mse: Some(sq / n),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            num_train: 1000,
            num_eval: 100,
            ..TaskSpec::default()
        }
    }

    fn class_counts(ex: &[Example], k: usize) -> Vec<usize> {
        let mut c = vec![0; k];
        for e in ex {
            if let Target::Class(l) = e.target {
                c[l] += 1;
            }
        }
        c
    }

    #[test]
    fn balanced_binary() {
        for kind in [TaskKind::CopyClass, TaskKind::LayerwiseProbe { depth: 3 }] {
            let ds = spec(kind).generate().unwrap();
            assert_eq!(class_counts(&ds.train, 2), vec![500, 500]);
        }
    }

    #[test]
    fn balance_survives_noise() {
        let s = TaskSpec {
            noise_rate: 0.3,
            num_classes: 3,
            kind: TaskKind::CopyClass,
            num_train: 301,
            ..TaskSpec::default()
        };
        let c = class_counts(&s.generate().unwrap().train, 3);
        assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1, "{c:?}");
    }

    #[test]
    fn deterministic_and_disjoint() {
        let s = spec(TaskKind::SeqRegression);
        let a = s.generate().unwrap();
        assert_eq!(a, s.generate().unwrap());
        assert_eq!(a.digest(), s.generate().unwrap().digest());
        let train: HashSet<_> = a.train.iter().map(|e| &e.tokens).collect();
        assert!(a.eval.iter().all(|e| !train.contains(&e.tokens)));
        let other = TaskSpec { seed: 1, ..s }.generate().unwrap();
        assert_ne!(a.digest(), other.digest());
    }

    #[test]
    fn probe_labels_follow_planted_sum() {
        let s = spec(TaskKind::LayerwiseProbe { depth: 3 });
        for ex in s.generate().unwrap().train {
            let sum: usize = ex.tokens.iter().filter(|&&t| t < VALUE_LEVELS).sum();
            let count = ex.tokens.iter().filter(|&&t| t < VALUE_LEVELS).count();
            assert_eq!(count, 3);
            assert_eq!(ex.target, Target::Class(usize::from(2 * sum > 21)));
        }
    }

    #[test]
    fn copy_class_plants_one_marker() {
        let s = TaskSpec {
            num_classes: 4,
            ..spec(TaskKind::CopyClass)
        };
        for ex in s.generate().unwrap().train {
            let markers: Vec<_> = ex.tokens.iter().filter(|&&t| t < 4).collect();
            assert_eq!(markers.len(), 1);
            assert_eq!(ex.target, Target::Class(*markers[0]));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = [
            TaskSpec {
                kind: TaskKind::LayerwiseProbe { depth: 17 },
                ..TaskSpec::default()
            },
            TaskSpec {
                vocab_size: 2,
                kind: TaskKind::CopyClass,
                ..TaskSpec::default()
            },
            TaskSpec {
                seq_len: 1,
                vocab_size: 3,
                kind: TaskKind::SeqRegression,
                ..TaskSpec::default()
            },
        ];
        for s in bad {
            assert!(matches!(s.generate(), Err(Error::Config { .. })), "{s:?}");
        }
    }
}
