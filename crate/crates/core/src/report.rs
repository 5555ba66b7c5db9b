//! Run-directory artifacts.
//!
//! ```text
//! <run>/config.json       materialized config
//! <run>/metrics.csv       step,phase,loss,lr,live_groups_q,live_groups_v,params
//! <run>/merges.jsonl      one merge event per line
//! <run>/similarity.jsonl  one similarity report per type per firing step
//! <run>/eval.csv          step,loss,accuracy,mse
//! <run>/assignment.json   final layer -> group map per type
//! <run>/summary.json      losses and final counts
//! <run>/checkpoint/       manifest.json + tensors.bin
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{AssignmentSnapshot, GroupId, ProjectionType};
use crate::config::RunConfig;
use crate::error::Result;
use crate::task::Metrics;
use crate::train::{EvalRecord, Phase, RunReport, RunSink, StepOutput};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MERGES_FILE: &str = "merges.jsonl";
pub const SIMILARITY_FILE: &str = "similarity.jsonl";
pub const EVAL_FILE: &str = "eval.csv";
pub const ASSIGNMENT_FILE: &str = "assignment.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

const METRICS_HEADER: &str = "step,phase,loss,lr,live_groups_q,live_groups_v,params";
const EVAL_HEADER: &str = "step,loss,accuracy,mse";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Streams step, merge, similarity and eval records into a run directory.
pub struct RunWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
    merges: BufWriter<File>,
    similarity: BufWriter<File>,
    evals: BufWriter<File>,
    last_phase: Option<Phase>,
}

fn open(path: &Path, append: bool, header: Option<&str>) -> Result<BufWriter<File>> {
    let fresh = !append || !path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    let mut w = BufWriter::new(file);
    if let (true, Some(h)) = (fresh, header) {
        writeln!(w, "{h}")?;
    }
    Ok(w)
}

/// Drops rows whose step exceeds `step` so a resumed run can append cleanly.
fn truncate_after(path: &Path, step: usize, csv: bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let reader = BufReader::new(File::open(path)?);
    let mut keep = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let row_step = if csv {
            if i == 0 {
                keep.push(line);
                continue;
            }
            line.split(',').next().and_then(|s| s.parse::<usize>().ok())
        } else {
            serde_json::from_str::<serde_json::Value>(&line)
                .ok()
                .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
                .map(|s| s as usize)
        };
        if row_step.is_some_and(|s| s <= step) {
            keep.push(line);
        }
    }
    let mut out = String::new();
    for l in keep {
        out.push_str(&l);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

impl RunWriter {
    /// Starts a fresh run directory, writing the materialized config.
    pub fn create(dir: &Path, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), config.to_json() + "\n")?;
        Self::open_files(dir, false)
    }

    /// Reopens an existing run directory after a checkpoint taken at `step`.
    pub fn resume(dir: &Path, step: usize) -> Result<Self> {
        truncate_after(&dir.join(METRICS_FILE), step, true)?;
        truncate_after(&dir.join(EVAL_FILE), step, true)?;
        truncate_after(&dir.join(MERGES_FILE), step, false)?;
        truncate_after(&dir.join(SIMILARITY_FILE), step, false)?;
        Self::open_files(dir, true)
    }

    fn open_files(dir: &Path, append: bool) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: open(&dir.join(METRICS_FILE), append, Some(METRICS_HEADER))?,
            merges: open(&dir.join(MERGES_FILE), append, None)?,
            similarity: open(&dir.join(SIMILARITY_FILE), append, None)?,
            evals: open(&dir.join(EVAL_FILE), append, Some(EVAL_HEADER))?,
            last_phase: None,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.merges.flush()?;
        self.similarity.flush()?;
        self.evals.flush()?;
        Ok(())
    }

    /// Writes `assignment.json` and `summary.json` and flushes everything.
    ///
    /// `merges` is the run's total, which may exceed `report.merges` after a resume.
    pub fn finish(&mut self, report: &RunReport, merges: usize) -> Result<()> {
        write_assignment(&self.dir, &report.assignments)?;
        let summary = Summary {
            initial_train_loss: report.initial_train_loss,
            final_train_loss: report.final_train_loss,
            final_eval: report.final_eval,
            final_params: report.final_params,
            merges,
        };
        fs::write(
            self.dir.join(SUMMARY_FILE),
            serde_json::to_string_pretty(&summary)? + "\n",
        )?;
        self.flush()
    }
}

impl RunSink for RunWriter {
    fn on_step(&mut self, out: &StepOutput) -> Result<()> {
        let r = &out.record;
        let groups = |p: ProjectionType| {
            r.live_groups
                .iter()
                .find(|(q, _)| *q == p)
                .map(|(_, n)| n.to_string())
                .unwrap_or_default()
        };
        writeln!(
            self.metrics,
            "{},{},{},{},{},{},{}",
            r.step,
            r.phase.as_str(),
            r.loss,
            r.lr,
            groups(ProjectionType::Query),
            groups(ProjectionType::Value),
            r.params
        )?;
        for ev in &out.hook.events {
            writeln!(self.merges, "{}", serde_json::to_string(ev)?)?;
        }
        for rep in &out.hook.reports {
            writeln!(self.similarity, "{}", serde_json::to_string(rep)?)?;
        }
        if self.last_phase.is_some_and(|p| p != r.phase) {
            self.flush()?;
        }
        self.last_phase = Some(r.phase);
        Ok(())
    }

    fn on_eval(&mut self, rec: &EvalRecord) -> Result<()> {
        let m = &rec.metrics;
        writeln!(
            self.evals,
            "{},{},{},{}",
            rec.step,
            m.loss,
            opt(m.accuracy),
            opt(m.mse)
        )?;
        self.flush()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub final_eval: Metrics,
    pub final_params: usize,
    pub merges: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMap {
    pub id: GroupId,
    pub members: Vec<usize>,
}

/// One entry of `assignment.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentMap {
    #[serde(rename = "type")]
    pub projection: ProjectionType,
    pub layer_to_group: Vec<GroupId>,
    pub groups: Vec<GroupMap>,
}

impl From<&AssignmentSnapshot> for AssignmentMap {
    fn from(s: &AssignmentSnapshot) -> Self {
        let mut ids = s.layer_to_group.clone();
        ids.sort();
        ids.dedup();
        let groups = ids
            .into_iter()
            .map(|id| GroupMap {
                id,
                members: (0..s.layer_to_group.len())
                    .filter(|&l| s.layer_to_group[l] == id)
                    .collect(),
            })
            .collect();
        Self {
            projection: s.projection,
            layer_to_group: s.layer_to_group.clone(),
            groups,
        }
    }
}

pub fn write_assignment(dir: &Path, snapshots: &[AssignmentSnapshot]) -> Result<()> {
    let maps: Vec<AssignmentMap> = snapshots.iter().map(AssignmentMap::from).collect();
    fs::write(
        dir.join(ASSIGNMENT_FILE),
        serde_json::to_string_pretty(&maps)? + "\n",
    )?;
    Ok(())
}

pub fn read_assignment(dir: &Path) -> Result<Vec<AssignmentMap>> {
    Ok(serde_json::from_str(&fs::read_to_string(
        dir.join(ASSIGNMENT_FILE),
    )?)?)
}

pub fn read_summary(dir: &Path) -> Result<Summary> {
    Ok(serde_json::from_str(&fs::read_to_string(
        dir.join(SUMMARY_FILE),
    )?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignment_groups_from_table() {
        let snap = AssignmentSnapshot {
            projection: ProjectionType::Value,
            layer_to_group: vec![GroupId(1), GroupId(1), GroupId(2)],
        };
        let m = AssignmentMap::from(&snap);
        assert_eq!(m.groups.len(), 2);
        assert_eq!(m.groups[0].members, vec![0, 1]);
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.starts_with(r#"{"type":"value""#));
    }

    #[test]
    fn truncation_keeps_header_and_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "step,x\n1,a\n2,b\n3,c\n").unwrap();
        truncate_after(&p, 2, true).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "step,x\n1,a\n2,b\n");
        let j = dir.path().join("m.jsonl");
        fs::write(&j, "{\"step\":5}\n{\"step\":9}\n").unwrap();
        truncate_after(&j, 6, false).unwrap();
        assert_eq!(fs::read_to_string(&j).unwrap(), "{\"step\":5}\n");
    }
}
