//! Commands behind the `aslora` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use aslora_core::checkpoint::{self, Manifest, MANIFEST_FILE};
use aslora_core::report::{RunWriter, CHECKPOINT_DIR, CONFIG_FILE};
use aslora_core::{
    trainable_param_count, AdapterConfig, AdapterMode, Error, Metrics, ModeName, ProjectionType,
    Result, RunConfig, RunReport, Trainer,
};
use serde::{Deserialize, Serialize};

/// Environment variable naming the directory that holds run directories.
pub const RUNS_ENV: &str = "ASLORA_RUNS";

pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// `<root>/<config file stem><suffix>`.
pub fn default_run_dir(config_path: &Path, suffix: &str) -> PathBuf {
    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    runs_root().join(format!("{stem}{suffix}"))
}

/// Result of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    /// Report for the steps taken by this invocation.
    pub report: RunReport,
    pub merges: usize,
}

/// Trains `config` into `dir`, checkpointing every `checkpoint_every` steps and at the end.
///
/// With `resume`, training continues from `dir/checkpoint` and the step
/// files are cut back to that step before new rows are appended.
pub fn train_in_dir(config: &RunConfig, dir: &Path, resume: bool) -> Result<TrainOutcome> {
    config.validate()?;
    let ck = dir.join(CHECKPOINT_DIR);
    let (mut trainer, mut writer) = if resume {
        let trainer = Trainer::from_checkpoint(config, &ck)?;
        let writer = RunWriter::resume(dir, trainer.step_count())?;
        log::info!("resuming {} at step {}", dir.display(), trainer.step_count());
        (trainer, writer)
    } else {
        (config.build_trainer()?, RunWriter::create(dir, config)?)
    };
    let hash = config.hash();
    let total = config.total_steps;
    let every = config.checkpoint_every;
    let mut report = None;
    let mut taken = Vec::new();
    while !trainer.done() {
        let stop = trainer
            .step_count()
            .checked_div(every)
            .map_or(total, |k| (k + 1) * every);
        let chunk = trainer.run_to(stop, &mut writer)?;
        writer.flush()?;
        checkpoint::save(&trainer, &hash, &ck)?;
        taken.extend(chunk.steps.iter().map(|s| s.step));
        log::info!(
            "step {}/{}: loss {:.4}",
            trainer.step_count(),
            total,
            chunk.steps.last().map_or(f64::NAN, |s| s.loss)
        );
        report = Some(match report.take() {
            None => chunk,
            Some(prev) => merge_reports(prev, chunk),
        });
    }
    let report = match report {
        Some(r) => r,
        // Already complete: report the finished state without stepping.
        None => trainer.run_to(total, &mut writer)?,
    };
    let merges = trainer.merges_done();
    writer.finish(&report, merges)?;
    Ok(TrainOutcome {
        run_dir: dir.to_path_buf(),
        report,
        merges,
    })
}

fn merge_reports(mut a: RunReport, b: RunReport) -> RunReport {
    a.steps.extend(b.steps);
    a.evals.extend(b.evals);
    a.merges.extend(b.merges);
    a.similarity.extend(b.similarity);
    a.final_train_loss = b.final_train_loss;
    a.final_eval = b.final_eval;
    a.assignments = b.assignments;
    a.final_params = b.final_params;
    a
}

pub fn cmd_train(config_path: &Path, run_dir: Option<&Path>, resume: bool) -> Result<TrainOutcome> {
    let dir = match run_dir {
        Some(d) => d.to_path_buf(),
        None => default_run_dir(config_path, ""),
    };
    let config = if resume && !config_path.exists() {
        RunConfig::load(&dir.join(CONFIG_FILE))?
    } else {
        RunConfig::load(config_path)?
    };
    train_in_dir(&config, &dir, resume)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 12 layers, d = 768, r = 8, query and value adapted, N = 7.
    Roberta,
    /// 32 layers, d = 4096, r = 64, query and value adapted, N = 16.
    Llama,
}

impl Preset {
    pub fn config(self) -> RunConfig {
        match self {
            Preset::Roberta => RunConfig {
                num_layers: 12,
                model_dim: 768,
                rank: 8,
                alpha: 16.0,
                merge_budget: 7,
                ..RunConfig::default()
            },
            Preset::Llama => RunConfig {
                num_layers: 32,
                model_dim: 4096,
                rank: 64,
                alpha: 128.0,
                merge_budget: 16,
                share_n: 2,
                compare_pairs: vec![(2, 16)],
                ..RunConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRow {
    pub method: String,
    pub params: usize,
}

/// Trainable adapter counts for every mode the config can express.
pub fn cmd_params(config: &RunConfig) -> Result<Vec<ParamRow>> {
    let base = config.adapter_config();
    let with = |mode| AdapterConfig {
        mode,
        ..base.clone()
    };
    let mut rows = vec![
        ParamRow {
            method: "lora".into(),
            params: trainable_param_count(&with(AdapterMode::Lora), 0)?,
        },
        ParamRow {
            method: "shared_a".into(),
            params: trainable_param_count(&with(AdapterMode::SharedA), 0)?,
        },
    ];
    let mut ns: Vec<usize> = std::iter::once(config.share_n)
        .chain(config.compare_pairs.iter().map(|p| p.0))
        .collect();
    ns.sort_unstable();
    ns.dedup();
    for n in ns {
        let cfg = with(AdapterMode::FixedShare(n));
        cfg.validate()?;
        rows.push(ParamRow {
            method: AdapterMode::FixedShare(n).label(),
            params: trainable_param_count(&cfg, 0)?,
        });
    }
    rows.push(ParamRow {
        method: format!("aslora(N={})", config.merge_budget),
        params: trainable_param_count(&with(AdapterMode::Aslora), config.merge_budget)?,
    });
    Ok(rows)
}

/// `1234567` -> `1,234,567`.
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn format_params(rows: &[ParamRow]) -> String {
    let mut s = format!("{:<18}{:>14}\n", "method", "trainable");
    for r in rows {
        let _ = writeln!(s, "{:<18}{:>14}", r.method, thousands(r.params));
    }
    s
}

fn eval_metric(m: &Metrics) -> (&'static str, f64) {
    match (m.accuracy, m.mse) {
        (Some(a), _) => ("accuracy", a),
        (None, Some(e)) => ("mse", e),
        _ => ("loss", m.loss),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub budget: usize,
    pub params: usize,
    pub final_train_loss: f64,
    pub eval_metric: String,
    pub eval_value: f64,
}

/// Seed of the run keyed by `key` within a sweep or comparison.
pub fn derived_seed(base: u64, key: usize) -> u64 {
    base.wrapping_add(key as u64)
}

/// One adaptive run per budget, in increasing order; writes `sweep.csv`.
pub fn cmd_sweep(config: &RunConfig, budgets: &[usize], out: &Path) -> Result<Vec<SweepRow>> {
    let mut budgets = budgets.to_vec();
    budgets.sort_unstable();
    budgets.dedup();
    if budgets.is_empty() {
        return Err(Error::Config {
            field: "budgets".into(),
            message: "at least one budget is required".into(),
        });
    }
    let configs = budgets
        .iter()
        .map(|&n| {
            if n >= config.num_layers {
                return Err(Error::Config {
                    field: "budgets".into(),
                    message: format!("N = {n} must be below num_layers ({})", config.num_layers),
                });
            }
            let mut c = config.clone();
            c.mode = ModeName::Aslora;
            c.merge_budget = n;
            c.seed = derived_seed(config.seed, n);
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for (n, c) in budgets.iter().zip(&configs) {
        log::info!("sweep: N = {n}");
        let o = train_in_dir(c, &out.join(format!("N{n}")), false)?;
        let (name, value) = eval_metric(&o.report.final_eval);
        rows.push(SweepRow {
            budget: *n,
            params: o.report.final_params,
            final_train_loss: o.report.final_train_loss,
            eval_metric: name.into(),
            eval_value: value,
        });
    }
    let mut csv = String::from("N,params,final_train_loss,eval_metric,eval_value\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.budget, r.params, r.final_train_loss, r.eval_metric, r.eval_value
        );
    }
    fs::write(out.join("sweep.csv"), csv)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub pair: usize,
    pub method: String,
    pub params: usize,
    pub live_groups_q: Option<usize>,
    pub live_groups_v: Option<usize>,
    pub final_train_loss: f64,
    pub eval_metric: String,
    pub eval_value: f64,
}

fn live_groups(o: &TrainOutcome, p: ProjectionType) -> Option<usize> {
    o.report
        .assignments
        .iter()
        .find(|a| a.projection == p)
        .map(|a| a.distinct_groups())
}

/// Fixed sharing against adaptive merging at matched budgets; writes `compare.csv`.
///
/// Both runs of a pair share a seed. Parameter counts within a pair must agree.
pub fn cmd_compare(config: &RunConfig, out: &Path) -> Result<Vec<CompareRow>> {
    config.validate()?;
    if config.compare_pairs.is_empty() {
        return Err(Error::Config {
            field: "compare_pairs".into(),
            message: "no pairs to compare".into(),
        });
    }
    let mut plans = Vec::new();
    for (i, &(n, budget)) in config.compare_pairs.iter().enumerate() {
        let seed = derived_seed(config.seed, i);
        let mut fixed = config.clone();
        fixed.set_mode(AdapterMode::FixedShare(n));
        fixed.seed = seed;
        let mut adaptive = config.clone();
        adaptive.set_mode(AdapterMode::Aslora);
        adaptive.merge_budget = budget;
        adaptive.seed = seed;
        fixed.validate()?;
        adaptive.validate()?;
        plans.push((i, fixed, adaptive));
    }
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for (i, fixed, adaptive) in plans {
        let mut pair = Vec::new();
        for c in [fixed, adaptive] {
            let label = match c.adapter_mode() {
                AdapterMode::Aslora => format!("aslora(N={})", c.merge_budget),
                m => m.label(),
            };
            log::info!("compare: pair {i} {label}");
            let dir = out.join(format!("pair{i}-{}", label.replace(['(', ')', '='], "")));
            let o = train_in_dir(&c, &dir, false)?;
            let (name, value) = eval_metric(&o.report.final_eval);
            pair.push(CompareRow {
                pair: i,
                method: label,
                params: o.report.final_params,
                live_groups_q: live_groups(&o, ProjectionType::Query),
                live_groups_v: live_groups(&o, ProjectionType::Value),
                final_train_loss: o.report.final_train_loss,
                eval_metric: name.into(),
                eval_value: value,
            });
        }
        if pair[0].params != pair[1].params {
            return Err(Error::Contract(format!(
                "pair {i}: {} has {} trainable entries but {} has {}",
                pair[0].method, pair[0].params, pair[1].method, pair[1].params
            )));
        }
        rows.extend(pair);
    }
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut csv = String::from(
        "pair,method,params,live_groups_q,live_groups_v,final_train_loss,eval_metric,eval_value\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.pair,
            r.method,
            r.params,
            opt(r.live_groups_q),
            opt(r.live_groups_v),
            r.final_train_loss,
            r.eval_metric,
            r.eval_value
        );
    }
    fs::write(out.join("compare.csv"), csv)?;
    Ok(rows)
}

pub fn format_compare(rows: &[CompareRow]) -> String {
    let mut s = format!(
        "{:<6}{:<16}{:>10}{:>6}{:>6}{:>12}{:>12}\n",
        "pair", "method", "params", "q", "v", "train_loss", "eval"
    );
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
    for r in rows {
        let _ = writeln!(
            s,
            "{:<6}{:<16}{:>10}{:>6}{:>6}{:>12.5}{:>12.4}",
            r.pair,
            r.method,
            thousands(r.params),
            opt(r.live_groups_q),
            opt(r.live_groups_v),
            r.final_train_loss,
            r.eval_value
        );
    }
    for pair in rows.chunks(2) {
        if let [fixed, adaptive] = pair {
            let better = if fixed.eval_metric == "mse" {
                adaptive.eval_value <= fixed.eval_value
            } else {
                adaptive.eval_value >= fixed.eval_value
            };
            let _ = writeln!(
                s,
                "pair {}: adaptive {} fixed on {}",
                fixed.pair,
                if better { "matches or beats" } else { "trails" },
                fixed.eval_metric
            );
        }
    }
    s
}

/// Human-readable view of a checkpoint manifest. `path` may be a run directory.
pub fn cmd_inspect(path: &Path) -> Result<String> {
    let dir = if path.join(MANIFEST_FILE).exists() {
        path.to_path_buf()
    } else {
        path.join(CHECKPOINT_DIR)
    };
    let m = Manifest::load(&dir)?;
    let mut s = String::new();
    let _ = writeln!(s, "checkpoint    {}", dir.display());
    let _ = writeln!(s, "format        {}", m.format);
    let _ = writeln!(s, "step          {}", m.step);
    let _ = writeln!(s, "config hash   {}", m.config_hash);
    let _ = writeln!(
        s,
        "rng           chacha8 stream {} word {} seed {}",
        m.rng.stream, m.rng.word_pos, m.rng.seed
    );
    let _ = writeln!(s, "optimizer     step {}, {} moment pairs", m.optimizer_step, m.optimizer_keys.len());
    if let Some(f) = m.finished_at {
        let _ = writeln!(s, "merging done  step {f}");
    }
    for b in &m.banks {
        let groups: Vec<String> = b
            .groups
            .iter()
            .map(|g| format!("{}:{:?}", g.id, g.members))
            .collect();
        let _ = writeln!(s, "{:<6} {} groups  {}", b.projection.as_str(), b.groups.len(), groups.join(" "));
    }
    for st in &m.merge_states {
        let _ = writeln!(
            s,
            "{:<6} merges done {}, remaining {}, tracked averages {}",
            st.projection.as_str(),
            st.merges_done,
            st.remaining,
            st.averages.len()
        );
    }
    let _ = writeln!(s, "payload       {} ({} bytes, {} tensors)", m.payload, m.payload_bytes, m.tensors.len());
    for t in &m.tensors {
        let _ = writeln!(s, "  {:<24} {:<12} @{}", t.name, format!("{:?}", t.shape), t.offset);
    }
    Ok(s)
}
