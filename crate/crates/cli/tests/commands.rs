use std::fs;
use std::process::Command;

use aslora_cli::{
    cmd_compare, cmd_inspect, cmd_params, cmd_sweep, cmd_train, format_params, thousands,
    train_in_dir, Preset,
};
use aslora_core::report::{read_assignment, read_summary, CONFIG_FILE, MERGES_FILE, METRICS_FILE};
use aslora_core::{Error, RunConfig};

fn tiny() -> RunConfig {
    RunConfig {
        num_layers: 4,
        model_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        vocab_size: 32,
        max_seq_len: 8,
        rank: 4,
        alpha: 8.0,
        seq_len: 8,
        num_train: 64,
        num_eval: 16,
        batch_size: 4,
        total_steps: 60,
        merge_start: 10,
        merge_interval: 5,
        merge_budget: 2,
        warmup_steps: 5,
        eval_every: 20,
        share_n: 2,
        compare_pairs: vec![(2, 2)],
        ..RunConfig::default()
    }
}

#[test]
fn thousands_separators() {
    assert_eq!(thousands(0), "0");
    assert_eq!(thousands(999), "999");
    assert_eq!(thousands(1000), "1,000");
    assert_eq!(thousands(33_554_432), "33,554,432");
}

#[test]
fn params_table_lists_every_mode() {
    let rows = cmd_params(&Preset::Roberta.config()).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(
        names,
        ["lora", "shared_a", "fixed_share(2)", "fixed_share(3)", "fixed_share(6)", "aslora(N=7)"]
    );
    let text = format_params(&rows);
    assert!(text.contains("294,912"));
    assert!(text.contains("159,744"));
}

#[test]
fn resuming_a_finished_run_drops_stale_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        checkpoint_every: 25,
        ..tiny()
    };
    let run = dir.path().join("run");
    train_in_dir(&cfg, &run, false).unwrap();
    let metrics = fs::read_to_string(run.join(METRICS_FILE)).unwrap();
    let summary = read_summary(&run).unwrap();
    fs::write(run.join(METRICS_FILE), metrics.clone() + "61,final,0,0,1,1,0\n").unwrap();
    let o = train_in_dir(&cfg, &run, true).unwrap();
    assert!(o.report.steps.is_empty());
    assert_eq!(fs::read_to_string(run.join(METRICS_FILE)).unwrap(), metrics);
    assert_eq!(read_summary(&run).unwrap(), summary);
}

#[test]
fn resume_from_mid_run_checkpoint_reproduces_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        checkpoint_every: 20,
        ..tiny()
    };
    let straight = dir.path().join("straight");
    train_in_dir(&cfg, &straight, false).unwrap();

    let run = dir.path().join("run");
    let mut tr = cfg.build_trainer().unwrap();
    let mut writer = aslora_core::report::RunWriter::create(&run, &cfg).unwrap();
    tr.run_to(20, &mut writer).unwrap();
    writer.flush().unwrap();
    aslora_core::checkpoint::save(&tr, &cfg.hash(), &run.join("checkpoint")).unwrap();
    // Rows past the checkpoint, as if the process died before the next one.
    tr.run_to(33, &mut writer).unwrap();
    writer.flush().unwrap();
    drop(writer);

    let out = train_in_dir(&cfg, &run, true).unwrap();
    assert_eq!(out.report.steps.first().unwrap().step, 21);
    for f in [METRICS_FILE, MERGES_FILE, "eval.csv", "similarity.jsonl"] {
        assert_eq!(
            fs::read(straight.join(f)).unwrap(),
            fs::read(run.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(read_summary(&run).unwrap(), read_summary(&straight).unwrap());
}

#[test]
fn train_from_file_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.json");
    fs::write(&cfg_path, tiny().to_json()).unwrap();
    let run = dir.path().join("out");
    let o = cmd_train(&cfg_path, Some(&run), false).unwrap();
    assert_eq!(o.merges, 4);
    let summary = read_summary(&run).unwrap();
    assert_eq!(summary.merges, 4);
    assert_eq!(summary.final_params, 2 * 3 * 16 * 4);
    let maps = read_assignment(&run).unwrap();
    assert!(maps.iter().all(|m| m.groups.len() == 2));
    let back = RunConfig::load(&run.join(CONFIG_FILE)).unwrap();
    assert_eq!(back, tiny());
    let metrics = fs::read_to_string(run.join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().count(), 61);
    let text = cmd_inspect(&run).unwrap();
    assert!(text.contains("step          60"), "{text}");
}

#[test]
fn sweep_rejects_budget_at_layer_count_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let err = cmd_sweep(&tiny(), &[0, 4], &out).unwrap_err();
    assert!(matches!(err, Error::Config { .. }), "{err}");
    assert!(!out.exists());
}

#[test]
fn sweep_sorts_budgets_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let rows = cmd_sweep(&tiny(), &[2, 0, 2, 1], &out).unwrap();
    let budgets: Vec<usize> = rows.iter().map(|r| r.budget).collect();
    assert_eq!(budgets, [0, 1, 2]);
    let dr = 16 * 4;
    let params: Vec<usize> = rows.iter().map(|r| r.params).collect();
    assert_eq!(params, [2 * 5 * dr, 2 * 4 * dr, 2 * 3 * dr]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("N,params,final_train_loss,eval_metric"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn compare_pairs_share_parameter_counts() {
    let dir = tempfile::tempdir().unwrap();
    let rows = cmd_compare(&tiny(), dir.path()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].method, "fixed_share(2)");
    assert_eq!(rows[1].method, "aslora(N=2)");
    assert_eq!(rows[0].params, rows[1].params);
    assert_eq!(rows[0].live_groups_q, rows[1].live_groups_q);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_aslora");
    let ok = Command::new(bin).args(["params", "--preset", "llama"]).output().unwrap();
    assert!(ok.status.success());
    let out = String::from_utf8(ok.stdout).unwrap();
    assert!(out.contains("33,554,432") && out.contains("8,912,896"), "{out}");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"rank": 8, "no_such_field": 1}"#).unwrap();
    let st = Command::new(bin).arg("params").arg(&bad).output().unwrap().status;
    assert_eq!(st.code(), Some(2));

    let missing = dir.path().join("missing.json");
    let st = Command::new(bin).arg("params").arg(&missing).output().unwrap().status;
    assert_eq!(st.code(), Some(4));
}
