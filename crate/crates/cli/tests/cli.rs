use std::path::Path;
use std::process::{Command, Output};

fn embp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.cfg");
    std::fs::write(
        &path,
        "[experiment]\nblock_len = 40\nmemory = 2\nsnr_db = 3, 9\nblocks = 30\n\n[detectors]\nlist = embp, bp_coherent, map_coherent, map_pilot:0.1\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn sweep_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = embp(&["sweep", "--config", &cfg, "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let stderr = String::from_utf8_lossy(&o.stderr);
        assert!(stderr.contains("seed = 7"));
    }
    let a = std::fs::read(a).unwrap();
    assert_eq!(a, std::fs::read(b).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("snr_db,blocks,embp_ber,"));
}

#[test]
fn different_seeds_differ() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = |seed: &str| embp(&["sweep", "--config", &cfg, "--seed", seed]).stdout;
    assert_ne!(run("1"), run("2"));
}

#[test]
fn dump_blocks_writes_one_record_per_block_and_snr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let dump = dir.path().join("blocks.jsonl");
    let o = embp(&["sweep", "--config", &cfg, "--dump-blocks", dump.to_str().unwrap()]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(dump).unwrap();
    assert_eq!(text.lines().count(), 60);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(first.get("snr_db").is_some());
}

#[test]
fn trained_schedule_loads_in_eval_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let sched = dir.path().join("learned.txt");
    let log = dir.path().join("log.csv");
    let o = embp(&[
        "train",
        "--config",
        &cfg,
        "--objective",
        "mse_h",
        "--T",
        "3",
        "--kem",
        "24",
        "--batches",
        "4",
        "--batch-size",
        "8",
        "--validation-blocks",
        "8",
        "--schedule-out",
        sched.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(log).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.starts_with("batch,loss,k_prime,validation_mse"));

    let o = embp(&["eval-schedule", "--config", &cfg, "--schedule", sched.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 3);
}

#[test]
fn pruned_training_hits_the_update_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let sched = dir.path().join("pruned.txt");
    let o = embp(&[
        "train", "--config", &cfg, "--T", "4", "--kem", "10", "--batches", "3", "--batch-size", "4",
        "--validation-blocks", "0", "--schedule-out", sched.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("10 raw updates per block"));
}

#[test]
fn iters_emits_one_row_per_iteration() {
    let o = embp(&[
        "iters",
        "--set",
        "experiment.blocks=10",
        "--set",
        "experiment.snr_db=10",
        "--schedule",
        "s=serial:5",
        "--schedule",
        "p=parallel:5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().next().unwrap(), "snr_db,t,s_mse,s_stderr,p_mse,p_stderr");
    assert_eq!(out.lines().count(), 7);
}

#[test]
fn selftest_passes() {
    let o = embp(&["selftest"]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn bad_input_is_rejected() {
    let o = embp(&["sweep", "--no-such-flag"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let o = embp(&["frobnicate"]);
    assert!(!o.status.success());

    let o = embp(&["sweep", "--set", "experiment.bogus=1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));

    let o = embp(&["sweep", "--set", "experiment.blocks=0"]);
    assert!(!o.status.success());

    let o = embp(&["eval-schedule", "--schedule", "/nonexistent/schedule.txt"]);
    assert!(!o.status.success());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["sweep_l2.ini", "iters_l5.ini"] {
        let cfg = dir.join(name);
        let o = embp(&["sweep", "--config", cfg.to_str().unwrap(), "--set", "experiment.blocks=2", "--set", "detectors.list=map_coherent"]);
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
}
