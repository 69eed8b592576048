use std::path::Path;
use std::process::{Command, Output};

fn patchgrad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchgrad"))
        .args(args)
        .env_remove("PATCHGRAD_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, task: &str, count: &str, seed: &str, size: &str) -> Output {
    patchgrad(&["gen-data", "--task", task, "--out", dir.to_str().unwrap(), "--count", count, "--seed", seed, "--size", size])
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn write_config(path: &Path, data: &Path, out: &Path, extra: &str) {
    let text = format!(
        "# small classification run\ntask=cls\ndata={}\nout={}\ngrid_rows=2\ngrid_cols=2\nsample_rate=0.25\ninner_iters=3\n\
         widths=4,8\nfeature_dim=8\nepochs=2\nbatch_size=2\nseed=5\n{extra}",
        data.display(),
        out.display()
    );
    std::fs::write(path, text).unwrap();
}

#[test]
fn gen_data_is_deterministic_and_echoes_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&gen(&a, "cls", "10", "7", "64")), 0);
    assert_eq!(code(&gen(&b, "cls", "10", "7", "64")), 0);
    assert_eq!(dir_contents(&a), dir_contents(&b));
    let manifest = std::fs::read_to_string(a.join("manifest.txt")).unwrap();
    for line in ["task=cls", "count=10", "M=64", "N=64", "seed=7"] {
        assert!(manifest.lines().any(|l| l == line), "{manifest}");
    }
}

#[test]
fn gen_data_rejects_zero_count_and_bad_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gen(&tmp.path().join("x"), "seg", "0", "1", "32");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("count must be ≥ 1"));

    let file = tmp.path().join("plain");
    std::fs::write(&file, "not a directory").unwrap();
    let o = gen(&file.join("sub"), "seg", "2", "1", "32");
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn train_then_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, "cls", "6", "3", "64")), 0);
    let out = tmp.path().join("run");
    let cfg = tmp.path().join("run.cfg");
    write_config(&cfg, &data, &out, "");
    let o = patchgrad(&["--threads", "1", "train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("k=1 J=3"));

    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("outer_step,inner_iter,lr,loss,peak_bytes"));
    let first: Vec<&str> = lines.clone().take(3).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(first, ["0", "1", "2"]);

    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mem = std::fs::read_to_string(out.join("memory_report.txt")).unwrap();
    assert!(mem.contains("difference: 0"), "{mem}");

    let eval_out = tmp.path().join("eval.csv");
    let o = patchgrad(&[
        "eval",
        "--checkpoint",
        out.join("checkpoint").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(eval_out).unwrap(), metrics);
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, "cls", "4", "9", "64")), 0);
    let mut artifacts = Vec::new();
    for name in ["r1", "r2"] {
        let out = tmp.path().join(name);
        let cfg = tmp.path().join(format!("{name}.cfg"));
        write_config(&cfg, &data, &out, "");
        let o = patchgrad(&["--threads", "1", "train", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let ck = out.join("checkpoint");
        artifacts.push((
            std::fs::read(out.join("metrics.csv")).unwrap(),
            std::fs::read(out.join("train_log.csv")).unwrap(),
            dir_contents(&ck.join("backbone")),
            dir_contents(&ck.join("aggregator")),
        ));
    }
    assert_eq!(artifacts[0], artifacts[1]);
}

#[test]
fn invalid_config_lists_every_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "task=cls\ndata=d\nout=o\naccum_steps=9\nbatch_size=0\nlearning_rate=1\n").unwrap();
    let o = patchgrad(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    for field in ["accum_steps", "batch_size", "learning_rate"] {
        assert!(err.contains(field), "{err}");
    }
}

#[test]
fn zero_budget_exits_three_and_keeps_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, "cls", "2", "1", "64")), 0);
    let out = tmp.path().join("run");
    let cfg = tmp.path().join("run.cfg");
    write_config(&cfg, &data, &out, "memory_budget_bytes=0\n");
    let o = patchgrad(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("budget"));
    assert!(out.join("checkpoint/backbone/manifest.txt").exists());
    assert!(out.join("checkpoint/config.txt").exists());
}

#[test]
fn eval_without_checkpoint_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, "seg", "1", "1", "32")), 0);
    let o = patchgrad(&["eval", "--checkpoint", tmp.path().join("none").to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = patchgrad(&["eval", "--checkpoint", "x", "--data", tmp.path().join("nodata").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn grad_check_passes() {
    let o = patchgrad(&["grad-check", "--trials", "3"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("cls_network") && out.contains("seg_network"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn mem_report_for_degenerate_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("m.cfg");
    std::fs::write(
        &cfg,
        "task=seg\ndata=unused\nout=unused\ngrid_rows=1\ngrid_cols=1\nsample_rate=1\ninner_iters=1\naccum_steps=1\nwidths=4,8\nuse_global_patch=false\n",
    )
    .unwrap();
    let o = patchgrad(&["mem-report", "--config", cfg.to_str().unwrap(), "--size", "64", "64"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = stdout(&o);
    let theta1: Vec<&str> = table.lines().filter(|l| l.contains("theta1")).collect();
    assert!(!theta1.is_empty(), "{table}");
    for line in theta1 {
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cols[1], cols[2], "{line}");
    }
    let o = patchgrad(&["mem-report", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_on_memorized_training_set_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, "cls", "8", "21", "64")), 0);
    let out = tmp.path().join("run");
    let cfg = tmp.path().join("run.cfg");
    let text = format!(
        "task=cls\ndata={}\nout={}\ngrid_rows=2\ngrid_cols=2\nsample_rate=1.0\ninner_iters=1\naccum_steps=1\n\
         widths=8,16\nfeature_dim=16\nepochs=150\nbatch_size=4\nbase_lr=0.01\nwarmup_steps=10\nseed=2\n",
        data.display(),
        out.display()
    );
    std::fs::write(&cfg, text).unwrap();
    let o = patchgrad(&["--threads", "1", "train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let eval_out = tmp.path().join("eval.csv");
    let o = patchgrad(&[
        "eval",
        "--checkpoint",
        out.join("checkpoint").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(eval_out).unwrap();
    let accuracy = csv.lines().nth(1).and_then(|l| l.split(',').next()).unwrap();
    assert_eq!(accuracy.parse::<f64>().unwrap(), 1.0, "{csv}");
}
