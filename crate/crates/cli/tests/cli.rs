use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(cwd: &Path, args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_expforce"));
    cmd.args(args).current_dir(cwd).env_remove("EXPFORCE_CONFIG");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = run(cwd, args, &[]);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fingerprint(stdout: &str) -> &str {
    stdout
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("config fingerprint: "))
        .expect("first line is the fingerprint")
}

fn synth(dir: &Path) {
    ok(dir, &["synth-pool", "--n", "50", "--seed", "7", "--out", "p"]);
}

#[test]
fn synth_then_validate() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = ok(dir.path(), &["pool", "validate", "p"]);
    assert!(out.contains("50 records"));
    fs::remove_file(dir.path().join("p/images/syn-0003.png")).unwrap();
    let out = run(dir.path(), &["pool", "validate", "p"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("syn-0003"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["eval", "cv", "--bogus"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = run(dir.path(), &["predict", "--pool", "p", "--backend", "gpt"], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let top = ok(dir.path(), &["--help"]);
    for sub in ["pool", "synth-pool", "embed", "retrieve", "describe", "predict", "eval", "report"] {
        assert!(top.contains(sub), "missing {sub}");
    }
    let eval = ok(dir.path(), &["eval", "--help"]);
    assert!(eval.contains("cv") && eval.contains("sweep-k"));
}

#[test]
fn every_subcommand_prints_a_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let image = "p/images/syn-0001.png";
    let runs: Vec<Vec<&str>> = vec![
        vec!["pool", "validate", "p"],
        vec!["embed", "--pool", "p", "--out", "emb.json"],
        vec!["retrieve", "--pool", "p", "--query-id", "syn-0002", "--k", "3"],
        vec!["describe", "--image", image],
        vec!["predict", "--pool", "p", "--query-image", image, "--backend", "zero-shot"],
        vec!["eval", "cv", "--pool", "p", "--out", "r", "--backend", "knn-average"],
        vec!["eval", "sweep-k", "--pool", "p", "--out", "s", "--backend", "knn-average", "--ks", "1,3"],
        vec!["report", "--input", "r/report.json", "--out", "r2"],
    ];
    for args in runs {
        let out = ok(d, &args);
        assert_eq!(fingerprint(&out).len(), 16, "{args:?}");
    }
    let emb: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("emb.json")).unwrap()).unwrap();
    assert_eq!(emb.as_object().unwrap().len(), 50);
    assert_eq!(fs::read(d.join("r/report.md")).unwrap(), fs::read(d.join("r2/report.md")).unwrap());
    let csv = fs::read_to_string(d.join("s/sweep.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("k,mae_n,std_n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn predict_excludes_the_query_record() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = ok(dir.path(), &["predict", "--pool", "p", "--query-id", "syn-0004", "--backend", "knn-average", "--k", "5"]);
    assert!(out.contains("query syn-0004: predicted"));
    assert!(out.contains("ground truth"));
    let table: Vec<&str> = out.lines().skip_while(|l| !l.contains("rank")).skip(1).collect();
    assert_eq!(table.len(), 5);
    assert!(table.iter().all(|l| !l.contains("syn-0004")));
}

#[test]
fn config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("a.toml"), "seed = 5\n").unwrap();
    let defaults = ok(d, &["pool", "validate", "--help"]);
    assert!(defaults.contains("--config"));

    synth(d);
    let fp = |args: &[&str], envs: &[(&str, &str)]| {
        let out = run(d, args, envs);
        assert!(out.status.success());
        fingerprint(&String::from_utf8(out.stdout).unwrap()).to_string()
    };
    let base = ["pool", "validate", "p"];
    let plain = fp(&base, &[]);
    let flag5 = fp(&[&base[..], &["--seed", "5"]].concat(), &[]);
    let file5 = fp(&[&base[..], &["--config", "a.toml"]].concat(), &[]);
    let env5 = fp(&base, &[("EXPFORCE_CONFIG", "a.toml")]);
    let file5_flag9 = fp(&[&base[..], &["--config", "a.toml", "--seed", "9"]].concat(), &[]);
    let flag9 = fp(&[&base[..], &["--seed", "9"]].concat(), &[]);
    assert_ne!(plain, flag5);
    assert_eq!(file5, flag5);
    assert_eq!(env5, file5);
    assert_eq!(file5_flag9, flag9);
}

#[test]
fn strict_mode_fails_on_query_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    fs::write(
        d.join("bad.toml"),
        "[endpoints.predictor]\nbackend = \"stub\"\nstub_responder = \"canned\"\nstub_default_response = \"no idea\"\n",
    )
    .unwrap();
    let args = ["eval", "cv", "--pool", "p", "--out", "r", "--backend", "zero-shot", "--k", "0", "--config", "bad.toml"];
    let lenient = run(d, &args, &[]);
    assert!(lenient.status.success());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("r/report.json")).unwrap()).unwrap();
    assert_eq!(report["failures"], 50);
    let strict = run(d, &[&args[..], &["--strict"]].concat(), &[]);
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn cache_is_reused_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let first = ok(d, &["embed", "--pool", "p", "--cache-dir", "cache"]);
    assert!(first.contains("0 hits, 50 misses"));
    let second = ok(d, &["embed", "--pool", "p", "--cache-dir", "cache"]);
    assert!(second.contains("50 hits, 0 misses"));
}
