use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn psrnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psrnn")).args(args).output().expect("run psrnn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name).display().to_string()
}

fn metric(text: &str, key: &str) -> f64 {
    text.split_whitespace()
        .find_map(|w| w.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {text:?}"))
        .parse()
        .unwrap()
}

#[test]
fn unknown_config_keys_are_listed_and_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "# comment\nseed = 3\nbogus = 1\nalso_bogus = 2\n").unwrap();
    let o = psrnn(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("bogus") && err.contains("also_bogus"), "{err}");
}

#[test]
fn bad_flags_exit_with_usage_code() {
    assert_eq!(psrnn(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(psrnn(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(psrnn(&["--help"]).status.code(), Some(0));
}

#[test]
fn prepare_reports_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("list.txt");
    fs::write(&manifest, "# nothing here\n\n").unwrap();
    let out = dir.path().join("out");
    let o = psrnn(&["prepare", "--out", out.to_str().unwrap(), &format!("manifest={}", manifest.display())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no inputs"), "{}", stderr(&o));
}

fn write_pgm(path: &Path, w: usize, h: usize) {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend((0..w * h).map(|i| ((i % w) * 3 + (i / w) * 5) as u8));
    fs::write(path, bytes).unwrap();
}

#[test]
fn prepare_writes_degraded_pgm_archive() {
    let dir = tempfile::tempdir().unwrap();
    write_pgm(&dir.path().join("a.pgm"), 40, 36);
    fs::write(dir.path().join("broken.pgm"), b"P2 not binary").unwrap();
    let manifest = dir.path().join("list.txt");
    fs::write(&manifest, "a.pgm\nbroken.pgm\n").unwrap();
    let out = dir.path().join("out");
    let o = psrnn(&["prepare", "--out", out.to_str().unwrap(), &format!("manifest={}", manifest.display()), "qps=22,37", "scales=false"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("broken.pgm"));
    let index = fs::read_to_string(out.join("index.csv")).unwrap();
    assert_eq!(index.lines().next(), Some("clean,degraded,scale,qp,width,height"));
    assert_eq!(index.lines().count(), 3);
    for line in index.lines().skip(1) {
        for name in line.split(',').take(2) {
            let bytes = fs::read(out.join(name)).unwrap();
            assert!(bytes.starts_with(b"P5\n40 36\n255\n"), "{name}");
            assert_eq!(bytes.len(), "P5\n40 36\n255\n".len() + 40 * 36);
        }
    }
    assert!(fs::read_to_string(out.join("resolved.cfg")).unwrap().contains("qps=22,37"));

    let multi = dir.path().join("multi");
    let o = psrnn(&["prepare", "--out", multi.to_str().unwrap(), &format!("manifest={}", manifest.display()), "qps=22,37"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let index = fs::read_to_string(multi.join("index.csv")).unwrap();
    let sizes: Vec<String> = index.lines().skip(1).map(|l| l.split(',').skip(2).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(sizes, ["0,22,28,16", "0,37,28,16", "1,22,21,12", "1,37,21,12", "2,22,14,8", "2,37,14,8"]);
}

#[test]
fn train_eval_and_demo_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let start = Instant::now();
    let o = psrnn(&["train", "--config", &config("smoke_train.cfg"), "--out", run.to_str().unwrap()]);
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(secs < 60.0, "smoke training took {secs:.1} s");
    for f in ["train_log.csv", "train_metrics.csv", "model.psrnn", "resolved.cfg"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let resolved = fs::read_to_string(run.join("resolved.cfg")).unwrap();
    assert!(resolved.contains("total_iters=100") && resolved.contains("threads=1"));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("iteration,lr,train_loss,val_loss\n0,"));
    assert_eq!(log.lines().count(), 1 + 5);

    let model = run.join("model.psrnn");
    let eval = |extra: &[&str], name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["eval".to_string(), "--config".into(), config("eval.cfg"), "--out".into(), out.display().to_string()];
        args.extend(extra.iter().map(|s| s.to_string()));
        let o = psrnn(&args.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(out.join("blocks.csv").exists() && out.join("summary.json").exists());
        stdout(&o)
    };
    let models_arg = format!("models={}", model.display());
    let net = eval(&[&models_arg], "eval_net");
    assert!(metric(&net, "blocks") > 0.0);
    let oracle = eval(&["--oracle"], "eval_oracle");
    assert_eq!(metric(&oracle, "selection_rate_pct"), 100.0);
    assert!(metric(&oracle, "cost_reduction_pct") > 0.0);
    let base = eval(&[], "eval_base");
    assert_eq!(metric(&base, "selection_rate_pct"), 0.0);
    assert_eq!(metric(&base, "cost_reduction_pct"), 0.0);

    let demo = dir.path().join("demo");
    let o = psrnn(&["demo", "--out", demo.to_str().unwrap(), &models_arg, "demo_cases=1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = fs::read_to_string(demo.join("demo.csv")).unwrap();
    let cases: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(cases.len(), 3);
    for case in cases {
        for kind in ["context", "psrnn", "baseline", "truth"] {
            let bytes = fs::read(demo.join(format!("{case}_{kind}.pgm"))).unwrap();
            assert!(bytes.starts_with(b"P5\n"), "{case}_{kind}");
            assert!(String::from_utf8_lossy(&bytes[..16]).contains("\n255\n"));
        }
    }
}

#[test]
fn demo_without_model_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = psrnn(&["demo", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = psrnn(&["demo", "--out", dir.path().to_str().unwrap(), "models=/no/such/model.psrnn"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn invalid_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(psrnn(&["train", "--out", out, "batch_size=0"]).status.code(), Some(1));
    assert_eq!(psrnn(&["train", "--out", out, "pu_size=abc"]).status.code(), Some(1));
    assert_eq!(psrnn(&["eval", "--out", out, "threads=0"]).status.code(), Some(1));
}
