use std::path::Path;
use std::process::{Command, Output};

use tpr_core::data::{load_tsv, TsvSchema, PROBE_LABELS};

fn tpr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpr")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_structured(dir: &Path, n: &str) {
    let o = tpr(&[
        "gen-data", "--task", "structured", "--count", n, "--seed", "2", "--set", "source-dev-n=60", "--set",
        "target-dev-n=60", "--out", s(dir),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn generated_files_load_back() {
    let tmp = tempfile::tempdir().unwrap();
    gen_structured(tmp.path(), "50");
    for name in ["source.train", "source.dev", "target.train", "target.dev"] {
        let path = tmp.path().join(format!("{name}.tsv"));
        let c = load_tsv(&path, &TsvSchema::new(true, &["0", "1"], 64)).unwrap().corpus;
        assert!(c.has_tags(), "{name}");
        assert_eq!(c.len(), if name.ends_with("train") { 50 } else { 60 });
    }
    let probes = tmp.path().join("p");
    assert_eq!(code(&tpr(&["gen-data", "--task", "probes", "--count", "5", "--out", s(&probes)])), 0);
    let c = load_tsv(&probes.join("probes.tsv"), &TsvSchema::new(true, &PROBE_LABELS, 64))
        .unwrap()
        .corpus;
    assert_eq!(c.len(), 15);
    assert!(c.pairs.iter().all(|p| p.heuristic.is_some()));
}

#[test]
fn zero_probes_is_a_header_only_file() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tpr(&["gen-data", "--task", "probes", "--count", "0", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(tmp.path().join("probes.tsv")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("sentence1\tsentence2\tlabel"));
}

#[test]
fn flags_beat_set_beats_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# probes\ncount=9\nprobe-depth=3\nseed=4\n").unwrap();
    let out = tmp.path().join("out");
    let o = tpr(&[
        "gen-data", "--task", "probes", "--config", s(&cfg), "--set", "count=7", "--set", "seed=5", "--seed", "6",
        "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = std::fs::read_to_string(out.join("config.resolved")).unwrap();
    for line in ["count=7", "probe-depth=3", "seed=6", "task=probes"] {
        assert!(resolved.lines().any(|l| l == line), "{line} missing from\n{resolved}");
    }
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches("wrote 21 probes").count(), 1);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    assert_eq!(code(&tpr(&["train", "--model", "gpt", "--out", out])), 2);
    assert_eq!(code(&tpr(&["gen-data", "--task", "poems", "--out", out])), 2);
    assert_eq!(code(&tpr(&["gen-data", "--set", "nonsense=1", "--out", out])), 2);
    assert_eq!(code(&tpr(&["train", "--lr", "fast", "--out", out])), 2);
    assert_eq!(code(&tpr(&["train", "--train", "/no/such.tsv", "--dev", "/no/dev.tsv", "--out", out])), 3);
    let bad = tmp.path().join("bad.tsv");
    std::fs::write(&bad, "sentence1\tlabel\na b\tmaybe\n").unwrap();
    let o = tpr(&["train", "--train", s(&bad), "--dev", s(&bad), "--set", "labels=yes,no", "--out", out]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&tpr(&["train", "--transfer-roles", "--train", s(&bad), "--dev", s(&bad), "--out", out])), 2);
}

#[test]
fn gradcheck_passes_and_reports_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tpr(&["gradcheck", "--model", "tpr-transformer", "--seed", "1", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(tmp.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.starts_with("tpr-transformer,") && l.ends_with(",true")));
    let o = tpr(&["gradcheck", "--model", "baseline", "--set", "tol=0", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 1);
}

#[test]
fn untrained_eval_is_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tpr(&[
        "gen-data", "--task", "structured", "--set", "negative=shuffle", "--set", "target-dev-n=400", "--seed", "3",
        "--out", s(tmp.path()),
    ]);
    assert_eq!(code(&o), 0);
    let o = tpr(&[
        "eval", "--model", "tpr-lstm", "--dev", s(&tmp.path().join("target.dev.tsv")), "--set", "hidden=16", "--set",
        "heads=2", "--d-sym", "4", "--d-role", "4", "--out", s(tmp.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("eval.csv")).unwrap();
    let acc: f64 = csv.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    // Negatives are reorderings of the positives' words.
    assert!((40.0..=60.0).contains(&acc), "{acc}");
}

#[test]
fn train_then_transfer_and_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_structured(&data, "80");
    let small = [
        "--model", "tpr-transformer", "--set", "hidden=16", "--set", "heads=2", "--set", "ffn-dim=32", "--d-sym", "4",
        "--d-role", "4", "--n-sym", "8", "--n-role", "5", "--epochs", "2", "--lr", "5e-3", "--batch", "8",
    ];
    let src = tmp.path().join("src");
    let mut args = vec!["train", "--train"];
    let (st, sd) = (data.join("source.train.tsv"), data.join("source.dev.tsv"));
    args.extend([s(&st), "--dev", s(&sd), "--out", s(&src)]);
    args.extend(small);
    let o = tpr(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("best dev accuracy"));
    let hist = std::fs::read_to_string(src.join("history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 3);

    let ckpt = src.join("model.ckpt");
    let (tt, td) = (data.join("target.train.tsv"), data.join("target.dev.tsv"));
    let tgt = tmp.path().join("tgt");
    let mut args = vec!["train", "--train", s(&tt), "--dev", s(&td), "--source-ckpt", s(&ckpt)];
    args.extend(["--transfer-fillers", "--transfer-roles", "--out", s(&tgt)]);
    args.extend(small);
    let o = tpr(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("transferred 2 tensors"));

    let an = tmp.path().join("an");
    let o = tpr(&["analyze", "--ckpt", s(&ckpt), "--dev", s(&sd), "--k", "1", "--out", s(&an)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(an.join("analysis.csv")).unwrap();
    let total: usize = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    let tokens: usize = std::fs::read_to_string(data.join("source.dev.tags.tsv"))
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().count())
        .sum();
    assert_eq!(total, tokens);
    assert!(an.join("analysis.dat").exists() && an.join("analysis.normalized.csv").exists());
}

#[test]
fn transfer_writes_eight_rows_per_family() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_structured(&data, "40");
    let out = tmp.path().join("tr");
    let p = |n: &str| data.join(n).to_str().unwrap().to_string();
    let (st, sd, tt, td) = (p("source.train.tsv"), p("source.dev.tsv"), p("target.train.tsv"), p("target.dev.tsv"));
    let o = tpr(&[
        "transfer", "--model", "baseline,tpr-lstm", "--source-train", &st, "--source-dev", &sd, "--train", &tt,
        "--dev", &td, "--epochs", "1", "--set", "hidden=16", "--set", "heads=2", "--set", "baseline-seeds=1",
        "--d-sym", "3", "--d-role", "3", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("gains.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 16);
    for fam in ["baseline", "tpr-lstm"] {
        let mine: Vec<&&str> = rows.iter().filter(|r| r.starts_with(&format!("{fam},target,"))).collect();
        assert_eq!(mine.len(), 8);
        assert!(mine[0].contains(",false,false,false,") && mine[0].ends_with(",+0.00"));
    }
}
