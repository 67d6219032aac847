use std::path::Path;
use std::process::{Command, Output};

fn tabqa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabqa"))
        .current_dir(dir)
        .env_remove("TQA_CONFIG")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("run tabqa")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tabqa(dir, args);
    assert!(
        out.status.success(),
        "tabqa {args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fixture(dir: &Path) {
    ok(dir, &["generate-synthetic", "--out", "fx", "--tables", "6"]);
}

const CONF: &[&str] = &["--config", "fx/pipeline.conf", "--set", "epochs=1"];

fn with_conf<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = args.to_vec();
    v.extend_from_slice(CONF);
    v
}

fn has_keys(line: &str, keys: &[&str]) -> bool {
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    keys.iter().all(|k| v.get(k).is_some())
}

#[test]
fn every_subcommand_on_the_synthetic_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d);
    for f in ["corpus.json", "alignment_labels.jsonl", "train.json", "dev.json", "test.json", "pipeline.conf"] {
        assert!(d.join("fx").join(f).is_file(), "{f}");
    }
    ok(d, &with_conf(&["ingest"]));
    ok(d, &with_conf(&["build-alignment-data"]));
    ok(d, &with_conf(&["filter-passages", "--k", "12", "--budget", "460", "--encoder", "hash"]));
    ok(d, &with_conf(&["train-selector", "--sigma", "0.5", "--lr", "0.001", "--batch", "8"]));
    ok(d, &with_conf(&["select-cells", "--k", "5"]));
    let again = ok(d, &with_conf(&["select-cells", "--k", "5"]));
    assert!(again.contains("up to date"), "{again}");
    ok(d, &with_conf(&["train-reader", "--lr", "0.001", "--batch", "8"]));
    ok(d, &with_conf(&["answer", "--mu", "1.0"]));
    let report = ok(d, &with_conf(&["evaluate"]));
    assert!(report.contains("== dev ==") && report.contains("Hits@1"), "{report}");

    let work = d.join("fx/work");
    let sel = std::fs::read_to_string(work.join("selections/dev.jsonl")).unwrap();
    assert!(has_keys(sel.lines().next().unwrap(), &["qid", "topk", "row_probs", "col_probs"]));
    let pred = std::fs::read_to_string(work.join("predictions/dev.jsonl")).unwrap();
    assert!(has_keys(pred.lines().next().unwrap(), &["qid", "answer", "cell", "row_prob", "col_prob", "span_score"]));

    let p = work.join("predictions/dev.jsonl");
    let s = work.join("selections/dev.jsonl");
    let (p, s) = (p.to_str().unwrap(), s.to_str().unwrap());
    let table = ok(d, &with_conf(&["evaluate", "--ablation", p, p, "--selections", s, s]));
    assert!(table.contains("Hits@1") && table.contains("+0.0"), "{table}");

    ok(d, &with_conf(&["heatmap", "--qid", "syn-t004-q0", "--out", "hm.csv"]));
    let csv = std::fs::read_to_string(d.join("hm.csv")).unwrap();
    assert!(csv.starts_with("question_token,"));
    for line in csv.lines().skip(1) {
        for v in line.split(',').skip(1) {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }

    let sweep = ok(d, &with_conf(&["sweep-sigma", "--grid", "0,1"]));
    assert!(sweep.contains("best sigma"), "{sweep}");
    assert_eq!(sweep.matches("dev Hits@1").count(), 3);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d);
    ok(d, &with_conf(&["ingest"]));

    let out = tabqa(d, &with_conf(&["select-cells"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-selector required"));

    let out = tabqa(d, &with_conf(&["train-selector", "--sigma", "1.5"]));
    assert_eq!(out.status.code(), Some(1));

    let out = Command::new(env!("CARGO_BIN_EXE_tabqa"))
        .current_dir(d)
        .env("TQA_K", "0")
        .args(with_conf(&["select-cells"]))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(tabqa(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(tabqa(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn identical_runs_give_identical_predictions() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        fixture(d);
        ok(d, &with_conf(&["run-all"]));
    }
    for split in ["dev", "test"] {
        let rel = format!("fx/work/predictions/{split}.jsonl");
        let pa = std::fs::read(a.path().join(&rel)).unwrap();
        let pb = std::fs::read(b.path().join(&rel)).unwrap();
        assert!(!pa.is_empty());
        assert_eq!(pa, pb, "{split}");
    }
}
