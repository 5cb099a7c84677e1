use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mgmo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgmo"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = mgmo(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &[&str] = &[
    "--set", "d_model=8", "--set", "n_heads=2", "--set", "n_layers=1", "--set", "max_len=16",
    "--set", "batch_tokens=64", "--set", "batch_sentences=4", "--set", "k=3",
];

fn stage_args<'a>(out: &'a str, steps: &'a str) -> Vec<&'a str> {
    let mut v = vec![
        "--train", "d/train.tsv", "--valid", "d/valid.tsv", "--vocab", "d/vocab.txt", "--out", out,
        "--set", steps, "--set", "warmup=2", "--set", "valid_interval=3",
    ];
    v.extend_from_slice(TINY);
    v
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    ok(&["gen-data", "--task", "multimodal", "--out", "d", "--vocab-size", "10", "--sizes", "60,12,12", "--max-len", "6"], cwd);
    for f in ["train.tsv", "valid.tsv", "test.tsv", "vocab.txt"] {
        assert!(cwd.join("d").join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(cwd.join("d/train.tsv")).unwrap().lines().count(), 60);

    let mut cmlm = vec!["train-cmlm"];
    cmlm.extend(stage_args("cmlm", "steps=6"));
    ok(&cmlm, cwd);
    let log = fs::read_to_string(cwd.join("cmlm/metrics.tsv")).unwrap();
    assert!(log.starts_with("step\ttrain_loss\tvalid_bleu\n"));
    assert_eq!(log.lines().count(), 8);

    let mut ft = vec!["finetune-mgmo", "--init", "cmlm/best.ckpt"];
    ft.extend(stage_args("ft", "steps=3"));
    ok(&ft, cwd);
    assert!(cwd.join("ft/best.ckpt").exists());
    assert!(fs::read_to_string(cwd.join("ft/config.txt")).unwrap().contains("stage=mgmo"));

    let test = fs::read_to_string(cwd.join("d/test.tsv")).unwrap();
    let (src, refs): (Vec<&str>, Vec<&str>) = test.lines().map(|l| l.split_once('\t').unwrap()).unzip();
    fs::write(cwd.join("src.txt"), src.join("\n") + "\n").unwrap();
    fs::write(cwd.join("ref.txt"), refs.join("\n") + "\n").unwrap();
    ok(&["decode", "--checkpoint", "ft/best.ckpt", "--vocab", "d/vocab.txt", "--input", "src.txt", "--output", "hyp.txt"], cwd);
    assert_eq!(fs::read_to_string(cwd.join("hyp.txt")).unwrap().lines().count(), 12);

    let scores = ok(&["score", "--hyp", "ref.txt", "--ref", "ref.txt", "--metric", "bleu"], cwd);
    let last = scores.lines().last().unwrap();
    assert_eq!(last, "corpus_bleu\t100.000000");
    assert_eq!(scores.lines().count(), 14);

    let m = ["--checkpoint", "ft/best.ckpt", "--vocab", "d/vocab.txt", "--data", "d/test.tsv"];
    let lengths = ok(&[&["analyze", "lengths"][..], &m, &["--edges", "1,4"]].concat(), cwd);
    assert_eq!(lengths.lines().count(), 3);
    let conf = ok(&[&["analyze", "confidence"][..], &m].concat(), cwd);
    assert!(conf.starts_with("positions\tmean_argmax_prob\tncm_proxy\n"));
    let rep = ok(&["analyze", "repetition", "--input", "hyp.txt"], cwd);
    assert!(rep.lines().nth(1).unwrap().starts_with("12\t"));
}

#[test]
fn score_reports_lines_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    fs::write(cwd.join("h.txt"), "the cat sat\na b c\n").unwrap();
    fs::write(cwd.join("r.txt"), "the cat sat down\na x c\n").unwrap();
    let out = ok(&["score", "--hyp", "h.txt", "--ref", "r.txt", "--metric", "gleu", "--max-ngram", "2"], cwd);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "line\tscore");
    assert_eq!(rows[1], format!("1\t{:.6}", 5.0 / 7.0));
    let ter = ok(&["score", "--hyp", "h.txt", "--ref", "r.txt", "--metric", "ter"], cwd);
    assert_eq!(ter.lines().nth(2).unwrap(), format!("2\t{:.6}", 2.0 / 3.0));
    assert!(ter.lines().last().unwrap().starts_with("mean\t"));
    fs::write(cwd.join("short.txt"), "a\n").unwrap();
    assert!(!mgmo(&["score", "--hyp", "short.txt", "--ref", "r.txt"], cwd).status.success());
}

#[test]
fn granularity_rows_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["analyze", "granularity", "--length", "20", "--gamma", "8", "--draws", "2000"], dir.path());
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 20);
    assert!(rows[19].starts_with("20+\t"));
    let total: f64 = rows.iter().map(|r| r.split('\t').nth(1).unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-5);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    ok(&["gen-data", "--task", "mapping", "--out", "d", "--vocab-size", "10", "--sizes", "10,5,5"], cwd);
    fs::write(cwd.join("bad.cfg"), "steps=3\nbogus=1\n").unwrap();
    let mut args = vec!["train-cmlm", "--config", "bad.cfg"];
    args.extend(stage_args("o", "steps=1"));
    let out = mgmo(&args, cwd);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.cfg") && err.contains("line 2") && err.contains("bogus"), "{err}");

    let missing = mgmo(&["finetune-mgmo", "--init", "nope.ckpt", "--train", "d/train.tsv", "--valid", "d/valid.tsv", "--vocab", "d/vocab.txt", "--out", "o"], cwd);
    assert!(!missing.status.success());
    assert!(!mgmo(&["gen-data", "--task", "mapping", "--out", "e", "--sizes", "1,2"], cwd).status.success());
}
