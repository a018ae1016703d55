//! End-to-end runs of the `lexner` binary: the full
//! train/eval/tag/lexicon-stats/learning-curve surface over a small
//! generated corpus, plus exit-code behavior.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use lexner::corpus::write_conll;
use lexner::synth::{generate, SynthConfig};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_lexner")
}

fn run(args: &[&str], stdin: Option<&str>) -> Output {
    let mut cmd = Command::new(binary());
    cmd.args(args).stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped());
    let mut child = cmd.spawn().expect("binary spawns");
    if let Some(text) = stdin {
        child.stdin.as_mut().unwrap().write_all(text.as_bytes()).unwrap();
    }
    drop(child.stdin.take());
    child.wait_with_output().expect("binary finishes")
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// Write a small corpus + gazetteer + config into `dir`; returns the
/// config path.
fn prepare_workspace(dir: &Path, extra: &str) -> PathBuf {
    let corpus = generate(&SynthConfig {
        train_sentences: 60,
        test_sentences: 24,
        phrases_per_label: 8,
        heldout_per_label: 3,
        heldout_rate: 0.5,
        seed: 99,
    })
    .unwrap();
    let mut train = Vec::new();
    write_conll(&corpus.train, &mut train).unwrap();
    fs::write(dir.join("train.conll"), train).unwrap();
    let mut test = Vec::new();
    write_conll(&corpus.test, &mut test).unwrap();
    fs::write(dir.join("test.conll"), test).unwrap();
    fs::write(dir.join("gazetteer.txt"), corpus.gazetteer.join("\n") + "\n").unwrap();

    let config = format!(
        "\
labels = PER,ORG,PCT,OUT,SER,TIM
train_path = {dir}/train.conll
test_path = {dir}/test.conll
lexicon_path = {dir}/gazetteer.txt
checkpoint_path = {dir}/model.ckpt
lexicon_mode = softlexicon
word_dim = 8
char_dim = 4
hidden = 8
phrase_dim = 4
lm_vocab_cap = 32
dropout = 0.2
epochs = 3
eta0 = 0.05
seed = 5
{extra}",
        dir = dir.display()
    );
    let path = dir.join("run.conf");
    fs::write(&path, config).unwrap();
    path
}

#[test]
fn train_eval_tag_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = prepare_workspace(dir.path(), "");
    let config = config.to_str().unwrap();

    let trained = run(&["train", "--config", config], None);
    assert!(trained.status.success(), "train failed: {}", stderr_of(&trained));
    assert!(stdout_of(&trained).contains("checkpoint"));
    assert!(stderr_of(&trained).contains("epoch 2:"), "per-epoch log missing");
    assert!(dir.path().join("model.ckpt").exists());

    let evaluated = run(&["eval", "--config", config], None);
    assert!(evaluated.status.success(), "eval failed: {}", stderr_of(&evaluated));
    let table = stdout_of(&evaluated);
    assert!(table.contains("OVERALL"));
    assert!(table.contains("PER"));

    // Tag raw text from stdin: tokens echo back with one tag each.
    let raw = "kalo mira veka.\n";
    let tagged = run(&["tag", "--config", config], Some(raw));
    assert!(tagged.status.success(), "tag failed: {}", stderr_of(&tagged));
    let out = stdout_of(&tagged);
    let lines: Vec<&str> = out.lines().collect();
    // 3 words + split-off punctuation, then the sentence separator.
    assert_eq!(lines.len(), 5, "unexpected output: {out:?}");
    assert_eq!(lines[4], "");
    for line in &lines[..4] {
        let mut parts = line.split_whitespace();
        parts.next().expect("token column");
        let tag = parts.next().expect("tag column");
        assert!(tag == "O" || tag.starts_with("B-") || tag.starts_with("I-"));
    }

    // Tag CoNLL input read from a file, writing to a file.
    let out_path = dir.path().join("tagged.conll");
    let tagged = run(
        &[
            "tag",
            "--config",
            config,
            "--input_format",
            "conll",
            "--input_path",
            &format!("{}/test.conll", dir.path().display()),
            "--output_path",
            out_path.to_str().unwrap(),
        ],
        None,
    );
    assert!(tagged.status.success(), "conll tag failed: {}", stderr_of(&tagged));
    let text = fs::read_to_string(&out_path).unwrap();
    let first_input_token = fs::read_to_string(dir.path().join("test.conll"))
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .to_string();
    assert!(text.starts_with(&first_input_token), "tokens must be preserved");
    assert!(text.lines().filter(|l| !l.is_empty()).all(|l| l.split_whitespace().count() == 2));
}

#[test]
fn empty_tag_input_produces_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = prepare_workspace(dir.path(), "epochs = 0\n");
    let config = config.to_str().unwrap();
    assert!(run(&["train", "--config", config], None).status.success());
    let tagged = run(&["tag", "--config", config], Some(""));
    assert!(tagged.status.success());
    assert!(stdout_of(&tagged).is_empty());
}

#[test]
fn train_then_eval_reproduces_the_logged_best_dev_f1() {
    let dir = tempfile::tempdir().unwrap();
    let extra = format!("dev_path = {}/test.conll\n", dir.path().display());
    let config = prepare_workspace(dir.path(), &extra);
    let config = config.to_str().unwrap();

    let trained = run(&["train", "--config", config], None);
    assert!(trained.status.success(), "train failed: {}", stderr_of(&trained));
    let stdout = stdout_of(&trained);
    let logged = stdout
        .split("best dev F1 ")
        .nth(1)
        .and_then(|rest| rest.split(' ').next())
        .expect("train logs the best dev F1")
        .to_string();

    let report_path = dir.path().join("report.csv");
    let evaluated = run(
        &["eval", "--config", config, "--report_path", report_path.to_str().unwrap()],
        None,
    );
    assert!(evaluated.status.success(), "eval failed: {}", stderr_of(&evaluated));
    let csv = fs::read_to_string(&report_path).unwrap();
    let overall = csv
        .lines()
        .find(|l| l.starts_with("OVERALL,"))
        .expect("report has an OVERALL row");
    let f1 = overall.split(',').nth(3).unwrap();
    assert_eq!(f1, logged, "eval must reproduce the best dev F1 exactly");
}

#[test]
fn learning_curve_rows_are_independent() {
    let dir = tempfile::tempdir().unwrap();
    let config = prepare_workspace(dir.path(), "epochs = 2\n");
    let config = config.to_str().unwrap();

    let both = run(&["learning-curve", "--config", config, "--curve_sizes", "12,24"], None);
    assert!(both.status.success(), "curve failed: {}", stderr_of(&both));
    let both_out = stdout_of(&both);
    let lines: Vec<&str> = both_out.lines().collect();
    assert_eq!(lines[0], "size,PER,ORG,PCT,OUT,SER,TIM,overall_f1");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("12,"));
    assert!(lines[2].starts_with("24,"));

    let only_last = run(&["learning-curve", "--config", config, "--curve_sizes", "24"], None);
    assert!(only_last.status.success());
    let only_out = stdout_of(&only_last);
    assert_eq!(
        only_out.lines().nth(1).unwrap(),
        lines[2],
        "dropping a size must not change the other rows"
    );

    // Empty size list: header-only CSV.
    let empty = run(&["learning-curve", "--config", config, "--curve_sizes", ""], None);
    assert!(empty.status.success());
    assert_eq!(stdout_of(&empty), "size,PER,ORG,PCT,OUT,SER,TIM,overall_f1\n");

    // A size beyond the corpus is an error.
    let too_big = run(&["learning-curve", "--config", config, "--curve_sizes", "10000"], None);
    assert_eq!(too_big.status.code(), Some(1));
}

#[test]
fn lexicon_stats_reports_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let config = prepare_workspace(dir.path(), "");
    let config = config.to_str().unwrap();
    let stats = run(&["lexicon-stats", "--config", config], None);
    assert!(stats.status.success(), "stats failed: {}", stderr_of(&stats));
    let out = stdout_of(&stats);
    assert!(out.contains("phrases"), "unexpected report: {out}");
}

#[test]
fn exit_codes_follow_the_error_taxonomy() {
    // No subcommand → usage error (1).
    let out = run(&[], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).starts_with("error:"));

    // Unknown config key → 1, naming the key.
    let out = run(&["train", "--hiden", "300"], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("hiden"));

    // Out-of-range value → 1.
    let out = run(&["train", "--momentum", "1.5"], None);
    assert_eq!(out.status.code(), Some(1));

    // Missing data file → 2, single-line error.
    let dir = tempfile::tempdir().unwrap();
    let config = prepare_workspace(dir.path(), "");
    let out = run(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--train_path",
            "/nonexistent/corpus.conll",
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    let error_lines: Vec<&str> =
        err.lines().filter(|l| l.starts_with("error:")).collect();
    assert_eq!(error_lines.len(), 1);
    assert!(error_lines[0].contains("/nonexistent/corpus.conll"));

    // Help exits 0.
    let out = run(&["--help"], None);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout_of(&out).contains("usage"));
}
