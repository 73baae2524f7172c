//! End-to-end runs of the `gencopy` binary on toy data, checked against the
//! library calls they wrap.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gencopy_core::data::{wikibio, Example};
use gencopy_core::decoding::{generate, DecodeConfig};
use gencopy_core::metrics::{aggregate_seeds, score_corpus};
use gencopy_core::network::{Seq2Seq, Task};
use gencopy_core::toy;
use gencopy_core::training::load_checkpoint;

fn gencopy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gencopy"))
        .args(args)
        .env_remove("GENCOPY_OUTPUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes `name.box` / `name.sent` for toy infoboxes.
fn write_tables(dir: &Path, name: &str, n: usize, seed: u64) {
    let recs = toy::table_records(n, seed);
    let boxes: String = recs.iter().map(|r| r.to_box_line() + "\n").collect();
    let sents: String = recs.iter().map(|r| r.reference.join(" ") + "\n").collect();
    fs::write(dir.join(format!("{name}.box")), boxes).unwrap();
    fs::write(dir.join(format!("{name}.sent")), sents).unwrap();
}

/// SQuAD JSON for toy (passage, span, question) triples.
fn squad_json(n: usize, seed: u64) -> String {
    let paras: Vec<String> = toy::qg_examples(n, seed)
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let context = e.passage_tokens.join(" ");
            let start: usize = e.passage_tokens[..e.answer_span.0].iter().map(|t| t.len() + 1).sum();
            let answer = e.passage_tokens[e.answer_span.0..=e.answer_span.1].join(" ");
            format!(
                r#"{{"context": "{context}", "qas": [{{"id": "q{i}", "question": "{}", "answers": [{{"text": "{answer}", "answer_start": {start}}}]}}]}}"#,
                e.question_tokens.join(" ")
            )
        })
        .collect();
    format!(r#"{{"version": "1.1", "data": [{{"title": "toy", "paragraphs": [{}]}}]}}"#, paras.join(", "))
}

const TABLE_CONFIG: &str = r#"
# toy infobox run
task = "table2text"
seeds = [1, 2]
output_dir = "runs"

[data]
train = "train"
valid = "valid"
max_words = 200
max_fields = 16

[model]
word_dim = 8
field_dim = 3
pos_dim = 2
hidden_dim = 6

[train]
max_epochs = 2
batch_size = 4
lr = 0.01
ema_decay = 0.9
"#;

fn table_setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    write_tables(dir.path(), "train", 12, 1);
    write_tables(dir.path(), "valid", 4, 2);
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TABLE_CONFIG).unwrap();
    (dir, cfg)
}

#[test]
fn missing_or_invalid_config_exits_2() {
    let out = gencopy(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("/nonexistent/run.toml"), "{}", stderr(&out));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "task = \"qg\"\n[train]\nlearning_rate = 0.1\n").unwrap();
    let out = gencopy(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("train.learning_rate"), "{}", stderr(&out));

    // valid config, missing data file
    fs::write(&cfg, "task = \"table2text\"\n[data]\ntrain = \"nope\"\nvalid = \"nope\"\n").unwrap();
    let out = gencopy(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nope.box"), "{}", stderr(&out));
}

#[test]
fn train_generate_round_trip() {
    let (dir, cfg) = table_setup();
    let runs = dir.path().join("runs");

    let out = gencopy(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (c1, c2) = (runs.join("seed-1.ckpt"), runs.join("seed-2.ckpt"));
    let first = (fs::read(&c1).unwrap(), fs::read(&c2).unwrap());
    assert_ne!(first.0, first.1, "seeds should differ");

    // same config again: byte-identical checkpoints
    let out = gencopy(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&out), 0);
    assert_eq!((fs::read(&c1).unwrap(), fs::read(&c2).unwrap()), first);

    // the pipeline equals the library call on the loaded checkpoint
    let input = dir.path().join("valid.box");
    let (hyp_raw, hyp_ema) = (dir.path().join("raw.txt"), dir.path().join("ema.txt"));
    for (w, path) in [("raw", &hyp_raw), ("ema", &hyp_ema)] {
        let out = gencopy(&[
            "generate", "--config", p(&cfg), "--checkpoint", p(&c1), "--input", p(&input), "--output", p(path),
            "--weights", w,
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let bundle = load_checkpoint(&c1).unwrap();
    let net = Seq2Seq::new(bundle.model.clone()).unwrap();
    let records = wikibio::parse_box_file(&fs::read_to_string(&input).unwrap()).unwrap();
    let expected: String = records
        .iter()
        .map(|r| {
            let ex = Example::from_table(r, &bundle.vocabs);
            let g = generate(&net, &bundle.params, &ex, &bundle.vocabs.words, &DecodeConfig::for_task(Task::Table2Text));
            g.unwrap().tokens.join(" ") + "\n"
        })
        .collect();
    assert_eq!(fs::read_to_string(&hyp_raw).unwrap(), expected);
    assert_eq!(fs::read_to_string(&hyp_raw).unwrap().lines().count(), 4);

    // repeated decoding is deterministic
    let again = dir.path().join("ema2.txt");
    gencopy(&[
        "generate", "--config", p(&cfg), "--checkpoint", p(&c1), "--input", p(&input), "--output", p(&again),
    ]);
    assert_eq!(fs::read(&again).unwrap(), fs::read(&hyp_ema).unwrap());

    // empty input gives an empty output
    let (empty, empty_out) = (dir.path().join("empty.box"), dir.path().join("empty.txt"));
    fs::write(&empty, "").unwrap();
    let out = gencopy(&[
        "generate", "--config", p(&cfg), "--checkpoint", p(&c1), "--input", p(&empty), "--output", p(&empty_out),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&empty_out).unwrap(), "");

    // a question-generation config cannot use a table checkpoint
    let qg_cfg = dir.path().join("qg.toml");
    fs::write(&qg_cfg, "task = \"qg\"\n").unwrap();
    let out = gencopy(&[
        "generate", "--config", p(&qg_cfg), "--checkpoint", p(&c1), "--input", p(&empty), "--output", p(&empty_out),
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));

    // a corrupted checkpoint is a compatibility failure too
    let broken = dir.path().join("broken.ckpt");
    fs::write(&broken, b"not a checkpoint").unwrap();
    let out = gencopy(&[
        "generate", "--config", p(&cfg), "--checkpoint", p(&broken), "--input", p(&input), "--output", p(&empty_out),
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn flags_and_environment_pick_the_output_directory() {
    let (dir, cfg) = table_setup();
    let env_dir = dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_gencopy"))
        .args(["train", "--config", p(&cfg), "--seeds", "3", "--set", "train.max_epochs=1"])
        .env("GENCOPY_OUTPUT_DIR", &env_dir)
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(env_dir.join("seed-3.ckpt").exists());
    assert!(!env_dir.join("seed-1.ckpt").exists());
    let log = stderr(&out);
    assert!(log.contains("max_epochs = 1"), "resolved config is logged:\n{log}");
    assert!(log.contains("epoch 1"), "per-epoch lines are logged:\n{log}");

    let flag_dir = dir.path().join("from-flag");
    let out = Command::new(env!("CARGO_BIN_EXE_gencopy"))
        .args(["train", "--config", p(&cfg), "--seeds", "3", "--set", "train.max_epochs=0"])
        .args(["--output-dir", p(&flag_dir)])
        .env("GENCOPY_OUTPUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(flag_dir.join("seed-3.ckpt").exists());
}

#[test]
fn diverging_training_exits_3() {
    let (_dir, cfg) = table_setup();
    let out = gencopy(&[
        "train", "--config", p(&cfg), "--seeds", "1", "--set", "train.lr=1e300", "--set", "train.clip_norm=1e300",
        "--set", "train.max_epochs=3",
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite loss"), "{}", stderr(&out));
}

#[test]
fn question_generation_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train.json"), squad_json(9, 1)).unwrap();
    fs::write(dir.path().join("valid.json"), squad_json(3, 2)).unwrap();
    let cfg = dir.path().join("qg.toml");
    fs::write(
        &cfg,
        r#"
task = "qg"
output_dir = "out"
[data]
train = "train.json"
valid = "valid.json"
[model]
word_dim = 6
hidden_dim = 4
freeze_word_embeddings = false
[train]
max_epochs = 1
batch_size = 3
[decode]
beam_size = 3
max_len = 8
"#,
    )
    .unwrap();
    let out = gencopy(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let hyp = dir.path().join("hyp.txt");
    let out = gencopy(&[
        "generate", "--config", p(&cfg), "--checkpoint", p(&dir.path().join("out/seed-1.ckpt")), "--input",
        p(&dir.path().join("valid.json")), "--output", p(&hyp),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&hyp).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l.split_whitespace().count() <= 8));
}

#[test]
fn evaluate_reports_and_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("refs.txt");
    let lines = [
        "alan turing ( born 1912 ) was a british mathematician .",
        "grace hopper was an american computer scientist .",
        "ada lovelace was an english mathematician and writer .",
    ];
    fs::write(&refs, lines.join("\n") + "\n").unwrap();

    let out = gencopy(&["evaluate", "--refs", p(&refs), "--hyps", p(&refs), "--out-dir", p(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("bleu4 = 100.00"), "{}", stdout(&out));
    assert!(dir.path().join("eval.json").exists());

    let short = dir.path().join("short.txt");
    fs::write(&short, lines[0]).unwrap();
    let out = gencopy(&["evaluate", "--refs", p(&refs), "--hyps", p(&short), "--out-dir", p(dir.path())]);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("1 lines") && stderr(&out).contains("has 3"), "{}", stderr(&out));

    // three seeds through the glob equal the library aggregate
    let hyps = [
        ["alan turing ( born 1912 ) was a british mathematician .", "grace hopper was a computer scientist .", "ada lovelace was an english writer ."],
        ["alan turing ( born 1912 ) was a mathematician .", "grace hopper was an american computer scientist .", "ada lovelace was an english mathematician ."],
        ["alan turing was a british mathematician .", "grace hopper was an american scientist .", "ada lovelace was an english mathematician and writer ."],
    ];
    let seed_dir = dir.path().join("seeds");
    fs::create_dir(&seed_dir).unwrap();
    let tok = |s: &str| -> Vec<String> { s.split_whitespace().map(String::from).collect() };
    let reference: Vec<Vec<String>> = lines.iter().map(|l| tok(l)).collect();
    let mut per_seed = Vec::new();
    for (i, h) in hyps.iter().enumerate() {
        fs::write(seed_dir.join(format!("hyp-seed{}.txt", i + 1)), h.join("\n") + "\n").unwrap();
        per_seed.push(score_corpus(&h.iter().map(|l| tok(l)).collect::<Vec<_>>(), &reference).unwrap());
    }
    let labels: Vec<String> = (1..=3).map(|i| format!("hyp-seed{i}")).collect();
    let expected = aggregate_seeds(&labels, &per_seed).unwrap();

    let pattern = seed_dir.join("hyp-seed*.txt");
    let out_dir = dir.path().join("report");
    let out = gencopy(&["evaluate", "--refs", p(&refs), "--seed-glob", p(&pattern), "--out-dir", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(out_dir.join("eval.txt")).unwrap(), expected.to_flat());
    assert_eq!(fs::read_to_string(out_dir.join("eval.json")).unwrap(), expected.to_json());
    assert!(expected.to_flat().contains(" ± "));

    let out = gencopy(&["evaluate", "--refs", p(&refs), "--seed-glob", p(&seed_dir.join("none*"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_passes_and_catches_a_broken_rule() {
    let ok = gencopy(&["gradcheck", "--size", "small", "--probes", "6"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let report = stdout(&ok);
    assert!(report.contains("table2text: max relative error") && report.contains("qg: max relative error"), "{report}");
    let again = gencopy(&["gradcheck", "--size", "small", "--probes", "6"]);
    assert_eq!(stdout(&again), report);

    let bad = gencopy(&["gradcheck", "--probes", "6", "--fault", "tanh:1.5"]);
    assert_eq!(code(&bad), 6);
    assert!(stderr(&bad).contains("table2text/") && stderr(&bad).contains("qg/"), "{}", stderr(&bad));

    assert_eq!(code(&gencopy(&["gradcheck", "--fault", "frobnicate"])), 2);
}
