use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use kgrec_cli::{run, EXIT_MISMATCH, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};

struct Outcome {
    code: i32,
    out: String,
    err: String,
}

fn cli(args: &[&str], stdin: &str) -> Outcome {
    let mut input = Cursor::new(stdin.as_bytes().to_vec());
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("kgrec").chain(args.iter().copied());
    let code = run(argv, &mut input, &mut out, &mut err);
    Outcome { code, out: String::from_utf8(out).unwrap(), err: String::from_utf8(err).unwrap() }
}

fn ok(args: &[&str]) -> String {
    let r = cli(args, "");
    assert_eq!(r.code, EXIT_OK, "{args:?}: {}", r.err);
    r.out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const DATA_CONFIG: &str = "seed = 11\ntrain.basic = 10\nvalid.all = 2\ntest.all = 3\n";
const TRAIN_CONFIG: &str = "d = 8\nk = 2\ngamma = 3\nlr = 0.01\nbatch_size = 16\nn_neg = 4\nepochs = 3\n";

/// synth -> split -> build-dataset -> train, shared by the tests.
struct Pipeline {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Pipeline {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn pipeline_for(seed: &str) -> Pipeline {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let p = |n: &str| root.join(n);
    ok(&["synth", "--seed", seed, "--out", s(&p("raw"))]);
    ok(&[
        "split", "--triples", s(&p("raw/triples.tsv")), "--items", s(&p("raw/items.txt")), "--users",
        s(&p("raw/users.txt")), "--like", "likes", "--fraction", "0.05", "--seed", "3", "--out", s(&p("split")),
    ]);
    std::fs::write(p("data.cfg"), DATA_CONFIG).unwrap();
    std::fs::write(p("train.cfg"), TRAIN_CONFIG).unwrap();
    let stats = ok(&["build-dataset", "--split-dir", s(&p("split")), "--config", s(&p("data.cfg")), "--out-dir", s(&p("data"))]);
    assert!(stats.contains("verified: 0 violations"), "{stats}");
    ok(&["train", "--data", s(&p("data")), "--config", s(&p("train.cfg")), "--seed", "1", "--out", s(&p("run"))]);
    Pipeline { _tmp: tmp, root }
}

fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| pipeline_for("1"))
}

#[test]
fn pipeline_writes_expected_files() {
    let p = pipeline();
    for f in ["run/best.ckpt", "run/last.ckpt", "run/summary.json", "run/train_log.jsonl", "run/train_config.json"] {
        assert!(p.path(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(p.path("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let train = std::fs::read_to_string(p.path("data/train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 50);
    for z in ["\"ip\"", "\"pi\"", "\"2u\"", "\"up\""] {
        assert!(!train.contains(&format!("\"shape\":{z}")), "{z} in train");
    }
}

#[test]
fn usage_errors_exit_two() {
    let p = pipeline();
    let r = cli(&["split", "--triples", "a", "--items", "b", "--users", "c", "--like", "likes", "--fraction", "1.5", "--seed", "1", "--out", "x"], "");
    assert_eq!(r.code, EXIT_USAGE);
    let r = cli(&["build-dataset", "--split-dir", s(&p.path("split")), "--config", s(&p.path("missing.cfg")), "--out-dir", s(&p.path("x"))], "");
    assert_eq!(r.code, EXIT_USAGE, "{}", r.err);
    let unseeded = p.path("unseeded.cfg");
    std::fs::write(&unseeded, "train.1p = 2\n").unwrap();
    let r = cli(&["build-dataset", "--split-dir", s(&p.path("split")), "--config", s(&unseeded), "--out-dir", s(&p.path("x"))], "");
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.err.contains("seed"), "{}", r.err);
    let r = cli(&["train", "--data", s(&p.path("data")), "--out", s(&p.path("x"))], "");
    assert_eq!(r.code, EXIT_USAGE);
    assert_eq!(cli(&["eval", "--data", "d", "--checkpoint", "c", "--k", "ten"], "").code, EXIT_USAGE);
}

#[test]
fn eval_prints_a_shape_table() {
    let p = pipeline();
    let out_dir = p.path("report");
    let table = ok(&["eval", "--data", s(&p.path("data")), "--checkpoint", s(&p.path("run/best.ckpt")), "--k", "10,20", "--out", s(&out_dir)]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0].split_whitespace().collect::<Vec<_>>(), ["metric", "1p", "2p", "3p", "2i", "3i", "ip", "pi", "2u", "up", "avg"]);
    let labels: Vec<&str> = lines[1..].iter().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(labels, ["hit@10", "hit@20", "ndcg@10", "ndcg@20"]);
    for l in &lines[1..] {
        for v in l.split_whitespace().skip(1) {
            let v: f64 = v.parse().unwrap();
            assert!(v.is_finite() && (0.0..=1.0).contains(&v));
        }
    }
    assert_eq!(std::fs::read_to_string(out_dir.join("report.txt")).unwrap(), table);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["ks"], serde_json::json!([10, 20]));
}

#[test]
fn checkpoint_from_another_vocabulary_is_rejected() {
    let p = pipeline();
    let other = pipeline_for("2");
    let r = cli(&["eval", "--data", s(&p.path("data")), "--checkpoint", s(&other.path("run/best.ckpt"))], "");
    assert_eq!(r.code, EXIT_MISMATCH, "{}", r.err);
    let r = cli(&["answer", "--kg", s(&p.path("split")), "--checkpoint", s(&other.path("run/best.ckpt"))], "");
    assert_eq!(r.code, EXIT_MISMATCH, "{}", r.err);
}

#[test]
fn divergence_exits_three_with_diagnostic() {
    let p = pipeline();
    let cfg = p.path("huge_lr.cfg");
    std::fs::write(&cfg, format!("{TRAIN_CONFIG}lr = 1e308\n")).unwrap();
    let dir = p.path("diverged");
    let r = cli(&["train", "--data", s(&p.path("data")), "--config", s(&cfg), "--seed", "1", "--out", s(&dir)], "");
    assert_eq!(r.code, EXIT_NUMERIC, "{}", r.err);
    let diag: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("diagnostic.json")).unwrap()).unwrap();
    assert!(diag["error"].as_str().unwrap().contains("non-finite"), "{diag}");
    assert!(!dir.join("best.ckpt").exists());
}

#[test]
fn untrained_checkpoint_and_basic_only_config() {
    let p = pipeline();
    let dir = p.path("untrained");
    let summary = ok(&["train", "--data", s(&p.path("data")), "--config", s(&p.path("train.cfg")), "--seed", "4", "--epochs", "0", "--out", s(&dir)]);
    let json: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(json["epochs_run"], 0);
    assert_eq!(json["best_epoch"], 0);
    ok(&["eval", "--data", s(&p.path("data")), "--checkpoint", s(&dir.join("best.ckpt")), "--split", "train", "--all-answers"]);
}

#[test]
fn repl_answers_and_recovers_from_errors() {
    let p = pipeline();
    let ckpt = p.path("run/best.ckpt");
    let split = p.path("split");
    let script = "not a command\nuser user0 | (p tagged0 (e attr0_0_0\nuser nobody | (e item0)\nuser user0 | (p tagged0 (e attr0_0_0))\nquit\nuser user0 | (e item1)\n";
    let r = cli(&["answer", "--kg", s(&split), "--checkpoint", s(&ckpt), "--mode", "embedding"], script);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let lines: Vec<&str> = r.out.lines().collect();
    assert_eq!(lines.iter().filter(|l| l.starts_with("error:")).count(), 3, "{}", r.out);
    let start = lines.iter().position(|l| l.starts_with("embedding top 10")).unwrap();
    let ranked = &lines[start + 1..];
    assert_eq!(ranked.len(), 10);
    for l in ranked {
        let prob: f64 = l.split_whitespace().nth(2).unwrap().parse().unwrap();
        assert!(prob > 0.0 && prob < 1.0, "{l}");
    }
}

#[test]
fn symbolic_mode_follows_the_chosen_graph() {
    let p = pipeline();
    let data = std::fs::read_to_string(p.path("data/test.jsonl")).unwrap();
    let split = p.path("split");
    let mut checked = 0;
    for line in data.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        let hard: Vec<String> =
            rec["hard"]["A"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_owned()).collect();
        let cmd = format!("user {} | {}\n", rec["user"].as_str().unwrap(), rec["query"].as_str().unwrap());
        let exact = |graph: &str| {
            let r = cli(&["answer", "--kg", s(&split), "--mode", "symbolic", "--graph", graph], &cmd);
            assert_eq!(r.code, EXIT_OK, "{}", r.err);
            let line = r.out.lines().next().unwrap().to_owned();
            line.split_once(':').unwrap().1.split_whitespace().map(str::to_owned).collect::<Vec<_>>()
        };
        let train = exact("train");
        let full = exact("full");
        assert!(hard.iter().all(|h| !train.contains(h) && full.contains(h)));
        let all: Vec<String> = rec["answers"]["A"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_owned()).collect();
        if all.len() < 100 {
            let mut sorted = all.clone();
            sorted.sort();
            let mut f = full.clone();
            f.sort();
            assert_eq!(f, sorted);
        }
        checked += 1;
    }
    assert!(checked >= 20);
}
