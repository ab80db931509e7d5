use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmkws_core::augmentation::mine_confusables;
use mmkws_core::corpus::{generate_lexicon, CorpusMeta, ManifestRecord};
use mmkws_core::pattern::read_attention_map;
use mmkws_core::{Checkpoint, Lexicon, Model, ModelConfig, SemanticTable, Vocabulary};
use tempfile::TempDir;

fn mmkws(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmkws"))
        .args(args)
        .env_remove("MMKWS_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mmkws(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_lexicon(dir: &Path) -> (PathBuf, PathBuf) {
    let lexicon = generate_lexicon(150, 3);
    let vocab = Vocabulary::from_words(lexicon.words());
    let (l, v) = (dir.join("lexicon.tsv"), dir.join("vocab.txt"));
    fs::write(&l, lexicon.to_tsv()).unwrap();
    fs::write(&v, vocab.to_text()).unwrap();
    (l, v)
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn synth(tmp: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let (l, v) = write_lexicon(tmp);
    let out = tmp.join(name);
    let mut args = vec!["synth", "--lexicon", s(&l), "--vocab", s(&v), "--out", s(&out), "--seed", "5"];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

const SMALL: &[&str] = &["--n-train", "12", "--n-test", "30", "--set", "test_per_split=2"];

#[test]
fn missing_lexicon_is_usage_error() {
    let out = mmkws(&["synth", "--out", "/tmp/never", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--lexicon"));
}

#[test]
fn missing_seed_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let (l, _) = write_lexicon(tmp.path());
    let out = mmkws(&["synth", "--lexicon", s(&l), "--out", s(&tmp.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("MMKWS_SEED"));
}

#[test]
fn synth_is_deterministic_and_counts_keywords() {
    let tmp = TempDir::new().unwrap();
    let a = synth(tmp.path(), "a", &["--n-train", "20", "--n-test", "60", "--set", "test_per_split=1"]);
    let b = synth(tmp.path(), "b", &["--n-train", "20", "--n-test", "60", "--set", "test_per_split=1"]);
    assert_eq!(tree(&a), tree(&b));
    let meta: CorpusMeta = serde_json::from_str(&fs::read_to_string(a.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta.n_test_keywords, 60);
    assert_eq!(meta.test_keywords.len(), 60);
    let line = fs::read_to_string(a.join("test.jsonl")).unwrap();
    let rec: ManifestRecord = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert_eq!(rec.config_hash, meta.config_hash);
}

#[test]
fn environment_and_config_file_layers() {
    let tmp = TempDir::new().unwrap();
    let (l, _) = write_lexicon(tmp.path());
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "seed = 5\nn_test = 7\n[synth]\nn-train = 9\ntest_per_split = 1\n").unwrap();
    let out = tmp.path().join("c");
    let o = Command::new(env!("CARGO_BIN_EXE_mmkws"))
        .args(["synth", "--config", s(&cfg), "--lexicon", s(&l), "--out", s(&out), "--n-test", "8"])
        .env("MMKWS_N_TRAIN", "10")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let meta: CorpusMeta = serde_json::from_str(&fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!((meta.n_train_keywords, meta.n_test_keywords, meta.seed), (10, 8, 5));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("[synth] n_train = 10"), "{err}");
}

#[test]
fn mine_matches_library() {
    let tmp = TempDir::new().unwrap();
    let lex = Lexicon::parse("good\tG UH D\nboy\tB OY\ngoods\tG UH D Z\nwood\tW UH D\nday\tD EY\n").unwrap();
    fs::write(tmp.path().join("lex.tsv"), lex.to_tsv()).unwrap();
    let phrases = ["good day", "wood boy", "goods boy", "boy good", "day day"];
    fs::write(tmp.path().join("corpus.txt"), phrases.join("\n")).unwrap();
    fs::write(tmp.path().join("sem.txt"), "day 1 0\nboy 0 1\n").unwrap();
    let run = |k: &str| {
        let out = tmp.path().join(format!("k{k}.jsonl"));
        let o = ok(&[
            "mine",
            "--target",
            "good boy",
            "--corpus",
            s(&tmp.path().join("corpus.txt")),
            "--lexicon",
            s(&tmp.path().join("lex.tsv")),
            "--k",
            k,
            "--semantic-table",
            s(&tmp.path().join("sem.txt")),
            "--out",
            s(&out),
        ]);
        (fs::read_to_string(out).unwrap(), String::from_utf8_lossy(&o.stderr).to_string())
    };
    let (one, stderr) = run("1");
    let kinds: Vec<serde_json::Value> = one.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(kinds.iter().filter(|r| r["kind"] == "phonetic").count(), 1);
    assert!(kinds.iter().any(|r| r["kind"] == "permutation"));
    assert!(stderr.contains("warning"), "{stderr}");

    let (three, _) = run("3");
    let corpus: Vec<String> = phrases.iter().map(|p| p.to_string()).collect();
    let table = SemanticTable::parse("day 1 0\nboy 0 1\n").unwrap();
    let (set, _) = mine_confusables("good boy", &corpus, 3, &lex, Some(&table)).unwrap();
    assert_eq!(three, set.to_jsonl().unwrap());
}

#[test]
fn eval_on_perfect_scores_gives_zero_eer() {
    let tmp = TempDir::new().unwrap();
    let mut lines = String::new();
    for (i, split) in ["easy", "hard"].iter().enumerate() {
        for j in 0..5 {
            let label = j % 2;
            let p = if label == 1 { 0.9 } else { 0.1 };
            lines.push_str(&format!(
                "{{\"p_utt\":{p},\"p_phon\":[],\"p_text\":[],\"label\":{label},\"split\":\"{split}\",\"pair_id\":{}}}\n",
                i * 10 + j
            ));
        }
    }
    let scores = tmp.path().join("scores.jsonl");
    fs::write(&scores, lines).unwrap();
    let report = tmp.path().join("report.json");
    ok(&["eval", "--scores", s(&scores), "--report", s(&report)]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(r["eer_easy"], 0.0);
    assert_eq!(r["eer_hard"], 0.0);
    assert_eq!(r["auc_easy"], 1.0);
    assert_eq!(r["n_pairs"], 10);
    assert!(r["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), "c", SMALL);
    let run = tmp.path().join("run");
    ok(&["train", "--data", s(&data), "--out", s(&run), "--seed", "11", "--steps", "0", "--set", "d=8"]);
    let ck = Checkpoint::load(&run.join("model.ckpt")).unwrap();
    let vocab = Vocabulary::load(&data.join("vocab.txt")).unwrap();
    let cfg = ModelConfig { subword_vocab: vocab.len(), d: 8, ..ModelConfig::default() };
    let init = Model::new(cfg, 11).unwrap();
    assert_eq!(ck.model.store, init.store);
    assert!(ck.provenance["train_config_hash"].as_str().is_some());
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap().lines().count(), 1);
}

#[test]
fn corrupt_checkpoint_and_config_conflict() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), "c", SMALL);
    let run = tmp.path().join("run");
    ok(&["train", "--data", s(&data), "--out", s(&run), "--seed", "1", "--steps", "0"]);
    let ckpt = run.join("model.ckpt");
    let report = tmp.path().join("r.json");

    let conflict = mmkws(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report), "--set", "d=8"]);
    assert_eq!(conflict.status.code(), Some(2));
    let err = String::from_utf8_lossy(&conflict.stderr);
    assert!(err.contains("--force") && err.contains("expected"), "{err}");
    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report), "--set", "d=8", "--force"]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["acc_close"].is_number());

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[1] = b'?';
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let out = mmkws(&["eval", "--ckpt", s(&bad), "--data", s(&data), "--report", s(&report)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad checkpoint header"));
}

#[test]
fn trained_model_spots_its_own_keyword() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), "c", &["--n-train", "6", "--n-test", "30", "--set", "test_per_split=1"]);
    let run = tmp.path().join("run");
    ok(&["train", "--data", s(&data), "--out", s(&run), "--seed", "2", "--steps", "300"]);
    let ckpt = run.join("model.ckpt");
    let text = fs::read_to_string(data.join("train.jsonl")).unwrap();
    let rec: ManifestRecord =
        text.lines().map(|l| serde_json::from_str::<ManifestRecord>(l).unwrap()).find(|r| r.label == 1).unwrap();
    let feat = |r: &mmkws_core::corpus::FeatRef| match r {
        mmkws_core::corpus::FeatRef::Path(p) => data.join(p),
        _ => unreachable!(),
    };
    let out = ok(&[
        "spot",
        "--ckpt",
        s(&ckpt),
        "--keyword",
        &rec.enroll_text,
        "--templates",
        s(&feat(&rec.template_feats[0])),
        "--query",
        s(&feat(&rec.query_feat)),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.trim().ends_with("YES"), "{stdout}");

    let attn = tmp.path().join("attn");
    ok(&["export-attn", "--ckpt", s(&ckpt), "--data", s(&data), "--pair", &rec.pair_id.to_string(), "--out", s(&attn)]);
    for kind in ["text", "audio"] {
        let bytes = fs::read(attn.join(format!("pair{:06}_{kind}.attn", rec.pair_id))).unwrap();
        let map = read_attention_map::<f64, _>(&bytes[..]).unwrap();
        for head in map.layers.iter().flatten() {
            for r in 0..head.rows() {
                assert!((head.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    let bench = ok(&["bench", "--ckpt", s(&ckpt), "--reps", "3"]);
    assert!(String::from_utf8_lossy(&bench.stdout).contains("median_ms"));
}
