//! `mmkws`: synthesize corpora, mine confusables, train, evaluate, spot,
//! export attention maps and benchmark.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use mmkws_core::augmentation::{mine_confusables, INVENTORY};
use mmkws_core::corpus::{build_corpus, build_multiclass_episode, generate_lexicon, read_features};
use mmkws_core::discriminator::ScoreRecord;
use mmkws_core::evaluation::{
    accuracy_closed, accuracy_open, bench_latency, episode_scores, score_pairs, EvalReport,
};
use mmkws_core::pattern::write_attention_map;
use mmkws_core::training::{train, BatchMix, TrainConfig, TrainingSet};
use mmkws_core::{Checkpoint, Corpus, CorpusConfig, Enrollment, Lexicon, Model, ModelConfig, SemanticTable, Vocabulary};

use config::{usage, Layers, UsageError};

#[derive(Parser)]
#[command(name = "mmkws", version, about = "Multi-modal user-defined keyword spotting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML key = value file; lowest precedence.
    #[arg(long, global = true, env = "MMKWS_CONFIG")]
    config: Option<PathBuf>,
    /// Override any config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Worker cap. Every command runs on one thread.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a pseudo-word lexicon and its vocabulary.
    Lexicon {
        #[arg(long)]
        words: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for `lexicon.tsv` and `vocab.txt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a synthetic corpus directory.
    Synth {
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Mine confusable phrases for one target as JSONL.
    Mine {
        #[arg(long)]
        target: String,
        /// One phrase per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        semantic_table: Option<PathBuf>,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a corpus directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for `model.ckpt` and `loss.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score the test pairs of a corpus, or an existing scores file.
    Eval {
        #[arg(long, required_unless_present = "scores")]
        ckpt: Option<PathBuf>,
        #[arg(long, required_unless_present = "scores")]
        data: Option<PathBuf>,
        /// JSONL of `{p_utt, label, split}` records instead of a model.
        #[arg(long, conflicts_with_all = ["ckpt", "data"])]
        scores: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Also write per-pair scores here.
        #[arg(long)]
        scores_out: Option<PathBuf>,
        /// Evaluate even when model keys conflict with the checkpoint.
        #[arg(long)]
        force: bool,
    },
    /// Score one query against one keyword.
    Spot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        keyword: String,
        /// FEAT files of speech templates.
        #[arg(long, num_args = 0..)]
        templates: Vec<PathBuf>,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Write ATTN files for one corpus pair.
    ExportAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pair: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time single-pair scoring.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        reps: Option<usize>,
        /// Corpus to draw the pair from; a synthetic pair otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Lexicon { .. } => "lexicon",
            Command::Synth { .. } => "synth",
            Command::Mine { .. } => "mine",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Spot { .. } => "spot",
            Command::ExportAttn { .. } => "export-attn",
            Command::Bench { .. } => "bench",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            eprintln!("Run `mmkws --help` for usage.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let name = cli.command.name();
    let mut layers = Layers::new(name, cli.common.config.as_deref(), std::env::vars(), &cli.common.sets)?;
    let threads = layers.get("threads", cli.common.threads, 1usize)?;
    if threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    match cli.command {
        Command::Lexicon { words, seed, out } => lexicon_cmd(&mut layers, words, seed, &out),
        Command::Synth { lexicon, vocab, out, seed, n_train, n_test } => {
            synth(&mut layers, &lexicon, vocab.as_deref(), &out, seed, n_train, n_test)
        }
        Command::Mine { target, corpus, lexicon, k, semantic_table, out } => {
            mine(&mut layers, &target, &corpus, &lexicon, k, semantic_table.as_deref(), out.as_deref())
        }
        Command::Train { data, out, seed, steps } => train_cmd(&mut layers, &data, &out, seed, steps),
        Command::Eval { ckpt, data, scores, report, scores_out, force } => match scores {
            Some(scores) => eval_scores(&mut layers, &scores, &report),
            None => eval_model(
                &mut layers,
                ckpt.as_deref().expect("clap enforces --ckpt"),
                data.as_deref().expect("clap enforces --data"),
                &report,
                scores_out.as_deref(),
                force,
            ),
        },
        Command::Spot { ckpt, keyword, templates, query, threshold } => {
            spot(&mut layers, &ckpt, &keyword, &templates, &query, threshold)
        }
        Command::ExportAttn { ckpt, data, pair, out } => export_attn(&mut layers, &ckpt, &data, pair, &out),
        Command::Bench { ckpt, reps, data, report } => bench(&mut layers, &ckpt, reps, data.as_deref(), report.as_deref()),
    }
}

fn lexicon_cmd(layers: &mut Layers, words: Option<usize>, seed: Option<u64>, out: &Path) -> Result<()> {
    let seed = layers.require("seed", seed)?;
    let n = layers.get("words", words, 600usize)?;
    layers.echo("lexicon");
    let lexicon = generate_lexicon(n, seed);
    let vocab = Vocabulary::from_words(lexicon.words());
    fs::create_dir_all(out)?;
    fs::write(out.join("lexicon.tsv"), lexicon.to_tsv())?;
    fs::write(out.join("vocab.txt"), vocab.to_text())?;
    eprintln!("[lexicon] {} words", lexicon.len());
    Ok(())
}

fn corpus_config(layers: &mut Layers, n_train: Option<usize>, n_test: Option<usize>) -> Result<CorpusConfig> {
    let d = CorpusConfig::default();
    let mut c = CorpusConfig {
        n_train: layers.get("n_train", n_train, d.n_train)?,
        n_test: layers.get("n_test", n_test, d.n_test)?,
        min_words: layers.get("min_words", None, d.min_words)?,
        max_words: layers.get("max_words", None, d.max_words)?,
        d_hard: layers.get("d_hard", None, d.d_hard)?,
        train_positives: layers.get("train_positives", None, d.train_positives)?,
        train_hard: layers.get("train_hard", None, d.train_hard)?,
        train_easy: layers.get("train_easy", None, d.train_easy)?,
        test_per_split: layers.get("test_per_split", None, d.test_per_split)?,
        n_templates: layers.get("n_templates", None, d.n_templates)?,
        confusables: layers.get("confusables", None, d.confusables)?,
        feat_dim: layers.get("feat_dim", None, d.feat_dim)?,
        render: d.render,
    };
    let r = &mut c.render;
    r.noise_std = layers.get("noise_std", None, r.noise_std)?;
    r.speaker_std = layers.get("speaker_std", None, r.speaker_std)?;
    r.min_duration = layers.get("min_duration", None, r.min_duration)?;
    r.max_duration = layers.get("max_duration", None, r.max_duration)?;
    r.coarticulation = layers.get("coarticulation", None, r.coarticulation)?;
    Ok(c)
}

fn synth(
    layers: &mut Layers,
    lexicon: &Path,
    vocab: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    n_train: Option<usize>,
    n_test: Option<usize>,
) -> Result<()> {
    let seed = layers.require("seed", seed)?;
    let config = corpus_config(layers, n_train, n_test)?;
    layers.echo("synth");
    let lexicon = Lexicon::load(lexicon).with_context(|| format!("loading lexicon {}", lexicon.display()))?;
    let vocab = match vocab {
        Some(p) => Vocabulary::load(p).with_context(|| format!("loading vocabulary {}", p.display()))?,
        None => Vocabulary::from_words(lexicon.words()),
    };
    let corpus = build_corpus::<f64>(&config, &lexicon, &vocab, seed)?;
    corpus.write(out, &lexicon, &vocab)?;
    eprintln!(
        "[synth] {} train / {} test keywords, {} train / {} test pairs, config_hash {}",
        corpus.train_keywords.len(),
        corpus.test_keywords.len(),
        corpus.train.len(),
        corpus.test.len(),
        corpus.config_hash()
    );
    Ok(())
}

fn mine(
    layers: &mut Layers,
    target: &str,
    corpus: &Path,
    lexicon: &Path,
    k: Option<usize>,
    table: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let k = layers.get("k", k, 10usize)?;
    layers.echo("mine");
    let lexicon = Lexicon::load(lexicon).with_context(|| format!("loading lexicon {}", lexicon.display()))?;
    let phrases: Vec<String> = fs::read_to_string(corpus)
        .with_context(|| format!("reading {}", corpus.display()))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    let table = table.map(SemanticTable::load).transpose()?;
    let (set, warnings) = mine_confusables(target, &phrases, k, &lexicon, table.as_ref())?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let jsonl = set.to_jsonl()?;
    match out {
        Some(p) => fs::write(p, jsonl)?,
        None => std::io::stdout().write_all(jsonl.as_bytes())?,
    }
    Ok(())
}

/// Model keys settable from any layer, applied over `base`.
fn model_config(layers: &mut Layers, base: &ModelConfig) -> Result<ModelConfig> {
    Ok(ModelConfig {
        feat_dim: layers.get("feat_dim", None, base.feat_dim)?,
        d: layers.get("d", None, base.d)?,
        encoder_layers: layers.get("encoder_layers", None, base.encoder_layers)?,
        encoder_heads: layers.get("encoder_heads", None, base.encoder_heads)?,
        subsample: layers.get("subsample", None, base.subsample)?,
        conv_kernel: layers.get("conv_kernel", None, base.conv_kernel)?,
        ff_mult: layers.get("ff_mult", None, base.ff_mult)?,
        attention_layers: layers.get("attention_layers", None, base.attention_layers)?,
        attention_heads: layers.get("attention_heads", None, base.attention_heads)?,
        gru_hidden: layers.get("gru_hidden", None, base.gru_hidden)?,
        phoneme_dim: layers.get("phoneme_dim", None, base.phoneme_dim)?,
        text_dim: layers.get("text_dim", None, base.text_dim)?,
        phoneme_inventory: layers.get("phoneme_inventory", None, base.phoneme_inventory)?,
        subword_vocab: layers.get("subword_vocab", None, base.subword_vocab)?,
        positional: layers.get("positional", None, base.positional)?,
        freeze_support_speech: layers.get("freeze_support_speech", None, base.freeze_support_speech)?,
        use_speech_branch: layers.get("use_speech_branch", None, base.use_speech_branch)?,
    })
}

fn load_corpus(dir: &Path) -> Result<(Corpus, Lexicon, Vocabulary)> {
    Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn train_cmd(layers: &mut Layers, data: &Path, out: &Path, seed: Option<u64>, steps: Option<usize>) -> Result<()> {
    let (corpus, lexicon, vocab) = load_corpus(data)?;
    let seed = layers.require("seed", seed)?;
    let d = TrainConfig::default();
    let base = ModelConfig { feat_dim: corpus.config.feat_dim, subword_vocab: vocab.len(), ..ModelConfig::default() };
    let model_cfg = model_config(layers, &base)?;
    let cfg = TrainConfig {
        model: model_cfg.clone(),
        steps: layers.get("steps", steps, d.steps)?,
        batch_anchors: layers.get("batch_anchors", None, d.batch_anchors)?,
        mix: BatchMix {
            positives: layers.get("mix_positives", None, d.mix.positives)?,
            hard: layers.get("mix_hard", None, d.mix.hard)?,
            random: layers.get("mix_random", None, d.mix.random)?,
        },
        lr: layers.get("lr", None, d.lr)?,
        seed,
        aux_loss: layers.get("aux_loss", None, d.aux_loss)?,
        template_dropout: layers.get("template_dropout", None, d.template_dropout)?,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    layers.echo("train");
    if model_cfg.feat_dim != corpus.config.feat_dim || model_cfg.subword_vocab != vocab.len() {
        return Err(usage(format!(
            "model expects feat_dim {} and subword_vocab {}, corpus has {} and {}",
            model_cfg.feat_dim,
            model_cfg.subword_vocab,
            corpus.config.feat_dim,
            vocab.len()
        )));
    }
    let set = TrainingSet::from_corpus(&corpus, &lexicon)?;
    let mut model = Model::new(model_cfg, seed)?;
    let log = train(&mut model, &set, &cfg)?;
    let run_hash = mmkws_core::model::hash_json(&serde_json::to_value(&cfg)?);
    let provenance = json!({
        "train_config": cfg,
        "train_config_hash": run_hash,
        "corpus_config_hash": corpus.config_hash(),
    });
    fs::create_dir_all(out)?;
    let ckpt = Checkpoint { model, vocab, lexicon, provenance };
    ckpt.save(&out.join("model.ckpt"))?;
    fs::write(out.join("loss.csv"), log.to_csv())?;
    if let Some(last) = log.rows.last() {
        eprintln!("[train] step {} loss {:.4}", last.step, last.total);
    }
    eprintln!("[train] config_hash {run_hash}");
    Ok(())
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)? + "\n")?;
    eprintln!("[eval] {}", serde_json::to_string(report)?);
    Ok(())
}

fn eval_scores(layers: &mut Layers, scores: &Path, report: &Path) -> Result<()> {
    layers.echo("eval");
    let text = fs::read_to_string(scores).with_context(|| format!("reading {}", scores.display()))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str::<ScoreRecord>(l).with_context(|| format!("{}:{}", scores.display(), i + 1)))
        .collect::<Result<Vec<_>>>()?;
    let source = mmkws_core::model::hash_json(&json!({ "scores": text }));
    let r = EvalReport::from_records(&records, &source)?;
    write_report(report, &r)
}

fn eval_model(
    layers: &mut Layers,
    ckpt: &Path,
    data: &Path,
    report: &Path,
    scores_out: Option<&Path>,
    force: bool,
) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let requested = model_config(layers, &ck.model.config)?;
    if let Err(e) = ck.check_config(&requested) {
        if !force {
            return Err(usage(format!("{e}\npass --force to evaluate the checkpoint as stored")));
        }
        eprintln!("warning: {e}; evaluating the checkpoint as stored (--force)");
    }
    let n_templates = layers.get("eval_templates", None, 1usize)?;
    let episode = layers.get("episode", None, true)?;
    let n_targets = layers.get("episode_targets", None, 10usize)?;
    let n_unknown = layers.get("episode_unknown", None, 20usize)?;
    let per_keyword = layers.get("episode_queries", None, 1usize)?;
    let threshold = layers.get("threshold", None, 0.5f64)?;
    layers.echo("eval");
    let (corpus, lexicon, _) = load_corpus(data)?;
    if corpus.config.feat_dim != ck.model.config.feat_dim {
        bail!("corpus feat_dim {} differs from model feat_dim {}", corpus.config.feat_dim, ck.model.config.feat_dim);
    }
    let records = score_pairs(&ck.model, &corpus, &corpus.test, n_templates)?;
    let hash = mmkws_core::model::hash_json(&json!({
        "model": ck.model.config.hash(),
        "corpus": corpus.config_hash(),
        "eval": layers.record(&["threads"]),
    }));
    let mut r = EvalReport::from_records(&records, &hash)?;
    if episode {
        let ep = build_multiclass_episode(&corpus, &lexicon, n_targets, n_unknown, per_keyword, corpus.seed)?;
        let scores = episode_scores(&ck.model, &corpus, &ep, n_templates)?;
        let labels: Vec<Option<usize>> = ep.queries.iter().map(|q| q.label).collect();
        r.acc_close = Some(accuracy_closed(&scores, &labels));
        r.acc_open = Some(accuracy_open(&scores, &labels, threshold));
    }
    if let Some(p) = scores_out {
        let mut out = String::new();
        for rec in &records {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        fs::write(p, out)?;
    }
    write_report(report, &r)
}

fn load_feat(path: &Path) -> Result<mmkws_core::FeatureMatrix> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_features(std::io::BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn spot(
    layers: &mut Layers,
    ckpt: &Path,
    keyword: &str,
    templates: &[PathBuf],
    query: &Path,
    threshold: Option<f64>,
) -> Result<()> {
    let threshold = layers.get("threshold", threshold, 0.5f64)?;
    layers.echo("spot");
    let ck = load_checkpoint(ckpt)?;
    let templates = templates.iter().map(|p| load_feat(p)).collect::<Result<Vec<_>>>()?;
    let enrollment = Enrollment::new(keyword, &ck.lexicon, &ck.vocab, templates)?;
    let q = load_feat(query)?;
    let p = ck.model.p_utt(&q, &enrollment)?;
    println!("p_utt {p:.6} {}", if p >= threshold { "YES" } else { "NO" });
    Ok(())
}

fn export_attn(layers: &mut Layers, ckpt: &Path, data: &Path, pair: usize, out: &Path) -> Result<()> {
    let n_templates = layers.get("eval_templates", None, 1usize)?;
    layers.echo("export-attn");
    let ck = load_checkpoint(ckpt)?;
    let (corpus, _, _) = load_corpus(data)?;
    let p = corpus.pairs().find(|p| p.pair_id == pair).ok_or_else(|| anyhow!("no pair with id {pair}"))?;
    let enrollment = corpus.enrollments[p.enrollment].with_templates(n_templates);
    let result = ck.model.score(&p.query, &enrollment)?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for (kind, map) in [("text", &result.text_attention), ("audio", &result.audio_attention)] {
        if let Some(map) = map {
            let path = out.join(format!("pair{pair:06}_{kind}.attn"));
            let mut buf = Vec::new();
            write_attention_map(map, &mut buf)?;
            fs::write(&path, buf)?;
            written.push(path.display().to_string());
        }
    }
    eprintln!("[export-attn] p_utt {:.6}; wrote {}", result.p_utt, written.join(", "));
    Ok(())
}

fn bench(layers: &mut Layers, ckpt: &Path, reps: Option<usize>, data: Option<&Path>, report: Option<&Path>) -> Result<()> {
    let reps = layers.get("reps", reps, 100usize)?;
    let warmup = layers.get("warmup", None, 5usize)?;
    layers.echo("bench");
    if reps == 0 {
        return Err(usage("--reps must be at least 1"));
    }
    let ck = load_checkpoint(ckpt)?;
    let (query, enrollment) = match data {
        Some(dir) => {
            let (corpus, _, _) = load_corpus(dir)?;
            let p = corpus.test.first().ok_or_else(|| anyhow!("corpus has no test pairs"))?;
            (p.query.clone(), corpus.enrollments[p.enrollment].clone())
        }
        None => synthetic_pair(&ck)?,
    };
    let r = bench_latency(&ck.model, &query, &enrollment, warmup, reps)?;
    println!("frames {} median_ms {:.3} p95_ms {:.3}", r.query_frames, r.median_ms, r.p95_ms);
    if let Some(p) = report {
        let v: Value = json!({ "latency": r, "config_hash": ck.model.config.hash() });
        fs::write(p, serde_json::to_string_pretty(&v)? + "\n")?;
    }
    Ok(())
}

/// First three lexicon words as the keyword, rendered once as template and
/// once as query.
fn synthetic_pair(ck: &Checkpoint) -> Result<(mmkws_core::FeatureMatrix, Enrollment)> {
    use mmkws_core::augmentation::{PrototypeBank, RenderProfile};
    let words: Vec<&str> = ck.lexicon.words().take(3).collect();
    if words.is_empty() {
        bail!("checkpoint lexicon is empty");
    }
    let text = words.join(" ");
    let bank = PrototypeBank::new(INVENTORY.len(), ck.model.config.feat_dim, 0);
    let phonemes = ck.lexicon.phrase_g2p(&words)?;
    let profile = RenderProfile::default();
    let template = bank.render(&phonemes, 1, &profile)?;
    let query = bank.render(&phonemes, 2, &profile)?;
    Ok((query, Enrollment::new(&text, &ck.lexicon, &ck.vocab, vec![template])?))
}
