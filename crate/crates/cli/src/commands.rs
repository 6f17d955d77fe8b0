use std::path::{Path, PathBuf};

use niser::checkpoint;
use niser::eval::{self, norm_popularity_report};
use niser::ingest::{
    augment_all, build_corpus, load_events, map_sessions, split_holdout, EventFormat, ItemVocab, KeyedSession, Session,
};
use niser::model::{model_grad_check, Parameters, PARAM_NAMES};
use niser::online::run_online;
use niser::synth::gen_sessions;
use niser::train::{train_model, EnsembleSummary};
use niser::{Precision, Scalar, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{Cli, CliError, Command, ModelFlags};

type Result<T> = std::result::Result<T, CliError>;

const GRAD_TOL: f64 = 1e-4;

/// Sessions after filtering, split by day, indexed by the training vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab: ItemVocab,
    pub train: Vec<Session>,
    pub test: Vec<Session>,
}

/// Provenance attached to every report.
#[derive(Debug, Clone, Serialize)]
struct Lineage<'a> {
    build: &'static str,
    seed: u64,
    corpus_sha256: Option<String>,
    config: &'a RunConfig,
}

fn lineage<'a>(cfg: &'a RunConfig, seed: u64, corpus_sha256: Option<String>) -> Lineage<'a> {
    Lineage {
        build: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")),
        seed,
        corpus_sha256,
        config: cfg,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), std::env::vars())?;
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::usage("--workers must be ≥ 1"));
        }
        cfg.train.workers = w;
    }
    match cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::Ingest(a) => ingest(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Evaluate(a) => evaluate(cfg, a),
        Command::BiasReport(a) => bias_report(a),
        Command::OnlineSim(a) => online_sim(cfg, a),
        Command::GradCheck(a) => grad_check(a),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn to_json(value: &impl Serialize) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| CliError::data(e.to_string()))
}

fn load_corpus(path: &Path) -> Result<(Corpus, String)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut corpus: Corpus =
        serde_json::from_slice(&bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    corpus.vocab.reindex();
    Ok((corpus, format!("{:x}", Sha256::digest(&bytes))))
}

fn apply_model_flags(cfg: &mut RunConfig, f: &ModelFlags) -> Result<()> {
    if let Some(v) = &f.variant {
        cfg.model.variant = v.parse::<Variant>()?;
    }
    macro_rules! set {
        ($($flag:ident => $($dst:ident).+;)*) => {$(
            if let Some(v) = f.$flag { cfg.$($dst).+ = v; }
        )*};
    }
    set! {
        d => model.d;
        sigma => model.sigma;
        tau => model.tau;
        lr => train.lr;
        batch_size => train.batch_size;
        epochs => train.max_epochs;
        patience => train.patience;
        seed => train.seed;
        seeds => ensemble.n_seeds;
    }
    if f.max_len.is_some() {
        cfg.model.max_len = f.max_len;
    }
    if let Some(p) = &f.precision {
        cfg.train.precision = match p.as_str() {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => return Err(CliError::usage(format!("unknown precision `{other}` (f32, f64)"))),
        };
    }
    Ok(())
}

fn synth(mut cfg: RunConfig, a: crate::SynthArgs) -> Result<()> {
    let s = &mut cfg.synth;
    if let Some(v) = a.m {
        s.m = v;
    }
    if let Some(v) = a.sessions {
        s.n_sessions = v;
    }
    if let Some(v) = a.days {
        s.n_days = v;
    }
    if let Some(v) = a.new_items_per_day {
        s.new_items_per_day = v;
    }
    if let Some(v) = a.zipf {
        s.zipf_s = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    let corpus = gen_sessions(&cfg.synth)?;
    corpus.write_events_csv(&a.out)?;
    if let Some(t) = &a.transitions {
        corpus.write_transitions_csv(t)?;
    }
    println!(
        "sessions={} clicks={} top_decile_share={:.4} new_items={}",
        corpus.sessions.len(),
        corpus.sessions.iter().map(|s| s.items.len()).sum::<usize>(),
        corpus.top_decile_share(),
        corpus.new_items.len()
    );
    Ok(())
}

fn ingest(mut cfg: RunConfig, a: crate::IngestArgs) -> Result<()> {
    if let Some(v) = a.test_days {
        cfg.data.test_days = v;
    }
    if let Some(v) = a.min_item_support {
        cfg.data.min_item_support = v;
    }
    if let Some(v) = a.min_session_len {
        cfg.data.min_session_len = v;
    }
    let format = match &a.format {
        Some(f) => f.parse::<EventFormat>()?,
        None => EventFormat::from_path(&a.events)?,
    };
    let loaded = load_events(&a.events, format)?;
    let (all_vocab, sessions) = build_corpus(&loaded.events, cfg.data.min_item_support, cfg.data.min_session_len)?;
    let last_day = sessions.iter().map(|s| s.day).max().expect("nonempty corpus");
    let cutoff = last_day - cfg.data.test_days as i64;
    let keyed = |s: &Session| KeyedSession {
        id: s.id.clone(),
        items: s.items.iter().map(|&i| all_vocab.key(i).to_string()).collect(),
        start: s.start,
    };
    let (train_k, test_k): (Vec<KeyedSession>, Vec<KeyedSession>) = if cfg.data.test_days == 0 {
        (sessions.iter().map(keyed).collect(), Vec::new())
    } else {
        let (tr, te): (Vec<&Session>, Vec<&Session>) = sessions.iter().partition(|s| s.day <= cutoff);
        (tr.into_iter().map(keyed).collect(), te.into_iter().map(keyed).collect())
    };
    if train_k.is_empty() {
        return Err(CliError::data("no training sessions before the test days"));
    }
    let mut vocab = ItemVocab::from_keys(Vec::new());
    for s in &train_k {
        for k in &s.items {
            vocab.push(k);
        }
    }
    let train = map_sessions(&train_k, &vocab, cfg.data.min_session_len);
    let test = map_sessions(&test_k, &vocab, cfg.data.min_session_len.max(2));
    vocab.count_popularity(&train);
    println!(
        "events={} malformed={} items={} train_sessions={} test_sessions={}",
        loaded.events.len(),
        loaded.malformed,
        vocab.len(),
        train.len(),
        test.len()
    );
    write(&a.out, to_json(&Corpus { vocab, train, test })?)
}

fn train(mut cfg: RunConfig, a: crate::TrainArgs) -> Result<()> {
    apply_model_flags(&mut cfg, &a.model)?;
    match cfg.train.precision {
        Precision::F32 => train_typed::<f32>(&cfg, &a),
        Precision::F64 => train_typed::<f64>(&cfg, &a),
    }
}

#[derive(Serialize)]
struct SeedResult<'a> {
    seed: u64,
    checkpoint: String,
    report: Option<&'a eval::MetricsReport>,
}

fn train_typed<T: Scalar>(cfg: &RunConfig, a: &crate::TrainArgs) -> Result<()> {
    let (corpus, sha) = load_corpus(&a.corpus)?;
    let mcfg = cfg.model.to_model_config();
    mcfg.validate()?;
    if cfg.ensemble.n_seeds == 0 {
        return Err(CliError::usage("ensemble.n_seeds must be ≥ 1"));
    }
    let cap = mcfg.prefix_cap();
    let (fit, val) = split_holdout(&corpus.train, cfg.data.val_fraction)?;
    let (fit, val) = (augment_all(&fit, cap), augment_all(&val, cap));
    let test = augment_all(&corpus.test, cap);
    let opts = cfg.eval_options();
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    for k in 0..cfg.ensemble.n_seeds as u64 {
        let mut tcfg = cfg.train.clone();
        tcfg.seed += k;
        let (params, trace) = train_model::<T>(&fit, &val, corpus.vocab.len(), &mcfg, &tcfg)?;
        if !params.is_finite() {
            return Err(CliError::numeric("trained parameters are not finite"));
        }
        let ckpt = a.out.join(format!("model-seed{}.ckpt", tcfg.seed));
        if let Some(dir) = ckpt.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
        }
        let meta = serde_json::to_value(lineage(cfg, tcfg.seed, Some(sha.clone()))).expect("serializable");
        checkpoint::save(&ckpt, &mcfg, &corpus.vocab, &params, meta)?;
        #[derive(Serialize)]
        struct TraceReport<'a> {
            lineage: Lineage<'a>,
            trace: &'a niser::train::TrainTrace,
        }
        let trace_path = a.out.join(format!("trace-seed{}.json", tcfg.seed));
        write(
            &trace_path,
            to_json(&TraceReport {
                lineage: lineage(cfg, tcfg.seed, Some(sha.clone())),
                trace: &trace,
            })?,
        )?;
        println!(
            "seed={} epochs={} best_epoch={} checkpoint={}",
            tcfg.seed,
            trace.epochs.len(),
            trace.best_epoch,
            ckpt.display()
        );
        if !test.is_empty() {
            reports.push(eval::evaluate(&params, &mcfg, &test, &corpus.vocab, &opts)?.0);
        }
        checkpoints.push((tcfg.seed, ckpt.display().to_string()));
    }
    if !reports.is_empty() {
        let summary = EnsembleSummary::from_reports(
            checkpoints.iter().map(|c| c.0).collect(),
            &reports.iter().collect::<Vec<_>>(),
        );
        #[derive(Serialize)]
        struct Report<'a> {
            lineage: Lineage<'a>,
            summary: EnsembleSummary,
            members: Vec<SeedResult<'a>>,
        }
        let members = checkpoints
            .iter()
            .zip(&reports)
            .map(|((seed, path), r)| SeedResult {
                seed: *seed,
                checkpoint: path.clone(),
                report: Some(r),
            })
            .collect();
        println!(
            "recall@{k}={:.4}±{:.4} mrr@{k}={:.4}±{:.4}",
            summary.recall_at_k.mean,
            summary.recall_at_k.std,
            summary.mrr_at_k.mean,
            summary.mrr_at_k.std,
            k = opts.k
        );
        write(
            &a.out.join("train_report.json"),
            to_json(&Report {
                lineage: lineage(cfg, cfg.train.seed, Some(sha)),
                summary,
                members,
            })?,
        )?;
    }
    Ok(())
}

fn evaluate(cfg: RunConfig, a: crate::EvaluateArgs) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let (corpus, sha) = load_corpus(&a.corpus)?;
    if ck.vocab.keys() != corpus.vocab.keys() {
        return Err(CliError::data("checkpoint and corpus vocabularies differ"));
    }
    let test = augment_all(&corpus.test, ck.config.prefix_cap());
    let (mut report, _) = eval::evaluate(&ck.params, &ck.config, &test, &ck.vocab, &cfg.eval_options())?;
    report.norm_diag = Some(norm_popularity_report(&ck.params.item_embeddings, &ck.vocab));
    let seed = ck.metadata.get("seed").and_then(|s| s.as_u64()).unwrap_or(cfg.train.seed);
    #[derive(Serialize)]
    struct Report<'a> {
        lineage: Lineage<'a>,
        checkpoint: String,
        metrics: eval::MetricsReport,
    }
    println!(
        "recall@{k}={:.4} mrr@{k}={:.4} arp={:.2} n={}",
        report.recall_at_k,
        report.mrr_at_k,
        report.arp,
        report.n_examples,
        k = report.k
    );
    write(
        &a.out,
        to_json(&Report {
            lineage: lineage(&cfg, seed, Some(sha)),
            checkpoint: a.checkpoint.display().to_string(),
            metrics: report,
        })?,
    )
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn bias_report(a: crate::BiasArgs) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let diag = norm_popularity_report(&ck.params.item_embeddings, &ck.vocab);
    println!("spearman={:.4} deciles={}", diag.spearman, diag.deciles.len());
    write(&with_ext(&a.out, "json"), to_json(&diag)?)?;
    write(&with_ext(&a.out, "csv"), diag.to_csv())
}

fn online_sim(mut cfg: RunConfig, a: crate::OnlineArgs) -> Result<()> {
    apply_model_flags(&mut cfg, &a.model)?;
    if let Some(v) = a.days {
        cfg.online.n_days = v;
    }
    if a.initial_days.is_some() {
        cfg.online.initial_days = a.initial_days;
    }
    if let Some(v) = a.phi_star {
        cfg.online.phi_star = v;
    }
    let (corpus, sha) = load_corpus(&a.corpus)?;
    let mut sessions = corpus.train.clone();
    sessions.extend(corpus.test.iter().cloned());
    let mcfg = cfg.model.to_model_config();
    let opts = cfg.eval_options();
    let run = match cfg.train.precision {
        Precision::F32 => run_online::<f32>(&sessions, &corpus.vocab, &mcfg, &cfg.train, &cfg.online, &opts)?,
        Precision::F64 => run_online::<f64>(&sessions, &corpus.vocab, &mcfg, &cfg.train, &cfg.online, &opts)?,
    };
    for d in &run.days {
        println!(
            "day={} train_sessions={} new_items={} f={:.6} n_eval={} recall={}",
            d.day,
            d.n_train_sessions,
            d.new_items.len(),
            d.f,
            d.n_eval,
            d.recall.map(|r| format!("{r:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    #[derive(Serialize)]
    struct Report<'a> {
        lineage: Lineage<'a>,
        run: &'a niser::online::OnlineRun,
    }
    write(
        &a.out.join("online.json"),
        to_json(&Report {
            lineage: lineage(&cfg, cfg.train.seed, Some(sha)),
            run: &run,
        })?,
    )?;
    write(&a.out.join("online.csv"), run.to_csv())
}

fn grad_check(a: crate::GradCheckArgs) -> Result<()> {
    let variant: Variant = a.variant.parse()?;
    let (m, d, len, batch) = (12, 8, 5, 3);
    let mcfg = niser::ModelConfig::for_variant(variant).with_dims(d, len, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let params = Parameters::<f64>::init(&mcfg, m, &mut rng);
    let examples: Vec<niser::ingest::Example> = (0..batch)
        .map(|_| {
            let n = rng.gen_range(1..=len);
            niser::ingest::Example {
                prefix: (0..n).map(|_| rng.gen_range(0..m)).collect(),
                target: rng.gen_range(0..m),
            }
        })
        .collect();
    let check = model_grad_check(&mcfg, &params, &examples)?;
    for (name, err) in PARAM_NAMES.iter().zip(&check.per_leaf) {
        println!("{name} {err:.3e}");
    }
    println!("max_rel_err={:.3e}", check.max_rel_err);
    if !(check.max_rel_err < GRAD_TOL) {
        return Err(CliError::numeric(format!(
            "gradient check failed: max relative error {:.3e} ≥ {GRAD_TOL:e}",
            check.max_rel_err
        )));
    }
    Ok(())
}
