//! Subcommands of the `boolattn` binary.

pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use boolattn::checkpoint::Checkpoint;
use boolattn::corpus::{Split, Vocab};
use boolattn::encoder::{is_boolattn_param, Encoder, ParamCounts};
use boolattn::experiment::{corpus_for_seed, pretrain_rng, pretrained_encoder, train_setting, ExperimentConfig};
use boolattn::numerics::gradcheck::Tolerance;
use boolattn::numerics::Rng;
use boolattn::operators::OperatorKind;
use boolattn::retrieval::{GateSetting, RetrievalMetrics};
use boolattn::suite::{gradient_suite, suite_config};

use report::{fmt4, Report};

#[derive(Debug, Parser)]
#[command(name = "boolattn", version, about = "Boolean-aware attention experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// `key = value` run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output directory for corpora, checkpoints and `report.jsonl`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub gate_mode: Option<GateMode>,
    #[arg(long, global = true, value_enum)]
    pub boolattn: Option<Switch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GateMode {
    Oracle,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write the synthetic corpus of a seed.
    Generate,
    /// Pretrain the Boolean modules and save a checkpoint.
    Pretrain,
    /// Fine-tune retrievers, one per seed.
    Train,
    /// Evaluate a trained checkpoint on its test split.
    Eval,
    /// Finite-difference check of every Boolean-attention parameter.
    Gradcheck,
    /// Parameter counts, base encoder vs Boolean attention.
    Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(boolattn::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<boolattn::Error> for CliError {
    fn from(e: boolattn::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Defaults, then the config file, then flags.
pub fn resolve(common: &Common, base: ExperimentConfig) -> CliResult<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            boolattn::config::apply(&base, &text)?
        }
        None => base,
    };
    if let Some(s) = common.seed {
        config.seeds = vec![s];
    }
    if let Some(s) = &common.seeds {
        if s.is_empty() {
            return Err(CliError::Usage("--seeds needs at least one seed".into()));
        }
        config.seeds = s.clone();
    }
    if let Some(g) = common.gate_mode {
        config.retrieval.gates = match g {
            GateMode::Oracle => GateSetting::Oracle,
            GateMode::Learned => GateSetting::Learned,
        };
    }
    if common.boolattn == Some(Switch::Off) {
        config.retrieval.gates = GateSetting::Off;
    }
    if config.seeds.is_empty() {
        return Err(CliError::Usage("no seeds configured".into()));
    }
    Ok(config)
}

pub fn run(cli: &Cli) -> CliResult<Outcome> {
    let mut report = Report::default();
    let outcome = match cli.command {
        Command::Generate => generate(&cli.common, &mut report),
        Command::Pretrain => pretrain(&cli.common, &mut report),
        Command::Train => train(&cli.common, &mut report),
        Command::Eval => eval(&cli.common, &mut report),
        Command::Gradcheck => gradcheck(&cli.common, &mut report),
        Command::Params => params(&cli.common, &mut report),
    }?;
    if let Some(dir) = &cli.common.out {
        report.save(dir)?;
    }
    Ok(outcome)
}

fn out_dir(common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn record_config(report: &mut Report, config: &ExperimentConfig) {
    report.record("config", json!({ "config": config }));
}

fn generate(common: &Common, report: &mut Report) -> CliResult<Outcome> {
    let config = resolve(common, ExperimentConfig::default())?;
    record_config(report, &config);
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let corpus = corpus_for_seed(&config, seed)?;
        let dir = out_dir(common).join(format!("corpus-{seed}"));
        corpus.save(&dir)?;
        let mut by_template: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for q in &corpus.queries {
            let e = by_template.entry(q.template).or_default();
            e.0 += 1;
            e.1 += q.answer_ids.len();
        }
        for (t, (n, answers)) in &by_template {
            let mean = *answers as f64 / *n as f64;
            rows.push(vec![seed.to_string(), t.to_string(), n.to_string(), format!("{mean:.1}")]);
            report.record("corpus", json!({ "seed": seed, "template": t, "queries": n, "mean_answers": mean }));
        }
        report.line(format!(
            "seed {seed}: {} documents, {} queries -> {}",
            corpus.documents.len(),
            corpus.queries.len(),
            dir.display()
        ));
    }
    report.table("queries per template", &["seed", "template", "queries", "mean answers"], &rows);
    Ok(Outcome::Success)
}

fn pretrain(common: &Common, report: &mut Report) -> CliResult<Outcome> {
    let config = resolve(common, ExperimentConfig::default())?;
    if !config.encoder.boolattn {
        return Err(CliError::Usage("pretraining needs encoder.boolattn = true".into()));
    }
    record_config(report, &config);
    let vocab = Vocab::default();
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let start = Instant::now();
        let (enc, metrics) = pretrained_encoder(&config, &vocab, &mut pretrain_rng(seed))?;
        let secs = start.elapsed().as_secs_f64();
        let path = out_dir(common).join(format!("pretrained-{seed}.ckpt"));
        let meta = json!({ "seed": seed, "stage": "pretrain", "config": config });
        Checkpoint { meta, encoders: vec![("query".into(), enc)] }.save(&path)?;
        rows.push(vec![seed.to_string(), fmt4(metrics.cue_f1), fmt4(metrics.gate_accuracy), format!("{secs:.1}"), path.display().to_string()]);
        report.record("pretrain", json!({ "seed": seed, "metrics": metrics, "seconds": secs, "checkpoint": path }));
    }
    report.table("pretraining (held-out)", &["seed", "cue F1", "gate acc", "seconds", "checkpoint"], &rows);
    Ok(Outcome::Success)
}

fn query_encoder(common: &Common, config: &ExperimentConfig, vocab: &Vocab, seed: u64) -> CliResult<Encoder> {
    match &common.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let enc = match ckpt.encoder("query") {
                Ok(e) => e.clone(),
                Err(_) => ckpt.encoders.first().map(|(_, e)| e.clone()).ok_or_else(|| CliError::Usage("empty checkpoint".into()))?,
            };
            Ok(enc)
        }
        None => Ok(pretrained_encoder(config, vocab, &mut pretrain_rng(seed))?.0),
    }
}

const REPORT_KS: [usize; 5] = [1, 5, 10, 20, 50];

fn metric_row(label: Vec<String>, m: &RetrievalMetrics) -> Vec<String> {
    let mut row = label;
    row.extend(REPORT_KS.iter().map(|&k| fmt4(m.recall(k))));
    row.push(fmt4(m.overall.mrr_at_10));
    row.push(fmt4(m.operator_mrr(OperatorKind::Not)));
    row
}

fn metric_header(prefix: &[&'static str]) -> Vec<&'static str> {
    let mut h = prefix.to_vec();
    h.extend(["R@1", "R@5", "R@10", "R@20", "R@50", "MRR@10", "NOT MRR@10"]);
    h
}

fn train(common: &Common, report: &mut Report) -> CliResult<Outcome> {
    let mut config = resolve(common, ExperimentConfig::default())?;
    let gates = config.retrieval.gates;
    config.settings = vec![gates];
    record_config(report, &config);
    let vocab = Vocab::default();
    let mut rows = Vec::new();
    let mut tests = Vec::new();
    for &seed in &config.seeds {
        let start = Instant::now();
        let corpus = corpus_for_seed(&config, seed)?;
        let query = query_encoder(common, &config, &vocab, seed)?;
        let counts = query.param_counts();
        let (retriever, result) = train_setting(&config, &corpus, &vocab, query, gates, seed)?;
        let secs = start.elapsed().as_secs_f64();
        let path = out_dir(common).join(format!("retriever-{seed}.ckpt"));
        let meta = json!({ "seed": seed, "stage": "train", "gates": gates, "config": config });
        Checkpoint::from_retriever(&retriever, meta).save(&path)?;
        rows.push(metric_row(vec![seed.to_string()], &result.test));
        report.record(
            "train",
            json!({
                "seed": seed,
                "gates": gates,
                "seconds": secs,
                "params": counts,
                "best_epoch": result.best_epoch,
                "epoch_losses": result.epoch_losses,
                "validation": result.validation,
                "test": result.test,
                "checkpoint": path,
            }),
        );
        tests.push(result.test);
    }
    let mean = mean_metrics(tests.iter());
    rows.push(metric_row(vec!["mean".into()], &mean));
    report.record("train_mean", json!({ "seeds": config.seeds, "gates": gates, "test": mean }));
    report.table(&format!("test retrieval, gates {gates:?}"), &metric_header(&["seed"]), &rows);
    Ok(Outcome::Success)
}

/// Unweighted mean over seeds of the overall and per-operator numbers.
pub fn mean_metrics<'a>(all: impl Iterator<Item = &'a RetrievalMetrics>) -> RetrievalMetrics {
    let all: Vec<&RetrievalMetrics> = all.collect();
    let n = all.len().max(1) as f64;
    let mut out = RetrievalMetrics::default();
    for m in &all {
        for (k, v) in &m.overall.recall {
            *out.overall.recall.entry(*k).or_default() += v / n;
        }
        out.overall.mrr_at_10 += m.overall.mrr_at_10 / n;
        out.overall.queries += m.overall.queries;
        for (op, b) in &m.per_operator {
            let e = out.per_operator.entry(*op).or_default();
            e.mrr_at_10 += b.mrr_at_10 / n;
            e.queries += b.queries;
            for (k, v) in &b.recall {
                *e.recall.entry(*k).or_default() += v / n;
            }
        }
    }
    out
}

fn eval(common: &Common, report: &mut Report) -> CliResult<Outcome> {
    let path = common.checkpoint.as_ref().ok_or_else(|| CliError::Usage("eval needs --checkpoint".into()))?;
    let ckpt = Checkpoint::load(path)?;
    let base: ExperimentConfig = match ckpt.meta.get("config") {
        Some(c) => serde_json::from_value(c.clone()).map_err(boolattn::Error::from)?,
        None => ExperimentConfig::default(),
    };
    let mut base = base;
    if let Some(seed) = ckpt.meta.get("seed").and_then(|s| s.as_u64()) {
        base.seeds = vec![seed];
    }
    if let Some(g) = ckpt.meta.get("gates") {
        base.retrieval.gates = serde_json::from_value(g.clone()).map_err(boolattn::Error::from)?;
    }
    let config = resolve(common, base)?;
    record_config(report, &config);
    let seed = config.seeds[0];
    let retriever = ckpt.into_retriever()?;
    let corpus = corpus_for_seed(&config, seed)?;
    let m = retriever.evaluate(&corpus, &Vocab::default(), Split::Test, &config.retrieval)?;
    print_metrics(report, &m, seed, config.retrieval.gates);
    report.record("eval", json!({ "seed": seed, "gates": config.retrieval.gates, "checkpoint": path, "test": m }));
    Ok(Outcome::Success)
}

pub fn print_metrics(report: &Report, m: &RetrievalMetrics, seed: u64, gates: GateSetting) {
    report.table(&format!("test retrieval, seed {seed}, gates {gates:?}"), &metric_header(&["queries"]), &[metric_row(vec![m.overall.queries.to_string()], m)]);
    let op_rows: Vec<Vec<String>> = m
        .per_operator
        .iter()
        .map(|(op, b)| vec![op.to_string(), b.queries.to_string(), fmt4(b.recall.get(&20).copied().unwrap_or(0.0)), fmt4(b.mrr_at_10)])
        .collect();
    report.table("per operator", &["operator", "queries", "R@20", "MRR@10"], &op_rows);
    let t_rows: Vec<Vec<String>> = m
        .per_template
        .iter()
        .map(|(t, b)| vec![t.to_string(), b.queries.to_string(), fmt4(b.recall.get(&20).copied().unwrap_or(0.0)), fmt4(b.mrr_at_10)])
        .collect();
    report.table("per template", &["template", "queries", "R@20", "MRR@10"], &t_rows);
}

fn gradcheck(common: &Common, report: &mut Report) -> CliResult<Outcome> {
    let config = resolve(common, ExperimentConfig::default())?;
    let small = suite_config(config.encoder);
    report.record("config", json!({ "encoder": small }));
    let seed = config.seeds[0];
    let tol = Tolerance::default();
    let lines = gradient_suite(small, seed, tol)?;
    let rows: Vec<Vec<String>> = lines
        .iter()
        .map(|l| {
            vec![
                l.mode.to_string(),
                l.param.clone(),
                l.elements.to_string(),
                l.failures.to_string(),
                format!("{:.2e}", l.max_rel_err),
                if l.passed() { "pass" } else { "FAIL" }.to_string(),
            ]
        })
        .collect();
    for l in &lines {
        report.record("gradcheck", l);
    }
    report.table(
        &format!("central differences, h={} rtol={} atol={}", tol.step, tol.rtol, tol.atol),
        &["gates", "parameter", "elements", "failures", "max rel err", "result"],
        &rows,
    );
    let failed = lines.iter().filter(|l| !l.passed()).count();
    report.line(format!("{} of {} tensors passed", lines.len() - failed, lines.len()));
    Ok(if failed == 0 { Outcome::Success } else { Outcome::CheckFailed })
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamsReport {
    pub counts: ParamCounts,
    pub overhead: f64,
    /// Element counts per module, Boolean-attention modules prefixed `boolattn/`.
    pub modules: BTreeMap<String, usize>,
}

fn module_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.iter().position(|p| *p == "boolattn") {
        Some(i) => format!("boolattn/{}", parts.get(i + 1).copied().unwrap_or("")),
        None => match parts.as_slice() {
            ["layers", _, m, ..] => m.trim_end_matches(char::is_numeric).to_string(),
            [m, ..] => m.to_string(),
            [] => String::new(),
        },
    }
}

pub fn params_report(enc: &Encoder) -> ParamsReport {
    let mut modules = BTreeMap::new();
    for (name, t) in enc.store.iter() {
        debug_assert_eq!(module_of(name).starts_with("boolattn/"), is_boolattn_param(name));
        *modules.entry(module_of(name)).or_default() += t.len();
    }
    let counts = enc.param_counts();
    ParamsReport { counts, overhead: counts.overhead(), modules }
}

fn params(common: &Common, report: &mut Report) -> CliResult<Outcome> {
    let encoders: Vec<(String, Encoder)> = match &common.checkpoint {
        Some(path) => Checkpoint::load(path)?.encoders,
        None => {
            let config = resolve(common, ExperimentConfig::default())?;
            record_config(report, &config);
            vec![("query".into(), Encoder::new(config.encoder, &mut Rng::new(config.seeds[0]))?)]
        }
    };
    for (name, enc) in &encoders {
        let p = params_report(enc);
        let rows: Vec<Vec<String>> = p.modules.iter().map(|(m, n)| vec![m.clone(), n.to_string()]).collect();
        report.table(&format!("parameters of `{name}`"), &["module", "count"], &rows);
        report.line(format!(
            "base {}  boolattn {}  overhead {:.2}%",
            p.counts.base,
            p.counts.boolattn,
            100.0 * p.overhead
        ));
        report.record("params", json!({ "encoder": name, "report": p }));
    }
    Ok(Outcome::Success)
}

/// Writes a checkpoint holding one encoder, for tests and scripts.
pub fn save_encoder(path: &Path, enc: &Encoder, meta: serde_json::Value) -> CliResult<()> {
    Checkpoint { meta, encoders: vec![("query".into(), enc.clone())] }.save(path)?;
    Ok(())
}
