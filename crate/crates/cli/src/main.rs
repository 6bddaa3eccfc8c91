//! `faet`: split corpora, train, evaluate, predict, compare variants and
//! verify gradients.
//!
//! Reports go to stdout as JSON (or tables with `--pretty`); progress lines
//! go to stderr. Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use faet_core::checkpoint::{load_checkpoint, save_checkpoint};
use faet_core::config::{TrainConfig, Variant};
use faet_core::corpus::{read_jsonl, split_corpus, write_jsonl, RecordMode, SplitSpec, TokenizedDoc};
use faet_core::error::{ErrorClass, FaetError};
use faet_core::gradcheck::{model_gradcheck, GradCheckConfig, GradCheckReport};
use faet_core::metrics::MetricsReport;
use faet_core::synthetic::{overfit_corpus, xor_corpus};
use faet_core::trainer::{ablate, evaluate, predict, train, EpochLog};
use faet_core::Model;
use serde::Serialize;
use serde_json::{json, Value};

const SEED_ENV: &str = "FAET_SEED";
/// Train/test/val sizes published for the 8930-document reference corpus.
const REFERENCE_SPLIT: (usize, usize, usize) = (6250, 1786, 894);

#[derive(Parser)]
#[command(name = "faet", version, about = "Emoji-aware sentiment classification with fine-grained emoji/text attention")]
struct Cli {
    /// Print human-readable tables instead of JSON.
    #[arg(long, global = true)]
    pretty: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Shuffle a corpus and write train/test/val files.
    Split(SplitArgs),
    /// Train a model and write checkpoints and an epoch log.
    Train(TrainArgs),
    /// Score a labeled corpus with a checkpoint.
    Eval(EvalArgs),
    /// Predict labels for a corpus, one JSON line per document.
    Predict(PredictArgs),
    /// Train FAET and AET on the same data and compare them.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients of the full loss.
    Gradcheck(GradcheckArgs),
    /// Write a seeded synthetic corpus.
    GenSynthetic(SynthArgs),
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory for train.jsonl, test.jsonl and val.jsonl.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// train:test:val proportions.
    #[arg(long, default_value = "7:2:1")]
    ratios: String,
    #[arg(long)]
    seed: Option<u64>,
}

/// Training settings; flags override the config file, which overrides the defaults.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON file with TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    d_w: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lambda_align: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Faet,
    Aet,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Faet => Variant::Faet,
            VariantArg::Aet => Variant::Aet,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Directory for best.faet, final.faet and log.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Add the attention weights behind each prediction.
    #[arg(long)]
    explain: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Directory for faet.faet and aet.faet (best-validation models).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "faet")]
    variant: VariantArg,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Coordinates checked per parameter group.
    #[arg(long, default_value_t = 8)]
    samples: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Overfit,
    Xor,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    /// Output directory: overfit.jsonl, or train/val/test.jsonl for xor.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of documents (training documents for xor).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 64)]
    val_size: usize,
    #[arg(long, default_value_t = 128)]
    test_size: usize,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<FaetError> for CliError {
    fn from(e: FaetError) -> Self {
        let code = match e.class() {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numeric => 3,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let pretty = cli.pretty;
    match cli.command {
        Command::Split(a) => cmd_split(a, pretty),
        Command::Train(a) => cmd_train(a, pretty),
        Command::Eval(a) => cmd_eval(a, pretty),
        Command::Predict(a) => cmd_predict(a),
        Command::Ablate(a) => cmd_ablate(a, pretty),
        Command::Gradcheck(a) => cmd_gradcheck(a, pretty),
        Command::GenSynthetic(a) => cmd_gen_synthetic(a, pretty),
    }
}

/// `--seed`, else `FAET_SEED`, else `fallback`.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(fallback),
    }
}

fn build_config(args: &ConfigArgs) -> CliResult<TrainConfig> {
    let (mut cfg, file_seed) = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::from(FaetError::io(path, e)))?;
            let cfg = TrainConfig::from_json(&text)?;
            // A seed written in the file wins over the environment.
            let explicit = serde_json::from_str::<Value>(&text)
                .ok()
                .and_then(|v| v.get("seed").cloned())
                .is_some();
            let seed = explicit.then_some(cfg.seed);
            (cfg, seed)
        }
        None => (TrainConfig::default(), None),
    };
    cfg.seed = match file_seed {
        Some(s) => args.seed.unwrap_or(s),
        None => resolve_seed(args.seed, 0)?,
    };
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field {
                cfg.$field = v;
            })*
        };
    }
    set!(epochs, d, d_w, lr, batch_size, dropout, lambda_align, max_len);
    if let Some(v) = args.variant {
        cfg.variant = v.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| FaetError::io(dir, e).into())
}

/// A closed stdout (for example `| head`) ends output quietly.
fn stdout_result(r: io::Result<()>) -> CliResult<()> {
    match r {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(FaetError::io("<stdout>", e).into()),
        _ => Ok(()),
    }
}

fn emit(value: &impl Serialize) -> CliResult<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    stdout_result(serde_json::to_writer(&mut out, value).map_err(io::Error::from).and_then(|()| writeln!(out)))
}

fn emit_text(text: &str) -> CliResult<()> {
    stdout_result(io::stdout().lock().write_all(text.as_bytes()))
}

fn labeled(path: &Path) -> CliResult<Vec<TokenizedDoc>> {
    let docs = read_jsonl(path, RecordMode::Labeled)?;
    if docs.is_empty() {
        return Err(FaetError::Data(format!("{}: no records", path.display())).into());
    }
    Ok(docs)
}

#[derive(Serialize)]
struct SplitReport {
    total: usize,
    ratios: String,
    seed: u64,
    train: usize,
    test: usize,
    val: usize,
    files: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference: Option<Value>,
}

fn cmd_split(a: SplitArgs, pretty: bool) -> CliResult<()> {
    let seed = resolve_seed(a.seed, 0)?;
    let spec = SplitSpec::parse_ratios(&a.ratios, seed)?;
    let docs = read_jsonl(&a.input, RecordMode::Labeled)?;
    let splits = split_corpus(&docs, &spec)?;
    ensure_dir(&a.out_dir)?;
    let mut files = Vec::new();
    for (name, part) in [("train", &splits.train), ("test", &splits.test), ("val", &splits.val)] {
        let path = a.out_dir.join(format!("{name}.jsonl"));
        write_jsonl(&path, part)?;
        files.push(path.display().to_string());
    }
    let sizes = (splits.train.len(), splits.test.len(), splits.val.len());
    let (rt, rs, rv) = REFERENCE_SPLIT;
    let reference = (docs.len() == rt + rs + rv && {
        let total = spec.train + spec.test + spec.val;
        (spec.train / total - 0.7).abs() < 1e-9 && (spec.test / total - 0.2).abs() < 1e-9
    })
    .then(|| {
        json!({
            "train": rt,
            "test": rs,
            "val": rv,
            "note": "published sizes for this corpus size; the floor rule used here \
                     rounds the test and val shares down and gives the remainder to train",
        })
    });
    let report = SplitReport {
        total: docs.len(),
        ratios: a.ratios,
        seed,
        train: sizes.0,
        test: sizes.1,
        val: sizes.2,
        files,
        reference,
    };
    if pretty {
        let mut s = format!(
            "{} documents split {} (seed {})\n  train {:>6}\n  test  {:>6}\n  val   {:>6}\n",
            report.total, report.ratios, seed, report.train, report.test, report.val
        );
        if report.reference.is_some() {
            let _ = writeln!(s, "  published reference: train {rt}, test {rs}, val {rv}");
        }
        emit_text(&s)
    } else {
        emit(&report)
    }
}

fn write_log_line(out: &mut impl Write, entry: &EpochLog) -> io::Result<()> {
    serde_json::to_writer(&mut *out, entry)?;
    writeln!(out)?;
    out.flush()
}

fn cmd_train(a: TrainArgs, pretty: bool) -> CliResult<()> {
    let cfg = build_config(&a.config)?;
    let train_docs = labeled(&a.train)?;
    let val_docs = labeled(&a.val)?;
    ensure_dir(&a.out_dir)?;
    let log_path = a.out_dir.join("log.jsonl");
    let log_file = fs::File::create(&log_path).map_err(|e| FaetError::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let mut log_error = None;
    let outcome = train::<f64>(&train_docs, &val_docs, &cfg, |e| {
        eprintln!(
            "epoch {:>3}  train_loss {:.6}  val_loss {:.6}  val_acc {:.4}",
            e.epoch, e.train_loss, e.val_loss, e.val_acc
        );
        if let Err(err) = write_log_line(&mut log, e) {
            log_error.get_or_insert(err);
        }
    })?;
    if let Some(err) = log_error {
        return Err(FaetError::io(&log_path, err).into());
    }
    let best = a.out_dir.join("best.faet");
    let last = a.out_dir.join("final.faet");
    save_checkpoint(&outcome.best_model, &best)?;
    save_checkpoint(&outcome.final_model, &last)?;
    let summary = json!({
        "variant": cfg.variant,
        "epochs": outcome.log.len(),
        "best_epoch": outcome.best_epoch,
        "last": outcome.log.last(),
        "best_checkpoint": best.display().to_string(),
        "final_checkpoint": last.display().to_string(),
        "log": log_path.display().to_string(),
    });
    if pretty {
        emit_text(&format!(
            "trained {} for {} epochs; best epoch {}\n  best:  {}\n  final: {}\n  log:   {}\n",
            cfg.variant.name(),
            outcome.log.len(),
            outcome.best_epoch,
            best.display(),
            last.display(),
            log_path.display()
        ))
    } else {
        emit(&summary)
    }
}

fn metrics_table(m: &MetricsReport) -> String {
    let mut s = format!("{:<9} {:>9} {:>9} {:>9}\n", "class", "precision", "recall", "f1");
    for (name, c) in [("positive", &m.positive), ("negative", &m.negative), ("macro", &m.macro_avg), ("micro", &m.micro)] {
        let _ = writeln!(s, "{name:<9} {:>9.4} {:>9.4} {:>9.4}", c.precision, c.recall, c.f1);
    }
    let c = &m.counts;
    let _ = writeln!(s, "\naccuracy {:.4}  (TP {} FP {} FN {} TN {})", m.accuracy, c.tp, c.fp, c.fn_, c.tn);
    if !m.zero_division.is_empty() {
        let _ = writeln!(s, "zero denominators reported as 0: {}", m.zero_division.join(", "));
    }
    s
}

fn cmd_eval(a: EvalArgs, pretty: bool) -> CliResult<()> {
    let model: Model = load_checkpoint(&a.model)?;
    let docs = labeled(&a.data)?;
    let eval = evaluate(&model, &docs)?;
    if pretty {
        emit_text(&metrics_table(&eval.report))
    } else {
        emit(&eval.report)
    }
}

fn cmd_predict(a: PredictArgs) -> CliResult<()> {
    let model: Model = load_checkpoint(&a.model)?;
    let docs = read_jsonl(&a.data, RecordMode::Predict)?;
    let preds = predict(&model, &docs)?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for (doc, p) in docs.iter().zip(&preds) {
        let mut line = json!({ "probs": p.probs, "label": p.label });
        if a.explain {
            let explanation = model.explain(&model.encode(doc), &doc.emoji_tokens)?;
            line["explanation"] = serde_json::to_value(explanation).map_err(FaetError::from)?;
        }
        let written = serde_json::to_writer(&mut out, &line)
            .map_err(io::Error::from)
            .and_then(|()| writeln!(out));
        if written.is_err() {
            return stdout_result(written);
        }
    }
    stdout_result(out.flush())
}

fn cmd_ablate(a: AblateArgs, pretty: bool) -> CliResult<()> {
    let cfg = build_config(&a.config)?;
    let train_docs = labeled(&a.train)?;
    let val_docs = labeled(&a.val)?;
    let test_docs = labeled(&a.test)?;
    let result = ablate::<f64>(&train_docs, &val_docs, &test_docs, &cfg, |v, e| {
        eprintln!(
            "{} epoch {:>3}  train_loss {:.6}  val_loss {:.6}  val_acc {:.4}",
            v.name(),
            e.epoch,
            e.train_loss,
            e.val_loss,
            e.val_acc
        );
    })?;
    if let Some(dir) = &a.out_dir {
        ensure_dir(dir)?;
        save_checkpoint(&result.faet.best_model, &dir.join("faet.faet"))?;
        save_checkpoint(&result.aet.best_model, &dir.join("aet.faet"))?;
    }
    if pretty {
        let mut s = result.report.table();
        s.push('\n');
        let _ = writeln!(s, "{:<5} {:>4} {:>4} {:>7} {:>7}  text / emojis", "label", "FAET", "AET", "p+FAET", "p+AET");
        for r in result.report.examples.iter().take(10) {
            let _ = writeln!(
                s,
                "{:<5} {:>4} {:>4} {:>7.3} {:>7.3}  {} / {}",
                r.label,
                r.faet,
                r.aet,
                r.faet_positive,
                r.aet_positive,
                r.text,
                r.emojis.join(" ")
            );
        }
        emit_text(&s)
    } else {
        emit(&result.report)
    }
}

fn gradcheck_table(r: &GradCheckReport) -> String {
    let mut s = format!("{:<18} {:>7} {:>7} {:>12}\n", "group", "checked", "nonzero", "max rel err");
    for g in &r.groups {
        let _ = writeln!(s, "{:<18} {:>7} {:>7} {:>12.3e}", g.name, g.checked, g.nonzero, g.max_rel_error);
    }
    let verdict = if r.passed() { "PASS" } else { "FAIL" };
    let _ = writeln!(s, "\n{verdict}: max relative error {:.3e} (tolerance {:.0e})", r.max_rel_error(), r.tolerance);
    s
}

fn cmd_gradcheck(a: GradcheckArgs, pretty: bool) -> CliResult<()> {
    if !(a.tolerance > 0.0) || a.samples == 0 {
        return Err(CliError::usage("tolerance and samples must be positive"));
    }
    let cfg = GradCheckConfig {
        seed: resolve_seed(a.seed, 0)?,
        tolerance: a.tolerance,
        samples_per_group: a.samples,
        ..GradCheckConfig::default()
    };
    let report = model_gradcheck(a.variant.into(), &cfg)?;
    if pretty {
        emit_text(&gradcheck_table(&report))?;
    } else {
        emit(&json!({
            "passed": report.passed(),
            "max_rel_error": report.max_rel_error(),
            "tolerance": report.tolerance,
            "groups": report.groups,
        }))?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::numeric(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.0e}",
            report.max_rel_error(),
            report.tolerance
        )))
    }
}

fn cmd_gen_synthetic(a: SynthArgs, pretty: bool) -> CliResult<()> {
    let seed = resolve_seed(a.seed, 0)?;
    ensure_dir(&a.out_dir)?;
    let parts: Vec<(&str, Vec<TokenizedDoc>)> = match a.kind {
        SynthKind::Overfit => vec![("overfit", overfit_corpus(a.size.unwrap_or(64), seed)?)],
        SynthKind::Xor => {
            let c = xor_corpus(a.size.unwrap_or(512), a.val_size, a.test_size, seed)?;
            vec![("train", c.train), ("val", c.val), ("test", c.test)]
        }
    };
    let mut files = serde_json::Map::new();
    let mut s = String::new();
    for (name, docs) in &parts {
        let path = a.out_dir.join(format!("{name}.jsonl"));
        write_jsonl(&path, docs)?;
        let _ = writeln!(s, "{:>5} documents -> {}", docs.len(), path.display());
        files.insert(
            name.to_string(),
            json!({ "path": path.display().to_string(), "documents": docs.len() }),
        );
    }
    if pretty {
        emit_text(&s)
    } else {
        emit(&json!({ "seed": seed, "files": files }))
    }
}
