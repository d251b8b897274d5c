//! Subcommands of the `t2ipal` binary, callable as plain functions.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use t2ipal::corpus::{self, CategorySet, SynonymMap};
use t2ipal::encoders::{self, ClassDirections, FeatureSet, TextEncoder};
use t2ipal::eval::{self, ScoreRecord, Scorer, DEFAULT_FUSION_WEIGHT};
use t2ipal::training::{self, GradcheckOptions, TrainConfig};
use t2ipal::{seed, Error};

/// Default number of synthetic images per caption.
pub const DEFAULT_MULTIPLICITY: usize = 6;

/// A failed command. The variant picks the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Unreadable or malformed input, or an unwritable output.
    #[error("{0}")]
    Input(String),
    /// Inputs that parse but do not fit together, or a failed check.
    #[error("{0}")]
    Semantic(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Semantic(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Parse { .. } | Error::Format { .. } => CliError::Input(e.to_string()),
            _ => CliError::Semantic(e.to_string()),
        }
    }
}

fn io_context(path: &Path) -> impl FnOnce(Error) -> CliError + '_ {
    move |e| match CliError::from(e) {
        CliError::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "t2ipal", version, about = "Prompt + adapter multi-label recognition trained from captions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter raw captions down to those that mention a class.
    Prepare(PrepareArgs),
    /// Encode captions and synthesize surrogate image features.
    Synth(SynthArgs),
    /// Train prompt contexts and the prototype adapter.
    Train(TrainArgs),
    /// Score a feature file with a checkpoint and report mAP.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Blend two score files.
    Fuse(FuseArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// One caption per line.
    #[arg(long)]
    pub captions: PathBuf,
    /// One class name per line.
    #[arg(long)]
    pub classes: PathBuf,
    /// `synonym<TAB>class` lines.
    #[arg(long)]
    pub synonyms: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub classes: PathBuf,
    /// Synthetic images per caption.
    #[arg(long, default_value_t = DEFAULT_MULTIPLICITY)]
    pub multiplicity: usize,
    /// Image-branch feature file.
    #[arg(long)]
    pub out: PathBuf,
    /// Text-branch feature file (default: `<out>.text`).
    #[arg(long)]
    pub text_out: Option<PathBuf>,
    /// Name of the random stream, so train and test sets differ.
    #[arg(long, default_value = "train")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub classes: PathBuf,
    #[arg(long)]
    pub text_features: Option<PathBuf>,
    #[arg(long)]
    pub image_features: Option<PathBuf>,
    /// Checkpoint path; the loss log goes to `<out>.log.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `gamma` from the config.
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// JSON report; raw scores go to `<out>.scores`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_FUSION_WEIGHT)]
    pub fusion_weight: f64,
    /// Also write the modality-gap diagnostic here.
    #[arg(long)]
    pub gap_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Hyperparameters and the first seed; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    #[arg(long, hide = true)]
    pub inject_sign_error: bool,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub weight: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&a).map(|stats| println!("{stats}")),
        Command::Synth(a) => cmd_synth(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|r| println!("mAP {:.4}", r.map)),
        Command::Gradcheck(a) => {
            let rows = cmd_gradcheck(&a)?;
            print!("{}", format_gradcheck(&rows));
            if rows.iter().all(|r| r.passed) {
                Ok(())
            } else {
                Err(CliError::Semantic("gradient check failed".into()))
            }
        }
        Command::Fuse(a) => cmd_fuse(&a).map(|_| ()),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(out: &Path) -> PathBuf {
    with_suffix(out, ".manifest.json")
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_manifest(out: &Path, manifest: serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_text(&manifest_path(out), &text)
}

fn load_config(path: &Path) -> CliResult<TrainConfig> {
    TrainConfig::load(path).map_err(io_context(path))
}

fn load_classes(path: &Path) -> CliResult<CategorySet> {
    CategorySet::from_file(path).map_err(io_context(path))
}

fn load_features(path: &Path) -> CliResult<Vec<FeatureSet<f64>>> {
    encoders::read_feature_file(path).map_err(io_context(path))
}

/// Returns the preparation stats as JSON.
pub fn cmd_prepare(args: &PrepareArgs) -> CliResult<String> {
    let classes = load_classes(&args.classes)?;
    let synonyms = match &args.synonyms {
        Some(p) => SynonymMap::from_file(p, &classes).map_err(io_context(p))?,
        None => SynonymMap::new(),
    };
    let text = fs::read_to_string(&args.captions).map_err(|e| CliError::Input(format!("{}: {e}", args.captions.display())))?;
    let captions: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let filter = corpus::build_noun_filter(&classes, &synonyms)?;
    let (records, stats) = corpus::prepare_corpus(&captions, &classes, &filter);
    corpus::write_corpus(&records, &args.out).map_err(io_context(&args.out))?;
    let stats = serde_json::to_value(&stats).expect("stats serialize");
    write_manifest(
        &args.out,
        json!({
            "command": "prepare",
            "captions": args.captions,
            "classes": classes.names(),
            "synonyms": args.synonyms,
            "stats": stats,
        }),
    )?;
    Ok(stats.to_string())
}

/// Image features and text features of one corpus. Deterministic in the
/// config seed and `split`.
pub fn synthesize(
    records: &[corpus::CaptionRecord],
    classes: &CategorySet,
    config: &TrainConfig,
    multiplicity: usize,
    split: &str,
) -> CliResult<(Vec<FeatureSet<f64>>, Vec<FeatureSet<f64>>)> {
    if multiplicity == 0 {
        return Err(CliError::Semantic("multiplicity must be at least 1".into()));
    }
    let spec = config.encoder_spec();
    let encoder = TextEncoder::<f64>::new(&spec)?;
    let directions = ClassDirections::new(&encoder, classes)?;
    let mut rng = seed::stream(config.seed, &format!("synth/{split}"));
    let mut image = Vec::with_capacity(records.len() * multiplicity);
    let mut text = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if r.labels.iter().any(|&l| l >= classes.len()) {
            return Err(CliError::Semantic(format!("caption {i} has a label outside the {} classes", classes.len())));
        }
        let labels = r.multi_hot(classes.len());
        text.push(encoder.encode_caption(&r.text, labels.clone())?);
        for _ in 0..multiplicity {
            image.push(encoders::synth_image_features(&labels, &spec, &directions, &mut rng)?);
        }
    }
    Ok((image, text))
}

pub fn text_out_path(args: &SynthArgs) -> PathBuf {
    args.text_out.clone().unwrap_or_else(|| with_suffix(&args.out, ".text"))
}

/// Returns `(image samples, text samples)` written.
pub fn cmd_synth(args: &SynthArgs) -> CliResult<(usize, usize)> {
    let config = load_config(&args.config)?;
    let classes = load_classes(&args.classes)?;
    if config.num_classes.is_some_and(|c| c != classes.len()) {
        return Err(CliError::Semantic(format!(
            "config expects {:?} classes, class file has {}",
            config.num_classes,
            classes.len()
        )));
    }
    let records = corpus::load_corpus(&args.corpus).map_err(io_context(&args.corpus))?;
    let (image, text) = synthesize(&records, &classes, &config, args.multiplicity, &args.split)?;
    let text_out = text_out_path(args);
    encoders::write_feature_file(&image, &args.out).map_err(io_context(&args.out))?;
    encoders::write_feature_file(&text, &text_out).map_err(io_context(&text_out))?;
    write_manifest(
        &args.out,
        json!({
            "command": "synth",
            "corpus": args.corpus,
            "classes": classes.names(),
            "config": config,
            "multiplicity": args.multiplicity,
            "split": args.split,
            "image_samples": image.len(),
            "text_out": text_out,
            "text_samples": text.len(),
        }),
    )?;
    Ok((image.len(), text.len()))
}

pub fn loss_log_path(out: &Path) -> PathBuf {
    with_suffix(out, ".log.jsonl")
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<training::TrainOutcome<f64>> {
    let mut config = load_config(&args.config)?;
    if let Some(g) = args.gamma {
        config.gamma = g;
        config.validate()?;
    }
    let classes = load_classes(&args.classes)?;
    let read = |path: &Option<PathBuf>, needed: bool, what: &str| -> CliResult<Vec<FeatureSet<f64>>> {
        match (path, needed) {
            (_, false) => Ok(Vec::new()),
            (Some(p), true) => load_features(p),
            (None, true) => Err(CliError::Semantic(format!("{what} features are required for gamma = {}", config.gamma))),
        }
    };
    let image = read(&args.image_features, config.gamma > 0.0, "image")?;
    let text = read(&args.text_features, config.gamma < 1.0, "text")?;
    if let (Some(i), Some(t)) = (image.first(), text.first()) {
        if i.dim() != t.dim() {
            return Err(CliError::Semantic(format!("image features have D={}, text features D={}", i.dim(), t.dim())));
        }
    }
    let outcome = training::train(&config, &classes, &image, &text)?;
    training::save_checkpoint(&outcome.checkpoint, &args.out).map_err(io_context(&args.out))?;
    let log_path = loss_log_path(&args.out);
    let mut log = String::new();
    for entry in &outcome.log {
        log.push_str(&serde_json::to_string(entry).expect("log serializes"));
        log.push('\n');
    }
    write_text(&log_path, &log)?;
    write_manifest(
        &args.out,
        json!({
            "command": "train",
            "config": config,
            "classes": classes.names(),
            "image_features": args.image_features.as_ref().filter(|_| config.gamma > 0.0),
            "text_features": args.text_features.as_ref().filter(|_| config.gamma < 1.0),
            "image_samples": image.len(),
            "text_samples": text.len(),
            "epochs_completed": outcome.log.len(),
            "steps": outcome.steps,
            "final_loss": outcome.log.last().map(|l| l.loss),
            "loss_log": log_path,
        }),
    )?;
    Ok(outcome)
}

pub fn scores_path(out: &Path) -> PathBuf {
    with_suffix(out, ".scores")
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<eval::EvalReport> {
    let ckpt: training::Checkpoint<f64> = training::load_checkpoint(&args.checkpoint).map_err(io_context(&args.checkpoint))?;
    let samples = load_features(&args.features)?;
    let scorer = Scorer::new(&ckpt, args.fusion_weight)?;
    let records = scorer.score_all(&samples)?;
    let report = eval::mean_average_precision(&records, &ckpt.classes)?;
    write_text(&args.out, &(report.to_json_pretty() + "\n"))?;
    let scores = scores_path(&args.out);
    eval::write_score_file(&records, &scores).map_err(io_context(&scores))?;
    let gap = match &args.gap_out {
        Some(p) => {
            let gap = eval::modality_gap_report(&samples, &ckpt)?;
            write_text(p, &(serde_json::to_string_pretty(&gap).expect("gap serializes") + "\n"))?;
            Some(gap)
        }
        None => None,
    };
    write_manifest(
        &args.out,
        json!({
            "command": "eval",
            "checkpoint": args.checkpoint,
            "features": args.features,
            "fusion_weight": args.fusion_weight,
            "scores": scores,
            "modality_gap": gap,
        }),
    )?;
    Ok(report)
}

/// One line of the gradient-check table.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub seed: u64,
    pub tensor: &'static str,
    pub passed: bool,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<Vec<GradcheckRow>> {
    if args.seeds == 0 {
        return Err(CliError::Semantic("--seeds must be at least 1".into()));
    }
    let config = match &args.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    let options = GradcheckOptions {
        hyper: config.hyper(),
        form: config.ranking_form,
        inject_sign_error: args.inject_sign_error,
        ..GradcheckOptions::default()
    };
    let mut rows = Vec::new();
    for k in 0..args.seeds as u64 {
        let seed = config.seed.wrapping_add(k);
        for check in training::gradient_check(seed, &options)? {
            rows.push(GradcheckRow {
                seed,
                tensor: check.name,
                passed: check.report.passed,
                max_rel_error: check.report.max_rel_error,
                max_abs_error: check.report.max_abs_error,
            });
        }
    }
    Ok(rows)
}

pub fn format_gradcheck(rows: &[GradcheckRow]) -> String {
    let mut s = format!("{:>6}  {:<15} {:>12} {:>12}  result\n", "seed", "tensor", "max_rel", "max_abs");
    for r in rows {
        s.push_str(&format!(
            "{:>6}  {:<15} {:>12.3e} {:>12.3e}  {}\n",
            r.seed,
            r.tensor,
            r.max_rel_error,
            r.max_abs_error,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    s
}

pub fn cmd_fuse(args: &FuseArgs) -> CliResult<Vec<ScoreRecord>> {
    let a = eval::read_score_file(&args.a).map_err(io_context(&args.a))?;
    let b = eval::read_score_file(&args.b).map_err(io_context(&args.b))?;
    if a.len() != b.len() {
        return Err(CliError::Semantic(format!("score files hold {} and {} samples", a.len(), b.len())));
    }
    let mut fused = Vec::with_capacity(a.len());
    for (i, (ra, rb)) in a.iter().zip(&b).enumerate() {
        if ra.scores.len() != rb.scores.len() {
            return Err(CliError::Semantic(format!(
                "sample {i}: {} classes in --a, {} in --b",
                ra.scores.len(),
                rb.scores.len()
            )));
        }
        if ra.labels != rb.labels {
            return Err(CliError::Semantic(format!("sample {i}: labels differ between the score files")));
        }
        fused.push(ScoreRecord { scores: eval::fuse_scores(&ra.scores, &rb.scores, args.weight)?, labels: ra.labels.clone() });
    }
    eval::write_score_file(&fused, &args.out).map_err(io_context(&args.out))?;
    write_manifest(&args.out, json!({ "command": "fuse", "a": args.a, "b": args.b, "weight": args.weight }))?;
    Ok(fused)
}
