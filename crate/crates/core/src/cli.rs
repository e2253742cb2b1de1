//! Command-line front end. Every subcommand maps onto one library
//! operation, reads the shared TOML run configuration and writes only
//! under the output root (plus the corpus root for `corpus fetch`).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::attribution::{Attributor, AttributionReport, ReferenceGallery, ReferenceKind, ReferenceSet};
use crate::backbone::{
    train_discriminative, write_metrics_csv, Checkpoint, CheckpointKind, CheckpointStore, ImageStore,
    LoadedModel,
};
use crate::config::RunConfigDocument;
use crate::corpus::{
    build_mixed_dataset, build_prompts, fetch_gallery, reference_artists, split_dataset, validate_manifest,
    write_prompts, ArtistLabel, ArtworkRecord, DatasetManifest, GallerySource, Provenance, Split, TrainFraction,
    ValidationReport,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    confusion, emit_report, loss_rows, retrieval_repeated, retrieval_test, select_queries, transfer_evaluate,
    transfer_experiment, ConfusionMatrix, DistanceMatrix, LossRow, ResultsBundle, RetrievalStat,
    RetrievalSummary, TransferResult,
};
use crate::fsutil::write_atomic;
use crate::seed::sha256_hex;
use crate::siamese::{select_checkpoint, train_siamese, write_loss_curve_csv, write_pairs, EmbeddingCache, MetricModel};

/// Environment variable naming the output root when `--out` is absent.
pub const OUT_ENV: &str = "ARTPROMPT_OUT";

#[derive(Debug, Parser)]
#[command(name = "artprompt", version, about = "Infer artist names from generated images")]
pub struct Cli {
    /// TOML run configuration; defaults apply to every absent field.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output root for every artifact.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs", value_name = "DIR")]
    pub out: PathBuf,
    /// Validate inputs and print the resolved plan without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u32).range(1..))]
    pub workers: Option<u32>,
    /// Machine-readable JSON on stdout instead of tables.
    #[arg(long, global = true)]
    pub json: bool,
    /// Log verbosity on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Manifest construction and checks.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Model training.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Experiments over trained checkpoints.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Attribute one query image to an artist.
    Attribute(AttributeArgs),
    /// Render stored results as CSV and SVG.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    /// Count records per artist and list broken invariants.
    Validate(ValidateArgs),
    /// Append the artist suffix to prompt contexts.
    Prompts(PromptsArgs),
    /// Stratified train/val split.
    Split(SplitArgs),
    /// Balanced original/synthetic subset.
    Mix(MixArgs),
    /// Collect an artist's original gallery into the corpus root.
    Fetch(FetchArgs),
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    /// Discriminative artist classifier.
    Baseline(BaselineArgs),
    /// Siamese fine-tuning of a baseline backbone.
    Siamese(SiameseArgs),
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Confusion matrix of a classifier on one subset.
    Confusion(ConfusionArgs),
    /// Original-domain versus synthetic-domain accuracy.
    Transfer(TransferArgs),
    /// Top-n retrieval under distance thresholds.
    Retrieval(RetrievalArgs),
}

#[derive(Debug, Args)]
pub struct ManifestArg {
    /// Manifest to read (default: `corpus.manifest` from the config).
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    /// Also verify checksums of files under the corpus root.
    #[arg(long)]
    pub check_files: bool,
}

#[derive(Debug, Args)]
pub struct PromptsArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    #[arg(long)]
    pub artist: String,
    /// Text file with one prompt context per line.
    #[arg(long, value_name = "PATH")]
    pub contexts: PathBuf,
    #[arg(long)]
    pub images_per_prompt: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train fraction as a decimal or `p/q`.
    #[arg(long)]
    pub fraction: Option<TrainFraction>,
    /// Destination (default: `<out>/corpus/split.jsonl`).
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    #[arg(long)]
    pub quota: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Destination (default: `<out>/corpus/mixed.jsonl`).
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["from_dir", "url"]))]
pub struct FetchArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    #[arg(long)]
    pub artist: String,
    /// Local directory of image files.
    #[arg(long, value_name = "DIR")]
    pub from_dir: Option<PathBuf>,
    /// Image URL (repeatable); needs the `net` feature.
    #[arg(long)]
    pub url: Vec<String>,
    /// Updated manifest destination (default: `<out>/corpus/manifest.jsonl`).
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    /// Restrict training to one provenance.
    #[arg(long, default_value = "both")]
    pub provenance: ReferenceKind,
}

#[derive(Debug, Args)]
pub struct SiameseArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    /// Discriminative checkpoint to start from
    /// (default: `<out>/train/baseline/best.safetensors`).
    #[arg(long, value_name = "PATH")]
    pub base: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct ConfusionArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    /// Classifier (default: `<out>/train/baseline/best.safetensors`).
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    #[arg(long, default_value = "both")]
    pub provenance: ReferenceKind,
    /// Result name, used in report file names.
    #[arg(long, default_value = "eval")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    /// Classifier to evaluate (default: `<out>/train/baseline/best.safetensors`).
    #[arg(long, value_name = "PATH", conflicts_with = "train")]
    pub checkpoint: Option<PathBuf>,
    /// Train a fresh classifier on the originals first.
    #[arg(long)]
    pub train: bool,
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    /// Metric checkpoint (default: `<out>/train/siamese/selected.safetensors`).
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("query").required(true).args(["image", "record"]))]
pub struct AttributeArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    /// Query image file.
    #[arg(long, value_name = "PATH")]
    pub image: Option<PathBuf>,
    /// Query by manifest record id.
    #[arg(long, value_name = "ID")]
    pub record: Option<String>,
    /// Reference provenance (default: `attribution.reference_kind`).
    #[arg(long)]
    pub refs: Option<ReferenceKind>,
    /// Restrict references to one split.
    #[arg(long, value_enum, default_value = "all")]
    pub refs_split: SplitArg,
    /// Vote threshold on similarity (default: `attribution.threshold`).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Metric checkpoint (default: `<out>/train/siamese/selected.safetensors`).
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Reference-embedding cache file, reused across calls.
    #[arg(long, value_name = "PATH")]
    pub cache: Option<PathBuf>,
    /// Also store the report under `<out>/results/attribution/`.
    #[arg(long)]
    pub save: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory of stored results (default: `<out>/results`).
    #[arg(long, value_name = "DIR")]
    pub results: Option<PathBuf>,
    /// Destination (default: `<out>/report`).
    #[arg(long, value_name = "DIR")]
    pub to: Option<PathBuf>,
}

/// Parses `argv` and runs the command. Returns the process exit status:
/// 0 on success, 1 on a domain error, 2 on a usage error.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        // Fails only if a pool already exists (repeated in-process calls).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global();
    }
    let config = match &cli.config {
        Some(p) => RunConfigDocument::load(p)?,
        None => {
            let d = RunConfigDocument::default();
            d.validate()?;
            d
        }
    };
    let ctx = Ctx { cli, config };
    match &cli.command {
        Command::Corpus(c) => match c {
            CorpusCommand::Validate(a) => ctx.corpus_validate(a),
            CorpusCommand::Prompts(a) => ctx.corpus_prompts(a),
            CorpusCommand::Split(a) => ctx.corpus_split(a),
            CorpusCommand::Mix(a) => ctx.corpus_mix(a),
            CorpusCommand::Fetch(a) => ctx.corpus_fetch(a),
        },
        Command::Train(c) => match c {
            TrainCommand::Baseline(a) => ctx.train_baseline(a),
            TrainCommand::Siamese(a) => ctx.train_siamese(a),
        },
        Command::Eval(c) => match c {
            EvalCommand::Confusion(a) => ctx.eval_confusion(a),
            EvalCommand::Transfer(a) => ctx.eval_transfer(a),
            EvalCommand::Retrieval(a) => ctx.eval_retrieval(a),
        },
        Command::Attribute(a) => ctx.attribute(a),
        Command::Report(a) => ctx.report(a),
    }
}

/// What a command is about to do: printed in full by `--dry-run`, and as
/// a one-line echo on stderr otherwise.
#[derive(Debug, Serialize)]
pub struct Plan {
    pub command: String,
    pub seed: u64,
    pub stage_seed: Option<u64>,
    pub settings: BTreeMap<String, Value>,
    pub inputs: BTreeMap<String, String>,
    pub fingerprints: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub config: RunConfigDocument,
}

impl Plan {
    fn echo(&self) -> String {
        let mut s = self.command.clone();
        s.push(':');
        for (k, v) in &self.settings {
            match v {
                Value::String(t) => s.push_str(&format!(" {k}={t}")),
                other => s.push_str(&format!(" {k}={other}")),
            }
        }
        s.push_str(&format!(" seed={}", self.seed));
        if let Some(st) = self.stage_seed {
            s.push_str(&format!(" stage_seed={st}"));
        }
        s
    }

    fn render_text(&self) -> Result<String> {
        let mut s = format!("plan {}\n", self.echo());
        for (k, v) in &self.inputs {
            s.push_str(&format!("  input {k}: {v}\n"));
        }
        for (k, v) in &self.fingerprints {
            s.push_str(&format!("  fingerprint {k}: {v}\n"));
        }
        for p in &self.outputs {
            s.push_str(&format!("  output: {}\n", p.display()));
        }
        s.push_str("resolved config:\n");
        s.push_str(&self.config.to_toml()?);
        Ok(s)
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    config: RunConfigDocument,
}

fn file_sha(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn to_value<T: Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("plain values serialize")
}

fn out_line(text: &str) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedInput(format!("{}: {e}", path.display())))
}

fn checkpoint_of_kind(path: &Path, kind: CheckpointKind) -> Result<Checkpoint> {
    let ckpt = Checkpoint::open(path)?;
    if ckpt.meta.kind() != kind {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} is a {:?} checkpoint, expected {kind:?}",
            path.display(),
            ckpt.meta.kind()
        )));
    }
    Ok(ckpt)
}

fn provenance_filter(m: &DatasetManifest, kind: ReferenceKind) -> DatasetManifest {
    m.filtered(|r| kind.admits(r.provenance))
}

fn confusion_table(m: &ConfusionMatrix) -> String {
    let width = m.labels.iter().map(|l| l.name.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:width$}", "");
    for j in 0..m.labels.len() {
        s.push_str(&format!(" {:>6}", format!("p{j}")));
    }
    s.push('\n');
    for (i, row) in m.counts.iter().enumerate() {
        s.push_str(&format!("{:width$}", m.labels[i].name));
        for c in row {
            s.push_str(&format!(" {c:>6}"));
        }
        s.push('\n');
    }
    s.push_str(&format!("accuracy {:.4} over {} images", m.accuracy(), m.total()));
    s
}

impl Ctx<'_> {
    fn out(&self, rel: &str) -> PathBuf {
        self.cli.out.join(rel)
    }

    fn results_dir(&self) -> PathBuf {
        self.out("results")
    }

    fn manifest_path(&self, arg: &ManifestArg) -> PathBuf {
        arg.manifest.clone().unwrap_or_else(|| self.config.corpus.manifest.clone())
    }

    /// Loads a manifest and rejects it if any record invariant is broken.
    fn load_manifest(&self, path: &Path) -> Result<DatasetManifest> {
        let m = DatasetManifest::load(path)?;
        let report = validate_manifest(&m, None);
        if let Some(v) = report.violations.first() {
            return Err(Error::MalformedInput(format!(
                "{}: {} violation(s), first: {:?} {}",
                path.display(),
                report.violations.len(),
                v.kind,
                v.detail
            )));
        }
        Ok(m)
    }

    fn plan(&self, command: &str) -> Plan {
        let mut fingerprints = BTreeMap::new();
        let resolved = self.config.resolved();
        if let Ok(text) = resolved.to_toml() {
            fingerprints.insert("config".to_owned(), sha256_hex(text.as_bytes()));
        }
        Plan {
            command: command.to_owned(),
            seed: self.config.seed,
            stage_seed: None,
            settings: BTreeMap::new(),
            inputs: BTreeMap::new(),
            fingerprints,
            outputs: Vec::new(),
            config: resolved,
        }
    }

    fn add_manifest(&self, plan: &mut Plan, key: &str, path: &Path) -> Result<()> {
        plan.inputs.insert(key.to_owned(), path.display().to_string());
        plan.fingerprints.insert(key.to_owned(), file_sha(path)?);
        Ok(())
    }

    fn add_checkpoint(plan: &mut Plan, key: &str, path: &Path, ckpt: &Checkpoint) {
        plan.inputs.insert(key.to_owned(), path.display().to_string());
        plan.fingerprints.insert(key.to_owned(), ckpt.meta.fingerprint.clone());
    }

    /// Prints the plan and returns `true` under `--dry-run`; otherwise
    /// echoes it to stderr and returns `false`.
    fn gate(&self, plan: &Plan) -> Result<bool> {
        if self.cli.dry_run {
            let text = if self.cli.json {
                serde_json::to_string_pretty(plan)?
            } else {
                plan.render_text()?
            };
            out_line(text.trim_end())?;
            return Ok(true);
        }
        eprintln!("{}", plan.echo());
        Ok(false)
    }

    fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce() -> String) -> Result<()> {
        if self.cli.json {
            out_line(&serde_json::to_string_pretty(value)?)
        } else {
            out_line(&human())
        }
    }

    fn corpus_validate(&self, a: &ValidateArgs) -> Result<()> {
        let path = self.manifest_path(&a.manifest);
        let mut plan = self.plan("corpus validate");
        self.add_manifest(&mut plan, "manifest", &path)?;
        plan.settings.insert("check_files".into(), Value::Bool(a.check_files));
        let m = DatasetManifest::load(&path)?;
        let root = a.check_files.then_some(self.config.corpus.root.as_path());
        let report = validate_manifest(&m, root);
        if self.gate(&plan)? {
            return Ok(());
        }
        self.emit(&report, || validation_table(&report))?;
        if report.is_valid() {
            Ok(())
        } else {
            Err(Error::MalformedInput(format!(
                "{} has {} violation(s)",
                path.display(),
                report.violations.len()
            )))
        }
    }

    fn resolve_artist(&self, name: &str, manifest: &Path) -> Result<ArtistLabel> {
        let artists = if manifest.exists() {
            DatasetManifest::load(manifest)?.artists
        } else {
            reference_artists()
        };
        artists
            .into_iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::UnknownArtist(name.to_owned()))
    }

    fn corpus_prompts(&self, a: &PromptsArgs) -> Result<()> {
        let artist = self.resolve_artist(&a.artist, &self.manifest_path(&a.manifest))?;
        let per = a.images_per_prompt.unwrap_or(self.config.corpus.images_per_prompt);
        let text = std::fs::read_to_string(&a.contexts).map_err(|e| Error::io(&a.contexts, e))?;
        let contexts: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let batch = build_prompts(&contexts, &artist, per)?;
        let dest = self.out(&format!("prompts/{}.txt", artist.slug()));

        let mut plan = self.plan("corpus prompts");
        plan.settings.insert("artist".into(), Value::String(artist.name.clone()));
        plan.settings.insert("images_per_prompt".into(), to_value(per));
        plan.inputs.insert("contexts".into(), a.contexts.display().to_string());
        plan.fingerprints.insert("contexts".into(), sha256_hex(text.as_bytes()));
        plan.outputs.push(dest.clone());
        if self.gate(&plan)? {
            return Ok(());
        }
        write_prompts(&dest, &batch.lines)?;
        let summary = json!({
            "artist": artist.name,
            "prompts": batch.lines.len(),
            "request_count": batch.request_count,
            "path": dest,
        });
        self.emit(&summary, || {
            format!(
                "{} prompts for {}, request {} images; written to {}",
                batch.lines.len(),
                artist.name,
                batch.request_count,
                dest.display()
            )
        })
    }

    fn manifest_summary(&self, m: &DatasetManifest, dest: &Path) -> Result<()> {
        let counts = validate_manifest(m, None).counts;
        let per_split = |s: Split| m.records.iter().filter(|r| r.split == s).count();
        let summary = json!({
            "path": dest,
            "records": m.records.len(),
            "train": per_split(Split::Train),
            "val": per_split(Split::Val),
            "counts": counts,
            "sha256": sha256_hex(m.to_jsonl()?.as_bytes()),
        });
        self.emit(&summary, || {
            format!(
                "{} records ({} train, {} val) written to {}\n{}",
                m.records.len(),
                per_split(Split::Train),
                per_split(Split::Val),
                dest.display(),
                counts_table(&counts)
            )
        })
    }

    fn corpus_split(&self, a: &SplitArgs) -> Result<()> {
        let path = self.manifest_path(&a.manifest);
        let m = self.load_manifest(&path)?;
        let seed = a.seed.unwrap_or_else(|| self.config.split_seed());
        let fraction = a.fraction.unwrap_or(self.config.corpus.train_fraction);
        let dest = a.output.clone().unwrap_or_else(|| self.out("corpus/split.jsonl"));
        let split = split_dataset(&m, fraction, seed)?;

        let mut plan = self.plan("corpus split");
        plan.stage_seed = Some(seed);
        plan.settings.insert("train_fraction".into(), Value::String(fraction.to_string()));
        self.add_manifest(&mut plan, "manifest", &path)?;
        plan.outputs.push(dest.clone());
        if self.gate(&plan)? {
            return Ok(());
        }
        split.save(&dest)?;
        self.manifest_summary(&split, &dest)
    }

    fn corpus_mix(&self, a: &MixArgs) -> Result<()> {
        let path = self.manifest_path(&a.manifest);
        let m = self.load_manifest(&path)?;
        let seed = a.seed.unwrap_or_else(|| self.config.mix_seed());
        let quota = a.quota.unwrap_or(self.config.corpus.quota);
        let dest = a.output.clone().unwrap_or_else(|| self.out("corpus/mixed.jsonl"));
        let mixed = build_mixed_dataset(&m, quota, seed)?;

        let mut plan = self.plan("corpus mix");
        plan.stage_seed = Some(seed);
        plan.settings.insert("quota".into(), to_value(quota));
        self.add_manifest(&mut plan, "manifest", &path)?;
        plan.outputs.push(dest.clone());
        if self.gate(&plan)? {
            return Ok(());
        }
        mixed.save(&dest)?;
        self.manifest_summary(&mixed, &dest)
    }

    fn corpus_fetch(&self, a: &FetchArgs) -> Result<()> {
        let path = self.manifest_path(&a.manifest);
        let mut m = if path.exists() {
            self.load_manifest(&path)?
        } else {
            DatasetManifest::new(reference_artists(), self.config.seed)
        };
        let artist = m
            .artist(&a.artist)
            .cloned()
            .ok_or_else(|| Error::UnknownArtist(a.artist.clone()))?;
        let source = match &a.from_dir {
            Some(d) => GallerySource::LocalDir(d.clone()),
            None => GallerySource::Urls(a.url.clone()),
        };
        let root = &self.config.corpus.root;
        let dest = a.output.clone().unwrap_or_else(|| self.out("corpus/manifest.jsonl"));

        let mut plan = self.plan("corpus fetch");
        plan.settings.insert("artist".into(), Value::String(artist.name.clone()));
        if path.exists() {
            self.add_manifest(&mut plan, "manifest", &path)?;
        }
        match &source {
            GallerySource::LocalDir(d) => {
                plan.inputs.insert("source".into(), d.display().to_string());
            }
            GallerySource::Urls(u) => {
                plan.inputs.insert("source".into(), format!("{} url(s)", u.len()));
            }
        }
        plan.outputs.push(root.join("original").join(artist.slug()));
        plan.outputs.push(dest.clone());
        if self.gate(&plan)? {
            return Ok(());
        }
        let outcome = fetch_gallery(&artist, root, &source)?;
        let fetched: std::collections::HashSet<&str> = outcome.records.iter().map(|r| r.id.as_str()).collect();
        m.records.retain(|r| !fetched.contains(r.id.as_str()));
        m.records.extend(outcome.records.iter().cloned());
        m.save(&dest)?;
        let summary = json!({
            "artist": artist.name,
            "records": outcome.records.len(),
            "downloaded": outcome.downloaded,
            "skipped": outcome.skipped,
            "excluded": outcome.excluded(),
            "errors": outcome.errors,
            "manifest": dest,
        });
        self.emit(&summary, || {
            let mut s = format!(
                "{}: {} records ({} written, {} unchanged, {} excluded); manifest {}",
                artist.name,
                outcome.records.len(),
                outcome.downloaded,
                outcome.skipped,
                outcome.excluded(),
                dest.display()
            );
            for e in &outcome.errors {
                s.push_str(&format!("\n  failed: {e}"));
            }
            s
        })
    }

    fn run_settings(plan: &mut Plan, run: &crate::backbone::TrainRunConfig) {
        plan.stage_seed = Some(run.seed);
        plan.settings.insert("epochs".into(), to_value(run.epochs));
        plan.settings.insert("batch".into(), to_value(run.batch_size));
        plan.settings.insert("lr".into(), to_value(run.learning_rate));
        plan.settings.insert("weight_decay".into(), to_value(run.weight_decay));
        plan.settings.insert("optimizer".into(), to_value(run.optimizer));
    }

    fn train_baseline(&self, a: &BaselineArgs) -> Result<()> {
        let path = self.manifest_path(&a.manifest);
        let m = provenance_filter(&self.load_manifest(&path)?, a.provenance);
        let run = self.config.baseline_run();
        let backbone = &self.config.backbone;
        let dir = self.out("train/baseline");

        let mut plan = self.plan("train baseline");
        Self::run_settings(&mut plan, &run);
        plan.settings.insert("architecture".into(), Value::String(backbone.architecture.to_string()));
        plan.settings.insert("input_edge".into(), to_value(backbone.input_edge));
        plan.settings.insert("provenance".into(), Value::String(a.provenance.to_string()));
        self.add_manifest(&mut plan, "manifest", &path)?;
        plan.outputs.extend([dir.join("checkpoints"), dir.join("metrics.csv"), dir.join("best.safetensors")]);
        plan.outputs.push(self.results_dir().join("loss_curve_baseline.json"));
        if self.gate(&plan)? {
            return Ok(());
        }

        let images = ImageStore::cached(&self.config.corpus.root, backbone);
        let store = CheckpointStore::Directory(dir.join("checkpoints"));
        let history = train_discriminative(&m, &images, backbone, &run, &store)?;
        write_metrics_csv(&dir.join("metrics.csv"), &history)?;
        let best = history.best_by_accuracy().ok_or(Error::Empty("training history"))?;
        best.save(dir.join("best.safetensors"))?;
        write_json(&self.results_dir().join("loss_curve_baseline.json"), &loss_rows(&history))?;
        let summary = json!({
            "checkpoint": dir.join("best.safetensors"),
            "fingerprint": best.meta.fingerprint,
            "epoch": best.meta.epoch,
            "val_accuracy": best.meta.val_accuracy,
            "val_loss": best.meta.val_loss,
        });
        self.emit(&summary, || {
            format!(
                "best epoch {} (val accuracy {:.4}, val loss {:.4}); fingerprint {}",
                best.meta.epoch,
                best.meta.val_accuracy.unwrap_or(f64::NAN),
                best.meta.val_loss,
                best.meta.fingerprint
            )
        })
    }

    fn train_siamese(&self, a: &SiameseArgs) -> Result<()> {
        let path = self.manifest_path(&a.manifest);
        let base_path = a.base.clone().unwrap_or_else(|| self.out("train/baseline/best.safetensors"));
        let run = self.config.siamese_run();
        let options = self.config.train.siamese.options();
        let rule = self.config.train.siamese.selection;
        let loss = &self.config.loss;
        let dir = self.out("train/siamese");

        let mut plan = self.plan("train siamese");
        Self::run_settings(&mut plan, &run);
        plan.settings.insert("c_p".into(), to_value(loss.c_p));
        plan.settings.insert("c_n".into(), to_value(loss.c_n));
        plan.settings.insert("pairs_per_epoch".into(), to_value(options.pairs_per_epoch));
        plan.settings.insert("selection".into(), Value::String(rule.to_string()));
        let m = self.load_manifest(&path)?;
        self.add_manifest(&mut plan, "manifest", &path)?;
        // The base is only needed to report its fingerprint when planning.
        let base = match checkpoint_of_kind(&base_path, CheckpointKind::Discriminative) {
            Ok(b) => {
                Self::add_checkpoint(&mut plan, "base", &base_path, &b);
                Some(b)
            }
            Err(e) if self.cli.dry_run => {
                plan.inputs.insert("base".into(), format!("{} (unavailable: {e})", base_path.display()));
                None
            }
            Err(e) => return Err(e),
        };
        plan.outputs.extend([
            dir.join("checkpoints"),
            dir.join("loss_curve.csv"),
            dir.join("val_pairs.jsonl"),
            dir.join("selected.safetensors"),
            self.results_dir().join("loss_curve_siamese.json"),
        ]);
        if self.gate(&plan)? {
            return Ok(());
        }
        let base = base.expect("present outside dry runs");
        let images = ImageStore::cached(&self.config.corpus.root, base.meta.backbone());
        let store = CheckpointStore::Directory(dir.join("checkpoints"));
        let out = train_siamese(&m, &images, &base, loss, &run, &options, None, &store)?;
        write_loss_curve_csv(&dir.join("loss_curve.csv"), &out.history)?;
        write_pairs(dir.join("val_pairs.jsonl"), &out.val_pairs)?;
        let chosen = select_checkpoint(&out.history.checkpoints, rule)?;
        chosen.save(dir.join("selected.safetensors"))?;
        write_json(&self.results_dir().join("loss_curve_siamese.json"), &loss_rows(&out.history))?;
        let summary = json!({
            "checkpoint": dir.join("selected.safetensors"),
            "fingerprint": chosen.meta.fingerprint,
            "epoch": chosen.meta.epoch,
            "val_loss": chosen.meta.val_loss,
            "initial_val_loss": out.history.initial_val_loss,
        });
        self.emit(&summary, || {
            format!(
                "selected epoch {} by {rule} (val loss {:.5}); fingerprint {}",
                chosen.meta.epoch, chosen.meta.val_loss, chosen.meta.fingerprint
            )
        })
    }

    fn eval_confusion(&self, a: &ConfusionArgs) -> Result<()> {
        let path = self.manifest_path(&a.manifest);
        let ckpt_path = a.checkpoint.clone().unwrap_or_else(|| self.out("train/baseline/best.safetensors"));
        let m = self.load_manifest(&path)?;
        let subset = provenance_filter(&m, a.provenance)
            .filtered(|r| a.split.split().map_or(true, |s| r.split == s));
        let ckpt = checkpoint_of_kind(&ckpt_path, CheckpointKind::Discriminative)?;
        let dest = self.results_dir().join(format!("confusion_{}.json", a.name));

        let mut plan = self.plan("eval confusion");
        plan.settings.insert("split".into(), to_value(format!("{:?}", a.split).to_lowercase()));
        plan.settings.insert("provenance".into(), Value::String(a.provenance.to_string()));
        plan.settings.insert("records".into(), to_value(subset.records.iter().filter(|r| r.is_active()).count()));
        self.add_manifest(&mut plan, "manifest", &path)?;
        Self::add_checkpoint(&mut plan, "checkpoint", &ckpt_path, &ckpt);
        plan.outputs.push(dest.clone());
        if self.gate(&plan)? {
            return Ok(());
        }
        let model = LoadedModel::load(&ckpt)?;
        let images = ImageStore::cached(&self.config.corpus.root, model.config());
        let matrix = confusion(&subset, &images, &model, self.config.evaluation.batch_size)?;
        write_json(&dest, &matrix)?;
        self.emit(&matrix, || confusion_table(&matrix))
    }

    fn eval_transfer(&self, a: &TransferArgs) -> Result<()> {
        let path = self.manifest_path(&a.manifest);
        let m = self.load_manifest(&path)?;
        let originals = m.with_provenance(Provenance::Original);
        let synthetics = m.with_provenance(Provenance::Synthetic);
        let mut plan = self.plan("eval transfer");
        self.add_manifest(&mut plan, "manifest", &path)?;
        let ckpt = if a.train {
            let run = self.config.baseline_run();
            Self::run_settings(&mut plan, &run);
            plan.outputs.push(self.out("train/transfer/checkpoints"));
            None
        } else {
            let p = a.checkpoint.clone().unwrap_or_else(|| self.out("train/baseline/best.safetensors"));
            let c = checkpoint_of_kind(&p, CheckpointKind::Discriminative)?;
            Self::add_checkpoint(&mut plan, "checkpoint", &p, &c);
            Some(c)
        };
        let results = self.results_dir();
        plan.outputs.extend([
            results.join("confusion_original.json"),
            results.join("confusion_synthetic.json"),
            results.join("transfer.json"),
        ]);
        if self.gate(&plan)? {
            return Ok(());
        }
        let result: TransferResult = match ckpt {
            Some(c) => {
                let model = LoadedModel::load(&c)?;
                let images = ImageStore::cached(&self.config.corpus.root, model.config());
                transfer_evaluate(&model, &originals, &synthetics, &images, self.config.evaluation.batch_size)?
            }
            None => {
                let images = ImageStore::cached(&self.config.corpus.root, &self.config.backbone);
                let store = CheckpointStore::Directory(self.out("train/transfer/checkpoints"));
                transfer_experiment(
                    &originals,
                    &synthetics,
                    &images,
                    &self.config.backbone,
                    &self.config.baseline_run(),
                    &store,
                )?
            }
        };
        write_json(&results.join("confusion_original.json"), &result.original)?;
        write_json(&results.join("confusion_synthetic.json"), &result.synthetic)?;
        if let Some(h) = &result.history {
            write_json(&results.join("loss_curve_transfer.json"), &loss_rows(h))?;
        }
        let summary = json!({
            "fingerprint": result.fingerprint,
            "original_accuracy": result.original.accuracy(),
            "synthetic_accuracy": result.synthetic.accuracy(),
            "gap": result.gap(),
        });
        write_json(&results.join("transfer.json"), &summary)?;
        self.emit(&summary, || {
            format!(
                "original val:\n{}\n\nsynthetic:\n{}\n\ngap {:.4}",
                confusion_table(&result.original),
                confusion_table(&result.synthetic),
                result.gap()
            )
        })
    }

    fn eval_retrieval(&self, a: &RetrievalArgs) -> Result<()> {
        let path = self.manifest_path(&a.manifest);
        let ckpt_path = a.checkpoint.clone().unwrap_or_else(|| self.out("train/siamese/selected.safetensors"));
        let m = self.load_manifest(&path)?;
        let ckpt = Checkpoint::open(&ckpt_path)?;
        let ev = &self.config.evaluation;
        let seed = self.config.retrieval_seed();

        // Queries come from the val split when the manifest has one.
        let has_val = m.records.iter().any(|r| r.is_active() && r.split == Split::Val);
        let pool = if has_val { m.active_in_split(Split::Val) } else { m.clone() };
        let mut queries: Vec<&ArtworkRecord> = Vec::new();
        let mut draws: Vec<Vec<usize>> = Vec::new();
        let mut row_of: BTreeMap<&str, usize> = BTreeMap::new();
        for repeat in 0..ev.repeats {
            let drawn = select_queries(&pool, ev.queries_per_artist, seed, repeat)?;
            draws.push(
                drawn
                    .into_iter()
                    .map(|r| {
                        *row_of.entry(r.id.as_str()).or_insert_with(|| {
                            queries.push(r);
                            queries.len() - 1
                        })
                    })
                    .collect(),
            );
        }
        let gallery: Vec<&ArtworkRecord> = m
            .records
            .iter()
            .filter(|r| r.is_active() && ev.gallery_kind.admits(r.provenance) && !row_of.contains_key(r.id.as_str()))
            .collect();
        if gallery.is_empty() {
            return Err(Error::Empty("retrieval gallery"));
        }
        let results = self.results_dir();
        let mut plan = self.plan("eval retrieval");
        plan.stage_seed = Some(seed);
        plan.settings.insert("thresholds".into(), to_value(&ev.thresholds));
        plan.settings.insert("n_max".into(), to_value(ev.n_max));
        plan.settings.insert("repeats".into(), to_value(ev.repeats));
        plan.settings.insert("queries".into(), to_value(queries.len()));
        plan.settings.insert("gallery".into(), to_value(gallery.len()));
        plan.settings.insert("gallery_kind".into(), Value::String(ev.gallery_kind.to_string()));
        self.add_manifest(&mut plan, "manifest", &path)?;
        Self::add_checkpoint(&mut plan, "checkpoint", &ckpt_path, &ckpt);
        plan.outputs.extend([
            self.out("eval/distances.csv"),
            results.join("retrieval.json"),
            results.join("retrieval_stats.json"),
        ]);
        if self.gate(&plan)? {
            return Ok(());
        }
        let model = MetricModel::load(&ckpt)?;
        let images = ImageStore::cached(&self.config.corpus.root, model.model().config());
        let matrix = DistanceMatrix::compute(&model, &queries, &gallery, &images, ev.batch_size)?;
        write_atomic(&self.out("eval/distances.csv"), &matrix.to_csv()?)?;
        let first: Vec<RetrievalSummary> = retrieval_test(&matrix.select_rows(&draws[0]), &ev.thresholds, ev.n_max)?;
        let stats: Vec<RetrievalStat> = retrieval_repeated(&matrix, &draws, &ev.thresholds, ev.n_max)?;
        write_json(&results.join("retrieval.json"), &first)?;
        write_json(&results.join("retrieval_stats.json"), &stats)?;
        let value = json!({ "summaries": first, "stats": stats });
        self.emit(&value, || retrieval_table(&stats, ev.n_max))
    }

    fn attribute(&self, a: &AttributeArgs) -> Result<()> {
        let path = self.manifest_path(&a.manifest);
        let ckpt_path = a.checkpoint.clone().unwrap_or_else(|| self.out("train/siamese/selected.safetensors"));
        let kind = a.refs.unwrap_or(self.config.attribution.reference_kind);
        let threshold = a.threshold.unwrap_or(self.config.attribution.threshold);
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidConfig(format!("threshold {threshold} outside (0, 1)")));
        }
        let m = self.load_manifest(&path)?;
        let sets = ReferenceSet::all_from_manifest(&m, kind, a.refs_split.split())?;
        let ckpt = Checkpoint::open(&ckpt_path)?;
        let query_record = match &a.record {
            Some(id) => Some(m.record(id).ok_or_else(|| Error::UnknownRecord(id.clone()))?.clone()),
            None => None,
        };

        let mut plan = self.plan("attribute");
        plan.settings.insert("refs".into(), Value::String(kind.to_string()));
        plan.settings.insert("threshold".into(), to_value(threshold));
        plan.settings.insert("references".into(), to_value(sets.iter().map(|s| s.records.len()).sum::<usize>()));
        self.add_manifest(&mut plan, "manifest", &path)?;
        Self::add_checkpoint(&mut plan, "checkpoint", &ckpt_path, &ckpt);
        match (&a.image, &query_record) {
            (Some(img), _) => {
                plan.inputs.insert("query".into(), img.display().to_string());
                plan.fingerprints.insert("query".into(), file_sha(img)?);
            }
            (None, Some(r)) => {
                plan.inputs.insert("query".into(), r.id.clone());
            }
            (None, None) => unreachable!("clap requires one query"),
        }
        if let Some(c) = &a.cache {
            plan.outputs.push(c.clone());
        }
        if self.gate(&plan)? {
            return Ok(());
        }
        let model = MetricModel::load(&ckpt)?;
        let images = ImageStore::cached(&self.config.corpus.root, model.model().config());
        let batch = self.config.evaluation.batch_size;
        let gallery = match &a.cache {
            Some(cp) => {
                let mut cache = EmbeddingCache::load_or_new(cp, model.fingerprint())?;
                let g = ReferenceGallery::build(&model, sets, &m, &images, Some(&mut cache), batch)?;
                cache.save(cp)?;
                g
            }
            None => ReferenceGallery::build(&model, sets, &m, &images, None, batch)?,
        };
        let attributor = Attributor {
            model,
            gallery,
            threshold,
        };
        let report: AttributionReport = match (&a.image, &query_record) {
            (Some(img), _) => attributor.attribute_file(img)?,
            (None, Some(r)) => attributor.attribute_record(r, &images)?,
            (None, None) => unreachable!("clap requires one query"),
        };
        if a.save {
            let name = &sha256_hex(report.query.as_bytes())[..16];
            write_atomic(
                &self.results_dir().join("attribution").join(format!("{name}.json")),
                report.to_json()?.as_bytes(),
            )?;
        }
        out_line(&report.to_json()?)
    }

    fn report(&self, a: &ReportArgs) -> Result<()> {
        let from = a.results.clone().unwrap_or_else(|| self.results_dir());
        let to = a.to.clone().unwrap_or_else(|| self.out("report"));
        let bundle = load_bundle(&from)?;
        let mut plan = self.plan("report");
        plan.inputs.insert("results".into(), from.display().to_string());
        plan.settings.insert("confusion".into(), to_value(bundle.confusion.len()));
        plan.settings.insert("loss_curves".into(), to_value(bundle.loss_curves.len()));
        plan.settings.insert("retrieval".into(), to_value(bundle.retrieval.len()));
        plan.settings.insert("attribution".into(), to_value(bundle.attribution.len()));
        plan.outputs.push(to.clone());
        if self.gate(&plan)? {
            return Ok(());
        }
        let files = emit_report(&bundle, &to)?;
        self.emit(&files, || {
            files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("\n")
        })
    }
}

/// Reads the JSON results that `train` and `eval` commands store.
pub fn load_bundle(dir: &Path) -> Result<ResultsBundle> {
    let mut bundle = ResultsBundle::default();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    names.sort();
    for p in names {
        let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        if let Some(name) = stem.strip_prefix("confusion_") {
            bundle.confusion.push((name.to_owned(), read_json::<ConfusionMatrix>(&p)?));
        } else if let Some(name) = stem.strip_prefix("loss_curve_") {
            bundle.loss_curves.push((name.to_owned(), read_json::<Vec<LossRow>>(&p)?));
        } else if stem == "retrieval" {
            bundle.retrieval = read_json(&p)?;
        }
    }
    let adir = dir.join("attribution");
    if adir.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&adir)
            .map_err(|e| Error::io(&adir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for f in files {
            let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
            bundle.attribution.push(AttributionReport::from_json(&text)?);
        }
    }
    if bundle.is_empty() {
        return Err(Error::Empty("results directory"));
    }
    Ok(bundle)
}

fn counts_table(counts: &[crate::corpus::ArtistCounts]) -> String {
    let width = counts.iter().map(|c| c.artist.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:width$} {:>9} {:>9} {:>9}", "artist", "original", "synthetic", "excluded");
    for c in counts {
        s.push_str(&format!(
            "\n{:width$} {:>9} {:>9} {:>9}",
            c.artist, c.original, c.synthetic, c.excluded
        ));
    }
    s
}

fn validation_table(report: &ValidationReport) -> String {
    let mut s = counts_table(&report.counts);
    if report.violations.is_empty() {
        s.push_str("\nno violations");
    }
    for v in &report.violations {
        s.push_str(&format!(
            "\n{:?} {}: {}",
            v.kind,
            v.record.as_deref().unwrap_or("-"),
            v.detail
        ));
    }
    s
}

fn retrieval_table(stats: &[RetrievalStat], n_max: usize) -> String {
    let mut thresholds: Vec<f64> = stats.iter().map(|s| s.threshold).collect();
    thresholds.dedup();
    let mut s = format!("{:>4}", "n");
    for t in &thresholds {
        s.push_str(&format!(" {:>14}", format!("T={t}")));
    }
    for n in 1..=n_max {
        s.push_str(&format!("\n{n:>4}"));
        for t in &thresholds {
            let cell = stats
                .iter()
                .find(|x| x.threshold == *t && x.n == n)
                .and_then(|x| x.mean.map(|m| format!("{m:.3}±{:.3}", x.std.unwrap_or(0.0))))
                .unwrap_or_else(|| "-".into());
            s.push_str(&format!(" {cell:>14}"));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes() {
        assert_eq!(main_with_args(["artprompt", "nope"]), 2);
        assert_eq!(main_with_args(["artprompt", "--version"]), 0);
        assert_eq!(main_with_args(["artprompt", "--workers", "0", "report"]), 2);
    }

    #[test]
    fn echo_lists_settings_then_seeds() {
        let mut settings = BTreeMap::new();
        settings.insert("batch".to_string(), json!(64));
        settings.insert("optimizer".to_string(), json!("adam"));
        let plan = Plan {
            command: "train siamese".into(),
            seed: 0,
            stage_seed: Some(42),
            settings,
            inputs: BTreeMap::from([("manifest".to_string(), "m.jsonl".to_string())]),
            fingerprints: BTreeMap::new(),
            outputs: vec![PathBuf::from("runs/x")],
            config: RunConfigDocument::default(),
        };
        assert_eq!(plan.echo(), "train siamese: batch=64 optimizer=adam seed=0 stage_seed=42");
        let text = plan.render_text().unwrap();
        assert!(text.starts_with("plan train siamese:"));
        assert!(text.contains("  input manifest: m.jsonl\n"));
        assert!(text.contains("  output: runs/x\n"));
        assert!(text.contains("resolved config:"));
    }

    #[test]
    fn retrieval_table_marks_missing_cells() {
        let stats = vec![
            RetrievalStat { threshold: 0.1, n: 1, mean: Some(0.5), std: Some(0.25), repeats: 2 },
            RetrievalStat { threshold: 0.1, n: 2, mean: None, std: None, repeats: 2 },
        ];
        let t = retrieval_table(&stats, 2);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("T=0.1"));
        assert!(lines[1].ends_with("0.500±0.250"));
        assert!(lines[2].ends_with('-'));
    }

    #[test]
    fn empty_results_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Empty(_))));
    }
}
