//! `egrid`: build entity grids, train coherence models, evaluate them and
//! reconstruct reply structures from the command line.

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use entity_coherence::conversation::{Thread, DEFAULT_ENUMERATION_CAP};
use entity_coherence::eval::{
    baseline_all_first, baseline_all_previous, baseline_cos_sim, discriminate, inverse_pairs, reconstruct,
    reconstruction_metrics, EvalReport,
};
use entity_coherence::grid::{build_grid, AnnotatedDocument};
use entity_coherence::io::{read_documents, read_threads, write_jsonl};
use entity_coherence::neural::{Checkpoint, CoherenceModel, PretrainedEmbeddings};
use entity_coherence::synth::{synth_documents, synth_threads, SynthConfig};
use entity_coherence::training::{generate_pairs, split_dev, train, Corpus, PairSet, Setting, TrainConfig};
use entity_coherence::CoherenceError;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "egrid", version, about = "Entity-grid coherence models")]
struct Cli {
    /// Worker threads for scoring and training (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print or write the entity grid of every document.
    Grid(GridArgs),
    /// Write original/permuted pairs as JSON lines.
    Permute(PermuteArgs),
    /// Train a model and save its checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Recover reply structures and score them against the gold threads.
    Reconstruct(ReconstructArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Original against random permutations.
    Discriminate(EvalArgs),
    /// Original against the reversed sentence order.
    Inverse(EvalArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// JSON-lines corpus: documents for the monologue setting, threads otherwise.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "monologue")]
    setting: SettingArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Monologue,
    Temporal,
    Path,
    Tree,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::Monologue => Setting::Monologue,
            SettingArg::Temporal => Setting::Temporal,
            SettingArg::Path => Setting::Path,
            SettingArg::Tree => Setting::Tree,
        }
    }
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated column order; unlisted entities follow in first-mention order.
    #[arg(long, value_delimiter = ',')]
    entity_order: Vec<String>,
    /// Directory for one `<doc_id>.tsv` per document; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PermuteArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Permutations per document or thread.
    #[arg(long, default_value_t = 20)]
    cap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Training configuration: JSON or `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pretrained word vectors in text format.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Independent runs with seeds `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Checkpoint path; with several runs `-run<k>` is added before the extension.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 20)]
    cap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `report.json`, `decisions.csv` and the manifest.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    input: PathBuf,
    /// Tree-setting checkpoint; only the baselines run without one.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Largest thread to enumerate.
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
    cap: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Documents,
    Threads,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generator settings as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    version: &'static str,
    seed: Option<u64>,
    config_sha256: Option<String>,
    config: Option<serde_json::Value>,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
}

impl Manifest {
    fn new(
        command: &str,
        seed: Option<u64>,
        config: Option<serde_json::Value>,
        inputs: &[&Path],
    ) -> anyhow::Result<Self> {
        let config_sha256 = config
            .as_ref()
            .map(|c| serde_json::to_vec(c).map(|b| hex::encode(Sha256::digest(b))))
            .transpose()?;
        let inputs = inputs
            .iter()
            .map(|p| {
                let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(InputDigest {
                    path: p.display().to_string(),
                    sha256: hex::encode(Sha256::digest(bytes)),
                })
            })
            .collect::<anyhow::Result<_>>()?;
        Ok(Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config_sha256,
            config,
            inputs,
            outputs: Vec::new(),
        })
    }

    fn write(&self, path: &Path) -> anyhow::Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn open(path: &Path) -> anyhow::Result<BufReader<fs::File>> {
    Ok(BufReader::new(
        fs::File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

enum Loaded {
    Documents(Vec<AnnotatedDocument>),
    Threads(Vec<Thread>),
}

impl Loaded {
    fn read(args: &CorpusArgs) -> anyhow::Result<Loaded> {
        let reader = open(&args.input)?;
        Ok(match Setting::from(args.setting) {
            Setting::Monologue => Loaded::Documents(read_documents(reader)?),
            _ => Loaded::Threads(read_threads(reader)?),
        })
    }

    fn corpus(&self) -> Corpus<'_> {
        match self {
            Loaded::Documents(d) => Corpus::Documents(d),
            Loaded::Threads(t) => Corpus::Threads(t),
        }
    }
}

fn run_grid(args: GridArgs) -> anyhow::Result<()> {
    let docs = read_documents(open(&args.input)?)?;
    if let Some(dir) = &args.output {
        fs::create_dir_all(dir)?;
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut written = Vec::new();
    for doc in &docs {
        let mut grid = build_grid(doc)?;
        if !args.entity_order.is_empty() {
            let mut order: Vec<String> = args
                .entity_order
                .iter()
                .map(|e| entity_coherence::grid::normalize_entity(e))
                .filter(|e| grid.entities().contains(e))
                .collect();
            for e in grid.entities() {
                if !order.contains(e) {
                    order.push(e.clone());
                }
            }
            grid = grid.with_entity_order(&order)?;
        }
        match &args.output {
            Some(dir) => {
                let path = dir.join(format!("{}.tsv", doc.doc_id));
                fs::write(&path, grid.to_tsv())?;
                written.push(path.display().to_string());
            }
            None => write!(out, "# {}\n{}", doc.doc_id, grid.to_tsv())?,
        }
    }
    if let Some(dir) = &args.output {
        let mut manifest = Manifest::new("grid", None, None, &[&args.input])?;
        manifest.outputs = written;
        manifest.write(&dir.join("manifest.json"))?;
    }
    Ok(())
}

fn run_permute(args: PermuteArgs) -> anyhow::Result<()> {
    let corpus = Loaded::read(&args.corpus)?;
    let pairs = generate_pairs(corpus.corpus(), args.corpus.setting.into(), args.cap, args.seed)?;
    write_jsonl(io::BufWriter::new(fs::File::create(&args.output)?), &pairs.pairs)?;
    log::info!("wrote {} pairs to {}", pairs.len(), args.output.display());
    let config = serde_json::json!({"setting": Setting::from(args.corpus.setting), "cap": args.cap});
    let mut manifest = Manifest::new("permute", Some(args.seed), Some(config), &[&args.corpus.input])?;
    manifest.outputs.push(args.output.display().to_string());
    manifest.write(&manifest_path_for(&args.output))
}

fn run_output(base: &Path, run: usize, runs: usize) -> PathBuf {
    if runs == 1 {
        return base.to_path_buf();
    }
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}-run{run}.{}", ext.to_string_lossy()),
        None => format!("{stem}-run{run}"),
    };
    base.with_file_name(name)
}

fn run_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut config = match &args.config {
        Some(path) => {
            TrainConfig::from_text(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?
        }
        None => TrainConfig::default(),
    };
    config.setting = args.corpus.setting.into();
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(path) = &args.embeddings {
        config.embeddings_path = Some(path.display().to_string());
    }
    config.validate()?;
    if args.runs == 0 {
        bail!(CoherenceError::InvalidConfig("runs must be positive".into()));
    }
    let pretrained = match &config.embeddings_path {
        Some(path) => Some(PretrainedEmbeddings::from_text(open(Path::new(path))?)?),
        None => None,
    };
    let corpus = Loaded::read(&args.corpus)?;
    let mut inputs: Vec<&Path> = vec![&args.corpus.input];
    if let Some(p) = &args.embeddings {
        inputs.push(p);
    }

    for run in 0..args.runs {
        let mut cfg = config.clone();
        cfg.seed = config.seed + run as u64;
        let pairs = generate_pairs(corpus.corpus(), cfg.setting, cfg.permutations_per_doc, cfg.seed)?;
        let (train_pairs, dev_pairs) = split_dev(&pairs, cfg.dev_fraction, cfg.seed);
        let outcome = train(&train_pairs, &dev_pairs, &cfg, pretrained.as_ref())?;

        let out = run_output(&args.output, run, args.runs);
        let log_path = out.with_extension("log.jsonl");
        write_jsonl(io::BufWriter::new(fs::File::create(&log_path)?), &outcome.log)?;
        let metadata = serde_json::json!({
            "train_config": cfg,
            "best_epoch": outcome.best_epoch,
            "best_dev_acc": outcome.best_dev_acc,
        });
        Checkpoint::from_model(&outcome.model, metadata).save(&out)?;
        println!(
            "run {run}: best epoch {} dev accuracy {:.4} -> {}",
            outcome.best_epoch,
            outcome.best_dev_acc,
            out.display()
        );
        let mut manifest = Manifest::new("train", Some(cfg.seed), Some(serde_json::to_value(&cfg)?), &inputs)?;
        manifest.outputs = vec![out.display().to_string(), log_path.display().to_string()];
        manifest.write(&manifest_path_for(&out))?;
    }
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<CoherenceModel> {
    Ok(Checkpoint::load(path)?.into_model()?)
}

fn emit_report(report: &EvalReport, output: Option<&Path>, mut manifest: Manifest) -> anyhow::Result<()> {
    print!("{}", report.to_table());
    if let Some(dir) = output {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
        fs::write(dir.join("decisions.csv"), report.decisions_csv())?;
        manifest.outputs = vec!["report.json".into(), "decisions.csv".into()];
        manifest.write(&dir.join("manifest.json"))?;
    }
    Ok(())
}

fn run_eval(cmd: EvalCommand) -> anyhow::Result<()> {
    let (args, inverse) = match cmd {
        EvalCommand::Discriminate(a) => (a, false),
        EvalCommand::Inverse(a) => (a, true),
    };
    let model = load_model(&args.model)?;
    let corpus = Loaded::read(&args.corpus)?;
    let setting: Setting = args.corpus.setting.into();
    let pairs: PairSet = if inverse {
        inverse_pairs(corpus.corpus(), setting)?
    } else {
        generate_pairs(corpus.corpus(), setting, args.cap, args.seed)?
    };
    let report = discriminate(&model, &pairs)?;
    let config = serde_json::json!({"task": if inverse { "inverse" } else { "discriminate" }, "setting": setting, "cap": args.cap});
    let manifest = Manifest::new(
        "eval",
        Some(args.seed),
        Some(config),
        &[&args.corpus.input, &args.model],
    )?;
    emit_report(&report, args.output.as_deref(), manifest)
}

#[derive(Serialize)]
struct Prediction {
    thread_id: String,
    gold: entity_coherence::conversation::ParentVector,
    predicted: Option<entity_coherence::conversation::ParentVector>,
    all_previous: entity_coherence::conversation::ParentVector,
    all_first: entity_coherence::conversation::ParentVector,
    cos_sim: entity_coherence::conversation::ParentVector,
}

fn run_reconstruct(args: ReconstructArgs) -> anyhow::Result<()> {
    let threads = read_threads(open(&args.input)?)?;
    let model = args.model.as_deref().map(load_model).transpose()?;
    let (kept, skipped): (Vec<&Thread>, Vec<&Thread>) = threads.iter().partition(|t| t.num_posts() <= args.cap);
    for t in &skipped {
        log::warn!(
            "skipping thread {}: {} posts exceed cap {}",
            t.thread_id,
            t.num_posts(),
            args.cap
        );
    }
    let mut predictions = Vec::with_capacity(kept.len());
    for t in &kept {
        let predicted = model.as_ref().map(|m| reconstruct(m, t, args.cap)).transpose()?;
        predictions.push(Prediction {
            thread_id: t.thread_id.clone(),
            gold: t.parent_vector(),
            predicted,
            all_previous: baseline_all_previous(t.num_posts()),
            all_first: baseline_all_first(t.num_posts()),
            cos_sim: baseline_cos_sim(t),
        });
    }
    let gold: Vec<_> = predictions.iter().map(|p| p.gold.clone()).collect();
    let mut summary = serde_json::Map::new();
    let mut methods: Vec<(&str, Vec<_>)> = vec![
        (
            "all_previous",
            predictions.iter().map(|p| p.all_previous.clone()).collect(),
        ),
        ("all_first", predictions.iter().map(|p| p.all_first.clone()).collect()),
        ("cos_sim", predictions.iter().map(|p| p.cos_sim.clone()).collect()),
    ];
    if model.is_some() {
        methods.push((
            "model",
            predictions.iter().filter_map(|p| p.predicted.clone()).collect(),
        ));
    }
    println!("{:<14} {:>8} {:>8} {:>8}", "method", "thread", "edge", "edge_f1");
    for (name, pred) in &methods {
        let r = reconstruction_metrics(pred, &gold)?;
        println!(
            "{name:<14} {:>8.4} {:>8.4} {:>8.4}",
            r.thread_accuracy, r.edge_accuracy, r.edge_f1
        );
        summary.insert(name.to_string(), serde_json::to_value(&r)?);
    }
    if let Some(dir) = &args.output {
        fs::create_dir_all(dir)?;
        write_jsonl(
            io::BufWriter::new(fs::File::create(dir.join("predictions.jsonl"))?),
            &predictions,
        )?;
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
        let mut inputs: Vec<&Path> = vec![&args.input];
        if let Some(m) = &args.model {
            inputs.push(m);
        }
        let mut manifest = Manifest::new("reconstruct", None, Some(serde_json::json!({"cap": args.cap})), &inputs)?;
        manifest.outputs = vec!["predictions.jsonl".into(), "metrics.json".into()];
        manifest.write(&dir.join("manifest.json"))?;
    }
    Ok(())
}

fn run_synth(args: SynthArgs) -> anyhow::Result<()> {
    let cfg: SynthConfig = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => SynthConfig::default(),
    };
    let writer = io::BufWriter::new(fs::File::create(&args.output)?);
    match args.kind {
        SynthKind::Documents => write_jsonl(writer, &synth_documents(args.count, &cfg, args.seed)?)?,
        SynthKind::Threads => write_jsonl(writer, &synth_threads(args.count, &cfg, args.seed)?)?,
    }
    let inputs: Vec<&Path> = args.config.iter().map(PathBuf::as_path).collect();
    let mut manifest = Manifest::new("synth", Some(args.seed), Some(serde_json::to_value(&cfg)?), &inputs)?;
    manifest.outputs.push(args.output.display().to_string());
    manifest.write(&manifest_path_for(&args.output))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CoherenceError>() {
        Some(CoherenceError::Diverged { .. } | CoherenceError::GradientExplosion(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Grid(a) => run_grid(a),
        Command::Permute(a) => run_permute(a),
        Command::Train(a) => run_train(a),
        Command::Eval(c) => run_eval(c),
        Command::Reconstruct(a) => run_reconstruct(a),
        Command::Synth(a) => run_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
