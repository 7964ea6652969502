//! Command-line pipeline: synth, train, eval, cluster, mine, project.
//!
//! All randomness flows from explicit seeds, so every command is idempotent
//! on its outputs. Logs go to standard error as key=value lines; files are
//! the only data channel. Exit codes: 0 success, 2 validation or config
//! error, 3 I/O error, 4 malformed data.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cluster::{
    load_centroids, match_clusters_to_groups, run_online_kmeans, save_centroids,
    DEFAULT_BATCH_SIZE, DEFAULT_EMA_ALPHA, DEFAULT_EPOCHS,
};
use crate::corpus::{
    generate_synthetic_corpus, load_manifest, save_embeddings, save_manifest, GroupMixSpec,
    LabeledCorpus,
};
use crate::encoder::{embed_corpus, record_input, PoolMethod, TrainedModel};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, export_report, pca_project};
use crate::miner::{
    mine, mix_with_anchor, random_sample, summarize, MineArtifacts, MineSource, MiningPlan,
};
use crate::rng::SeededRng;
use crate::trainer::{train, DroConfig, Objective, TrainConfig};

/// Unified JSON config. Each command reads its own section; flags override
/// section values.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub synth: Option<SynthSection>,
    pub train: Option<TrainSection>,
    pub cluster: Option<ClusterSection>,
    pub mine: Option<MineSection>,
    pub out_dir: Option<PathBuf>,
}

/// Synthesis section: a [`GroupMixSpec`] plus the draw seed.
#[derive(Debug, Deserialize)]
pub struct SynthSection {
    #[serde(default)]
    pub seed: u64,
    #[serde(flatten)]
    pub spec: GroupMixSpec,
}

/// Train section: [`TrainConfig`] with the objective optional, since the
/// --objective flag can supply or override it. The dro block only takes
/// effect when the resolved objective is dro, so one file can drive
/// erm, eq, and dro runs.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub objective: Option<Objective>,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pool: PoolMethod,
    pub hidden_dim: usize,
    #[serde(default)]
    pub dro: Option<DroConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub k: Option<usize>,
    pub alpha: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MineSection {
    pub source: Option<String>,
    pub target_size: Option<usize>,
    pub seed: Option<u64>,
    pub exclude_group: Option<String>,
    pub anchor_manifest: Option<PathBuf>,
    pub anchor_count: Option<usize>,
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

#[derive(Debug, Parser)]
#[command(
    name = "accentmine",
    version,
    about = "Group-robust classifier training, online k-means clustering, and utterance mining"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic imbalanced corpus from a config file.
    Synth(SynthArgs),
    /// Train a pooled classifier under erm, eq, or dro.
    Train(TrainArgs),
    /// Evaluate a trained classifier per group.
    Eval(EvalArgs),
    /// Run online k-means over corpus embeddings.
    Cluster(ClusterArgs),
    /// Mine a targeted subset of the corpus into a new manifest.
    Mine(MineArgs),
    /// Project corpus embeddings to 2-D for plotting.
    Project(ProjectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Config file with a "synth" section.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Manifest file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training corpus manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Objective: erm, eq, or dro. Overrides the config value.
    #[arg(long)]
    pub objective: Option<Objective>,
    /// Config file with a "train" section.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (params.emb, params.emb.json, report.json).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Evaluation corpus manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Trained params file (its .json sidecar must sit next to it).
    #[arg(long)]
    pub params: PathBuf,
    /// Output directory (report.json, report.confusion.csv).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Corpus manifest to cluster.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Trained params file; embeds records with the encoder. Without it,
    /// raw features are clustered directly.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Pooling for raw frame features when --params is not given.
    #[arg(long, default_value = "average")]
    pub pool: PoolMethod,
    /// Optional config file with a "cluster" section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of centroids.
    #[arg(long)]
    pub k: Option<usize>,
    /// EMA weight in [0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Mini-batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Passes over the corpus.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (centroids.emb, assignments.jsonl, summary.json).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    /// Corpus manifest to mine from.
    #[arg(long)]
    pub manifest: PathBuf,
    /// label:<group>, cluster:<index>, or random.
    #[arg(long)]
    pub source: Option<String>,
    /// Trained params file; required for label and cluster sources.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Centroid file; required for cluster sources.
    #[arg(long)]
    pub centroids: Option<PathBuf>,
    /// Records to keep.
    #[arg(long)]
    pub target_size: Option<usize>,
    /// Drop this group before sampling (random source only).
    #[arg(long)]
    pub exclude_group: Option<String>,
    /// Manifest of anchor records to mix in.
    #[arg(long)]
    pub anchor_manifest: Option<PathBuf>,
    /// How many anchor records to add.
    #[arg(long)]
    pub anchor_count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optional config file with a "mine" section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (mined.jsonl, summary.json).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Corpus manifest to project.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Trained params file; projects encoder embeddings. Without it, raw
    /// features are projected directly.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Pooling for raw frame features when --params is not given.
    #[arg(long, default_value = "average")]
    pub pool: PoolMethod,
    /// Output directory (projection.csv, embeddings.emb).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Cluster(args) => cmd_cluster(args),
        Command::Mine(args) => cmd_mine(args),
        Command::Project(args) => cmd_project(args),
    }
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::data(format!("{}: serialize: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let section = config
        .synth
        .ok_or_else(|| Error::validation("config has no \"synth\" section"))?;
    let seed = args.seed.unwrap_or(section.seed);
    let corpus = generate_synthetic_corpus(&section.spec, seed)?;
    save_manifest(&corpus, &args.out)?;
    log(&format!(
        "event=synth records={} groups={} seed={seed} out={}",
        corpus.len(),
        corpus.groups().len(),
        args.out.display()
    ));
    Ok(())
}

/// Report file written by cmd_train next to the params.
#[derive(Serialize)]
struct TrainOutput<'a> {
    objective: Objective,
    steps: usize,
    seed: u64,
    groups: &'a [String],
    trace: &'a [crate::trainer::TracePoint],
    #[serde(skip_serializing_if = "Option::is_none")]
    final_q: &'a Option<Vec<f64>>,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let section = config
        .train
        .ok_or_else(|| Error::validation("config has no \"train\" section"))?;
    let objective = args.objective.or(section.objective).ok_or_else(|| {
        Error::validation("--objective (or a config train.objective) is required")
    })?;
    let dro = match objective {
        Objective::Dro => Some(section.dro.ok_or_else(|| {
            Error::validation("objective \"dro\" needs a \"dro\" block in the train config")
        })?),
        _ => None,
    };
    let cfg = TrainConfig {
        objective,
        batch_size: section.batch_size,
        steps: section.steps,
        lr: section.lr,
        seed: args.seed.unwrap_or(section.seed),
        pool: section.pool,
        hidden_dim: section.hidden_dim,
        dro,
    };
    cfg.validate()?;
    let corpus = load_manifest(&args.manifest)?;
    let report = train(&corpus, &cfg)?;

    ensure_out_dir(&args.out)?;
    let params_path = args.out.join("params.emb");
    let model = TrainedModel {
        params: report.params.clone(),
        groups: corpus.groups().to_vec(),
        pool: cfg.pool,
    };
    model.save(&params_path)?;
    write_json(
        &args.out.join("report.json"),
        &TrainOutput {
            objective: report.objective,
            steps: report.steps,
            seed: cfg.seed,
            groups: corpus.groups(),
            trace: &report.trace,
            final_q: &report.final_q,
        },
    )?;
    let last_loss = report.trace.last().map_or(f64::NAN, |t| t.mean_loss);
    log(&format!(
        "event=train objective={} steps={} records={} last_mean_loss={last_loss:.6} out={}",
        cfg.objective,
        cfg.steps,
        corpus.len(),
        args.out.display()
    ));
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = TrainedModel::load(&args.params)?;
    let corpus = load_manifest(&args.manifest)?;
    let aligned = corpus.with_groups(&model.groups)?;
    let report = evaluate(&model.params, &aligned, model.pool)?;
    ensure_out_dir(&args.out)?;
    export_report(&report, args.out.join("report.json"))?;
    log(&format!(
        "event=eval records={} mean={:.6} stdev={:.6} weighted_mean={:.6} out={}",
        corpus.len(),
        report.mean,
        report.stdev,
        report.weighted_mean,
        args.out.display()
    ));
    Ok(())
}

/// Embeddings for clustering or projection: encoder hidden vectors when a
/// model is given, raw pooled features otherwise.
fn corpus_embeddings(
    corpus: &LabeledCorpus,
    params: Option<&Path>,
    pool: PoolMethod,
) -> Result<Vec<Vec<f64>>> {
    match params {
        Some(path) => {
            let model = TrainedModel::load(path)?;
            embed_corpus(corpus, &model.params, model.pool)
        }
        None => corpus
            .records()
            .iter()
            .map(|r| record_input(r, pool))
            .collect(),
    }
}

#[derive(Serialize)]
struct AssignmentRow<'a> {
    utt_id: &'a str,
    cluster: usize,
    distance: f64,
}

#[derive(Serialize)]
struct ClusterSummary {
    k: usize,
    alpha: f64,
    batch_size: usize,
    epochs: usize,
    seed: u64,
    points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    purity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    majority: Option<BTreeMap<usize, String>>,
}

fn cmd_cluster(args: ClusterArgs) -> Result<()> {
    let section = match &args.config {
        Some(path) => load_config(path)?.cluster.unwrap_or_default(),
        None => ClusterSection::default(),
    };
    let k = args
        .k
        .or(section.k)
        .ok_or_else(|| Error::validation("--k (or a config cluster.k) is required"))?;
    let alpha = args.alpha.or(section.alpha).unwrap_or(DEFAULT_EMA_ALPHA);
    let batch_size = args
        .batch_size
        .or(section.batch_size)
        .unwrap_or(DEFAULT_BATCH_SIZE);
    let epochs = args.epochs.or(section.epochs).unwrap_or(DEFAULT_EPOCHS);
    let seed = args.seed.or(section.seed).unwrap_or(0);

    let corpus = load_manifest(&args.manifest)?;
    let embeddings = corpus_embeddings(&corpus, args.params.as_deref(), args.pool)?;
    let mut rng = SeededRng::new(seed);
    let (centroids, assignment) =
        run_online_kmeans(&embeddings, k, alpha, batch_size, epochs, &mut rng)?;

    ensure_out_dir(&args.out)?;
    save_centroids(args.out.join("centroids.emb"), &centroids)?;

    let assignments_path = args.out.join("assignments.jsonl");
    let file = std::fs::File::create(&assignments_path)
        .map_err(|e| Error::io(&assignments_path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    for (rec, (&cluster, &distance)) in corpus
        .records()
        .iter()
        .zip(assignment.labels.iter().zip(&assignment.distances))
    {
        let row = AssignmentRow {
            utt_id: &rec.utt_id,
            cluster,
            distance,
        };
        let line = serde_json::to_string(&row)
            .map_err(|e| Error::data(format!("{}: serialize: {e}", assignments_path.display())))?;
        writeln!(writer, "{line}").map_err(|e| Error::io(&assignments_path, e))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(&assignments_path, e))?;

    // purity is only defined when every record carries a group
    let matched = if corpus.fully_labeled() && !corpus.is_empty() {
        let labels: Vec<String> = corpus
            .records()
            .iter()
            .map(|r| r.group.clone().unwrap())
            .collect();
        Some(match_clusters_to_groups(&assignment, &labels)?)
    } else {
        None
    };
    let summary = ClusterSummary {
        k,
        alpha,
        batch_size,
        epochs,
        seed,
        points: corpus.len(),
        purity: matched.as_ref().map(|m| m.purity),
        majority: matched.map(|m| m.majority),
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    log(&format!(
        "event=cluster k={k} alpha={alpha} epochs={epochs} seed={seed} points={} purity={} out={}",
        corpus.len(),
        summary
            .purity
            .map_or_else(|| "n/a".to_string(), |p| format!("{p:.4}")),
        args.out.display()
    ));
    Ok(())
}

fn cmd_mine(args: MineArgs) -> Result<()> {
    let section = match &args.config {
        Some(path) => load_config(path)?.mine.unwrap_or_default(),
        None => MineSection::default(),
    };
    let source = args
        .source
        .or(section.source)
        .ok_or_else(|| Error::validation("--source (or a config mine.source) is required"))?;
    let target_size = args.target_size.or(section.target_size);
    let seed = args.seed.or(section.seed).unwrap_or(0);
    let exclude_group = args.exclude_group.or(section.exclude_group);
    let anchor_manifest = args.anchor_manifest.or(section.anchor_manifest);
    let anchor_count = args.anchor_count.or(section.anchor_count);

    let corpus = load_manifest(&args.manifest)?;

    let (mined, requested, matched, shortfall) = if source == "random" {
        let n = target_size
            .ok_or_else(|| Error::validation("--target-size is required for random mining"))?;
        let sampled = random_sample(&corpus, n, seed, exclude_group.as_deref())?;
        (sampled, n, n, false)
    } else {
        if exclude_group.is_some() {
            return Err(Error::validation(
                "--exclude-group only applies to the random source",
            ));
        }
        let parsed: MineSource = source.parse()?;
        let n = target_size
            .ok_or_else(|| Error::validation("--target-size is required for mining"))?;
        let plan = MiningPlan {
            source: parsed.clone(),
            target_size: n,
            seed,
        };
        let model_path = args
            .params
            .as_deref()
            .ok_or_else(|| Error::validation("--params is required for model-driven mining"))?;
        let model = TrainedModel::load(model_path)?;
        let result = match &parsed {
            MineSource::SupervisedLabel(_) => {
                mine(&corpus, &plan, &MineArtifacts::Classifier(&model))?
            }
            MineSource::Cluster(_) => {
                let centroids_path = args.centroids.as_deref().ok_or_else(|| {
                    Error::validation("--centroids is required for cluster mining")
                })?;
                let centroids = load_centroids(centroids_path, DEFAULT_EMA_ALPHA)?;
                mine(
                    &corpus,
                    &plan,
                    &MineArtifacts::Clustered {
                        model: &model,
                        centroids: &centroids,
                    },
                )?
            }
        };
        (result.corpus, n, result.matched, result.shortfall)
    };

    let (output, anchor_added) = match (&anchor_manifest, anchor_count) {
        (Some(path), Some(count)) => {
            let anchor = load_manifest(path)?;
            (mix_with_anchor(&mined, &anchor, count, seed)?, count)
        }
        (None, None) => (mined, 0),
        _ => {
            return Err(Error::validation(
                "--anchor-manifest and --anchor-count must be given together",
            ))
        }
    };

    ensure_out_dir(&args.out)?;
    save_manifest(&output, &args.out.join("mined.jsonl"))?;
    let summary = summarize(&source, requested, matched, shortfall, anchor_added, &output);
    write_json(&args.out.join("summary.json"), &summary)?;
    log(&format!(
        "event=mine source={source} matched={matched} shortfall={shortfall} anchor_added={anchor_added} total={} out={}",
        output.len(),
        args.out.display()
    ));
    Ok(())
}

fn cmd_project(args: ProjectArgs) -> Result<()> {
    let corpus = load_manifest(&args.manifest)?;
    let embeddings = corpus_embeddings(&corpus, args.params.as_deref(), args.pool)?;
    let projected = pca_project(&embeddings)?;

    ensure_out_dir(&args.out)?;
    let csv_path = args.out.join("projection.csv");
    let mut csv = String::from("utt_id,x,y,group\n");
    for (rec, point) in corpus.records().iter().zip(&projected) {
        csv.push_str(&crate::metrics::csv_field(&rec.utt_id));
        csv.push_str(&format!(",{},{},", point[0], point[1]));
        if let Some(g) = &rec.group {
            csv.push_str(&crate::metrics::csv_field(g));
        }
        csv.push('\n');
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let entries: Vec<(String, Vec<f32>)> = corpus
        .records()
        .iter()
        .zip(&embeddings)
        .map(|(rec, e)| (rec.utt_id.clone(), e.iter().map(|x| *x as f32).collect()))
        .collect();
    save_embeddings(args.out.join("embeddings.emb"), &entries)?;
    log(&format!(
        "event=project records={} out={}",
        corpus.len(),
        args.out.display()
    ));
    Ok(())
}
