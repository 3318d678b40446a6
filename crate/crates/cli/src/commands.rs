//! Subcommand implementations. Each command resolves its settings from
//! defaults, the config file and flags, logs them, then runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use xmodal_core::alignment::{AlignmentConfig, AlignmentModel};
use xmodal_core::evalkit::{eval_bidirectional, run_k_sweep, write_sweep, SearchMode};
use xmodal_core::features::{FeatureSequence, Modality};
use xmodal_core::index::{measure_query_scaling, HnswParams, IndexHandle, IndexKind, Scope};
use xmodal_core::reader::{
    eval_reader as reader_accuracy, predict_reader, train_reader as fit_reader, write_predictions, CaptionSource,
    KSchedule, ReaderConfig, ReaderDataset, ReaderModel,
};
use xmodal_core::retriever::{
    build_ks_index, FingerprintPolicy, IndexMode, IndexSet, KnowledgeSource, Retriever, RetrieverConfig, Target,
};
use xmodal_core::synthdata::{generate, read_spec, read_vqa, write_corpus, GenSpec, Split, KS_FILE, SPEC_FILE, VQA_FILE};
use xmodal_core::training::{groups_from_knowledge, train_alignment, TrainConfig, TrainOutputs};

use crate::config::{command_table, resolve, Patch};
use crate::fail::CliError;
use crate::Global;

type Result<T> = std::result::Result<T, CliError>;

/// Resolves and logs the settings of `command`.
fn settings<T: Serialize + DeserializeOwned>(g: &Global, command: &str, base: T, flags: Patch) -> Result<T> {
    let file = g.config.as_deref().map(|p| command_table(p, command)).transpose()?;
    let s = resolve(base, file, flags)?;
    log::info!("{command} settings: {}", serde_json::to_string(&s)?);
    Ok(s)
}

/// Prints `value` as one JSON line with `--json`, else the human rendering.
fn emit<T: Serialize>(g: &Global, value: &T, human: impl FnOnce() -> String) -> Result<()> {
    if g.json {
        println!("{}", serde_json::to_string(value)?);
    } else {
        print!("{}", human());
    }
    Ok(())
}

/// Loads a retriever config, naming the file in any error.
fn load_retriever_config(path: &Path) -> Result<RetrieverConfig> {
    RetrieverConfig::load(path).map_err(|e| CliError::from(e).context(path))
}

fn require<T>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| CliError::usage(format!("missing required setting {what}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum IndexScope {
    Text,
    Image,
    Joint,
}

impl IndexScope {
    fn name(self) -> &'static str {
        match self {
            IndexScope::Text => "text",
            IndexScope::Image => "image",
            IndexScope::Joint => "joint",
        }
    }

    fn scope(self) -> Scope {
        match self {
            IndexScope::Text => Scope::Single(Modality::Text),
            IndexScope::Image => Scope::Single(Modality::Image),
            IndexScope::Joint => Scope::Joint,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SearchKind {
    Flat,
    Hnsw,
}

impl SearchKind {
    fn index_kind(self, p: HnswParams) -> IndexKind {
        match self {
            SearchKind::Flat => IndexKind::Flat,
            SearchKind::Hnsw => IndexKind::Hnsw(p),
        }
    }
}

/// HNSW flags shared by every command that builds a graph.
#[derive(Args, Debug, Clone, Default)]
pub struct HnswFlags {
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    ef_construction: Option<usize>,
    #[arg(long)]
    ef_search: Option<usize>,
}

impl HnswFlags {
    fn patch(&self, p: &mut Patch, at: &str) {
        p.set(&format!("{at}.m"), &self.m)
            .set(&format!("{at}.ef_construction"), &self.ef_construction)
            .set(&format!("{at}.ef_search"), &self.ef_search);
    }
}

fn data_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join(KS_FILE), dir.join(SPEC_FILE), dir.join(VQA_FILE))
}

// ---------------------------------------------------------------- gen-data

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of scenes.
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    captions_per_scene: Option<usize>,
    /// Objects described by each caption.
    #[arg(long)]
    objects_per_caption: Option<usize>,
    #[arg(long)]
    questions_per_scene: Option<usize>,
    #[arg(long)]
    template_set: Option<u32>,
    #[arg(long)]
    domain_shift: Option<f64>,
    #[arg(long)]
    visual_noise: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct GenDataSettings {
    out: PathBuf,
    spec: GenSpec,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        Self {
            out: PathBuf::from("data"),
            spec: GenSpec {
                n_pairs: 1000,
                val_fraction: 0.1,
                test_fraction: 0.1,
                ..GenSpec::default()
            },
        }
    }
}

#[derive(Serialize)]
struct GenDataSummary {
    out: PathBuf,
    scenes: usize,
    knowledge_records: usize,
    questions: usize,
    seed: u64,
}

pub fn gen_data(g: &Global, a: GenDataArgs) -> Result<()> {
    let mut p = Patch::default();
    p.set("out", &a.out)
        .set("spec.seed", &a.seed)
        .set("spec.n_pairs", &a.n_pairs)
        .set("spec.captions_per_scene", &a.captions_per_scene)
        .set("spec.objects_per_caption", &a.objects_per_caption)
        .set("spec.questions_per_scene", &a.questions_per_scene)
        .set("spec.template_set", &a.template_set)
        .set("spec.domain_shift", &a.domain_shift)
        .set("spec.visual_noise", &a.visual_noise)
        .set("spec.val_fraction", &a.val_fraction)
        .set("spec.test_fraction", &a.test_fraction);
    let s: GenDataSettings = settings(g, "gen-data", GenDataSettings::default(), p)?;
    log::info!("seed {}", s.spec.seed);
    let corpus = generate(&s.spec)?;
    write_corpus(&corpus, &s.out)?;
    let summary = GenDataSummary {
        out: s.out.clone(),
        scenes: corpus.scenes.len(),
        knowledge_records: corpus.scenes.iter().map(|x| x.captions.len()).sum(),
        questions: corpus.vqa.len(),
        seed: s.spec.seed,
    };
    emit(g, &summary, || {
        format!(
            "wrote {} scenes, {} captions and {} questions to {}\n",
            summary.scenes,
            summary.knowledge_records,
            summary.questions,
            summary.out.display()
        )
    })
}

// ------------------------------------------------------------- train-align

#[derive(Args, Debug)]
pub struct TrainAlignArgs {
    /// Directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Final checkpoint path; the best-validation checkpoint gets a `.best` suffix.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-step metrics as JSON lines.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Seeds both initialisation and batch sampling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    warmup_iters: Option<usize>,
    /// Leading steps trained against all negatives before hardest-negative mining.
    #[arg(long)]
    all_negatives_iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    /// Shared embedding width.
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct TrainAlignSettings {
    data: PathBuf,
    out: PathBuf,
    metrics: Option<PathBuf>,
    model: AlignmentConfig,
    train: TrainConfig,
}

impl Default for TrainAlignSettings {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            out: PathBuf::from("align.ckpt"),
            metrics: None,
            model: AlignmentConfig {
                d: 32,
                heads: 4,
                ff: 128,
                ..AlignmentConfig::default()
            },
            train: TrainConfig::desk_scale(),
        }
    }
}

#[derive(Serialize)]
struct TrainAlignSummary {
    checkpoint: PathBuf,
    steps: usize,
    final_loss: Option<f64>,
    best_step: Option<usize>,
    best_val_r1: Option<f64>,
    fingerprint: String,
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn train_align(g: &Global, a: TrainAlignArgs) -> Result<()> {
    let mut p = Patch::default();
    p.set("data", &a.data)
        .set("out", &a.out)
        .set("metrics", &a.metrics)
        .set("model.seed", &a.seed)
        .set("train.seed", &a.seed)
        .set("model.d", &a.dim)
        .set("train.iterations", &a.iterations)
        .set("train.warmup_iters", &a.warmup_iters)
        .set("train.all_negatives_iters", &a.all_negatives_iters)
        .set("train.batch_size", &a.batch_size)
        .set("train.lr", &a.lr)
        .set("train.margin", &a.margin);
    let mut s: TrainAlignSettings = settings(g, "train-align", TrainAlignSettings::default(), p)?;
    let (ks_path, spec_path, _) = data_paths(&s.data);
    let spec = read_spec(spec_path)?;
    // the image encoder must match the generator's attribute vocabulary
    s.model.n_shapes = spec.vocab.shapes.len();
    s.model.n_colors = spec.vocab.colors.len();
    s.model.n_sizes = spec.vocab.sizes.len();
    log::info!("seed {} (model) {} (training)", s.model.seed, s.train.seed);
    let ks = KnowledgeSource::load_jsonl(&ks_path)?;
    let train = groups_from_knowledge(&ks, Split::Train)?;
    let val = groups_from_knowledge(&ks, Split::Val)?;
    let mut model = AlignmentModel::new(s.model)?;
    let outputs = TrainOutputs {
        metrics: s.metrics.clone(),
        best_checkpoint: Some(with_suffix(&s.out, ".best")),
        final_checkpoint: Some(s.out.clone()),
    };
    let report = train_alignment(&mut model, &train, &val, &s.train, &outputs)?;
    let summary = TrainAlignSummary {
        checkpoint: s.out.clone(),
        steps: report.history.last().map_or(0, |m| m.step),
        final_loss: report.history.last().map(|m| m.loss),
        best_step: report.best.map(|b| b.0),
        best_val_r1: report.best.map(|b| b.1),
        fingerprint: format!("{:016x}", model.fingerprint()),
    };
    emit(g, &summary, || {
        let mut out = format!("trained {} steps, checkpoint {}\n", summary.steps, summary.checkpoint.display());
        if let (Some(step), Some(r1)) = (summary.best_step, summary.best_val_r1) {
            let _ = writeln!(out, "best validation text-to-image R@1 {r1:.1}% at step {step}");
        }
        out
    })
}

// ------------------------------------------------------------- build-index

#[derive(Args, Debug)]
pub struct BuildIndexArgs {
    /// Alignment checkpoint used to encode the records.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Knowledge source (JSON lines).
    #[arg(long)]
    ks: Option<PathBuf>,
    /// Index file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    scope: Option<IndexScope>,
    #[arg(long, value_enum)]
    kind: Option<SearchKind>,
    #[command(flatten)]
    hnsw: HnswFlags,
    /// Also write a retriever config naming this index.
    #[arg(long)]
    retriever_config: Option<PathBuf>,
    /// Default retrieval count stored in the retriever config.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct BuildIndexSettings {
    checkpoint: PathBuf,
    ks: PathBuf,
    out: PathBuf,
    scope: IndexScope,
    kind: SearchKind,
    hnsw: HnswParams,
    retriever_config: Option<PathBuf>,
    k: usize,
}

impl Default for BuildIndexSettings {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("align.ckpt"),
            ks: PathBuf::from("data").join(KS_FILE),
            out: PathBuf::from("captions.xidx"),
            scope: IndexScope::Text,
            kind: SearchKind::Hnsw,
            hnsw: HnswParams::default(),
            retriever_config: None,
            k: 10,
        }
    }
}

#[derive(Serialize)]
struct BuildIndexSummary {
    index: PathBuf,
    entries: usize,
    dim: usize,
    retriever_config: Option<PathBuf>,
}

/// A retriever config that searches one index of the given scope.
fn single_index_config(
    scope: IndexScope,
    index: PathBuf,
    checkpoint: PathBuf,
    knowledge_source: PathBuf,
    k: usize,
) -> RetrieverConfig {
    let mut cfg = RetrieverConfig {
        mode: IndexMode::Separate,
        text_index: None,
        image_index: None,
        joint_index: None,
        checkpoint,
        knowledge_source,
        k,
        fingerprint_policy: FingerprintPolicy::Strict,
        target: Target::Text,
        exclude_self: false,
    };
    match scope {
        IndexScope::Text => cfg.text_index = Some(index),
        IndexScope::Image => {
            cfg.image_index = Some(index);
            cfg.target = Target::Image;
        }
        IndexScope::Joint => {
            cfg.mode = IndexMode::Joint;
            cfg.joint_index = Some(index);
        }
    }
    cfg
}

/// Makes `p` absolute so that configs written elsewhere still resolve it.
fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}

pub fn build_index(g: &Global, a: BuildIndexArgs) -> Result<()> {
    let mut p = Patch::default();
    p.set("checkpoint", &a.checkpoint)
        .set("ks", &a.ks)
        .set("out", &a.out)
        .set("scope", &a.scope)
        .set("kind", &a.kind)
        .set("retriever_config", &a.retriever_config)
        .set("k", &a.k);
    a.hnsw.patch(&mut p, "hnsw");
    let s: BuildIndexSettings = settings(g, "build-index", BuildIndexSettings::default(), p)?;
    log::info!("seed {}", s.hnsw.seed);
    let model = AlignmentModel::load(&s.checkpoint)?;
    let ks = KnowledgeSource::load_jsonl(&s.ks)?;
    let index = build_ks_index(&model, &ks, s.scope.scope(), s.kind.index_kind(s.hnsw))?;
    index.save(&s.out)?;
    if let Some(cfg_path) = &s.retriever_config {
        single_index_config(
            s.scope,
            absolute(&s.out)?,
            absolute(&s.checkpoint)?,
            absolute(&s.ks)?,
            s.k,
        )
        .save(cfg_path)?;
    }
    let summary = BuildIndexSummary {
        index: s.out.clone(),
        entries: index.len(),
        dim: index.dim(),
        retriever_config: s.retriever_config.clone(),
    };
    emit(g, &summary, || {
        format!(
            "indexed {} vectors of dimension {} into {}\n",
            summary.entries,
            summary.dim,
            summary.index.display()
        )
    })
}

// ------------------------------------------------------------------ query

#[derive(Args, Debug)]
pub struct QueryArgs {
    /// Retriever config file.
    #[arg(long)]
    retriever: Option<PathBuf>,
    /// Image record number in the knowledge source's feature file.
    #[arg(long)]
    image: Option<u32>,
    #[arg(long)]
    k: Option<usize>,
    /// Skip captions of the query image itself.
    #[arg(long)]
    exclude_self: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct QuerySettings {
    retriever: PathBuf,
    image: Option<u32>,
    k: Option<usize>,
    exclude_self: bool,
}

impl Default for QuerySettings {
    fn default() -> Self {
        Self {
            retriever: PathBuf::from("retriever.cfg"),
            image: None,
            k: None,
            exclude_self: false,
        }
    }
}

/// Features of image record `record` as referenced by the knowledge source.
fn image_in_ks(ks: &KnowledgeSource, record: u32) -> Result<(xmodal_core::retriever::ImageRef, FeatureSequence)> {
    ks.image_features()?
        .into_iter()
        .find(|(_, r, _)| r.record == record)
        .map(|(_, r, f)| (r, f))
        .ok_or_else(|| CliError::usage(format!("knowledge source {} has no image {record}", ks.name)))
}

pub fn query(g: &Global, a: QueryArgs) -> Result<()> {
    let mut p = Patch::default();
    p.set("retriever", &a.retriever)
        .set("image", &a.image)
        .set("k", &a.k)
        .flag("exclude_self", a.exclude_self);
    let s: QuerySettings = settings(g, "query", QuerySettings::default(), p)?;
    let image = require(s.image, "image")?;
    let mut cfg = load_retriever_config(&s.retriever)?;
    cfg.exclude_self |= s.exclude_self;
    let k = s.k.unwrap_or(cfg.k);
    let retriever = Retriever::open(&cfg)?;
    let (own, features) = image_in_ks(&retriever.snapshot().knowledge, image)?;
    let set = retriever.retrieve(&features, k, Some(&own))?;
    if g.json {
        println!("{}", set.to_json());
        return Ok(());
    }
    let mut out = format!("image {image}, top {k} from {}\n", retriever.snapshot().knowledge.name);
    for (rank, r) in set.captions.iter().enumerate() {
        let _ = writeln!(out, "{:>3}  {:.4}  {}", rank + 1, r.score, r.caption.as_deref().unwrap_or(""));
    }
    for (rank, r) in set.images.iter().enumerate() {
        let img = r.image.as_ref().map(|i| format!("{}#{}", i.file, i.record)).unwrap_or_default();
        let _ = writeln!(out, "{:>3}  {:.4}  [image {img}]", rank + 1, r.score);
    }
    print!("{out}");
    Ok(())
}

// ------------------------------------------------------------- swap-index

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SwapMode {
    /// New knowledge source and index, same alignment model.
    InDomain,
    /// New model, knowledge source and index together.
    OutOfDomain,
    /// Put back the config saved by the previous swap.
    Restore,
}

#[derive(Args, Debug)]
pub struct SwapIndexArgs {
    /// Retriever config file to rewrite.
    #[arg(long)]
    retriever: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<SwapMode>,
    /// Replacement knowledge source.
    #[arg(long)]
    ks: Option<PathBuf>,
    /// Prebuilt replacement index; built next to the knowledge source when absent.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Replacement alignment checkpoint (out-of-domain swaps).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<SearchKind>,
    #[command(flatten)]
    hnsw: HnswFlags,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SwapIndexSettings {
    retriever: PathBuf,
    mode: SwapMode,
    ks: Option<PathBuf>,
    index: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    kind: SearchKind,
    hnsw: HnswParams,
}

impl Default for SwapIndexSettings {
    fn default() -> Self {
        Self {
            retriever: PathBuf::from("retriever.cfg"),
            mode: SwapMode::InDomain,
            ks: None,
            index: None,
            checkpoint: None,
            kind: SearchKind::Hnsw,
            hnsw: HnswParams::default(),
        }
    }
}

#[derive(Serialize)]
struct SwapSummary {
    mode: SwapMode,
    retriever: PathBuf,
    backup: PathBuf,
    knowledge_source: PathBuf,
    indices: Vec<PathBuf>,
}

/// The index scopes a config searches, with the slot each one fills.
fn scopes_of(cfg: &RetrieverConfig) -> Vec<IndexScope> {
    match cfg.mode {
        IndexMode::Joint => vec![IndexScope::Joint],
        IndexMode::Separate => {
            let mut v = Vec::new();
            if cfg.text_index.is_some() {
                v.push(IndexScope::Text);
            }
            if cfg.image_index.is_some() {
                v.push(IndexScope::Image);
            }
            v
        }
    }
}

fn index_slot(cfg: &mut RetrieverConfig, scope: IndexScope) -> &mut Option<PathBuf> {
    match scope {
        IndexScope::Text => &mut cfg.text_index,
        IndexScope::Image => &mut cfg.image_index,
        IndexScope::Joint => &mut cfg.joint_index,
    }
}

pub fn swap_index(g: &Global, a: SwapIndexArgs) -> Result<()> {
    let mut p = Patch::default();
    p.set("retriever", &a.retriever)
        .set("mode", &a.mode)
        .set("ks", &a.ks)
        .set("index", &a.index)
        .set("checkpoint", &a.checkpoint)
        .set("kind", &a.kind);
    a.hnsw.patch(&mut p, "hnsw");
    let s: SwapIndexSettings = settings(g, "swap-index", SwapIndexSettings::default(), p)?;
    let backup = with_suffix(&s.retriever, ".prev");

    if s.mode == SwapMode::Restore {
        let prev = load_retriever_config(&backup)?;
        // the restored config must still open before it replaces the current one
        Retriever::open(&prev)?;
        fs::copy(&backup, &s.retriever)?;
        let summary = SwapSummary {
            mode: s.mode,
            retriever: s.retriever.clone(),
            backup,
            knowledge_source: prev.knowledge_source.clone(),
            indices: scopes_of(&prev)
                .into_iter()
                .filter_map(|sc| index_slot(&mut prev.clone(), sc).clone())
                .collect(),
        };
        return emit(g, &summary, || {
            format!(
                "restored {} from {}\n",
                summary.retriever.display(),
                summary.backup.display()
            )
        });
    }

    let ks_path = absolute(&require(s.ks.clone(), "ks")?)?;
    let cfg = load_retriever_config(&s.retriever)?;
    let retriever = Retriever::open(&cfg)?;
    let mut next = cfg.clone();
    next.knowledge_source = ks_path.clone();
    let model = match s.mode {
        SwapMode::OutOfDomain => {
            let ckpt = absolute(&require(s.checkpoint.clone(), "checkpoint")?)?;
            next.checkpoint = ckpt.clone();
            AlignmentModel::load(&ckpt)?
        }
        _ => (*retriever.snapshot().model).clone(),
    };
    let knowledge = KnowledgeSource::load_jsonl(&ks_path)?;
    let scopes = scopes_of(&cfg);
    if s.index.is_some() && scopes.len() != 1 {
        return Err(CliError::usage("--index needs a retriever that searches exactly one index"));
    }
    let mut handles = Vec::with_capacity(scopes.len());
    for &scope in &scopes {
        let (path, handle) = match &s.index {
            Some(p) => (absolute(p)?, IndexHandle::load(p)?),
            None => {
                let name = format!(
                    "{}.{}.xidx",
                    ks_path.file_stem().unwrap_or_default().to_string_lossy(),
                    scope.name()
                );
                let path = ks_path.with_file_name(name);
                let h = build_ks_index(&model, &knowledge, scope.scope(), s.kind.index_kind(s.hnsw))?;
                h.save(&path)?;
                log::info!("built {} index {}", scope.name(), path.display());
                (path, h)
            }
        };
        *index_slot(&mut next, scope) = Some(path);
        handles.push((scope, handle));
    }
    let indices = match cfg.mode {
        IndexMode::Joint => IndexSet::Joint(handles.pop().expect("joint mode has one index").1),
        IndexMode::Separate => {
            let mut text = None;
            let mut image = None;
            for (scope, h) in handles {
                match scope {
                    IndexScope::Image => image = Some(h),
                    _ => text = Some(h),
                }
            }
            IndexSet::Separate { text, image }
        }
    };
    // swapping the live retriever validates scopes and fingerprints first
    match s.mode {
        SwapMode::OutOfDomain => retriever.swap_out_of_domain(model, knowledge, indices)?,
        _ => retriever.swap_in_domain(knowledge, indices)?,
    }
    fs::copy(&s.retriever, &backup)?;
    next.save(&s.retriever)?;
    let summary = SwapSummary {
        mode: s.mode,
        retriever: s.retriever.clone(),
        backup,
        knowledge_source: ks_path,
        indices: scopes
            .into_iter()
            .filter_map(|sc| index_slot(&mut next, sc).clone())
            .collect(),
    };
    emit(g, &summary, || {
        format!(
            "{} now serves {} (previous config kept in {})\n",
            summary.retriever.display(),
            summary.knowledge_source.display(),
            summary.backup.display()
        )
    })
}

// --------------------------------------------------------- eval-retrieval

#[derive(Args, Debug)]
pub struct EvalRetrievalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// train, val or test.
    #[arg(long)]
    split: Option<String>,
    /// Equal-sized folds to average over.
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, value_enum)]
    kind: Option<SearchKind>,
    #[command(flatten)]
    hnsw: HnswFlags,
    /// CSV report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct EvalRetrievalSettings {
    checkpoint: PathBuf,
    data: PathBuf,
    split: Split,
    folds: usize,
    kind: SearchKind,
    hnsw: HnswParams,
    out: Option<PathBuf>,
}

impl Default for EvalRetrievalSettings {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("align.ckpt"),
            data: PathBuf::from("data"),
            split: Split::Test,
            folds: 1,
            kind: SearchKind::Flat,
            hnsw: HnswParams::default(),
            out: None,
        }
    }
}

pub fn eval_retrieval(g: &Global, a: EvalRetrievalArgs) -> Result<()> {
    let mut p = Patch::default();
    p.set("checkpoint", &a.checkpoint)
        .set("data", &a.data)
        .set("split", &a.split)
        .set("folds", &a.folds)
        .set("kind", &a.kind)
        .set("out", &a.out);
    a.hnsw.patch(&mut p, "hnsw");
    let s: EvalRetrievalSettings = settings(g, "eval-retrieval", EvalRetrievalSettings::default(), p)?;
    let model = AlignmentModel::load(&s.checkpoint)?;
    let ks = KnowledgeSource::load_jsonl(data_paths(&s.data).0)?;
    let pool = groups_from_knowledge(&ks, s.split)?;
    let mode = match s.kind {
        SearchKind::Flat => SearchMode::Exact,
        SearchKind::Hnsw => SearchMode::Hnsw(s.hnsw),
    };
    let report = eval_bidirectional(&model, &pool, s.folds, mode)?;
    if let Some(out) = &s.out {
        fs::write(out, report.to_csv())?;
    }
    emit(g, &report, || {
        let mut out = format!("{} images, {} fold(s)\n", pool.len(), s.folds);
        for r in [&report.text_to_image, &report.image_to_text] {
            let _ = writeln!(
                out,
                "{:<14} R@1 {:5.1}  R@5 {:5.1}  R@10 {:5.1}",
                r.direction.name(),
                r.r1,
                r.r5,
                r.r10
            );
        }
        out
    })
}

// ---------------------------------------------------------- reader shared

fn reader_data(dir: &Path, split: Split) -> Result<ReaderDataset> {
    let (_, spec_path, vqa_path) = data_paths(dir);
    let answers = read_spec(spec_path)?.answers();
    Ok(ReaderDataset::from_vqa(&read_vqa(vqa_path)?, dir, &answers, split)?)
}

fn open_retriever(path: &Option<PathBuf>) -> Result<Option<Retriever>> {
    match path {
        Some(p) => Ok(Some(Retriever::open(&load_retriever_config(p)?)?)),
        None => Ok(None),
    }
}

fn as_source(r: &Option<Retriever>) -> Option<&dyn CaptionSource> {
    r.as_ref().map(|r| r as &dyn CaptionSource)
}

// ----------------------------------------------------------- train-reader

#[derive(Args, Debug)]
pub struct TrainReaderArgs {
    /// Directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Retriever config; omit to train without retrieval.
    #[arg(long)]
    retriever: Option<PathBuf>,
    /// Reader checkpoint to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fixed number of captions per training example.
    #[arg(long, conflicts_with_all = ["k_min", "k_max"])]
    k: Option<usize>,
    /// Lower end of a uniformly drawn per-example k.
    #[arg(long, requires = "k_max")]
    k_min: Option<usize>,
    #[arg(long, requires = "k_min")]
    k_max: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct TrainReaderSettings {
    data: PathBuf,
    retriever: Option<PathBuf>,
    out: PathBuf,
    reader: ReaderConfig,
    schedule: KSchedule,
}

impl Default for TrainReaderSettings {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            retriever: None,
            out: PathBuf::from("reader.ckpt"),
            reader: ReaderConfig::default(),
            schedule: KSchedule::Fixed { k: 0 },
        }
    }
}

#[derive(Serialize)]
struct TrainReaderSummary {
    checkpoint: PathBuf,
    examples: usize,
    epochs: Vec<xmodal_core::reader::EpochLog>,
}

pub fn train_reader(g: &Global, a: TrainReaderArgs) -> Result<()> {
    let schedule = match (a.k, a.k_min, a.k_max) {
        (Some(k), _, _) => Some(KSchedule::Fixed { k }),
        (None, Some(min), Some(max)) => Some(KSchedule::Uniform { min, max }),
        _ => None,
    };
    let mut p = Patch::default();
    p.set("data", &a.data)
        .set("retriever", &a.retriever)
        .set("out", &a.out)
        .set("schedule", &schedule)
        .set("reader.epochs", &a.epochs)
        .set("reader.lr", &a.lr)
        .set("reader.seed", &a.seed);
    let s: TrainReaderSettings = settings(g, "train-reader", TrainReaderSettings::default(), p)?;
    log::info!("seed {}", s.reader.seed);
    let data = reader_data(&s.data, Split::Train)?;
    let first = data
        .examples
        .first()
        .ok_or_else(|| CliError::usage("no training questions in the data directory"))?;
    let retriever = open_retriever(&s.retriever)?;
    let mut reader = ReaderModel::new(s.reader.clone(), data.answers.clone(), first.image.raw_dim())?;
    let epochs = fit_reader(&mut reader, &data, as_source(&retriever), s.schedule, &s.reader)?;
    reader.save(&s.out)?;
    let summary = TrainReaderSummary {
        checkpoint: s.out.clone(),
        examples: data.examples.len(),
        epochs,
    };
    emit(g, &summary, || {
        let mut out = String::new();
        for e in &summary.epochs {
            let _ = writeln!(out, "epoch {:>3}  loss {:.4}", e.epoch, e.loss);
        }
        let _ = writeln!(
            out,
            "trained on {} questions, checkpoint {}",
            summary.examples,
            summary.checkpoint.display()
        );
        out
    })
}

// ------------------------------------------------------------ eval-reader

#[derive(Args, Debug)]
pub struct EvalReaderArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Reader checkpoint.
    #[arg(long)]
    reader: Option<PathBuf>,
    #[arg(long)]
    retriever: Option<PathBuf>,
    /// Captions retrieved per question; 0 evaluates without retrieval.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    split: Option<String>,
    /// Per-question predictions as JSON lines.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct EvalReaderSettings {
    data: PathBuf,
    reader: PathBuf,
    retriever: Option<PathBuf>,
    k: usize,
    split: Split,
    predictions: Option<PathBuf>,
}

impl Default for EvalReaderSettings {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            reader: PathBuf::from("reader.ckpt"),
            retriever: None,
            k: 0,
            split: Split::Test,
            predictions: None,
        }
    }
}

#[derive(Serialize)]
struct EvalReaderSummary {
    k: usize,
    split: Split,
    questions: usize,
    accuracy: f64,
}

pub fn eval_reader(g: &Global, a: EvalReaderArgs) -> Result<()> {
    let mut p = Patch::default();
    p.set("data", &a.data)
        .set("reader", &a.reader)
        .set("retriever", &a.retriever)
        .set("k", &a.k)
        .set("split", &a.split)
        .set("predictions", &a.predictions);
    let s: EvalReaderSettings = settings(g, "eval-reader", EvalReaderSettings::default(), p)?;
    let reader = ReaderModel::load(&s.reader)?;
    let data = reader_data(&s.data, s.split)?;
    let retriever = open_retriever(&s.retriever)?;
    let accuracy = match &s.predictions {
        Some(path) => {
            let preds = predict_reader(&reader, &data, as_source(&retriever), s.k)?;
            write_predictions(&preds, path)?;
            100.0 * preds.iter().filter(|p| p.correct).count() as f64 / preds.len() as f64
        }
        None => reader_accuracy(&reader, &data, as_source(&retriever), s.k)?,
    };
    let summary = EvalReaderSummary {
        k: s.k,
        split: s.split,
        questions: data.examples.len(),
        accuracy,
    };
    emit(g, &summary, || {
        format!(
            "accuracy {:.2}% on {} {} questions at k={}\n",
            summary.accuracy,
            summary.questions,
            summary.split.name(),
            summary.k
        )
    })
}

// ------------------------------------------------------------------ sweep

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    reader: Option<PathBuf>,
    #[arg(long)]
    retriever: Option<PathBuf>,
    /// Retrieval counts to evaluate, comma separated.
    #[arg(long, value_delimiter = ',')]
    k_values: Option<Vec<usize>>,
    #[arg(long)]
    split: Option<String>,
    /// Output stem; `.csv` and `.svg` are written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    title: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SweepSettings {
    data: PathBuf,
    reader: PathBuf,
    retriever: Option<PathBuf>,
    k_values: Vec<usize>,
    split: Split,
    out: PathBuf,
    title: String,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            reader: PathBuf::from("reader.ckpt"),
            retriever: None,
            k_values: vec![0, 1, 3, 5, 10, 20, 30, 40],
            split: Split::Test,
            out: PathBuf::from("sweep"),
            title: "accuracy against retrieved captions".into(),
        }
    }
}

pub fn sweep(g: &Global, a: SweepArgs) -> Result<()> {
    let mut p = Patch::default();
    p.set("data", &a.data)
        .set("reader", &a.reader)
        .set("retriever", &a.retriever)
        .set("k_values", &a.k_values)
        .set("split", &a.split)
        .set("out", &a.out)
        .set("title", &a.title);
    let s: SweepSettings = settings(g, "sweep", SweepSettings::default(), p)?;
    let reader = ReaderModel::load(&s.reader)?;
    let data = reader_data(&s.data, s.split)?;
    let retriever = open_retriever(&s.retriever)?;
    let curve = run_k_sweep(&reader, &data, as_source(&retriever), &s.k_values)?;
    write_sweep(&curve, &s.out, &s.title)?;
    emit(g, &curve, || {
        let mut out = String::from("   k  accuracy\n");
        for (k, acc) in &curve.points {
            let _ = writeln!(out, "{k:>4}  {acc:6.2}");
        }
        if let Some((k, acc)) = curve.peak() {
            let _ = writeln!(out, "peak {acc:.2}% at k={k}");
        }
        out
    })
}

// ------------------------------------------------------------ bench-index

#[derive(Args, Debug)]
pub struct BenchIndexArgs {
    /// Index sizes, strictly ascending and comma separated.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    hnsw: HnswFlags,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct BenchIndexSettings {
    sizes: Vec<usize>,
    dim: usize,
    k: usize,
    queries: usize,
    seed: u64,
    hnsw: HnswParams,
}

impl Default for BenchIndexSettings {
    fn default() -> Self {
        Self {
            sizes: vec![10_000, 100_000],
            dim: 32,
            k: 10,
            queries: 200,
            seed: 0,
            hnsw: HnswParams::default(),
        }
    }
}

pub fn bench_index(g: &Global, a: BenchIndexArgs) -> Result<()> {
    let mut p = Patch::default();
    p.set("sizes", &a.sizes)
        .set("dim", &a.dim)
        .set("k", &a.k)
        .set("queries", &a.queries)
        .set("seed", &a.seed);
    a.hnsw.patch(&mut p, "hnsw");
    let s: BenchIndexSettings = settings(g, "bench-index", BenchIndexSettings::default(), p)?;
    log::info!("seed {}", s.seed);
    let report = measure_query_scaling(&s.sizes, s.dim, s.k, s.queries, s.hnsw, s.seed)?;
    emit(g, &report, || {
        let mut out = String::from("       n   flat us   hnsw us  hnsw/flat\n");
        for r in &report.rows {
            let _ = writeln!(
                out,
                "{:>8}  {:>8.1}  {:>8.1}  {:>9.3}",
                r.n, r.flat_mean_us, r.hnsw_mean_us, r.hnsw_over_flat
            );
        }
        if let Some((flat, hnsw)) = report.growth_factors() {
            let _ = writeln!(out, "growth: flat x{flat:.2}, hnsw x{hnsw:.2}");
        }
        out
    })
}
