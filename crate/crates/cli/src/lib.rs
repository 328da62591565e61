//! Command implementations behind the `macembed` binary.
//!
//! Every command is a pure function of its JSON config file and the input
//! files it references: identical inputs produce byte-identical outputs.
//! All outputs land in the chosen run directory together with
//! `produced.json`, a manifest of produced files and their FNV-1a 64
//! checksums. Paths inside a config resolve relative to the config file's
//! directory.
//!
//! Exit codes: 0 success, 2 config/schema error, 3 I/O error, 4 numeric
//! error, 5 domain error.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use macembed::checkpoint::{fnv1a64, Checkpoint};
use macembed::dataset::{
    filter_valid, generate_synthetic, labeler_quality, read_label_records, split_disjoint,
    LabelerWeights, LoadedDataset, Split, SyntheticSpec,
};
use macembed::eval::{suggest_margins, EvalReport};
use macembed::features::{postprocess, PostProcessPipeline};
use macembed::losses::{MarginConfig, TRIPLET_MARGIN_DEFAULT};
use macembed::model::{init_params, ModelParams, ModelSpec};
use macembed::numerics::{pca_fit_allow_deficient, Embedding, Matrix, RngState};
use macembed::optim::OptimizerConfig;
use macembed::trainer::{
    classification_classes, embed_entries, evaluate_split, split_distance_distributions,
    train_classification, train_retrieval, two_stage, EpochLog, Stage, TrainConfig, TrainRun,
};
use macembed::{Error as CoreError, ErrorClass};

#[derive(Debug)]
pub enum CliError {
    /// Bad config file or invalid option combination.
    Schema(String),
    /// Filesystem problems outside the core library.
    Io { path: String, source: std::io::Error },
    /// Anything surfaced by the core library.
    Core(CoreError),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Schema(msg) => write!(f, "config error: {msg}"),
            CliError::Io { path, source } => write!(f, "{path}: {source}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e.class() {
                ErrorClass::Schema => 2,
                ErrorClass::Io => 3,
                ErrorClass::Numeric => 4,
                ErrorClass::Domain => 5,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Synth,
    Train,
    Eval,
    Analyze,
    Labels,
}

/// Tracks files written during one command run.
struct RunDir {
    root: PathBuf,
    produced: Vec<PathBuf>,
}

impl RunDir {
    fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root)
            .map_err(|e| CliError::Io { path: root.display().to_string(), source: e })?;
        Ok(Self { root: root.to_path_buf(), produced: Vec::new() })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::Io { path: parent.display().to_string(), source: e })?;
        }
        fs::write(&path, bytes)
            .map_err(|e| CliError::Io { path: path.display().to_string(), source: e })?;
        self.produced.push(PathBuf::from(rel));
        Ok(())
    }

    fn note(&mut self, rel: &str) {
        self.produced.push(PathBuf::from(rel));
    }

    /// Write `produced.json`: every produced file with its checksum.
    fn finish(mut self) -> CliResult<()> {
        self.produced.sort();
        #[derive(Serialize)]
        struct Entry {
            path: String,
            fnv1a64: String,
        }
        let mut entries = Vec::new();
        for rel in &self.produced {
            let bytes = fs::read(self.root.join(rel))
                .map_err(|e| CliError::Io { path: rel.display().to_string(), source: e })?;
            entries.push(Entry {
                path: rel.display().to_string().replace('\\', "/"),
                fnv1a64: format!("{:016x}", fnv1a64(&bytes)),
            });
        }
        let json = serde_json::to_string_pretty(&serde_json::json!({ "files": entries }))
            .expect("serializable");
        let path = self.root.join("produced.json");
        fs::write(&path, json)
            .map_err(|e| CliError::Io { path: path.display().to_string(), source: e })
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io { path: path.display().to_string(), source: e })?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

/// Resolve a config-relative path.
fn resolve(config_path: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config_path.parent().unwrap_or_else(|| Path::new(".")).join(p)
    }
}

/// Dispatch a command; prints its JSON summary to stdout.
pub fn run(kind: CommandKind, config: &Path, out_dir: &Path, verbose: bool) -> CliResult<()> {
    let summary = match kind {
        CommandKind::Synth => cmd_synth(config, out_dir)?,
        CommandKind::Train => cmd_train(config, out_dir, verbose)?,
        CommandKind::Eval => cmd_eval(config, out_dir)?,
        CommandKind::Analyze => cmd_analyze(config, out_dir)?,
        CommandKind::Labels => cmd_labels(config, out_dir)?,
    };
    println!("{}", serde_json::to_string(&summary).expect("serializable summary"));
    Ok(())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// Derives the split stream from the one dataset seed.
const SPLIT_SALT: u64 = 0x7370_6c69;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub spec: SyntheticSpec,
    /// (train, validation, test) class-count fractions.
    pub fractions: (f64, f64, f64),
}

pub fn cmd_synth(config_path: &Path, out_dir: &Path) -> CliResult<serde_json::Value> {
    let cfg: SynthConfig = read_config(config_path)?;
    let data = generate_synthetic(&cfg.spec)?;
    // the split stream derives from the same single seed
    let mut split_rng = RngState::new(cfg.spec.seed ^ SPLIT_SALT);
    let manifest = split_disjoint(&data.items, cfg.fractions, &mut split_rng)?;
    let loaded = LoadedDataset::from_parts(manifest, data.features)?;

    let mut run_dir = RunDir::create(out_dir)?;
    loaded.save(out_dir)?;
    run_dir.note("manifest.tsv");
    for entry in &loaded.manifest.entries {
        run_dir.note(&entry.feature_path);
    }

    let summary = serde_json::json!({
        "command": "synth",
        "items": loaded.manifest.entries.len(),
        "classes": {
            "train": loaded.manifest.split_classes(Split::Train).len(),
            "validation": loaded.manifest.split_classes(Split::Validation).len(),
            "test": loaded.manifest.split_classes(Split::Test).len(),
        },
        "manifest": "manifest.tsv",
    });
    run_dir.finish()?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Which pipeline `train` runs. `init` just writes the seeded initial
/// checkpoint, for untrained baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
pub enum StageSpec {
    #[serde(rename = "init")]
    Init,
    #[serde(rename = "cls")]
    Cls,
    #[serde(rename = "retr-s")]
    RetrS,
    #[serde(rename = "retr-d")]
    RetrD,
    #[serde(rename = "retr-t")]
    RetrT,
    #[serde(rename = "cls+retr-s")]
    ClsRetrS,
    #[serde(rename = "cls+retr-d")]
    ClsRetrD,
    #[serde(rename = "cls+retr-t")]
    ClsRetrT,
}

impl StageSpec {
    fn retrieval_stage(self) -> Option<Stage> {
        match self {
            StageSpec::RetrS | StageSpec::ClsRetrS => Some(Stage::RetrievalSingle),
            StageSpec::RetrD | StageSpec::ClsRetrD => Some(Stage::RetrievalDouble),
            StageSpec::RetrT | StageSpec::ClsRetrT => Some(Stage::RetrievalTriplet),
            _ => None,
        }
    }

}

fn default_layers() -> Vec<usize> {
    vec![32, 64]
}

fn default_vb() -> usize {
    64
}

fn default_epochs() -> u64 {
    30
}

fn default_ppc() -> usize {
    180
}

fn default_regen() -> u64 {
    5
}

fn default_eval_every() -> u64 {
    1
}

fn default_triplet_margin() -> f64 {
    TRIPLET_MARGIN_DEFAULT
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCliConfig {
    /// Path of the dataset manifest, relative to this config file.
    pub manifest: String,
    pub stage: StageSpec,
    pub seed: u64,
    #[serde(default = "default_layers")]
    pub layers: Vec<usize>,
    /// Contrastive margins; defaults to the (0.8, 1.2) preset.
    #[serde(default = "MarginConfig::preset")]
    pub margins: MarginConfig,
    #[serde(default = "default_triplet_margin")]
    pub triplet_margin: f64,
    #[serde(default = "default_vb")]
    pub virtual_batch: usize,
    /// Retrieval-stage epoch budget.
    #[serde(default = "default_epochs")]
    pub max_epochs: u64,
    /// Classification-stage epoch budget.
    #[serde(default = "default_epochs")]
    pub cls_max_epochs: u64,
    #[serde(default = "default_ppc")]
    pub pairs_per_class: usize,
    #[serde(default = "default_regen")]
    pub regeneration_period: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Retrieval-stage optimizer.
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Classification-stage optimizer; defaults to `optimizer`.
    #[serde(default)]
    pub cls_optimizer: Option<OptimizerConfig>,
}

impl TrainCliConfig {
    fn retrieval_config(&self, stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            margins: self.margins,
            triplet_margin: self.triplet_margin,
            virtual_batch: self.virtual_batch,
            max_epochs: self.max_epochs,
            pairs_per_class: self.pairs_per_class,
            regeneration_period: self.regeneration_period,
            eval_every: self.eval_every,
            seed: self.seed,
            layers: self.layers.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    fn classification_config(&self) -> TrainConfig {
        TrainConfig {
            stage: Stage::Classification,
            max_epochs: self.cls_max_epochs,
            optimizer: self.cls_optimizer.clone().unwrap_or_else(|| self.optimizer.clone()),
            ..self.retrieval_config(Stage::RetrievalDouble)
        }
    }
}

fn render_logs(logs: &[EpochLog], verbose: bool) -> Vec<u8> {
    let mut out = Vec::new();
    for log in logs {
        let line = serde_json::to_string(log).expect("serializable log");
        if verbose {
            eprintln!("{line}");
        }
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    out
}

pub fn cmd_train(config_path: &Path, out_dir: &Path, verbose: bool) -> CliResult<serde_json::Value> {
    let cfg: TrainCliConfig = read_config(config_path)?;
    let data = LoadedDataset::load(&resolve(config_path, &cfg.manifest))?;
    let mut run_dir = RunDir::create(out_dir)?;
    let mut rng = RngState::new(cfg.seed);
    let mut log_bytes: Vec<u8> = Vec::new();
    let mut checkpoints: Vec<(String, f64)> = Vec::new();

    let save_checkpoint = |run_dir: &mut RunDir,
                               name: &str,
                               ck: &Checkpoint,
                               checkpoints: &mut Vec<(String, f64)>|
     -> CliResult<()> {
        let bytes = ck.to_bytes()?;
        run_dir.write(&format!("{name}.ckpt"), &bytes)?;
        checkpoints.push((format!("{name}.ckpt"), ck.best_metric));
        Ok(())
    };

    match cfg.stage {
        StageSpec::Init => {
            let spec = ModelSpec {
                input_dim: data.channels(),
                layer_widths: cfg.layers.clone(),
                classes: None,
            };
            let params = init_params(&spec, &mut rng)?;
            let optimizer =
                macembed::optim::OptimizerState::new(cfg.optimizer.clone(), &params)?;
            let metric = evaluate_split(&params, &data, Split::Validation)?.map;
            let ck = Checkpoint {
                params,
                optimizer,
                epoch: 0,
                best_metric: metric,
                config_hash: cfg.retrieval_config(Stage::RetrievalDouble).hash(),
            };
            save_checkpoint(&mut run_dir, "init", &ck, &mut checkpoints)?;
        }
        StageSpec::Cls => {
            let run = run_cls(&cfg, &data, &mut rng)?;
            log_bytes.extend(render_logs(&run.logs, verbose));
            save_checkpoint(&mut run_dir, "cls", &run.checkpoint, &mut checkpoints)?;
        }
        StageSpec::RetrS | StageSpec::RetrD | StageSpec::RetrT => {
            let stage = cfg.stage.retrieval_stage().expect("retrieval stage");
            let spec = ModelSpec {
                input_dim: data.channels(),
                layer_widths: cfg.layers.clone(),
                classes: None,
            };
            let initial = init_params(&spec, &mut rng)?;
            let run = train_retrieval(initial, &data, &cfg.retrieval_config(stage), &mut rng)?;
            log_bytes.extend(render_logs(&run.logs, verbose));
            save_checkpoint(&mut run_dir, stage.as_str(), &run.checkpoint, &mut checkpoints)?;
        }
        StageSpec::ClsRetrS | StageSpec::ClsRetrD | StageSpec::ClsRetrT => {
            let stage = cfg.stage.retrieval_stage().expect("retrieval stage");
            let (cls_run, retr_run) = two_stage(
                &data,
                &cfg.classification_config(),
                &cfg.retrieval_config(stage),
                &mut rng,
            )?;
            log_bytes.extend(render_logs(&cls_run.logs, verbose));
            log_bytes.extend(render_logs(&retr_run.logs, verbose));
            save_checkpoint(&mut run_dir, "cls", &cls_run.checkpoint, &mut checkpoints)?;
            save_checkpoint(&mut run_dir, stage.as_str(), &retr_run.checkpoint, &mut checkpoints)?;
        }
    }

    if !log_bytes.is_empty() {
        run_dir.write("train_log.jsonl", &log_bytes)?;
    }
    let summary = serde_json::json!({
        "command": "train",
        "stage": serde_json::to_value(cfg.stage).expect("stage"),
        "checkpoints": checkpoints
            .iter()
            .map(|(name, metric)| serde_json::json!({ "file": name, "best_metric": metric }))
            .collect::<Vec<_>>(),
    });
    run_dir.finish()?;
    Ok(summary)
}

fn run_cls(cfg: &TrainCliConfig, data: &LoadedDataset, rng: &mut RngState) -> CliResult<TrainRun> {
    let classes = classification_classes(data);
    let spec = ModelSpec {
        input_dim: data.channels(),
        layer_widths: cfg.layers.clone(),
        classes: Some(classes.len()),
    };
    let initial = init_params(&spec, rng)?;
    Ok(train_classification(initial, data, &cfg.classification_config(), rng)?)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn default_split_test() -> Split {
    Split::Test
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCliConfig {
    pub manifest: String,
    pub checkpoint: String,
    #[serde(default = "default_split_test")]
    pub split: Split,
    /// Extra PCA output dimensions to sweep; each must not exceed the
    /// model's embedding dimension.
    #[serde(default)]
    pub pca_dims: Vec<usize>,
}

/// Evaluate one split with the l2 -> PCA -> l2 post-processing pipeline at
/// `dim`, PCA fitted on the database embeddings only.
pub fn evaluate_with_pca(
    params: &ModelParams,
    data: &LoadedDataset,
    split: Split,
    dim: usize,
) -> CliResult<EvalReport> {
    let (queries, database) = data.queries_and_database(split);
    if queries.is_empty() || database.is_empty() {
        return Err(CoreError::EmptyValidation.into());
    }
    let db = embed_entries(params, data, &database)?;
    let qs = embed_entries(params, data, &queries)?;
    let rows: Vec<Vec<f64>> = db.iter().map(|(e, _)| e.values().to_vec()).collect();
    let pca = pca_fit_allow_deficient(&Matrix::from_rows(&rows)?, dim)?;
    let pipeline = PostProcessPipeline::with_pca(pca);
    let project = |set: Vec<(Embedding, u32)>| -> macembed::Result<Vec<(Embedding, u32)>> {
        set.into_iter()
            .map(|(e, c)| Ok((postprocess(&pipeline, e.values())?, c)))
            .collect()
    };
    let (emb, labels): (Vec<_>, Vec<_>) = project(db)?.into_iter().unzip();
    let index = macembed::eval::RetrievalIndex::new(emb, labels)?;
    Ok(macembed::eval::evaluate(&index, &project(qs)?)?)
}

pub fn cmd_eval(config_path: &Path, out_dir: &Path) -> CliResult<serde_json::Value> {
    let cfg: EvalCliConfig = read_config(config_path)?;
    let data = LoadedDataset::load(&resolve(config_path, &cfg.manifest))?;
    let checkpoint = Checkpoint::load(&resolve(config_path, &cfg.checkpoint))?;
    let params = checkpoint.params;

    let embed_dim = params.embed_dim();
    if let Some(&bad) = cfg.pca_dims.iter().find(|&&d| d == 0 || d > embed_dim) {
        return Err(CliError::Schema(format!(
            "pca dim {bad} outside 1..={embed_dim} (model embedding dimension)"
        )));
    }

    let full = evaluate_split(&params, &data, cfg.split)?;
    let mut pca_reports = serde_json::Map::new();
    for &dim in &cfg.pca_dims {
        let report = evaluate_with_pca(&params, &data, cfg.split, dim)?;
        pca_reports.insert(dim.to_string(), serde_json::to_value(&report).expect("report"));
    }

    let report_json = serde_json::json!({
        "split": cfg.split.as_str(),
        "embedding_dim": embed_dim,
        "full": full,
        "pca": pca_reports,
    });
    let mut run_dir = RunDir::create(out_dir)?;
    run_dir.write(
        "report.json",
        serde_json::to_string_pretty(&report_json).expect("report").as_bytes(),
    )?;
    run_dir.finish()?;
    Ok(serde_json::json!({
        "command": "eval",
        "split": cfg.split.as_str(),
        "map": report_json["full"]["map"],
        "report": "report.json",
    }))
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

fn default_split_train() -> Split {
    Split::Train
}

fn default_sample_pairs() -> usize {
    2000
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeCliConfig {
    pub manifest: String,
    pub checkpoint: String,
    #[serde(default = "default_split_train")]
    pub split: Split,
    #[serde(default = "default_sample_pairs")]
    pub sample_pairs: usize,
    pub seed: u64,
}

pub fn cmd_analyze(config_path: &Path, out_dir: &Path) -> CliResult<serde_json::Value> {
    let cfg: AnalyzeCliConfig = read_config(config_path)?;
    let data = LoadedDataset::load(&resolve(config_path, &cfg.manifest))?;
    let checkpoint = Checkpoint::load(&resolve(config_path, &cfg.checkpoint))?;
    let mut rng = RngState::new(cfg.seed);
    let (pos, neg) =
        split_distance_distributions(&checkpoint.params, &data, cfg.split, cfg.sample_pairs, &mut rng)?;

    let mut run_dir = RunDir::create(out_dir)?;
    let header = "bin_left,bin_right,count,polarity\n";
    run_dir.write("distances_positive.csv", format!("{header}{}", pos.csv_rows()).as_bytes())?;
    run_dir.write("distances_negative.csv", format!("{header}{}", neg.csv_rows()).as_bytes())?;

    // margin suggestion may legitimately fail on an inverted model; the
    // distribution CSVs above are still written for inspection
    let margins = suggest_margins(&pos, &neg);
    let margins_json = match &margins {
        Ok(m) => serde_json::json!({
            "alpha1": m.alpha1,
            "alpha2": m.alpha2,
            "positive": { "mean": pos.mean, "std_dev": pos.std_dev, "samples": pos.sample_count },
            "negative": { "mean": neg.mean, "std_dev": neg.std_dev, "samples": neg.sample_count },
        }),
        Err(_) => serde_json::Value::Null,
    };
    if margins.is_ok() {
        run_dir.write(
            "suggested_margins.json",
            serde_json::to_string_pretty(&margins_json).expect("margins").as_bytes(),
        )?;
    }
    run_dir.finish()?;
    let margins = margins?;
    Ok(serde_json::json!({
        "command": "analyze",
        "split": cfg.split.as_str(),
        "alpha1": margins.alpha1,
        "alpha2": margins.alpha2,
        "positive_mean": pos.mean,
        "negative_mean": neg.mean,
    }))
}

// ---------------------------------------------------------------------------
// labels
// ---------------------------------------------------------------------------

fn default_threshold() -> f64 {
    6.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelsCliConfig {
    /// Raw label TSV: item_id, class_id, s0..s4.
    pub labels: String,
    pub weights: LabelerWeights,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

pub fn cmd_labels(config_path: &Path, out_dir: &Path) -> CliResult<serde_json::Value> {
    let cfg: LabelsCliConfig = read_config(config_path)?;
    let records = read_label_records(&resolve(config_path, &cfg.labels))?;
    let retained = filter_valid(&records, &cfg.weights, cfg.threshold);
    let quality = labeler_quality(&records)?;

    let mut run_dir = RunDir::create(out_dir)?;
    let retained_set: std::collections::BTreeSet<&str> =
        retained.iter().map(String::as_str).collect();
    let mut tsv = String::from("item_id\tclass_id\tscore\n");
    for r in &records {
        if retained_set.contains(r.item_id.as_str()) {
            tsv.push_str(&format!(
                "{}\t{}\t{}\n",
                r.item_id,
                r.class_id,
                macembed::dataset::aggregate_score(r, &cfg.weights)
            ));
        }
    }
    run_dir.write("retained.tsv", tsv.as_bytes())?;
    run_dir.write(
        "labeler_quality.json",
        serde_json::to_string_pretty(&serde_json::json!({
            "lowest_correlation_class_counts": quality,
        }))
        .expect("quality")
        .as_bytes(),
    )?;
    run_dir.finish()?;
    Ok(serde_json::json!({
        "command": "labels",
        "records": records.len(),
        "retained": retained.len(),
        "threshold": cfg.threshold,
        "labeler_quality": quality,
    }))
}
