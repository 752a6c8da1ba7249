//! Experiment configuration, multi-seed runs, ablation sweeps, feature export
//! and result tables.

use crate::backbone::{BackboneConfig, FrozenEncoder};
use crate::data::{
    self, build_splits, validate_protocol, DatasetSpec, ImageSource, MetadataRow, PixelStore, Protocol,
    SplitPolicy,
};
use crate::error::{Error, Result};
use crate::metrics::{self, AccuracyMatrix};
use crate::prompts::Fusion;
use crate::trainer::{
    self, checkpoint, Counts, EpochRecord, Injection, Learner, LossToggles, Method, ModelConfig, PoolSet, Preset,
    TrainConfig,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

/// Where images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Rendered dataset; used when `metadata` is unset.
    pub synthetic: DatasetSpec,
    pub metadata: Option<PathBuf>,
    /// Pixel store directory for `metadata`.
    pub pixels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: DatasetSpec::default(),
            metadata: None,
            pixels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub top_k: usize,
    pub n_tasks: usize,
    pub policy: SplitPolicy,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            top_k: 25,
            n_tasks: 5,
            policy: SplitPolicy::RandomPartition,
        }
    }
}

/// Axes of an ablation sweep; an empty axis keeps the base setting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub pools: Vec<PoolSet>,
    pub injection: Vec<Injection>,
    pub fusion: Vec<Fusion>,
    pub losses: Vec<LossToggles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Named methods to run; empty runs `model` and `train` as given.
    pub methods: Vec<Method>,
    pub output_dir: Option<PathBuf>,
    /// Hyperparameter preset underlying `train`; only fields spelled out in
    /// `[train]` override it.
    pub preset: Option<Preset>,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub backbone: BackboneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![0],
            methods: vec![],
            output_dir: None,
            preset: None,
            data: DataConfig::default(),
            split: SplitConfig::default(),
            backbone: BackboneConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationGrid::default(),
        }
    }
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses a `key.path=value` override; the value is read as TOML and falls
/// back to a plain string.
fn override_table(assignment: &str) -> Result<toml::Value> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut v = value;
    for key in path.trim().rsplit('.') {
        let mut t = toml::Table::new();
        t.insert(key.to_string(), v);
        v = toml::Value::Table(t);
    }
    Ok(v)
}

impl ExperimentConfig {
    /// Reads a TOML configuration and applies `key.path=value` overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Value = toml::from_str::<toml::Table>(text)
            .map(toml::Value::Table)
            .map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            merge(&mut doc, override_table(o)?);
        }
        let preset = doc
            .get("preset")
            .and_then(|p| p.as_str())
            .map(str::parse::<Preset>)
            .transpose()?;
        if let Some(p) = preset {
            let mut train = toml::Value::try_from(p.train_config()).map_err(|e| Error::Config(e.to_string()))?;
            if let Some(given) = doc.get("train").cloned() {
                merge(&mut train, given);
            }
            if let toml::Value::Table(t) = &mut doc {
                t.insert("train".into(), train);
            }
        }
        let cfg: ExperimentConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        self.backbone
            .validate()
            .map_err(|e| Error::Config(format!("backbone: {e}")))?;
        self.model
            .validate(self.backbone.prompt_capacity)
            .map_err(|e| Error::Config(format!("model: {e}")))?;
        self.train.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        if self.data.metadata.is_none() {
            self.data
                .synthetic
                .validate()
                .map_err(|e| Error::Config(format!("data.synthetic: {e}")))?;
            if self.data.synthetic.image_side != self.backbone.image_side {
                return Err(Error::Config(format!(
                    "data.synthetic.image_side {} differs from backbone.image_side {}",
                    self.data.synthetic.image_side, self.backbone.image_side
                )));
            }
        }
        if self.split.n_tasks == 0 || self.split.top_k < self.split.n_tasks {
            return Err(Error::Config("split: top_k must be at least n_tasks".into()));
        }
        Ok(())
    }

    /// Model and training settings per variant: one per method, or the base
    /// settings when no method is named.
    pub fn variants(&self) -> Vec<Variant> {
        if self.methods.is_empty() {
            return vec![Variant {
                label: "custom".into(),
                model: self.model.clone(),
                train: self.train.clone(),
            }];
        }
        self.methods
            .iter()
            .map(|m| {
                let (mut model, mut train) = (self.model.clone(), self.train.clone());
                m.apply(&mut model, &mut train);
                Variant {
                    label: m.name().into(),
                    model,
                    train,
                }
            })
            .collect()
    }

    /// Cartesian product of the ablation axes over the base settings.
    /// Combinations the learner cannot build are skipped.
    pub fn ablation_variants(&self) -> Vec<Variant> {
        let g = &self.ablation;
        let mut out = Vec::new();
        for &pools in &axis(&g.pools, self.model.pools) {
            for &injection in &axis(&g.injection, self.model.injection) {
                for &fusion in &axis(&g.fusion, self.model.fusion) {
                    for &losses in &axis(&g.losses, self.train.toggles) {
                        let model = ModelConfig {
                            pools,
                            injection,
                            fusion,
                            ..self.model.clone()
                        };
                        let train = TrainConfig {
                            toggles: losses,
                            ..self.train.clone()
                        };
                        let label = format!("pools={pools};injection={injection};fusion={fusion};losses={losses}");
                        if let Err(e) = model.validate(self.backbone.prompt_capacity).and(train.validate()) {
                            log::warn!("skipping ablation {label}: {e}");
                            continue;
                        }
                        out.push(Variant { label, model, train });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Data for one seed: metadata rows plus the image source.
pub struct Dataset {
    pub rows: Vec<MetadataRow>,
    pub source: Box<dyn ImageSource>,
}

/// Builds the dataset for `seed`. Synthetic data is rendered from the spec
/// seed offset by the run seed.
pub fn load_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    match &cfg.metadata {
        Some(meta) => {
            let rows = data::read_metadata(meta)?;
            let dir = cfg
                .pixels
                .clone()
                .or_else(|| meta.parent().map(|p| p.join("pixels")))
                .ok_or_else(|| Error::Config("data.pixels is required with data.metadata".into()))?;
            Ok(Dataset {
                rows,
                source: Box::new(PixelStore::open(&dir)?),
            })
        }
        None => {
            let spec = DatasetSpec {
                seed: cfg.synthetic.seed.wrapping_add(seed),
                ..cfg.synthetic.clone()
            };
            let d = data::synthesize(&spec)?;
            Ok(Dataset {
                rows: d.rows.clone(),
                source: Box::new(d),
            })
        }
    }
}

/// Renders a synthetic dataset to `dir` as `metadata.csv` plus a pixel
/// store under `dir/pixels`.
pub fn write_dataset(spec: &DatasetSpec, dir: &Path) -> Result<usize> {
    let d = data::synthesize(spec)?;
    let mut store = PixelStore::create(&dir.join("pixels"))?;
    let mut rows = d.rows.clone();
    for row in &mut rows {
        let r = d.recipe(&row.sample_id)?;
        let (rgb, _) = data::render(r);
        let file = store.put(&row.sample_id, &rgb, r.side, r.side)?;
        row.pixel_path = Some(format!("pixels/{file}"));
    }
    store.write_manifest()?;
    data::write_metadata(&dir.join("metadata.csv"), &rows)?;
    Ok(rows.len())
}

/// Phases reported while a sequence runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Loading and training on task `t` (0-based).
    Train(usize),
    /// Evaluating after task `t`.
    Eval(usize),
}

/// Accuracy matrices and per-epoch log of one incremental sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceResult {
    pub composition: AccuracyMatrix,
    pub state: AccuracyMatrix,
    pub object: AccuracyMatrix,
    pub log: Vec<EpochRecord>,
    /// Backbone checksum before training and after every task.
    pub backbone_checksums: Vec<String>,
}

/// Trains the tasks of `protocol` in order, evaluating on every seen task's
/// test split after each one.
pub fn run_sequence(
    learner: &Learner<f32>,
    state: &mut trainer::ModelState<f32>,
    protocol: &Protocol,
    source: &dyn ImageSource,
    train: &TrainConfig,
    observe: &mut dyn FnMut(Phase),
) -> Result<SequenceResult> {
    let n = protocol.tasks.len();
    let mut result = SequenceResult {
        composition: AccuracyMatrix::new(n),
        state: AccuracyMatrix::new(n),
        object: AccuracyMatrix::new(n),
        log: Vec::new(),
        backbone_checksums: vec![learner.encoder.checksum()],
    };
    let mut test_sets = Vec::with_capacity(n);
    for (t, task) in protocol.tasks.tasks.iter().enumerate() {
        observe(Phase::Train(t));
        let samples = trainer::prepare_samples(learner, protocol, &task.train, source)?;
        let log = trainer::train_task(learner, state, &task.compositions, &samples, train)?;
        result.log.extend(log);
        drop(samples);
        result.backbone_checksums.push(learner.encoder.checksum());

        observe(Phase::Eval(t));
        test_sets.push(trainer::prepare_samples(learner, protocol, &task.test, source)?);
        let mut rows = (Vec::new(), Vec::new(), Vec::new());
        for set in &test_sets {
            let counts: Counts = trainer::evaluate(learner, state, set, train.mu)?;
            let (c, s, o) = counts.accuracy();
            rows.0.push(c);
            rows.1.push(s);
            rows.2.push(o);
        }
        result.composition.push_row(rows.0)?;
        result.state.push_row(rows.1)?;
        result.object.push_row(rows.2)?;
    }
    Ok(result)
}

/// Final metrics of one run, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub avg_acc: f64,
    /// Undefined for a single task.
    pub ftt: Option<f64>,
    pub state: f64,
    pub object: f64,
    pub hm: f64,
}

impl Summary {
    pub fn from_matrices(c: &AccuracyMatrix, s: &AccuracyMatrix, o: &AccuracyMatrix) -> Result<Self> {
        let state = 100.0 * metrics::avg_acc(s)?;
        let object = 100.0 * metrics::avg_acc(o)?;
        Ok(Self {
            avg_acc: 100.0 * metrics::avg_acc(c)?,
            ftt: if c.n_tasks() >= 2 {
                Some(100.0 * metrics::forgetting(c)?)
            } else {
                None
            },
            state,
            object,
            hm: metrics::harmonic_mean(state, object)?,
        })
    }
}

const MATRIX_KINDS: [&str; 3] = ["composition", "state", "object"];

/// The three matrices of a run as one table with a leading `metric` column.
pub fn matrices_to_csv(c: &AccuracyMatrix, s: &AccuracyMatrix, o: &AccuracyMatrix) -> String {
    let mut out = String::new();
    for (k, (kind, m)) in MATRIX_KINDS.iter().zip([c, s, o]).enumerate() {
        for (i, line) in m.to_csv_string().lines().enumerate() {
            if i == 0 {
                if k == 0 {
                    let _ = writeln!(out, "metric,{line}");
                }
                continue;
            }
            let _ = writeln!(out, "{kind},{line}");
        }
    }
    out
}

pub fn matrices_from_csv(text: &str) -> Result<[AccuracyMatrix; 3]> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|h| h.strip_prefix("metric,"))
        .ok_or_else(|| Error::Invalid("matrix table lacks its metric,after_task header".into()))?;
    let mut bodies: BTreeMap<&str, String> = BTreeMap::new();
    for line in lines {
        let (kind, rest) = line
            .split_once(',')
            .ok_or_else(|| Error::Invalid(format!("malformed matrix line {line:?}")))?;
        let body = bodies.entry(kind).or_insert_with(|| format!("{header}\n"));
        body.push_str(rest);
        body.push('\n');
    }
    let get = |k: &str| -> Result<AccuracyMatrix> {
        let body = bodies
            .get(k)
            .cloned()
            .unwrap_or_else(|| format!("{header}\n"));
        AccuracyMatrix::from_csv_str(&body)
    };
    Ok([get("composition")?, get("state")?, get("object")?])
}

/// Outcome of one (variant, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub sequence: SequenceResult,
    pub summary: Summary,
    pub seconds: f64,
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Directory-safe form of a variant label.
pub fn label_dir(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Runs one variant for one seed and, when `out` is given, writes its
/// matrices, summary, log, task list and final checkpoint there.
pub fn run_variant(
    cfg: &ExperimentConfig,
    variant: &Variant,
    seed: u64,
    encoder: Arc<FrozenEncoder<f32>>,
    out: Option<&Path>,
) -> Result<RunResult> {
    let started = Instant::now();
    let dataset = load_dataset(&cfg.data, seed)?;
    let protocol = build_splits(&dataset.rows, cfg.split.top_k, cfg.split.n_tasks, cfg.split.policy, seed)?;
    validate_protocol(&protocol.tasks, &protocol.registry)?;
    let learner = Learner::new(variant.model.clone(), encoder, protocol.registry.clone())?;
    let mut state = learner.init_state(seed)?;
    let train = TrainConfig {
        seed,
        ..variant.train.clone()
    };
    let sequence = run_sequence(&learner, &mut state, &protocol, dataset.source.as_ref(), &train, &mut |_| {})?;
    if sequence.backbone_checksums.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Training("backbone weights changed during training".into()));
    }
    let summary = Summary::from_matrices(&sequence.composition, &sequence.state, &sequence.object)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join(format!("matrices_seed{seed}.csv")),
            matrices_to_csv(&sequence.composition, &sequence.state, &sequence.object),
        )?;
        fs::write(
            dir.join(format!("summary_seed{seed}.json")),
            serde_json::to_string_pretty(&summary)? + "\n",
        )?;
        write_jsonl(&dir.join(format!("log_seed{seed}.jsonl")), &sequence.log)?;
        data::export_task_sequence(&dir.join(format!("tasks_seed{seed}.json")), &protocol)?;
        checkpoint::save(&learner, &state, &dir.join(format!("checkpoint_seed{seed}.ckpt")))?;
    }
    Ok(RunResult {
        label: variant.label.clone(),
        seed,
        sequence,
        summary,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Every run of an experiment, in variant then seed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub runs: Vec<RunResult>,
    /// Runs that failed, with their error.
    pub failures: Vec<(String, u64, String)>,
}

fn run_variants(cfg: &ExperimentConfig, variants: &[Variant], out: Option<&Path>) -> Result<Bundle> {
    let encoder = Arc::new(FrozenEncoder::<f32>::new(cfg.backbone.clone())?);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    }
    let mut bundle = Bundle {
        runs: Vec::new(),
        failures: Vec::new(),
    };
    for v in variants {
        for &seed in &cfg.seeds {
            let dir = out.map(|d| d.join(label_dir(&v.label)));
            match run_variant(cfg, v, seed, encoder.clone(), dir.as_deref()) {
                Ok(r) => {
                    log::info!(
                        "{} seed {seed}: avg acc {:.2}, HM {:.2} ({:.1}s)",
                        v.label,
                        r.summary.avg_acc,
                        r.summary.hm,
                        r.seconds
                    );
                    bundle.runs.push(r);
                }
                Err(e) => {
                    log::error!("{} seed {seed} failed: {e}", v.label);
                    bundle.failures.push((v.label.clone(), seed, e.to_string()));
                }
            }
        }
    }
    if let Some(dir) = out {
        if !bundle.runs.is_empty() {
            report(dir)?;
        }
        if !bundle.failures.is_empty() {
            let lines: Vec<String> = bundle
                .failures
                .iter()
                .map(|(l, s, e)| format!("{l},{s},{e}"))
                .collect();
            fs::write(dir.join("FAILED.csv"), format!("variant,seed,error\n{}\n", lines.join("\n")))?;
        }
    }
    Ok(bundle)
}

/// Runs every variant of `cfg` for every seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Bundle> {
    run_variants(cfg, &cfg.variants(), cfg.output_dir.as_deref())
}

/// Runs the ablation grid of `cfg` for every seed.
pub fn ablate(cfg: &ExperimentConfig) -> Result<Bundle> {
    let variants = cfg.ablation_variants();
    if variants.is_empty() {
        return Err(Error::Config("ablation grid has no valid combination".into()));
    }
    run_variants(cfg, &variants, cfg.output_dir.as_deref())
}

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (mean, std) = metrics::mean_std(values);
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub avg_acc: Stat,
    pub ftt: Option<Stat>,
    pub state: Stat,
    pub object: Stat,
    pub hm: Stat,
}

/// Aggregates runs per variant, preserving first-seen variant order.
pub fn aggregate(runs: &[(String, u64, Summary)]) -> Result<Vec<ReportRow>> {
    if runs.is_empty() {
        return Err(Error::Invalid("no completed runs to report".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    for (l, _, _) in runs {
        if !order.contains(&l.as_str()) {
            order.push(l);
        }
    }
    Ok(order
        .into_iter()
        .map(|label| {
            let mine: Vec<&(String, u64, Summary)> = runs.iter().filter(|r| r.0 == label).collect();
            let col = |f: fn(&Summary) -> f64| mine.iter().map(|r| f(&r.2)).collect::<Vec<_>>();
            let ftt: Vec<f64> = mine.iter().filter_map(|r| r.2.ftt).collect();
            ReportRow {
                variant: label.to_string(),
                seeds: mine.iter().map(|r| r.1).collect(),
                avg_acc: Stat::of(&col(|s| s.avg_acc)).expect("non-empty"),
                ftt: Stat::of(&ftt),
                state: Stat::of(&col(|s| s.state)).expect("non-empty"),
                object: Stat::of(&col(|s| s.object)).expect("non-empty"),
                hm: Stat::of(&col(|s| s.hm)).expect("non-empty"),
            }
        })
        .collect())
}

fn fmt_stat(s: &Option<Stat>) -> String {
    match s {
        Some(s) => format!("{:.2}±{:.2}", s.mean, s.std),
        None => "n/a".into(),
    }
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("variant,seeds,avg_acc,ftt,state,object,hm\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant,
            seeds.join(" "),
            fmt_stat(&Some(r.avg_acc)),
            fmt_stat(&r.ftt),
            fmt_stat(&Some(r.state)),
            fmt_stat(&Some(r.object)),
            fmt_stat(&Some(r.hm)),
        );
    }
    out
}

/// Recomputes every summary from the persisted matrices under `dir`
/// (`<variant>/matrices_seed<S>.csv`) and writes `aggregate.csv` and
/// `aggregate.json`.
pub fn report(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut runs = Vec::new();
    let mut variants: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    variants.sort();
    let order: Vec<String> = fs::read_to_string(dir.join("config.toml"))
        .ok()
        .and_then(|t| ExperimentConfig::from_toml(&t, &[]).ok())
        .map(|c| {
            let mut labels: Vec<String> = c.variants().iter().map(|v| label_dir(&v.label)).collect();
            labels.extend(c.ablation_variants().iter().map(|v| label_dir(&v.label)));
            labels
        })
        .unwrap_or_default();
    variants.sort_by_key(|p| {
        let name = p.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
        (order.iter().position(|o| *o == name).unwrap_or(usize::MAX), name)
    });
    for vdir in variants {
        let label = vdir
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default();
        let mut files: Vec<(u64, PathBuf)> = fs::read_dir(&vdir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| {
                let name = p.file_name()?.to_str()?.to_string();
                let seed = name.strip_prefix("matrices_seed")?.strip_suffix(".csv")?.parse().ok()?;
                Some((seed, p))
            })
            .collect();
        files.sort();
        for (seed, path) in files {
            let [c, s, o] = matrices_from_csv(&fs::read_to_string(&path)?).map_err(|e| Error::Format {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            runs.push((label.clone(), seed, Summary::from_matrices(&c, &s, &o)?));
        }
    }
    let rows = aggregate(&runs)?;
    fs::write(dir.join("aggregate.csv"), report_csv(&rows))?;
    fs::write(dir.join("aggregate.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    Ok(rows)
}

/// Which split's samples to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Test,
}

/// One exported sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub sample_id: String,
    pub state: String,
    pub object: String,
    pub composition: String,
    pub predicted: String,
    /// Class-token query followed by the composition prompt-block mean,
    /// `2D` values.
    pub features: Vec<f64>,
}

/// A learner and state restored from a checkpoint, with the protocol it was
/// trained under.
pub struct Restored {
    pub learner: Learner<f32>,
    pub state: trainer::ModelState<f32>,
    pub protocol: Protocol,
    pub dataset: Dataset,
}

/// Rebuilds the learner described by a checkpoint header and the data of
/// `seed`, and checks that they agree.
pub fn restore(cfg: &ExperimentConfig, checkpoint_path: &Path, seed: u64) -> Result<Restored> {
    let bytes = fs::read(checkpoint_path)?;
    let header = checkpoint::read_header(&bytes)?;
    let dataset = load_dataset(&cfg.data, seed)?;
    let protocol = build_splits(&dataset.rows, cfg.split.top_k, cfg.split.n_tasks, cfg.split.policy, seed)?;
    let encoder = Arc::new(FrozenEncoder::<f32>::new(header.backbone.clone())?);
    let learner = Learner::new(header.model.clone(), encoder, protocol.registry.clone())?;
    let state = checkpoint::from_bytes(&learner, &bytes)?;
    Ok(Restored {
        learner,
        state,
        protocol,
        dataset,
    })
}

/// Samples of the tasks a restored state has completed.
fn covered_indices(r: &Restored, split: SplitKind) -> Vec<usize> {
    r.protocol.tasks.tasks[..r.state.tasks_done]
        .iter()
        .flat_map(|t| match split {
            SplitKind::Train => t.train.clone(),
            SplitKind::Test => t.test.clone(),
        })
        .collect()
}

/// Per-sample features and predictions for every sample of `split` in the
/// tasks the checkpoint has seen.
pub fn export_features(restored: &Restored, split: SplitKind, mu: f64) -> Result<Vec<FeatureRow>> {
    let r = restored;
    let indices = covered_indices(r, split);
    let samples = trainer::prepare_samples(&r.learner, &r.protocol, &indices, r.dataset.source.as_ref())?;
    let reg = &r.protocol.registry;
    samples
        .iter()
        .map(|s| {
            let p = r.learner.predict(&r.state, &s.features, mu)?;
            let mut features = s.features.query.to_f64_vec();
            features.extend(p.feature_c);
            Ok(FeatureRow {
                sample_id: s.id.clone(),
                state: reg.states()[s.state].clone(),
                object: reg.objects()[s.object].clone(),
                composition: reg.name(s.composition),
                predicted: reg.name(p.composition),
                features,
            })
        })
        .collect()
}

pub fn write_features(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let width = rows.first().map_or(0, |r| r.features.len());
    let mut header: Vec<String> = ["sample_id", "state", "object", "composition", "predicted"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..width / 2).map(|i| format!("q{i}")));
    header.extend((0..width / 2).map(|i| format!("pc{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.sample_id.clone(),
            r.state.clone(),
            r.object.clone(),
            r.composition.clone(),
            r.predicted.clone(),
        ];
        rec.extend(r.features.iter().map(|x| format!("{x:.6}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Accuracy on every completed task's test split, in completion order.
pub fn evaluate_restored(restored: &Restored, mu: f64) -> Result<Vec<Counts>> {
    let r = restored;
    r.protocol.tasks.tasks[..r.state.tasks_done]
        .iter()
        .map(|t| {
            let samples = trainer::prepare_samples(&r.learner, &r.protocol, &t.test, r.dataset.source.as_ref())?;
            trainer::evaluate(&r.learner, &r.state, &samples, mu)
        })
        .collect()
}
