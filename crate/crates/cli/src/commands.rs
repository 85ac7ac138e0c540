use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{anyhow, Context};
use cactusnet::applicability::{
    layer_sweep_resumable, parse_records_csv, record_line, records_csv, subset_average,
    subset_curves_csv, table_csv, ApplicabilityError, ApplicabilityTable, SweepPlan,
};
use cactusnet::base::{default_base_layers, train_base, BaseError, BaseReport};
use cactusnet::cactus::{
    baseline_from_tables, compute_thresholds, grow, save_tree, ApplicabilityScorer, CactusError,
    CactusNode, CactusTree, GrowthLog, PredictorScorer, RoutingStats, VerdictKind,
};
use cactusnet::data::{
    build_splits, resolve_sources, synthetic_manifest, ClassId, DataError, DatasetManifest,
    SplitStore, SubsetCounts, SubsetLabel, SyntheticParams,
};
use cactusnet::nn::{load_checkpoint, save_checkpoint, Network, NnError, Tensor};
use cactusnet::predictor::{
    build_predictor, evaluate_predictor, layer_samples, load_predictor, save_predictor,
    train_predictor, Evaluation, HeldOutClass, PredictorError, SplitPart,
};
use cactusnet::seed::mix;
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, ExperimentConfig};

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum CmdError {
    /// Bad configuration, missing inputs or failed validation (exit 2).
    Config(anyhow::Error),
    /// Numeric failure while running (exit 3).
    Runtime(anyhow::Error),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Config(_) => 2,
            CmdError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CmdError::Config(e) => write!(f, "configuration error: {e:#}"),
            CmdError::Runtime(e) => write!(f, "runtime failure: {e:#}"),
        }
    }
}

impl std::error::Error for CmdError {}

pub type CmdResult<T> = Result<T, CmdError>;

fn config_err(e: impl Into<anyhow::Error>) -> CmdError {
    CmdError::Config(e.into())
}

fn nn_err(e: NnError) -> CmdError {
    match e {
        NnError::NonFinite { .. } | NnError::NumericFailure { .. } => CmdError::Runtime(e.into()),
        other => CmdError::Config(other.into()),
    }
}

impl From<BaseError> for CmdError {
    fn from(e: BaseError) -> Self {
        match e {
            BaseError::Network(n) => nn_err(n),
            other => config_err(other),
        }
    }
}

impl From<ApplicabilityError> for CmdError {
    fn from(e: ApplicabilityError) -> Self {
        match e {
            ApplicabilityError::Numeric { .. } => CmdError::Runtime(e.into()),
            ApplicabilityError::Network(n) => nn_err(n),
            other => config_err(other),
        }
    }
}

impl From<PredictorError> for CmdError {
    fn from(e: PredictorError) -> Self {
        match e {
            PredictorError::Network(n) => nn_err(n),
            other => config_err(other),
        }
    }
}

impl From<CactusError> for CmdError {
    fn from(e: CactusError) -> Self {
        match e {
            CactusError::UntrainedPredictor(_) => CmdError::Runtime(e.into()),
            CactusError::Network(n) => nn_err(n),
            CactusError::Predictor(p) => p.into(),
            other => config_err(other),
        }
    }
}

impl From<DataError> for CmdError {
    fn from(e: DataError) -> Self {
        config_err(e)
    }
}

/// File layout under the output directory.
#[derive(Debug, Clone)]
pub struct OutPaths {
    pub root: PathBuf,
}

impl OutPaths {
    pub fn new(root: &Path) -> Self {
        OutPaths {
            root: root.to_path_buf(),
        }
    }
    pub fn base_dir(&self) -> PathBuf {
        self.root.join("base")
    }
    pub fn base_checkpoint(&self) -> PathBuf {
        self.base_dir().join("base.ckpt")
    }
    pub fn base_report(&self) -> PathBuf {
        self.base_dir().join("report.json")
    }
    pub fn measure_dir(&self) -> PathBuf {
        self.root.join("measure")
    }
    pub fn records(&self) -> PathBuf {
        self.measure_dir().join("records.csv")
    }
    pub fn subset_curves(&self) -> PathBuf {
        self.measure_dir().join("subset_curves.csv")
    }
    pub fn predictors_dir(&self) -> PathBuf {
        self.root.join("predictors")
    }
    pub fn predictor(&self, layer: usize) -> PathBuf {
        self.predictors_dir().join(format!("layer-{layer:02}.pred"))
    }
    pub fn predictor_summary(&self) -> PathBuf {
        self.predictors_dir().join("summary.json")
    }
    pub fn fidelity(&self, layer: usize) -> PathBuf {
        self.predictors_dir()
            .join(format!("fidelity-layer-{layer:02}.csv"))
    }
    pub fn cactus_dir(&self) -> PathBuf {
        self.root.join("cactus")
    }
    pub fn growth_log(&self) -> PathBuf {
        self.cactus_dir().join("growth.jsonl")
    }
    pub fn cactus_stats(&self) -> PathBuf {
        self.cactus_dir().join("stats.json")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(config_err)?;
    }
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(config_err)
}

fn pretty<T: Serialize>(value: &T) -> String {
    format!(
        "{}\n",
        serde_json::to_string_pretty(value).expect("value serializes")
    )
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CmdResult<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(config_err)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(config_err)
}

fn require(path: &Path, hint: &str) -> CmdResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(config_err(anyhow!(
            "{} is missing; run `{hint}` first",
            path.display()
        )))
    }
}

/// Provenance written next to every phase's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    /// Hash of the config without `out`, `workers` and the manifest path,
    /// none of which affects results. The manifest is hashed by content.
    pub config_sha256: String,
    pub manifest_sha256: String,
    pub seed: u64,
}

fn run_info(command: &str, cfg: &ExperimentConfig) -> CmdResult<RunInfo> {
    let mut value = serde_json::to_value(cfg).expect("config serializes");
    if let Some(obj) = value.as_object_mut() {
        obj.remove("out");
        obj.remove("workers");
        obj.remove("manifest");
    }
    let manifest = fs::read(&cfg.manifest)
        .with_context(|| format!("reading {}", cfg.manifest.display()))
        .map_err(config_err)?;
    Ok(RunInfo {
        command: command.to_string(),
        config_sha256: sha256_hex(value.to_string().as_bytes()),
        manifest_sha256: sha256_hex(&manifest),
        seed: cfg.seed,
    })
}

fn write_run_info(dir: &Path, command: &str, cfg: &ExperimentConfig) -> CmdResult<()> {
    write_file(&dir.join("run.json"), pretty(&run_info(command, cfg)?))
}

pub struct Experiment {
    pub manifest: DatasetManifest,
    pub splits: SplitStore,
}

pub fn load_experiment(cfg: &ExperimentConfig) -> CmdResult<Experiment> {
    let manifest = DatasetManifest::load(&cfg.manifest)?;
    let base = cfg.manifest.parent().unwrap_or(Path::new("."));
    let sources = resolve_sources(&manifest, base)?;
    let splits = build_splits(&manifest, &sources)?;
    Ok(Experiment { manifest, splits })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseSummary {
    pub report: BaseReport,
    pub class_names: Vec<String>,
}

pub fn cmd_train_base(cfg: &ExperimentConfig) -> CmdResult<BaseSummary> {
    let exp = load_experiment(cfg)?;
    let known = exp.splits.known_classes();
    let layers = cfg
        .base_layers
        .clone()
        .unwrap_or_else(|| default_base_layers(known.len()));
    let (net, report) = train_base(&exp.splits, layers, &cfg.base_train_config())?;
    if let Some(tap) = cfg.taps.iter().find(|&&t| t + 1 >= net.len()) {
        return Err(config_err(anyhow!(
            "tap {tap} leaves no head layers in a {}-layer network",
            net.len()
        )));
    }
    if report.epochs.iter().any(|e| !e.loss.is_finite()) {
        return Err(CmdError::Runtime(anyhow!("base training loss diverged")));
    }
    let paths = OutPaths::new(&cfg.out);
    fs::create_dir_all(paths.base_dir()).map_err(config_err)?;
    save_checkpoint(&net, &paths.base_checkpoint()).map_err(config_err)?;
    let mut metrics = String::from("epoch,loss,train_accuracy,test_accuracy\n");
    for e in &report.epochs {
        metrics.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.loss, e.train_accuracy, e.test_accuracy
        ));
    }
    write_file(&paths.base_dir().join("metrics.csv"), metrics)?;
    let class_names = report
        .label_map
        .iter()
        .map(|id| {
            exp.manifest
                .class(*id)
                .map_or_else(|| id.to_string(), |c| c.class_name.clone())
        })
        .collect();
    let summary = BaseSummary {
        report,
        class_names,
    };
    write_file(&paths.base_report(), pretty(&summary))?;
    write_run_info(&paths.base_dir(), "train-base", cfg)?;
    log::info!("base test accuracy {:.4}", summary.report.test_accuracy);
    Ok(summary)
}

fn load_base(paths: &OutPaths) -> CmdResult<Network> {
    require(&paths.base_checkpoint(), "train-base")?;
    load_checkpoint(&paths.base_checkpoint()).map_err(config_err)
}

pub fn sweep_plan(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> SweepPlan {
    SweepPlan {
        classes: manifest.measured_classes(),
        probes: manifest.probe_set.clone(),
        layers: cfg.taps.clone(),
        train: cfg.pair_train_config(),
        master_seed: mix(&[cfg.seed, 2]),
        workers: cfg.workers,
    }
}

#[derive(Debug, Clone)]
pub struct MeasureSummary {
    pub table: ApplicabilityTable,
    pub resumed: usize,
    pub computed: usize,
}

/// Runs the applicability sweep. Finished records already in
/// `records.csv` are kept and not recomputed.
pub fn cmd_measure(cfg: &ExperimentConfig) -> CmdResult<MeasureSummary> {
    let paths = OutPaths::new(&cfg.out);
    let net = load_base(&paths)?;
    let exp = load_experiment(cfg)?;
    let plan = sweep_plan(cfg, &exp.manifest);
    let done = match fs::read_to_string(paths.records()) {
        Ok(text) => parse_records_csv(&text)?,
        Err(_) => Vec::new(),
    };
    write_file(&paths.records(), records_csv(&done))?;
    let file = fs::OpenOptions::new()
        .append(true)
        .open(paths.records())
        .map_err(config_err)?;
    let sink = Mutex::new(file);
    let on_record = |r: &cactusnet::applicability::SeparabilityRecord| {
        let mut f = sink.lock().expect("records file lock");
        if let Err(e) = f
            .write_all(record_line(r).as_bytes())
            .and_then(|_| f.flush())
        {
            log::error!("could not append record: {e}");
        }
    };
    let outcome = layer_sweep_resumable(&net, &exp.splits, &plan, &done, &on_record)?;
    if let Some(f) = outcome.failures.first() {
        return Err(CmdError::Runtime(anyhow!(
            "{} sweep jobs failed; first (x={}, un={}, layer={}): {}",
            outcome.failures.len(),
            f.target,
            f.probe,
            f.layer,
            f.message
        )));
    }
    write_file(&paths.records(), records_csv(&outcome.records))?;
    write_file(
        &paths.measure_dir().join("table.csv"),
        table_csv(&outcome.table, &exp.manifest),
    )?;
    let curves = subset_average(&outcome.table, &exp.manifest.labels())?;
    write_file(&paths.subset_curves(), subset_curves_csv(&curves))?;
    write_run_info(&paths.measure_dir(), "measure", cfg)?;
    let done_keys: BTreeSet<_> = done.iter().map(|r| (r.target, r.probe, r.layer)).collect();
    let resumed = outcome
        .records
        .iter()
        .filter(|r| done_keys.contains(&(r.target, r.probe, r.layer)))
        .count();
    Ok(MeasureSummary {
        computed: outcome.records.len() - resumed,
        resumed,
        table: outcome.table,
    })
}

fn load_table(paths: &OutPaths, manifest: &DatasetManifest) -> CmdResult<ApplicabilityTable> {
    require(&paths.records(), "measure")?;
    let text = fs::read_to_string(paths.records()).map_err(config_err)?;
    let records = parse_records_csv(&text)?;
    Ok(ApplicabilityTable::from_records(
        manifest.probe_set.clone(),
        &records,
    )?)
}

/// The last measured class of each subset.
pub fn default_heldout(manifest: &DatasetManifest) -> Vec<ClassId> {
    let measured = manifest.measured_classes();
    SubsetLabel::ALL
        .iter()
        .filter_map(|s| {
            measured
                .iter()
                .rev()
                .find(|c| manifest.subset_of(**c) == Some(*s))
                .copied()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMse {
    pub layer: usize,
    pub train_mse: f64,
    pub heldout_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSummary {
    pub train_classes: Vec<ClassId>,
    pub heldout_classes: Vec<ClassId>,
    pub layers: Vec<LayerMse>,
}

pub fn cmd_train_predictors(
    cfg: &ExperimentConfig,
) -> CmdResult<(PredictorSummary, Vec<Evaluation>)> {
    let paths = OutPaths::new(&cfg.out);
    let net = load_base(&paths)?;
    let exp = load_experiment(cfg)?;
    let table = load_table(&paths, &exp.manifest)?;
    let heldout = cfg
        .heldout_classes
        .clone()
        .unwrap_or_else(|| default_heldout(&exp.manifest));
    let train_classes = cfg.predictor_classes.clone().unwrap_or_else(|| {
        exp.manifest
            .measured_classes()
            .into_iter()
            .filter(|c| !heldout.contains(c))
            .collect()
    });
    if let Some(c) = heldout.iter().find(|c| train_classes.contains(c)) {
        return Err(PredictorError::Leakage(*c).into());
    }
    let pcfg = cfg.predictor_train_config();
    let mut layers = Vec::new();
    let mut evaluations = Vec::new();
    for &layer in &cfg.taps {
        let tr = layer_samples(
            &net,
            &exp.splits,
            &table,
            layer,
            &train_classes,
            SplitPart::Train,
        )?;
        let ho = layer_samples(&net, &exp.splits, &table, layer, &heldout, SplitPart::Test)?;
        let spec = build_predictor(tr.activations.item_shape())?;
        let (model, report) = train_predictor(&spec, layer, &tr, Some(&ho), &pcfg)?;
        if !report.final_train_mse.is_finite() {
            return Err(CmdError::Runtime(anyhow!(
                "predictor for layer {layer} diverged"
            )));
        }
        let held: Vec<HeldOutClass> = heldout
            .iter()
            .map(|&c| {
                let s = layer_samples(&net, &exp.splits, &table, layer, &[c], SplitPart::Test)?;
                Ok(HeldOutClass {
                    class_id: c,
                    subset: exp
                        .manifest
                        .subset_of(c)
                        .expect("sampled class is in manifest"),
                    actual_app: table.get(c, layer).expect("sampled class has an entry"),
                    activations: s.activations,
                })
            })
            .collect::<Result<_, PredictorError>>()?;
        let eval = evaluate_predictor(&model, &held)?;
        fs::create_dir_all(paths.predictors_dir()).map_err(config_err)?;
        save_predictor(&model, &paths.predictor(layer))?;
        write_file(&paths.fidelity(layer), eval.to_csv())?;
        log::info!(
            "layer {layer}: train mse {:.5}, held-out mse {:.5}",
            report.final_train_mse,
            eval.mse
        );
        layers.push(LayerMse {
            layer,
            train_mse: report.final_train_mse,
            heldout_mse: eval.mse,
        });
        evaluations.push(eval);
    }
    let summary = PredictorSummary {
        train_classes,
        heldout_classes: heldout,
        layers,
    };
    write_file(&paths.predictor_summary(), pretty(&summary))?;
    write_run_info(&paths.predictors_dir(), "train-predictors", cfg)?;
    Ok((summary, evaluations))
}

/// One line of a cactus-run input stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamItem {
    /// Row-major `[h, w, c]` pixels; zeros when absent.
    #[serde(default)]
    pub pixels: Option<Vec<f32>>,
    #[serde(default)]
    pub class_id: Option<ClassId>,
    #[serde(default)]
    pub subset: Option<SubsetLabel>,
    /// Applicability reported for every node when running with a mock
    /// predictor.
    #[serde(default)]
    pub mock_app: Option<f64>,
}

pub fn read_stream(path: &Path) -> CmdResult<Vec<StreamItem>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading stream {}", path.display()))
        .map_err(config_err)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .with_context(|| format!("{} line {}", path.display(), i + 1))
                .map_err(config_err)
        })
        .collect()
}

/// The trunk tree with thresholds and (unless mocked) predictors installed.
pub fn build_tree(
    cfg: &ExperimentConfig,
    paths: &OutPaths,
    net: &Network,
    manifest: &DatasetManifest,
    with_predictors: bool,
) -> CmdResult<CactusTree> {
    require(&paths.base_report(), "train-base")?;
    let base: BaseSummary = read_json(&paths.base_report())?;
    let mut tree = CactusTree::from_trunk(net, &cfg.taps, base.class_names, cfg.decision_depth)?;
    let final_layer = *cfg.taps.last().expect("validated non-empty");
    let table = match cfg.thresholds {
        Some(_) => None,
        None => Some(load_table(paths, manifest)?),
    };
    for (i, &layer) in cfg.taps.iter().enumerate() {
        let (q, y1, y2) = match (cfg.thresholds, &table) {
            (Some(t), _) => (t.q, t.y1, t.y2),
            (None, Some(table)) => {
                baseline_from_tables(table, &manifest.labels(), layer, final_layer)?
            }
            (None, None) => unreachable!("table loaded when thresholds are not overridden"),
        };
        let node = tree.trunk_node_at(i + 1).expect("one trunk node per tap");
        tree.set_thresholds(node, compute_thresholds(q, y1, y2)?)?;
        if with_predictors && paths.predictor(layer).exists() {
            tree.install_predictor(node, load_predictor(&paths.predictor(layer))?)?;
        }
    }
    Ok(tree)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CactusSummary {
    pub stats: RoutingStats,
    pub branches: usize,
    pub nodes: usize,
}

fn histogram_csv(items: &[StreamItem], log: &GrowthLog) -> String {
    let mut counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for (item, d) in items.iter().zip(log.decisions()) {
        let key = item
            .subset
            .map_or_else(|| "unlabeled".to_string(), |s| s.as_str().to_string());
        let slot = VerdictKind::ALL
            .iter()
            .position(|k| *k == d.verdict.kind())
            .expect("verdict kind listed");
        counts.entry(key).or_insert([0; 3])[slot] += 1;
    }
    let mut out = String::from("subset,known,objective_unknown,nonobjective_unknown\n");
    for (subset, c) in counts {
        out.push_str(&format!("{subset},{},{},{}\n", c[0], c[1], c[2]));
    }
    out
}

pub fn cmd_cactus_run(
    cfg: &ExperimentConfig,
    input: &Path,
    mock_predictor: bool,
) -> CmdResult<(GrowthLog, CactusTree)> {
    let paths = OutPaths::new(&cfg.out);
    let net = load_base(&paths)?;
    let manifest = DatasetManifest::load(&cfg.manifest)?;
    let items = read_stream(input)?;
    let mut tree = build_tree(cfg, &paths, &net, &manifest, !mock_predictor)?;
    let shape = net.input_shape().to_vec();
    let n: usize = shape.iter().product();
    let inputs: Vec<Tensor> = items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let data = item.pixels.clone().unwrap_or_else(|| vec![0.0; n]);
            Tensor::new(shape.clone(), data)
                .with_context(|| format!("stream item {}", i + 1))
                .map_err(config_err)
        })
        .collect::<CmdResult<_>>()?;
    let initial = tree.clone();
    let gcfg = cfg.growth_config();
    let log = if mock_predictor {
        let current = Cell::new(0.0);
        let scorer = |_: &CactusNode, _: &Tensor, _: &Tensor| current.get();
        let mut log = GrowthLog::default();
        for (i, (item, x)) in items.iter().zip(&inputs).enumerate() {
            let app = item
                .mock_app
                .ok_or_else(|| config_err(anyhow!("stream item {} has no mock_app", i + 1)))?;
            current.set(app);
            let step = grow(&mut tree, std::slice::from_ref(x), &scorer, &gcfg)?;
            log.append(step);
        }
        log
    } else {
        let scorer: &dyn ApplicabilityScorer = &PredictorScorer;
        grow(&mut tree, &inputs, scorer, &gcfg)?
    };
    let dir = paths.cactus_dir();
    fs::create_dir_all(&dir).map_err(config_err)?;
    write_file(&paths.growth_log(), log.to_jsonl())?;
    save_tree(&initial, &dir.join("initial"))?;
    save_tree(&tree, &dir.join("tree"))?;
    write_file(&dir.join("histogram.csv"), histogram_csv(&items, &log))?;
    let summary = CactusSummary {
        stats: log.stats,
        branches: tree.branch_count(),
        nodes: tree.nodes.len(),
    };
    write_file(&paths.cactus_stats(), pretty(&summary))?;
    write_run_info(&dir, "cactus-run", cfg)?;
    Ok((log, tree))
}

/// Gathers the plot-ready outputs of every phase into `report/`.
pub fn cmd_report(cfg: &ExperimentConfig) -> CmdResult<PathBuf> {
    let paths = OutPaths::new(&cfg.out);
    let decision_layer = cfg.taps[cfg.decision_depth - 1];
    let inputs = [
        paths.subset_curves(),
        paths.predictor_summary(),
        paths.fidelity(decision_layer),
        paths.cactus_stats(),
    ];
    let missing: Vec<String> = inputs
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(config_err(anyhow!(
            "missing report inputs: {}",
            missing.join(", ")
        )));
    }
    let dir = paths.report_dir();
    let copy = |from: &Path, name: &str| -> CmdResult<()> {
        let bytes = fs::read(from).map_err(config_err)?;
        write_file(&dir.join(name), bytes)
    };
    copy(&paths.subset_curves(), "curves.csv")?;
    copy(&paths.fidelity(decision_layer), "fidelity.csv")?;
    copy(&paths.cactus_stats(), "growth_summary.json")?;
    let summary: PredictorSummary = read_json(&paths.predictor_summary())?;
    let mut mse = String::from("layer,train_mse,heldout_mse\n");
    for l in &summary.layers {
        mse.push_str(&format!("{},{},{}\n", l.layer, l.train_mse, l.heldout_mse));
    }
    write_file(&dir.join("predictor_mse.csv"), mse)?;
    Ok(dir)
}

#[derive(Debug, Clone, Copy)]
pub struct SyntheticSetup {
    pub counts: SubsetCounts,
    pub k: usize,
    pub per_class: usize,
    pub image_side: usize,
    pub train_fraction: f64,
    pub seed: u64,
    /// Test images per measured class written to the sample stream.
    pub stream_per_class: usize,
}

/// Writes `manifest.json`, `config.json` and `stream.jsonl` for a synthetic
/// experiment into `dir`.
pub fn cmd_make_synthetic(dir: &Path, setup: &SyntheticSetup) -> CmdResult<()> {
    let c = setup.counts;
    let params = SyntheticParams {
        per_family: (c.known + c.objective_unknown).max(c.nonobjective_unknown),
        per_class: setup.per_class,
        image_side: setup.image_side,
        seed: setup.seed,
    };
    let manifest = synthetic_manifest(params, c, setup.k, setup.train_fraction, setup.seed)?;
    let sources = resolve_sources(&manifest, dir)?;
    let splits = build_splits(&manifest, &sources)?;
    let mut stream = String::new();
    for class in manifest.measured_classes() {
        let split = splits.get(class).expect("manifest class has a split");
        for img in split.test.iter().take(setup.stream_per_class) {
            let item = StreamItem {
                pixels: Some(img.pixels.data().to_vec()),
                class_id: Some(class),
                subset: Some(split.subset),
                mock_app: None,
            };
            stream.push_str(&serde_json::to_string(&item).expect("item serializes"));
            stream.push('\n');
        }
    }
    let config = serde_json::json!({
        "manifest": "manifest.json",
        "seed": setup.seed,
        "out": "run",
    });
    write_file(
        &dir.join("manifest.json"),
        format!("{}\n", manifest.to_json()),
    )?;
    write_file(&dir.join("config.json"), pretty(&config))?;
    write_file(&dir.join("stream.jsonl"), stream)?;
    Ok(())
}
