//! Experiment driver: configuration, the four compared variants, metrics
//! and artifact files.
//!
//! Every command takes a [`ConfigMap`] and writes its outputs below
//! `out_dir`. All CSV floats use Rust's shortest round-trip formatting and
//! no file records wall time, so reruns are byte-identical.

pub mod config;
pub mod metrics;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub use config::{ConfigError, ConfigMap};
pub use metrics::{compute_metrics, MetricsError, RunMetrics};

use crate::data::{
    load_manifest, read_pgm, split_train_test, synth_generate, write_dataset, write_pgm, ClassHierarchy, DataError,
    Dataset, Image, SplitSpec, SynthParams, DEFAULT_NOISE,
};
use crate::error::TensorError;
use crate::gabor::{
    gabor_features_batch, make_log_gabor_bank, train_linear_classifier, GaborError, LinearClassifier, LinearConfig,
    LogGaborParams,
};
use crate::interp::{generate_gem, generate_masked_gem, image_saliency, InterpError, DEFAULT_MASK_PERCENTILE};
use crate::nn::checkpoint::{load_network, save_network, save_tensors, CheckpointError};
use crate::nn::{ArchConfig, NnError};
use crate::pipeline::{
    cosine_stats, features, predict, run_data_level, run_plain, run_two_step, sub_seed, CosineStats, LowShotConfig,
    PipelineError, TrainReport,
};
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Gabor,
    Plain,
    DataLevel,
    DataFeatureLevel,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Gabor, Variant::Plain, Variant::DataLevel, Variant::DataFeatureLevel];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gabor => "gabor",
            Variant::Plain => "plain",
            Variant::DataLevel => "data_level",
            Variant::DataFeatureLevel => "data_feature_level",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?} (expected gabor, plain, data_level or data_feature_level)"))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Gabor(#[from] GaborError),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn is_non_finite(e: &TensorError) -> bool {
    matches!(e, TensorError::NonFinite { .. })
}

impl ExperimentError {
    /// 2 for configuration errors, 3 for data and file errors, 4 for
    /// numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Data(_) | ExperimentError::Io { .. } => 3,
            ExperimentError::Checkpoint(CheckpointError::NonFinite(_)) => 4,
            ExperimentError::Checkpoint(_) => 3,
            ExperimentError::Gabor(GaborError::InvalidParams(_)) => 2,
            ExperimentError::Interp(InterpError::Data(_)) => 3,
            ExperimentError::Interp(InterpError::BadPercentile(_) | InterpError::ClassOutOfRange { .. }) => 2,
            ExperimentError::Pipeline(p) => match p {
                PipelineError::Config(_) => 2,
                PipelineError::Data(_) | PipelineError::Checkpoint(CheckpointError::Io(_)) => 3,
                PipelineError::NonFiniteGradient(_) | PipelineError::NonFiniteLoss { .. } => 4,
                PipelineError::Checkpoint(CheckpointError::NonFinite(_)) => 4,
                PipelineError::Tensor(t) | PipelineError::Nn(NnError::Tensor(t)) if is_non_finite(t) => 4,
                _ => 1,
            },
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// Where the images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Generated per seed; `params.seed` is replaced by the run's `synth`
    /// sub-seed unless `fixed_seed` is set.
    Synth { params: SynthParams, fixed_seed: Option<u64> },
    /// Coarse-only rows form `D_t`, fully labelled rows `D_s`.
    Manifest { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub hierarchy: ClassHierarchy,
    pub split: SplitSpec,
    pub lowshot: LowShotConfig,
    pub gabor: LogGaborParams,
    pub linear: LinearConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub images: Vec<PathBuf>,
    pub target_class: Option<usize>,
    pub masked: bool,
    pub percentile: f64,
}

/// Desk-scale training defaults for the synthetic benchmark.
pub fn desk_lowshot() -> LowShotConfig {
    LowShotConfig {
        arch: ArchConfig::with_base_width(4),
        coarse_epochs: 4,
        fine_epochs: 30,
        finetune_epochs: 10,
        base_lr: 0.1,
        finetune_lr: Some(0.01),
        lambda_sim: 3.0,
        ..LowShotConfig::default()
    }
}

/// Every key a configuration may contain.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "seeds",
    "variant",
    "variants",
    "out_dir",
    "data.manifest",
    "data.hierarchy",
    "synth.n_t",
    "synth.n_s",
    "synth.height",
    "synth.width",
    "synth.noise",
    "synth.seed",
    "split.train_fraction",
    "split.stratify",
    "model.base_width",
    "model.post_add_relu",
    "lowshot.tau",
    "lowshot.k",
    "lowshot.coarse_epochs",
    "lowshot.fine_epochs",
    "lowshot.finetune_epochs",
    "lowshot.lr",
    "lowshot.finetune_lr",
    "lowshot.lr_factor",
    "lowshot.milestones",
    "lowshot.batch_size",
    "lowshot.lambda",
    "lowshot.stop_gradient_refs",
    "gabor.scales",
    "gabor.orientations",
    "gabor.max_frequency",
    "gabor.sigma_ratio",
    "gabor.sigma_theta",
    "gabor.pool",
    "gabor.l2",
    "gabor.lr",
    "gabor.epochs",
    "gabor.batch_size",
    "checkpoint",
    "images",
    "class",
    "masked",
    "q",
];

fn parse_hierarchy(spec: &str) -> Result<ClassHierarchy, ConfigError> {
    if spec == "stages" {
        return Ok(ClassHierarchy::stages());
    }
    let counts = spec
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ConfigError::field("data.hierarchy", format!("expected `stages` or fine counts per coarse class: {e}")))?;
    ClassHierarchy::from_counts(&counts).map_err(|e| ConfigError::field("data.hierarchy", e.to_string()))
}

impl ExperimentConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self, ConfigError> {
        map.check_known(KNOWN_KEYS)?;
        let seeds = match (map.get::<u64>("seed")?, map.get_list::<u64>("seeds")?) {
            (Some(_), Some(_)) => return Err(ConfigError::field("seeds", "give either seed or seeds, not both")),
            (Some(s), None) => vec![s],
            (None, Some(list)) if !list.is_empty() => list,
            (None, Some(_)) => return Err(ConfigError::field("seeds", "empty seed list")),
            (None, None) => vec![0],
        };
        let variants = match (map.get::<Variant>("variant")?, map.get_list::<Variant>("variants")?) {
            (Some(_), Some(_)) => return Err(ConfigError::field("variants", "give either variant or variants, not both")),
            (Some(v), None) => vec![v],
            (None, Some(list)) if !list.is_empty() => list,
            (None, Some(_)) => return Err(ConfigError::field("variants", "empty variant list")),
            (None, None) => Variant::ALL.to_vec(),
        };
        let hierarchy = parse_hierarchy(map.raw("data.hierarchy").unwrap_or("stages"))?;

        let source = match map.raw("data.manifest") {
            Some(path) => {
                if let Some(k) = map.keys().find(|k| k.starts_with("synth.")) {
                    return Err(ConfigError::field(k, "synth parameters conflict with data.manifest"));
                }
                DataSource::Manifest { path: PathBuf::from(path) }
            }
            None => {
                let d = SynthParams::default();
                let params = SynthParams {
                    n_t: map.get_or("synth.n_t", d.n_t)?,
                    n_s: map.get_or("synth.n_s", d.n_s)?,
                    image_hw: (map.get_or("synth.height", d.image_hw.0)?, map.get_or("synth.width", d.image_hw.1)?),
                    noise: map.get_or("synth.noise", DEFAULT_NOISE)?,
                    seed: 0,
                };
                if !(params.noise >= 0.0 && params.noise.is_finite()) {
                    return Err(ConfigError::field("synth.noise", "must be a finite non-negative number"));
                }
                DataSource::Synth { params, fixed_seed: map.get("synth.seed")? }
            }
        };

        let split = SplitSpec {
            train_fraction: map.get_or("split.train_fraction", 0.7)?,
            stratify: map.get_or("split.stratify", true)?,
            seed: 0,
        };
        if !(split.train_fraction > 0.0 && split.train_fraction < 1.0) {
            return Err(ConfigError::field("split.train_fraction", "must lie in (0, 1)"));
        }

        let d = desk_lowshot();
        let base_width = map.get::<usize>("model.base_width")?;
        if base_width == Some(0) {
            return Err(ConfigError::field("model.base_width", "must be positive"));
        }
        let mut arch = base_width.map_or(d.arch.clone(), ArchConfig::with_base_width);
        arch.post_add_relu = map.get_or("model.post_add_relu", arch.post_add_relu)?;
        let lowshot = LowShotConfig {
            arch,
            tau: map.get_or("lowshot.tau", d.tau)?,
            k: map.get_or("lowshot.k", d.k)?,
            coarse_epochs: map.get_or("lowshot.coarse_epochs", d.coarse_epochs)?,
            fine_epochs: map.get_or("lowshot.fine_epochs", d.fine_epochs)?,
            finetune_epochs: map.get_or("lowshot.finetune_epochs", d.finetune_epochs)?,
            base_lr: map.get_or("lowshot.lr", d.base_lr)?,
            finetune_lr: match map.raw("lowshot.finetune_lr") {
                Some("none") => None,
                _ => map.get("lowshot.finetune_lr")?.or(d.finetune_lr),
            },
            lr_factor: map.get_or("lowshot.lr_factor", d.lr_factor)?,
            milestones: map.get_list("lowshot.milestones")?,
            batch_size: map.get_or("lowshot.batch_size", d.batch_size)?,
            lambda_sim: map.get_or("lowshot.lambda", d.lambda_sim)?,
            stop_gradient_refs: map.get_or("lowshot.stop_gradient_refs", d.stop_gradient_refs)?,
            seed: 0,
        };
        lowshot
            .validate(hierarchy.num_fine())
            .map_err(|e| ConfigError::field("lowshot", e.to_string().trim_start_matches("invalid configuration: ").to_string()))?;

        let g = LogGaborParams::default();
        let gabor = LogGaborParams {
            scales: map.get_or("gabor.scales", g.scales)?,
            orientations: map.get_or("gabor.orientations", g.orientations)?,
            max_frequency: map.get_or("gabor.max_frequency", g.max_frequency)?,
            sigma_ratio: map.get_or("gabor.sigma_ratio", g.sigma_ratio)?,
            sigma_theta: map.get_or("gabor.sigma_theta", g.sigma_theta)?,
            pool: map.get_or("gabor.pool", g.pool)?,
        };
        let l = LinearConfig::default();
        let linear = LinearConfig {
            l2: map.get_or("gabor.l2", l.l2)?,
            learning_rate: map.get_or("gabor.lr", l.learning_rate)?,
            epochs: map.get_or("gabor.epochs", l.epochs)?,
            batch_size: map.get_or("gabor.batch_size", l.batch_size)?,
            seed: 0,
        };
        if linear.batch_size == 0 || !(linear.learning_rate > 0.0) || !(linear.l2 >= 0.0) {
            return Err(ConfigError::field("gabor", "lr must be positive, l2 non-negative and batch_size positive"));
        }

        let target_class = match map.get::<usize>("class")? {
            Some(0) => return Err(ConfigError::field("class", "classes are numbered from 1")),
            Some(c) if c > hierarchy.num_fine() => {
                return Err(ConfigError::field("class", format!("only {} fine classes", hierarchy.num_fine())))
            }
            other => other.map(|c| c - 1),
        };
        let percentile = map.get_or("q", DEFAULT_MASK_PERCENTILE)?;
        if !(0.0..100.0).contains(&percentile) {
            return Err(ConfigError::field("q", "must lie in [0, 100)"));
        }
        Ok(ExperimentConfig {
            source,
            hierarchy,
            split,
            lowshot,
            gabor,
            linear,
            variants,
            seeds,
            out_dir: PathBuf::from(map.raw("out_dir").unwrap_or("out")),
            checkpoint: map.raw("checkpoint").map(PathBuf::from),
            images: map
                .raw("images")
                .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect())
                .unwrap_or_default(),
            target_class,
            masked: map.get_or("masked", false)?,
            percentile,
        })
    }
}

/// `D_t`, and the train and test halves of `D_s`, for one seed.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub coarse: Dataset,
    pub train: Dataset,
    pub test: Dataset,
}

/// Synthetic sets are generated from seed `synth.seed`, or from the run
/// seed's `synth` sub-seed.
pub fn source_datasets(config: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset), ExperimentError> {
    match &config.source {
        DataSource::Synth { params, fixed_seed } => {
            let params = SynthParams { seed: fixed_seed.unwrap_or_else(|| sub_seed(seed, "synth")), ..*params };
            Ok(synth_generate(&params, &config.hierarchy)?)
        }
        DataSource::Manifest { path } => {
            let all = load_manifest(path, &config.hierarchy)?;
            let (coarse_only, fine) = all.partition_by_fine();
            Ok((all.subset(&coarse_only)?, all.subset(&fine)?))
        }
    }
}

pub fn prepare_data(config: &ExperimentConfig, seed: u64) -> Result<PreparedData, ExperimentError> {
    let (coarse, fine) = source_datasets(config, seed)?;
    if fine.is_empty() {
        return Err(DataError::Empty.into());
    }
    let (train, test) = split_train_test(&fine, &SplitSpec { seed: sub_seed(seed, "split"), ..config.split })?;
    Ok(PreparedData { coarse, train, test })
}

/// Held-out result of one variant and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: RunMetrics,
}

/// Intra/inter-class cosine similarity of held-out features after steps 2
/// and 4.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityRow {
    pub seed: u64,
    pub step2: CosineStats,
    pub step4: CosineStats,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub rows: Vec<RunRow>,
    pub similarity: Vec<SimilarityRow>,
    /// Fine classes per seed whose reference pool fell back.
    pub fallbacks: Vec<(u64, Vec<usize>)>,
}

impl RunSummary {
    pub fn mean_average(&self, variant: Variant) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).map(|r| r.metrics.average).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

/// `variant,seed,<one column per fine class>,average`.
pub fn metrics_csv(rows: &[RunRow], hierarchy: &ClassHierarchy) -> String {
    let mut out = String::from("variant,seed");
    for c in 0..hierarchy.num_fine() {
        write!(out, ",{}", hierarchy.fine_name(c)).unwrap();
    }
    out.push_str(",average\n");
    for r in rows {
        write!(out, "{},{}", r.variant, r.seed).unwrap();
        for acc in &r.metrics.per_class {
            write!(out, ",{}", fmt_opt(*acc)).unwrap();
        }
        writeln!(out, ",{}", r.metrics.average).unwrap();
    }
    out
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// One row per variant: mean and sample standard deviation over seeds of
/// every per-class accuracy and of the average.
pub fn compare_csv(rows: &[RunRow], hierarchy: &ClassHierarchy) -> String {
    let mut out = String::from("variant,seeds");
    for c in 0..hierarchy.num_fine() {
        let name = hierarchy.fine_name(c);
        write!(out, ",{name}_mean,{name}_std").unwrap();
    }
    out.push_str(",average_mean,average_std\n");
    let mut variants: Vec<Variant> = rows.iter().map(|r| r.variant).collect();
    variants.sort();
    variants.dedup();
    for v in variants {
        let mine: Vec<&RunRow> = rows.iter().filter(|r| r.variant == v).collect();
        write!(out, "{v},{}", mine.len()).unwrap();
        for c in 0..hierarchy.num_fine() {
            let accs: Vec<f64> = mine.iter().filter_map(|r| r.metrics.per_class[c]).collect();
            if accs.is_empty() {
                out.push_str(",,");
            } else {
                let (m, s) = mean_std(&accs);
                write!(out, ",{m},{s}").unwrap();
            }
        }
        let (m, s) = mean_std(&mine.iter().map(|r| r.metrics.average).collect::<Vec<_>>());
        writeln!(out, ",{m},{s}").unwrap();
    }
    out
}

pub fn similarity_csv(rows: &[SimilarityRow]) -> String {
    let mut out = String::from("seed,intra_step2,inter_step2,intra_step4,inter_step4\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.seed, r.step2.intra, r.step2.inter, r.step4.intra, r.step4.inter).unwrap();
    }
    out
}

/// Baseline weights as a checkpoint of `f64` tensors.
pub fn save_gabor(clf: &LinearClassifier, path: &Path) -> Result<(), ExperimentError> {
    let t = |shape: &[usize], v: &[f64]| Tensor::new(shape, v.to_vec()).expect("classifier shapes are consistent");
    let tensors = vec![
        ("gabor.weight".to_string(), t(&[clf.classes, clf.dim], &clf.weights)),
        ("gabor.bias".to_string(), t(&[clf.classes], &clf.bias)),
        ("gabor.mean".to_string(), t(&[clf.dim], &clf.mean)),
        ("gabor.scale".to_string(), t(&[clf.dim], &clf.scale)),
    ];
    Ok(save_tensors(&tensors, path)?)
}

fn images_of(d: &Dataset) -> Vec<&Image> {
    d.samples().iter().map(|s| &s.image).collect()
}

fn gabor_predictions(
    config: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
    out: Option<&Path>,
) -> Result<Vec<usize>, ExperimentError> {
    let bank = make_log_gabor_bank(data.train.image_hw(), &config.gabor)?;
    let ft = gabor_features_batch(&images_of(&data.train), &bank)?;
    let lin = LinearConfig { seed: sub_seed(seed, "gabor"), ..config.linear.clone() };
    let clf = train_linear_classifier(&ft, &data.train.fine_labels()?, config.hierarchy.num_fine(), &lin)?;
    if let Some(dir) = out {
        save_gabor(&clf, &dir.join("gabor.ckpt"))?;
    }
    let fe = gabor_features_batch(&images_of(&data.test), &bank)?;
    Ok(fe.iter().map(|f| clf.predict(f)).collect())
}

struct Cell<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    truths: Vec<usize>,
}

impl Cell<'_> {
    fn dir(&self, variant: Variant) -> PathBuf {
        self.config.out_dir.join("checkpoints").join(format!("{variant}_{}", self.seed))
    }

    fn lowshot(&self) -> LowShotConfig {
        LowShotConfig { seed: self.seed, ..self.config.lowshot.clone() }
    }

    fn finish(&self, variant: Variant, predictions: &[usize], reports: &[&TrainReport]) -> Result<RunRow, ExperimentError> {
        let metrics = compute_metrics(predictions, &self.truths, &self.config.hierarchy)?;
        let out = &self.config.out_dir;
        write_file(&out.join(format!("confusion_{variant}_{}.csv", self.seed)), &metrics.confusion_csv(&self.config.hierarchy))?;
        if !reports.is_empty() {
            write_file(&out.join(format!("train_{variant}_{}.csv", self.seed)), &TrainReport::to_csv(reports))?;
        }
        log::info!("{variant} seed {}: average accuracy {:.4}", self.seed, metrics.average);
        Ok(RunRow { variant, seed: self.seed, metrics })
    }
}

fn references_csv(sets: &[crate::pipeline::ReferenceSet], hierarchy: &ClassHierarchy) -> String {
    let mut out = String::from("set,class,sample_id\n");
    for (i, s) in sets.iter().enumerate() {
        for m in &s.members {
            writeln!(out, "{},{},{}", i + 1, hierarchy.fine_name(m.class), m.sample_id).unwrap();
        }
    }
    out
}

/// Runs `variants` for one seed; `data_level` and `data_feature_level`
/// share steps 1 and 2 when both are requested.
fn run_seed(config: &ExperimentConfig, seed: u64, variants: &[Variant], summary: &mut RunSummary) -> Result<(), ExperimentError> {
    let data = prepare_data(config, seed)?;
    let cell = Cell { config, seed, truths: data.test.fine_labels()? };
    let lowshot = cell.lowshot();
    let mut pending: Vec<RunRow> = Vec::new();
    if variants.contains(&Variant::Gabor) {
        let dir = cell.dir(Variant::Gabor);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let preds = gabor_predictions(config, &data, seed, Some(&dir))?;
        pending.push(cell.finish(Variant::Gabor, &preds, &[])?);
    }
    if variants.contains(&Variant::Plain) {
        let (net, report) = run_plain(&data.train, &lowshot, Some(&data.test))?;
        let dir = cell.dir(Variant::Plain);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        save_network(&net, &dir.join("plain.ckpt"))?;
        pending.push(cell.finish(Variant::Plain, &predict(&net, &data.test)?, &[&report])?);
    }
    let want_dl = variants.contains(&Variant::DataLevel);
    if variants.contains(&Variant::DataFeatureLevel) {
        let dir = cell.dir(Variant::DataFeatureLevel);
        let out = run_two_step(&data.coarse, &data.train, &lowshot, Some(&data.test), Some(&dir))?;
        if want_dl {
            let dl_dir = cell.dir(Variant::DataLevel);
            fs::create_dir_all(&dl_dir).map_err(io_err(&dl_dir))?;
            save_network(&out.after_step2, &dl_dir.join("step2.ckpt"))?;
            let preds = predict(&out.after_step2, &data.test)?;
            pending.push(cell.finish(Variant::DataLevel, &preds, &[&out.coarse, &out.fine])?);
        }
        write_file(&config.out_dir.join(format!("references_{seed}.csv")), &references_csv(&out.references.sets, &config.hierarchy))?;
        let preds = predict(&out.model, &data.test)?;
        pending.push(cell.finish(Variant::DataFeatureLevel, &preds, &[&out.coarse, &out.fine, &out.finetune])?);
        let labels = &cell.truths;
        summary.similarity.push(SimilarityRow {
            seed,
            step2: cosine_stats(&features(&out.after_step2.extractor, &data.test)?, labels),
            step4: cosine_stats(&features(&out.model.extractor, &data.test)?, labels),
        });
        summary.fallbacks.push((seed, out.references.fallback_classes.clone()));
    } else if want_dl {
        let out = run_data_level(&data.coarse, &data.train, &lowshot, Some(&data.test), Some(&cell.dir(Variant::DataLevel)))?;
        let preds = predict(&out.model, &data.test)?;
        pending.push(cell.finish(Variant::DataLevel, &preds, &[&out.coarse, &out.fine])?);
    }
    pending.sort_by_key(|r| r.variant);
    summary.rows.extend(pending);
    Ok(())
}

fn run_all(config: &ExperimentConfig, variants: &[Variant]) -> Result<RunSummary, ExperimentError> {
    fs::create_dir_all(&config.out_dir).map_err(io_err(&config.out_dir))?;
    let mut summary = RunSummary::default();
    for &seed in &config.seeds {
        run_seed(config, seed, variants, &mut summary)?;
    }
    write_file(&config.out_dir.join("metrics.csv"), &metrics_csv(&summary.rows, &config.hierarchy))?;
    Ok(summary)
}

/// Trains and evaluates the first configured variant on every seed;
/// writes `metrics.csv`, confusion matrices, training curves and
/// checkpoints.
pub fn cmd_run(config: &ExperimentConfig) -> Result<RunSummary, ExperimentError> {
    let variant = config.variants[0];
    if config.variants.len() > 1 {
        log::warn!("run trains one variant; using {variant} (use compare for several)");
    }
    run_all(config, &[variant])
}

/// Every configured variant on every seed, plus `compare.csv` (mean and
/// standard deviation over seeds) and, with `data_feature_level`,
/// `similarity.csv`.
pub fn cmd_compare(config: &ExperimentConfig) -> Result<RunSummary, ExperimentError> {
    let summary = run_all(config, &config.variants)?;
    write_file(&config.out_dir.join("compare.csv"), &compare_csv(&summary.rows, &config.hierarchy))?;
    if !summary.similarity.is_empty() {
        write_file(&config.out_dir.join("similarity.csv"), &similarity_csv(&summary.similarity))?;
    }
    Ok(summary)
}

/// Writes `D_t` and `D_s` for the first seed as a PGM tree plus
/// `manifest.csv`; returns the manifest path.
pub fn cmd_synth(config: &ExperimentConfig) -> Result<PathBuf, ExperimentError> {
    if let DataSource::Manifest { .. } = config.source {
        return Err(ConfigError::field("data.manifest", "synth generates data; drop the manifest").into());
    }
    let (d_t, d_s) = source_datasets(config, config.seeds[0])?;
    let manifest = write_dataset(&config.out_dir, &[&d_t, &d_s])?;
    let counts = Dataset::new(config.hierarchy.clone(), d_t.samples().iter().chain(d_s.samples()).cloned().collect())?.counts();
    log::info!("wrote {} images\n{counts}", d_t.len() + d_s.len());
    Ok(manifest)
}

fn require_checkpoint(config: &ExperimentConfig) -> Result<&Path, ExperimentError> {
    config.checkpoint.as_deref().ok_or_else(|| ConfigError::field("checkpoint", "required").into())
}

fn stem(path: &Path, fallback: usize) -> String {
    path.file_stem().map_or_else(|| format!("image_{fallback}"), |s| s.to_string_lossy().into_owned())
}

/// One saliency PGM per image, for `class` or else the predicted class,
/// plus `saliency.csv` listing image, class and prediction.
pub fn cmd_saliency(config: &ExperimentConfig) -> Result<Vec<PathBuf>, ExperimentError> {
    let net = load_network::<f32>(require_checkpoint(config)?)?;
    if config.images.is_empty() {
        return Err(ConfigError::field("images", "comma-separated PGM paths required").into());
    }
    let mut written = Vec::new();
    let mut index = String::from("image,class,predicted,output\n");
    for (i, path) in config.images.iter().enumerate() {
        let image = read_pgm(path)?;
        let batch = Tensor::new(&[1, 1, image.height(), image.width()], image.pixels().to_vec()).map_err(InterpError::from)?;
        let logits = net.logits(&batch).map_err(InterpError::from)?;
        let predicted = argmax(logits.row(0));
        let class = config.target_class.unwrap_or(predicted);
        let map = image_saliency(&net, &image, class)?;
        let file = format!("saliency_{}.pgm", stem(path, i));
        let out = config.out_dir.join(&file);
        write_pgm(&map.to_image(), &out)?;
        let h = &config.hierarchy;
        let name = |c: usize| if c < h.num_fine() { h.fine_name(c).to_string() } else { (c + 1).to_string() };
        writeln!(index, "{},{},{},{}", path.display(), name(class), name(predicted), file).unwrap();
        written.push(out);
    }
    write_file(&config.out_dir.join("saliency.csv"), &index)?;
    Ok(written)
}

/// GEM (or masked GEM) per predicted fine class over the held-out split
/// of the first seed, plus `gem.csv` with the image count behind each.
pub fn cmd_gem(config: &ExperimentConfig) -> Result<Vec<PathBuf>, ExperimentError> {
    let net = load_network::<f32>(require_checkpoint(config)?)?;
    let data = prepare_data(config, config.seeds[0])?;
    let predicted = predict(&net, &data.test)?;
    let images: Vec<&Image> = data.test.samples().iter().map(|s| &s.image).collect();
    let saliencies = if config.masked {
        images
            .iter()
            .zip(&predicted)
            .map(|(img, &p)| Ok(image_saliency(&net, img, p)?.magnitude().iter().map(|&v| v as f64).collect()))
            .collect::<Result<Vec<Vec<f64>>, ExperimentError>>()?
    } else {
        Vec::new()
    };
    let prefix = if config.masked { "masked_gem" } else { "gem" };
    let mut written = Vec::new();
    let mut index = String::from("class,images,output\n");
    for class in 0..net.head.out_dim() {
        if !predicted.contains(&class) {
            continue;
        }
        let gem = if config.masked {
            generate_masked_gem(&images, &predicted, &saliencies, class, config.percentile)?
        } else {
            generate_gem(&images, &predicted, class)?
        };
        let name = if class < config.hierarchy.num_fine() { config.hierarchy.fine_name(class).to_string() } else { (class + 1).to_string() };
        let file = format!("{prefix}_{name}.pgm");
        let out = config.out_dir.join(&file);
        write_pgm(&gem.to_image(), &out)?;
        writeln!(index, "{name},{},{file}", gem.count).unwrap();
        written.push(out);
    }
    write_file(&config.out_dir.join(format!("{prefix}.csv")), &index)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_rejected() {
        let m = ConfigMap::parse("lowshot.tua = 0.5", "t").unwrap();
        assert!(matches!(ExperimentConfig::from_map(&m), Err(ConfigError::UnknownKey(_))));
    }

    #[test]
    fn tau_outside_range_names_the_section() {
        let m = ConfigMap::parse("lowshot.tau = 0.01", "t").unwrap();
        let e = ExperimentConfig::from_map(&m).unwrap_err();
        assert!(e.to_string().contains("tau"), "{e}");
    }

    #[test]
    fn defaults_cover_all_variants() {
        let c = ExperimentConfig::from_map(&ConfigMap::default()).unwrap();
        assert_eq!(c.variants, Variant::ALL.to_vec());
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.hierarchy.num_fine(), 14);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(ExperimentError::from(ConfigError::UnknownKey("x".into())).exit_code(), 2);
        assert_eq!(ExperimentError::from(DataError::Empty).exit_code(), 3);
        let nf = PipelineError::NonFiniteLoss { phase: "fine", epoch: 1 };
        assert_eq!(ExperimentError::from(nf).exit_code(), 4);
    }
}
