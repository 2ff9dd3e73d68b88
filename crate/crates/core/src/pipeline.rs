//! The two-step low-shot training procedure.
//!
//! 1. Train an extractor and coarse head on the coarse-labelled set.
//! 2. Swap in a fresh fine head and train on the fine-labelled set, reusing
//!    the extractor parameters unchanged.
//! 3. Draw `k` reference sets of confidently classified fine samples, one
//!    per class.
//! 4. Fine-tune with cross-entropy plus `lambda` times the similarity loss
//!    against a randomly chosen reference set per sample.
//!
//! All randomness is derived from [`LowShotConfig::seed`] through named
//! sub-seeds, see [`sub_seed`].

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::loss::{combined_loss_batch, cross_entropy_batch, similarity_loss_batch, softmax, LossError};
use crate::nn::{
    save_network, ArchConfig, Bound, CheckpointError, ClassifierHead, FeatureExtractor, Mode, Network, NnError, ParamKind,
    ParamStore,
};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Element;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss in {phase} epoch {epoch}")]
    NonFiniteLoss { phase: &'static str, epoch: usize },
    #[error("reference sample {0} is not in the training set")]
    ReferenceSampleMissing(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] crate::error::TensorError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Deterministic 64-bit seed for the component `name` of a run.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(name.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
}

/// Step-decay learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    /// Epochs (one-based) at which the rate is multiplied by `factor`.
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl Schedule {
    /// Base 0.001, times 0.1 at epochs 20 and 30.
    pub fn standard() -> Self {
        Schedule { base_lr: 0.001, milestones: vec![20, 30], factor: 0.1 }
    }

    /// Milestones at 50% and 75% of a run of `epochs`, which is the
    /// 20/30 split of a 40-epoch run.
    pub fn scaled(base_lr: f64, factor: f64, epochs: usize) -> Self {
        let mut milestones: Vec<usize> = [0.5, 0.75]
            .iter()
            .map(|f| ((f * epochs as f64).round() as usize).max(1))
            .collect();
        milestones.dedup();
        if epochs <= 1 {
            milestones.clear();
        }
        Schedule { base_lr, milestones, factor }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(PipelineError::Config(format!("learning rate {} must be positive", self.base_lr)));
        }
        if !(self.factor > 0.0 && self.factor.is_finite()) {
            return Err(PipelineError::Config(format!("decay factor {} must be positive", self.factor)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PipelineError::Config(format!("milestones {:?} must be strictly increasing", self.milestones)));
        }
        Ok(())
    }
}

/// `base * factor^(number of milestones <= epoch)`.
pub fn lr_at(epoch: usize, schedule: &Schedule) -> f64 {
    let passed = schedule.milestones.iter().filter(|&&m| m <= epoch).count();
    schedule.base_lr * schedule.factor.powi(passed as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowShotConfig {
    pub arch: ArchConfig,
    pub tau: f64,
    pub k: usize,
    pub coarse_epochs: usize,
    pub fine_epochs: usize,
    pub finetune_epochs: usize,
    pub base_lr: f64,
    /// Base rate of the similarity fine-tuning phase; `None` uses `base_lr`.
    pub finetune_lr: Option<f64>,
    pub lr_factor: f64,
    /// Shared milestones for every phase; `None` scales them to each
    /// phase's length.
    pub milestones: Option<Vec<usize>>,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda_sim: f64,
    pub stop_gradient_refs: bool,
}

impl Default for LowShotConfig {
    fn default() -> Self {
        LowShotConfig {
            arch: ArchConfig::default(),
            tau: 0.5,
            k: 5,
            coarse_epochs: 40,
            fine_epochs: 40,
            finetune_epochs: 40,
            base_lr: 0.001,
            finetune_lr: None,
            lr_factor: 0.1,
            milestones: None,
            batch_size: 16,
            seed: 0,
            lambda_sim: 1.0,
            stop_gradient_refs: false,
        }
    }
}

impl LowShotConfig {
    pub fn schedule(&self, epochs: usize) -> Schedule {
        self.schedule_from(self.base_lr, epochs)
    }

    pub fn phase_schedule(&self, phase: Phase, epochs: usize) -> Schedule {
        match (phase, self.finetune_lr) {
            (Phase::Finetune, Some(lr)) => self.schedule_from(lr, epochs),
            _ => self.schedule(epochs),
        }
    }

    fn schedule_from(&self, base_lr: f64, epochs: usize) -> Schedule {
        match &self.milestones {
            Some(m) => Schedule { base_lr, milestones: m.clone(), factor: self.lr_factor },
            None => Schedule::scaled(base_lr, self.lr_factor, epochs),
        }
    }

    /// Checks every field; `fine_classes` is `l_s`.
    pub fn validate(&self, fine_classes: usize) -> Result<(), PipelineError> {
        let lo = 1.0 / fine_classes.max(1) as f64;
        if !(self.tau > lo && self.tau < 1.0) {
            return Err(PipelineError::Config(format!("tau {} must lie in ({lo}, 1)", self.tau)));
        }
        if self.k == 0 {
            return Err(PipelineError::Config("k must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(PipelineError::Config("batch size must be positive".into()));
        }
        if !(self.lambda_sim >= 0.0 && self.lambda_sim.is_finite()) {
            return Err(PipelineError::Config(format!("lambda {} must be non-negative", self.lambda_sim)));
        }
        let longest = self.coarse_epochs.max(self.fine_epochs).max(self.finetune_epochs);
        self.schedule(longest).validate()?;
        self.phase_schedule(Phase::Finetune, longest).validate()
    }
}

/// Which label of a [`Dataset`] a phase trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Coarse,
    Fine,
}

impl Target {
    pub fn labels(self, data: &Dataset) -> Result<Vec<usize>, PipelineError> {
        Ok(match self {
            Target::Coarse => data.coarse_labels(),
            Target::Fine => data.fine_labels()?,
        })
    }

    pub fn classes(self, data: &Dataset) -> usize {
        match self {
            Target::Coarse => data.hierarchy().num_coarse(),
            Target::Fine => data.hierarchy().num_fine(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Coarse,
    Fine,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Coarse => "coarse",
            Phase::Fine => "fine",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub phase: Phase,
    pub epochs: Vec<EpochRecord>,
    /// SHA-256 of extractor and head parameters after the last epoch.
    pub checksum: String,
    pub wall_time: Duration,
}

impl TrainReport {
    /// `epoch,phase,lr,train_loss,eval_acc` rows for all `reports`; the
    /// accuracy column is empty when no evaluation set was given.
    pub fn to_csv(reports: &[&TrainReport]) -> String {
        let mut out = String::from("epoch,phase,lr,train_loss,eval_acc\n");
        for r in reports {
            for e in &r.epochs {
                let acc = e.eval_acc.map_or(String::new(), |a| a.to_string());
                let _ = writeln!(out, "{},{},{},{},{}", e.epoch, r.phase.name(), e.lr, e.train_loss, acc);
            }
        }
        out
    }
}

/// A labelled evaluation set for per-epoch accuracy.
#[derive(Clone, Copy)]
pub struct EvalSet<'a> {
    pub data: &'a Dataset,
    pub target: Target,
}

/// `p <- p - lr g` for every trainable tensor of `store`.
pub fn sgd_step<T: Element>(store: &mut ParamStore<T>, bound: &Bound, grads: &Gradients<T>, lr: f64) -> Result<(), PipelineError> {
    let lr_t = T::from_f64_lossy(lr);
    let ids: Vec<_> = bound.pairs().collect();
    for &(id, var) in &ids {
        if store.kind(id) != ParamKind::Trainable {
            continue;
        }
        let Some(g) = grads.get(var) else { continue };
        if !g.all_finite() {
            return Err(PipelineError::NonFiniteGradient(store.name(id).to_string()));
        }
        if g.shape() != store.get(id).shape() {
            return Err(PipelineError::Config(format!("gradient shape {:?} for {}", g.shape(), store.name(id))));
        }
        for (p, &gv) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
            *p -= lr_t * gv;
        }
    }
    Ok(())
}

/// Checksum over both parameter stores of a network.
pub fn network_checksum<T: Element>(net: &Network<T>) -> String {
    let digest = Sha256::new()
        .chain_update(net.extractor.params.checksum())
        .chain_update(net.head.params.checksum())
        .finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

const EVAL_BATCH: usize = 64;

/// Eval-mode predicted classes.
pub fn predict(net: &Network<f32>, data: &Dataset) -> Result<Vec<usize>, PipelineError> {
    Ok(probabilities(net, data)?.into_iter().map(|p| crate::tensor::argmax(&p)).collect())
}

/// Eval-mode class probabilities, one row per sample.
pub fn probabilities(net: &Network<f32>, data: &Dataset) -> Result<Vec<Vec<f32>>, PipelineError> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let logits = net.logits(&data.batch(chunk))?;
        for i in 0..chunk.len() {
            out.push(softmax(logits.row(i))?.into_vec());
        }
    }
    Ok(out)
}

/// Eval-mode features, one row per sample.
pub fn features(extractor: &FeatureExtractor<f32>, data: &Dataset) -> Result<Vec<Vec<f32>>, PipelineError> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let f = extractor.extract(&data.batch(chunk))?;
        for i in 0..chunk.len() {
            out.push(f.row(i).to_vec());
        }
    }
    Ok(out)
}

pub fn accuracy(net: &Network<f32>, eval: EvalSet<'_>) -> Result<f64, PipelineError> {
    let labels = eval.target.labels(eval.data)?;
    let pred = predict(net, eval.data)?;
    Ok(pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

/// Mean pairwise cosine similarity of features within and across classes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineStats {
    pub intra: f64,
    pub inter: f64,
}

pub fn cosine_stats(features: &[Vec<f32>], labels: &[usize]) -> CosineStats {
    let unit: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let n = f.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
            f.iter().map(|&v| v as f64 / n).collect()
        })
        .collect();
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            let c: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            if labels[i] == labels[j] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    CosineStats { intra: intra / ni.max(1) as f64, inter: inter / nx.max(1) as f64 }
}

/// Reference-set context for a similarity fine-tuning phase.
struct SimilarityContext<'a> {
    sets: &'a [ReferenceSet],
    /// Dataset row of every reference sample id.
    rows: HashMap<usize, usize>,
    lambda: f64,
    stop_gradient: bool,
    rng: ChaCha8Rng,
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), PipelineError> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(PipelineError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

#[allow(clippy::too_many_arguments)]
fn train_phase(
    net: &mut Network<f32>,
    data: &Dataset,
    target: Target,
    phase: Phase,
    epochs: usize,
    config: &LowShotConfig,
    eval: Option<EvalSet<'_>>,
    mut sim: Option<SimilarityContext<'_>>,
) -> Result<TrainReport, PipelineError> {
    if data.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let labels = target.labels(data)?;
    check_labels(&labels, net.head.out_dim())?;
    let schedule = config.phase_schedule(phase, epochs);
    schedule.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "shuffle"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let bf = net.extractor.bind(&mut tape, true);
            let bh = net.head.bind(&mut tape, true);
            let x = tape.constant(data.batch(chunk));
            let (f, updates) = net.extractor.forward(&mut tape, &bf, x, Mode::Train)?;
            let logits = net.head.forward(&mut tape, &bh, f)?;
            let mut loss = cross_entropy_batch(&mut tape, logits, &batch_labels)?;
            if let Some(ctx) = sim.as_mut().filter(|c| c.lambda > 0.0) {
                let ls = similarity_term(net, &mut tape, &bf, f, &batch_labels, ctx, data)?;
                loss = combined_loss_batch(&mut tape, loss, ls, ctx.lambda as f32)?;
            }
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(PipelineError::NonFiniteLoss { phase: phase.name(), epoch });
            }
            total += value * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            sgd_step(&mut net.extractor.params, &bf, &grads, lr)?;
            sgd_step(&mut net.head.params, &bh, &grads, lr)?;
            net.extractor.apply_updates(&updates);
        }
        let train_loss = total / data.len() as f64;
        let eval_acc = eval.map(|e| accuracy(net, e)).transpose()?;
        log::info!(
            "{} epoch {epoch}/{epochs}: lr {lr:.2e}, loss {train_loss:.4}{}",
            phase.name(),
            eval_acc.map_or(String::new(), |a| format!(", eval acc {a:.3}"))
        );
        records.push(EpochRecord { epoch, lr, train_loss, eval_acc });
    }
    Ok(TrainReport { phase, epochs: records, checksum: network_checksum(net), wall_time: start.elapsed() })
}

/// Records the similarity loss of a batch whose features are `f`.
fn similarity_term(
    net: &Network<f32>,
    tape: &mut Tape<f32>,
    bound: &Bound,
    f: Var,
    labels: &[usize],
    ctx: &mut SimilarityContext<'_>,
    data: &Dataset,
) -> Result<Var, PipelineError> {
    let chosen: Vec<usize> = labels.iter().map(|_| ctx.rng.gen_range(0..ctx.sets.len())).collect();
    // Unique reference samples of this batch, in first-use order.
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut ref_rows_data = Vec::new();
    let mut ref_rows = Vec::with_capacity(labels.len());
    for &s in &chosen {
        let mut rows = Vec::with_capacity(ctx.sets[s].members.len());
        for m in &ctx.sets[s].members {
            let row = *ctx.rows.get(&m.sample_id).ok_or(PipelineError::ReferenceSampleMissing(m.sample_id))?;
            let next = slot.len();
            let r = *slot.entry(row).or_insert_with(|| {
                ref_rows_data.push(row);
                next
            });
            rows.push(r);
        }
        ref_rows.push(rows);
    }
    let batch = data.batch(&ref_rows_data);
    // Reference features use batch statistics but do not move the running
    // estimates.
    let ref_f = if ctx.stop_gradient {
        let mut side = Tape::new();
        let sb = net.extractor.bind(&mut side, false);
        let x = side.constant(batch);
        let (rf, _) = net.extractor.forward(&mut side, &sb, x, Mode::Train)?;
        tape.constant(side.value(rf).clone())
    } else {
        let x = tape.constant(batch);
        net.extractor.forward(tape, bound, x, Mode::Train)?.0
    };
    Ok(similarity_loss_batch(tape, f, ref_f, &ref_rows, labels)?)
}

/// Step 1: extractor and coarse head on the coarse-labelled set.
pub fn train_coarse(
    net: &mut Network<f32>,
    data: &Dataset,
    config: &LowShotConfig,
    eval: Option<EvalSet<'_>>,
) -> Result<TrainReport, PipelineError> {
    train_phase(net, data, Target::Coarse, Phase::Coarse, config.coarse_epochs, config, eval, None)
}

/// Step 2 (and the plain baseline): cross-entropy on fine labels.
pub fn train_fine(
    net: &mut Network<f32>,
    data: &Dataset,
    config: &LowShotConfig,
    eval: Option<EvalSet<'_>>,
) -> Result<TrainReport, PipelineError> {
    train_phase(net, data, Target::Fine, Phase::Fine, config.fine_epochs, config, eval, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ReferenceMember {
    pub sample_id: usize,
    pub class: usize,
}

/// One confidently classified exemplar per fine class, ordered by class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReferenceSet {
    pub members: Vec<ReferenceMember>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSets {
    pub sets: Vec<ReferenceSet>,
    /// Size of every class pool before sampling.
    pub pool_sizes: Vec<usize>,
    /// Classes whose pool was empty and fell back to the most confident
    /// sample of that class.
    pub fallback_classes: Vec<usize>,
}

/// Step 3: pools `{x of class c : argmax p(x) = c, p_c(x) > tau}` under the
/// eval-mode model, then `k` sets each drawing one pool member per class.
pub fn construct_reference_sets(
    net: &Network<f32>,
    data: &Dataset,
    tau: f64,
    k: usize,
    seed: u64,
) -> Result<ReferenceSets, PipelineError> {
    let classes = net.head.out_dim();
    if !(tau > 1.0 / classes as f64 && tau < 1.0) || k == 0 {
        return Err(PipelineError::Config(format!("tau {tau} must lie in (1/{classes}, 1) and k {k} be positive")));
    }
    let labels = data.fine_labels()?;
    check_labels(&labels, classes)?;
    let probs = probabilities(net, data)?;
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    let mut best: Vec<Option<(f32, usize)>> = vec![None; classes];
    for (i, (p, &c)) in probs.iter().zip(&labels).enumerate() {
        if crate::tensor::argmax(p) == c && p[c] as f64 > tau {
            pools[c].push(i);
        }
        if best[c].map_or(true, |(bp, _)| p[c] > bp) {
            best[c] = Some((p[c], i));
        }
    }
    let pool_sizes: Vec<usize> = pools.iter().map(Vec::len).collect();
    let mut fallback_classes = Vec::new();
    for c in 0..classes {
        if pools[c].is_empty() {
            let (p, i) = best[c].ok_or_else(|| {
                PipelineError::Config(format!("fine class {c} has no training samples to draw a reference from"))
            })?;
            log::warn!("reference pool of class {c} is empty at tau {tau}; using its most confident sample (p = {p:.3})");
            pools[c].push(i);
            fallback_classes.push(c);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = data.samples();
    let sets = (0..k)
        .map(|_| ReferenceSet {
            members: pools
                .iter()
                .enumerate()
                .map(|(c, pool)| ReferenceMember { sample_id: samples[pool[rng.gen_range(0..pool.len())]].id, class: c })
                .collect(),
        })
        .collect();
    Ok(ReferenceSets { sets, pool_sizes, fallback_classes })
}

/// Step 4: fine-tuning with `L_CE + lambda L_S`.
pub fn finetune_with_similarity(
    net: &mut Network<f32>,
    data: &Dataset,
    references: &[ReferenceSet],
    config: &LowShotConfig,
    eval: Option<EvalSet<'_>>,
) -> Result<TrainReport, PipelineError> {
    if references.is_empty() {
        return Err(PipelineError::Config("no reference sets".into()));
    }
    let rows = data.by_id();
    for m in references.iter().flat_map(|s| &s.members) {
        if !rows.contains_key(&m.sample_id) {
            return Err(PipelineError::ReferenceSampleMissing(m.sample_id));
        }
    }
    let ctx = SimilarityContext {
        sets: references,
        rows,
        lambda: config.lambda_sim,
        stop_gradient: config.stop_gradient_refs,
        rng: ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "refset.choice")),
    };
    train_phase(net, data, Target::Fine, Phase::Finetune, config.finetune_epochs, config, eval, Some(ctx))
}

/// Fresh extractor and head for `classes` outputs, initialised from the
/// `init` sub-seeds.
pub fn fresh_network(config: &LowShotConfig, image_hw: (usize, usize), classes: usize, head: &str) -> Result<Network<f32>, PipelineError> {
    let extractor = FeatureExtractor::new(config.arch.clone(), image_hw, sub_seed(config.seed, "init"))?;
    let head = ClassifierHead::new(extractor.feature_dim(), classes, sub_seed(config.seed, &format!("init.{head}")));
    Ok(Network::new(extractor, head)?)
}

/// Everything a two-step run produces.
#[derive(Clone, Debug)]
pub struct TwoStepOutcome {
    /// The network after step 2, i.e. data-level learning only.
    pub after_step2: Network<f32>,
    /// The network after step 4.
    pub model: Network<f32>,
    pub coarse: TrainReport,
    pub fine: TrainReport,
    pub references: ReferenceSets,
    pub finetune: TrainReport,
    /// Extractor checksum at the end of step 1 and at the start of step 2.
    pub head_swap_checksums: (String, String),
    pub checkpoints: Vec<PathBuf>,
}

impl TwoStepOutcome {
    pub fn reports_csv(&self) -> String {
        TrainReport::to_csv(&[&self.coarse, &self.fine, &self.finetune])
    }
}

/// Steps 1 and 2 only: data-level learning.
#[derive(Clone, Debug)]
pub struct DataLevelOutcome {
    pub model: Network<f32>,
    pub coarse: TrainReport,
    pub fine: TrainReport,
    /// Extractor checksum at the end of step 1 and at the start of step 2.
    pub head_swap_checksums: (String, String),
    pub checkpoints: Vec<PathBuf>,
}

fn save_step(net: &Network<f32>, out_dir: Option<&Path>, name: &str, saved: &mut Vec<PathBuf>) -> Result<(), PipelineError> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| crate::data::DataError::io(dir, e))?;
        let path = dir.join(name);
        save_network(net, &path)?;
        saved.push(path);
    }
    Ok(())
}

/// Steps 1 and 2. With `out_dir`, `step1.ckpt` and `step2.ckpt` are
/// written there.
pub fn run_data_level(
    d_t: &Dataset,
    d_s: &Dataset,
    config: &LowShotConfig,
    eval: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<DataLevelOutcome, PipelineError> {
    let h = d_s.hierarchy();
    config.validate(h.num_fine())?;
    let mut checkpoints = Vec::new();

    let mut net = fresh_network(config, d_t.image_hw(), h.num_coarse(), "coarse_head")?;
    let coarse_eval = eval.map(|data| EvalSet { data, target: Target::Coarse });
    let coarse = train_coarse(&mut net, d_t, config, coarse_eval)?;
    save_step(&net, out_dir, "step1.ckpt", &mut checkpoints)?;
    let after_step1 = net.extractor.params.checksum();

    let fine_head = ClassifierHead::new(net.extractor.feature_dim(), h.num_fine(), sub_seed(config.seed, "init.fine_head"));
    let (mut net, _) = net.swap_head(fine_head)?;
    let before_step2 = net.extractor.params.checksum();
    let fine = train_fine(&mut net, d_s, config, eval.map(|data| EvalSet { data, target: Target::Fine }))?;
    save_step(&net, out_dir, "step2.ckpt", &mut checkpoints)?;
    Ok(DataLevelOutcome { model: net, coarse, fine, head_swap_checksums: (after_step1, before_step2), checkpoints })
}

/// Steps 1-4 in order. With `out_dir`, `step1.ckpt`, `step2.ckpt` and
/// `step4.ckpt` are written there.
pub fn run_two_step(
    d_t: &Dataset,
    d_s: &Dataset,
    config: &LowShotConfig,
    eval: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<TwoStepOutcome, PipelineError> {
    let DataLevelOutcome { model, coarse, fine, head_swap_checksums, mut checkpoints } =
        run_data_level(d_t, d_s, config, eval, out_dir)?;
    let mut net = model.clone();
    let references = construct_reference_sets(&net, d_s, config.tau, config.k, sub_seed(config.seed, "refset"))?;
    let fine_eval = eval.map(|data| EvalSet { data, target: Target::Fine });
    let finetune = finetune_with_similarity(&mut net, d_s, &references.sets, config, fine_eval)?;
    save_step(&net, out_dir, "step4.ckpt", &mut checkpoints)?;
    Ok(TwoStepOutcome { after_step2: model, model: net, coarse, fine, references, finetune, head_swap_checksums, checkpoints })
}

/// The plain baseline: step 2 alone from a random initialisation.
pub fn run_plain(
    d_s: &Dataset,
    config: &LowShotConfig,
    eval: Option<&Dataset>,
) -> Result<(Network<f32>, TrainReport), PipelineError> {
    let mut net = fresh_network(config, d_s.image_hw(), d_s.hierarchy().num_fine(), "fine_head")?;
    let report = train_fine(&mut net, d_s, config, eval.map(|data| EvalSet { data, target: Target::Fine }))?;
    Ok((net, report))
}
