//! Training objectives.
//!
//! Two layers live here. The value-level functions ([`softmax`],
//! [`cross_entropy`], [`cosine_sim`], [`normalize_sims`],
//! [`similarity_loss`], [`combined_loss`]) operate on single vectors. The
//! `*_batch` builders record the same formulas on a [`Tape`] for a whole
//! minibatch so they can be differentiated. Class indices are zero-based.
//!
//! The similarity loss of a sample with label `y` against a reference set
//! holding one exemplar per class is
//!
//! ```text
//! sim_c  = cos(F(x), F(x_c))
//! SIM_c  = exp(sim_c) / sum_i exp(sim_i)
//! L_S    = -SIM_y + 1/(l_s - 1) * sum_{c != y} SIM_c
//! ```
//!
//! and the fine-tuning objective is `L = L_CE + lambda * L_S` with
//! `lambda = 1` reproducing the unweighted sum.

use thiserror::Error;

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::{lit, Element, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("feature vector norm below {0}; extractor output is degenerate")]
    ZeroNormFeature(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Softmax output; entries are positive and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector<T>(Vec<T>);

impl<T: Element> ProbabilityVector<T> {
    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        crate::tensor::argmax(&self.0)
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }
}

/// Raw and softmax-normalized similarities to one reference set.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityProfile<T> {
    pub raw: Vec<T>,
    pub normalized: Vec<T>,
}

pub fn softmax<T: Element>(logits: &[T]) -> Result<ProbabilityVector<T>, LossError> {
    if logits.is_empty() {
        return Err(LossError::TooFewClasses(0));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite("softmax"));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(ProbabilityVector(exps.into_iter().map(|e| e / total).collect()))
}

/// `-log p[label]`.
pub fn cross_entropy<T: Element>(p: &ProbabilityVector<T>, label: usize) -> Result<T, LossError> {
    let &pl = p.0.get(label).ok_or(LossError::LabelOutOfRange { label, classes: p.len() })?;
    Ok(-pl.ln())
}

/// Cosine of the angle between two feature vectors, clamped to `[-1, 1]`.
pub fn cosine_sim<T: Element>(f1: &[T], f2: &[T]) -> Result<T, LossError> {
    if f1.len() != f2.len() {
        return Err(LossError::LengthMismatch(f1.len(), f2.len()));
    }
    let n1 = f1.iter().map(|&v| v * v).sum::<T>().sqrt();
    let n2 = f2.iter().map(|&v| v * v).sum::<T>().sqrt();
    if !(n1 > T::NORM_EPSILON && n2 > T::NORM_EPSILON) {
        return Err(LossError::ZeroNormFeature(T::NORM_EPSILON.to_f64_lossy()));
    }
    let dot: T = f1.iter().zip(f2).map(|(&a, &b)| a * b).sum();
    Ok((dot / (n1 * n2)).max(-T::one()).min(T::one()))
}

/// Softmax over the raw similarities to each reference of a set.
pub fn normalize_sims<T: Element>(sims: &[T]) -> Result<SimilarityProfile<T>, LossError> {
    if sims.len() < 2 {
        return Err(LossError::TooFewClasses(sims.len()));
    }
    let normalized = softmax(sims)?.into_vec();
    Ok(SimilarityProfile { raw: sims.to_vec(), normalized })
}

pub fn similarity_loss<T: Element>(profile: &SimilarityProfile<T>, label: usize) -> Result<T, LossError> {
    let sim = &profile.normalized;
    let n = sim.len();
    if label >= n {
        return Err(LossError::LabelOutOfRange { label, classes: n });
    }
    let others: T = sim.iter().enumerate().filter(|&(c, _)| c != label).map(|(_, &s)| s).sum();
    Ok(-sim[label] + others / lit::<T>((n - 1) as f64))
}

pub fn combined_loss<T: Element>(ce: T, ls: T) -> T {
    ce + ls
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), LossError> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(LossError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Mean cross-entropy of `logits: [n, classes]` against `labels`.
pub fn cross_entropy_batch<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var, LossError> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(TensorError::ShapeMismatch { op: "cross_entropy", shapes: vec![shape, vec![labels.len()]] }.into());
    }
    let classes = shape[1];
    check_labels(labels, classes)?;
    let logp = tape.log_softmax_rows(logits)?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * classes + l).collect();
    let picked = tape.gather(logp, &idx, &[labels.len()])?;
    let mean = tape.mean(picked)?;
    Ok(tape.neg(mean)?)
}

/// Row-normalizes features, refusing rows whose norm is numerically zero.
pub fn unit_rows<T: Element>(tape: &mut Tape<T>, features: Var) -> Result<Var, LossError> {
    let norms = tape.l2norm_rows(features)?;
    if tape.value(norms).data().iter().any(|&n| !(n > T::NORM_EPSILON)) {
        return Err(LossError::ZeroNormFeature(T::NORM_EPSILON.to_f64_lossy()));
    }
    Ok(tape.div_rows(features, norms)?)
}

/// Pairwise cosine similarities `[n, m]` between two feature matrices.
pub fn cosine_matrix<T: Element>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var, LossError> {
    let ua = unit_rows(tape, a)?;
    let ub = unit_rows(tape, b)?;
    let ubt = tape.transpose(ub)?;
    let dots = tape.matmul(ua, ubt)?;
    Ok(tape.clamp(dots, -T::one(), T::one())?)
}

/// Mean similarity loss of a batch.
///
/// `features: [n, d]` are the samples, `ref_features: [m, d]` the pooled
/// reference exemplars, and `ref_rows[i]` lists, class by class, which row of
/// `ref_features` represents each class in the reference set drawn for
/// sample `i`.
pub fn similarity_loss_batch<T: Element>(
    tape: &mut Tape<T>,
    features: Var,
    ref_features: Var,
    ref_rows: &[Vec<usize>],
    labels: &[usize],
) -> Result<Var, LossError> {
    let n = labels.len();
    if ref_rows.len() != n {
        return Err(LossError::LengthMismatch(ref_rows.len(), n));
    }
    let classes = ref_rows.first().map_or(0, Vec::len);
    if classes < 2 {
        return Err(LossError::TooFewClasses(classes));
    }
    check_labels(labels, classes)?;
    let m = tape.value(ref_features).shape()[0];
    let sims = cosine_matrix(tape, features, ref_features)?;
    let mut idx = Vec::with_capacity(n * classes);
    for (i, rows) in ref_rows.iter().enumerate() {
        if rows.len() != classes {
            return Err(LossError::LengthMismatch(rows.len(), classes));
        }
        idx.extend(rows.iter().map(|&r| i * m + r));
    }
    let picked = tape.gather(sims, &idx, &[n, classes])?;
    let sim = tape.softmax_rows(picked)?;
    let off = T::one() / lit::<T>((classes - 1) as f64);
    let mut coef = vec![off; n * classes];
    for (i, &l) in labels.iter().enumerate() {
        coef[i * classes + l] = -T::one();
    }
    let coef = tape.constant(Tensor::from_parts(vec![n, classes], coef));
    let weighted = tape.mul(sim, coef)?;
    let total = tape.sum(weighted)?;
    Ok(tape.scale(total, T::one() / lit::<T>(n as f64))?)
}

/// `ce + lambda * ls`; `lambda = 1` is the plain sum.
pub fn combined_loss_batch<T: Element>(tape: &mut Tape<T>, ce: Var, ls: Var, lambda: T) -> Result<Var, LossError> {
    let weighted = if lambda == T::one() { ls } else { tape.scale(ls, lambda)? };
    Ok(tape.add(ce, weighted)?)
}
