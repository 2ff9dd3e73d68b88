//! Confusion matrices and per-class accuracy.

use crate::data::ClassHierarchy;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("{predictions} predictions for {truths} labels")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    /// Per true class; `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
    /// Correct predictions over all predictions.
    pub average: f64,
    /// Errors landing outside the true coarse class, indexed by coarse class.
    pub escapes: Vec<usize>,
}

impl RunMetrics {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }

    pub fn total_escapes(&self) -> usize {
        self.escapes.iter().sum()
    }

    /// `true\predicted` matrix with fine-class names as headers.
    pub fn confusion_csv(&self, hierarchy: &ClassHierarchy) -> String {
        let names: Vec<&str> = (0..self.confusion.len()).map(|c| hierarchy.fine_name(c)).collect();
        let mut out = format!("true\\predicted,{}\n", names.join(","));
        for (name, row) in names.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }
}

/// Fine-class metrics of `predictions` against `truths`.
pub fn compute_metrics(predictions: &[usize], truths: &[usize], hierarchy: &ClassHierarchy) -> Result<RunMetrics, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch { predictions: predictions.len(), truths: truths.len() });
    }
    let classes = hierarchy.num_fine();
    let mut confusion = vec![vec![0; classes]; classes];
    let mut escapes = vec![0; hierarchy.num_coarse()];
    for (&p, &t) in predictions.iter().zip(truths) {
        for label in [p, t] {
            if label >= classes {
                return Err(MetricsError::LabelOutOfRange { label, classes });
            }
        }
        confusion[t][p] += 1;
        let (ct, cp) = (hierarchy.coarse_of(t).expect("checked"), hierarchy.coarse_of(p).expect("checked"));
        if ct != cp {
            escapes[ct] += 1;
        }
    }
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[i] as f64 / n as f64)
        })
        .collect();
    let correct: usize = (0..classes).map(|i| confusion[i][i]).sum();
    let average = if truths.is_empty() { 0.0 } else { correct as f64 / truths.len() as f64 };
    Ok(RunMetrics { confusion, per_class, average, escapes })
}
