//! Images, labelled datasets, manifests, splits and the synthetic benchmark.
//!
//! Labels are zero-based in memory. Manifests and directory names use the
//! one-based numbering, with `fine` left empty (or `fine_0` in generated
//! trees) for samples that only carry a coarse label.

mod hierarchy;
mod pgm;
mod split;
mod synth;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::tensor::Tensor;

pub use hierarchy::{ClassHierarchy, CountRow, CountTable};
pub use pgm::{decode_pgm, encode_pgm, quantize, read_pgm, write_pgm};
pub use split::{split_train_test, SplitSpec};
pub use synth::{render, synth_generate, SampleParams, SynthParams, DEFAULT_NOISE};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a binary PGM (magic {0:?})")]
    BadMagic(String),
    #[error("truncated file: expected {expected} more bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported maxval {0}, only 255 is accepted")]
    UnsupportedMaxval(u64),
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("fine class {fine} lies under coarse class {expected}, not {coarse}")]
    HierarchyViolation { fine: usize, coarse: usize, expected: usize },
    #[error("label {label} outside 1..={classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid hierarchy: {0}")]
    InvalidHierarchy(String),
    #[error("missing image file {0}")]
    MissingFile(PathBuf),
    #[error("class {class} has {count} samples, at least 2 are needed to split")]
    ClassTooSmall { class: String, count: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("{0}")]
    InvalidArgument(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }
}

/// Greyscale image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self, DataError> {
        if pixels.len() != height * width || height == 0 || width == 0 {
            return Err(DataError::InvalidArgument(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// Stable identifier, unique within its dataset family.
    pub id: usize,
    pub image: Image,
    pub coarse: usize,
    pub fine: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    hierarchy: ClassHierarchy,
    image_hw: (usize, usize),
    samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn new(hierarchy: ClassHierarchy, samples: Vec<LabeledSample>) -> Result<Self, DataError> {
        let first = samples.first().ok_or(DataError::Empty)?;
        let image_hw = (first.image.height(), first.image.width());
        for s in &samples {
            hierarchy.validate(s.coarse, s.fine)?;
            if (s.image.height(), s.image.width()) != image_hw {
                return Err(DataError::InvalidArgument(format!(
                    "sample {} is {}x{}, expected {}x{}",
                    s.id,
                    s.image.height(),
                    s.image.width(),
                    image_hw.0,
                    image_hw.1
                )));
            }
        }
        Ok(Dataset { hierarchy, image_hw, samples })
    }

    pub fn hierarchy(&self) -> &ClassHierarchy {
        &self.hierarchy
    }

    pub fn image_hw(&self) -> (usize, usize) {
        self.image_hw
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn by_id(&self) -> HashMap<usize, usize> {
        self.samples.iter().enumerate().map(|(i, s)| (s.id, i)).collect()
    }

    pub fn coarse_labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.coarse).collect()
    }

    /// Fine labels, failing if any sample lacks one.
    pub fn fine_labels(&self) -> Result<Vec<usize>, DataError> {
        self.samples
            .iter()
            .map(|s| s.fine.ok_or_else(|| DataError::InvalidArgument(format!("sample {} has no fine label", s.id))))
            .collect()
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        Dataset::new(self.hierarchy.clone(), indices.iter().map(|&i| self.samples[i].clone()).collect())
    }

    /// Splits into (coarse-only, fine-labelled) parts.
    pub fn partition_by_fine(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| self.samples[i].fine.is_none())
    }

    /// `[n, 1, h, w]` batch of the samples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let (h, w) = self.image_hw;
        let mut data = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            data.extend_from_slice(self.samples[i].image.pixels());
        }
        Tensor::new(&[indices.len(), 1, h, w], data).expect("images share one shape")
    }

    /// Sample counts per coarse range and per fine class.
    pub fn counts(&self) -> CountTable {
        let h = &self.hierarchy;
        let rows = (0..h.num_coarse())
            .map(|c| CountRow {
                coarse: h.coarse_name(c).to_string(),
                total: self.samples.iter().filter(|s| s.coarse == c).count(),
                fine: h
                    .fines_of(c)
                    .into_iter()
                    .map(|f| (h.fine_name(f).to_string(), self.samples.iter().filter(|s| s.fine == Some(f)).count()))
                    .collect(),
            })
            .collect();
        CountTable { rows }
    }
}

/// Reads a `path,coarse,fine` manifest; image paths are relative to the
/// manifest's directory. Sample ids are row numbers from 0.
pub fn load_manifest(path: &Path, hierarchy: &ClassHierarchy) -> Result<Dataset, DataError> {
    let root = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "coarse", "fine"] {
        return Err(DataError::Manifest { line: 1, msg: format!("expected header path,coarse,fine, got {}", headers.iter().collect::<Vec<_>>().join(",")) });
    }
    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| DataError::Manifest { line, msg: e.to_string() })?;
        let label = |field: &str, name: &str| -> Result<usize, DataError> {
            field
                .parse::<usize>()
                .ok()
                .filter(|&v| v >= 1)
                .map(|v| v - 1)
                .ok_or_else(|| DataError::Manifest { line, msg: format!("bad {name} label {field:?}") })
        };
        let coarse = label(&record[1], "coarse")?;
        let fine = match &record[2] {
            "" => None,
            f => Some(label(f, "fine")?),
        };
        hierarchy.validate(coarse, fine)?;
        let file = root.join(&record[0]);
        if !file.is_file() {
            return Err(DataError::MissingFile(file));
        }
        let image = read_pgm(&file)?;
        samples.push(LabeledSample { id: row, image, coarse, fine });
    }
    Dataset::new(hierarchy.clone(), samples)
}

fn csv_error(path: &Path, e: csv::Error) -> DataError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::io(path, source),
        other => DataError::Manifest { line: 0, msg: format!("{other:?}") },
    }
}

/// Relative path of a sample inside a generated tree.
pub fn sample_path(sample: &LabeledSample) -> PathBuf {
    PathBuf::from(format!("coarse_{}", sample.coarse + 1))
        .join(format!("fine_{}", sample.fine.map_or(0, |f| f + 1)))
        .join(format!("sample_{}.pgm", sample.id))
}

/// Writes every sample of `parts` as PGM under `dir` plus a `manifest.csv`
/// listing them in order; returns the manifest path.
pub fn write_dataset(dir: &Path, parts: &[&Dataset]) -> Result<PathBuf, DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest).map_err(|e| csv_error(&manifest, e))?;
    writer.write_record(["path", "coarse", "fine"]).map_err(|e| csv_error(&manifest, e))?;
    for part in parts {
        for s in part.samples() {
            let rel = sample_path(s);
            write_pgm(&s.image, &dir.join(&rel))?;
            let path = rel.to_string_lossy().replace('\\', "/");
            let fine = s.fine.map_or(String::new(), |f| (f + 1).to_string());
            writer
                .write_record([path, (s.coarse + 1).to_string(), fine])
                .map_err(|e| csv_error(&manifest, e))?;
        }
    }
    writer.flush().map_err(|e| DataError::io(&manifest, e))?;
    Ok(manifest)
}
