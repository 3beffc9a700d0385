//! Clean datasets, the triplet training state, corrupted evaluation sets,
//! synthetic and IDX ingestion, and JSON checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Classifier, Predictor};
use crate::numerics::Rng;
use crate::perturb::NoiseFamily;
use crate::select::QueryRecord;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset is empty")]
    Empty,
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error("checkpoint does not match the dataset: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub rows: usize,
    pub cols: usize,
}

impl ImageShape {
    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }
}

/// Feature vectors with class labels. Features are stored row-major in one
/// buffer. Image-valued datasets carry their shape and live in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    dim: usize,
    image_shape: Option<ImageShape>,
}

impl Dataset {
    pub fn from_rows(
        rows: Vec<Vec<f64>>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, DatasetError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(DatasetError::Invalid("ragged feature rows".into()));
        }
        Self::from_flat(rows.concat(), labels, num_classes, dim, None)
    }

    pub fn from_flat(
        features: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        dim: usize,
        image_shape: Option<ImageShape>,
    ) -> Result<Self, DatasetError> {
        if labels.is_empty() {
            return Err(DatasetError::Empty);
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(DatasetError::Invalid(format!(
                "{} feature values for {} examples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DatasetError::Invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::Invalid("non-finite feature".into()));
        }
        if let Some(shape) = image_shape {
            if shape.pixels() != dim {
                return Err(DatasetError::Invalid(format!(
                    "image shape {}x{} does not match dimension {dim}",
                    shape.rows, shape.cols
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            dim,
            image_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> Option<ImageShape> {
        self.image_shape
    }

    pub fn is_image(&self) -> bool {
        self.image_shape.is_some()
    }

    pub fn instance(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.features
            .chunks_exact(self.dim)
            .zip(self.labels.iter().copied())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Examples `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self, DatasetError> {
        Self::from_flat(
            self.features[start * self.dim..end * self.dim].to_vec(),
            self.labels[start..end].to_vec(),
            self.num_classes,
            self.dim,
            self.image_shape,
        )
    }

    /// Same examples with features replaced (used for corrupted copies).
    pub(crate) fn with_features(&self, features: Vec<f64>) -> Self {
        debug_assert_eq!(features.len(), self.features.len());
        Self {
            features,
            ..self.clone()
        }
    }
}

/// How far generated points sit from their nearest class boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MarginProfile {
    /// Margins drawn i.i.d. uniform on `[min, max]`.
    Uniform { min: f64, max: f64 },
    /// Margins evenly spaced within each class; the k-th point of every
    /// class shares its off-axis coordinates, so for two classes the data
    /// is mirror-symmetric about the boundary.
    Symmetric { min: f64, max: f64 },
}

impl MarginProfile {
    fn bounds(&self) -> (f64, f64) {
        match *self {
            MarginProfile::Uniform { min, max } | MarginProfile::Symmetric { min, max } => {
                (min, max)
            }
        }
    }
}

/// Synthetic classification task with parallel linear class boundaries on
/// the first coordinate. Every point's distance to its nearest boundary is
/// controlled by the margin profile; remaining coordinates are nuisance
/// dimensions with standard deviation `spread`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobsSpec {
    pub n: usize,
    pub classes: usize,
    pub dim: usize,
    pub spread: f64,
    pub margin: MarginProfile,
}

/// Ground-truth labelling rule of a blobs task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobConcept {
    pub boundaries: Vec<f64>,
    pub dim: usize,
}

impl BlobConcept {
    /// The single separating hyperplane `(w, b)` of a two-class task.
    pub fn linear(&self) -> Option<(Vec<f64>, f64)> {
        if self.boundaries.len() != 1 {
            return None;
        }
        let mut w = vec![0.0; self.dim];
        w[0] = 1.0;
        Some((w, -self.boundaries[0]))
    }

    /// Distance from `x` to the nearest boundary.
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.boundaries
            .iter()
            .map(|b| (x[0] - b).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

impl Predictor for BlobConcept {
    fn num_classes(&self) -> usize {
        self.boundaries.len() + 1
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, x: &[f64]) -> usize {
        self.boundaries.iter().filter(|&&b| x[0] > b).count()
    }
}

impl BlobsSpec {
    fn width(&self) -> f64 {
        2.0 * self.margin.bounds().1
    }

    pub fn concept(&self) -> BlobConcept {
        let k = self.classes;
        let w = self.width();
        let centre = (k as f64 - 2.0) / 2.0;
        BlobConcept {
            boundaries: (0..k - 1).map(|j| (j as f64 - centre) * w).collect(),
            dim: self.dim,
        }
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let (min, max) = self.margin.bounds();
        if self.classes < 2 || self.n < self.classes || self.dim < 2 {
            return Err(DatasetError::Invalid(format!(
                "blobs need n >= classes >= 2 and dim >= 2 (n={}, classes={}, dim={})",
                self.n, self.classes, self.dim
            )));
        }
        if !(min >= 0.0 && max > min && max.is_finite()) {
            return Err(DatasetError::Invalid(format!(
                "margin range [{min}, {max}] must satisfy 0 <= min < max"
            )));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(DatasetError::Invalid(format!("spread {}", self.spread)));
        }
        Ok(())
    }
}

/// Balanced synthetic dataset; example `i` belongs to class `i mod K`.
pub fn gen_blobs(rng: &mut Rng, spec: &BlobsSpec) -> Result<Dataset, DatasetError> {
    spec.validate()?;
    let concept = spec.concept();
    let (k, d) = (spec.classes, spec.dim);
    let (min, max) = spec.margin.bounds();
    let per_class: Vec<usize> = (0..k).map(|c| spec.n / k + usize::from(c < spec.n % k)).collect();
    let symmetric = matches!(spec.margin, MarginProfile::Symmetric { .. });
    let pair_seed = rng.next_u64();

    let mut features = Vec::with_capacity(spec.n * d);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let class = i % k;
        let rank = i / k;
        let (margin, upper_side, mut off_axis) = if symmetric {
            let frac = (rank as f64 + 0.5) / per_class[class] as f64;
            let mut shared = Rng::substream(pair_seed, &[rank as u64]);
            let mut off = vec![0.0; d - 1];
            shared.fill_std_normal(&mut off);
            (min + (max - min) * frac, rank % 2 == 0, off)
        } else {
            let m = min + (max - min) * rng.uniform();
            let side = rng.uniform() < 0.5;
            let mut off = vec![0.0; d - 1];
            rng.fill_std_normal(&mut off);
            (m, side, off)
        };
        // Edge classes have a single inner boundary; interior classes sit
        // next to either neighbour.
        let first = if class == 0 {
            concept.boundaries[0] - margin
        } else if class == k - 1 {
            concept.boundaries[k - 2] + margin
        } else if upper_side {
            concept.boundaries[class] - margin
        } else {
            concept.boundaries[class - 1] + margin
        };
        features.push(first);
        for v in &mut off_axis {
            *v *= spec.spread;
        }
        features.extend_from_slice(&off_axis);
        labels.push(class);
    }
    Dataset::from_flat(features, labels, k, d, None)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const DIGIT_CLASSES: usize = 10;

fn read_u32_be(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_file(path: &Path) -> Result<Vec<u8>, DatasetError> {
    fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads up to `limit` images and labels from a pair of IDX files. Pixels are
/// scaled to [0, 1]; labels 0..9 become class indices of a 10-class task.
pub fn load_idx_images(
    images_path: &Path,
    labels_path: &Path,
    limit: usize,
) -> Result<Dataset, DatasetError> {
    if limit == 0 {
        return Err(DatasetError::Empty);
    }
    let fmt = |path: &Path, reason: String| DatasetError::Format {
        path: path.to_path_buf(),
        reason,
    };

    let images = read_file(images_path)?;
    let magic = read_u32_be(&images, 0).ok_or_else(|| fmt(images_path, "missing header".into()))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(fmt(images_path, format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")));
    }
    let header = |at| read_u32_be(&images, at).ok_or_else(|| fmt(images_path, "truncated header".into()));
    let count = header(4)? as usize;
    let rows = header(8)? as usize;
    let cols = header(12)? as usize;

    let labels = read_file(labels_path)?;
    let magic = read_u32_be(&labels, 0).ok_or_else(|| fmt(labels_path, "missing header".into()))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(fmt(labels_path, format!("bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")));
    }
    let label_count =
        read_u32_be(&labels, 4).ok_or_else(|| fmt(labels_path, "truncated header".into()))? as usize;
    if label_count != count {
        return Err(fmt(
            labels_path,
            format!("{label_count} labels but {} declares {count} images", images_path.display()),
        ));
    }

    let pixels = rows * cols;
    if pixels == 0 {
        return Err(fmt(images_path, "zero-sized images".into()));
    }
    if images.len() < 16 + count * pixels {
        return Err(fmt(
            images_path,
            format!("truncated payload: {} bytes for {count} images of {rows}x{cols}", images.len()),
        ));
    }
    if labels.len() < 8 + count {
        return Err(fmt(labels_path, format!("truncated payload: {} bytes for {count} labels", labels.len())));
    }

    let n = count.min(limit);
    if n == 0 {
        return Err(DatasetError::Empty);
    }
    let features = images[16..16 + n * pixels]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let mut ys = Vec::with_capacity(n);
    for &b in &labels[8..8 + n] {
        if usize::from(b) >= DIGIT_CLASSES {
            return Err(fmt(labels_path, format!("label {b} outside 0..9")));
        }
        ys.push(usize::from(b));
    }
    Dataset::from_flat(features, ys, DIGIT_CLASSES, pixels, Some(ImageShape { rows, cols }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaChange {
    pub round: u32,
    pub sigma: f64,
}

/// One training example with its own perturbation level.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub index: usize,
    pub x: Vec<f64>,
    pub y: usize,
    pub sigma: f64,
    pub annotated: bool,
    pub sigma_history: Vec<SigmaChange>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletDataset {
    pub triplets: Vec<Triplet>,
    pub num_classes: usize,
    pub dim: usize,
    pub image_shape: Option<ImageShape>,
}

pub fn init_triplets(data: &Dataset, sigma_init: f64) -> Result<TripletDataset, DatasetError> {
    if !(sigma_init >= 0.0 && sigma_init.is_finite()) {
        return Err(DatasetError::Invalid(format!("initial level {sigma_init}")));
    }
    let triplets = data
        .iter()
        .enumerate()
        .map(|(index, (x, y))| Triplet {
            index,
            x: x.to_vec(),
            y,
            sigma: sigma_init,
            annotated: false,
            sigma_history: vec![SigmaChange {
                round: 0,
                sigma: sigma_init,
            }],
        })
        .collect();
    Ok(TripletDataset {
        triplets,
        num_classes: data.num_classes(),
        dim: data.dim(),
        image_shape: data.image_shape(),
    })
}

impl TripletDataset {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn is_image(&self) -> bool {
        self.image_shape.is_some()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.triplets.iter().map(|t| t.sigma).collect()
    }

    pub fn mean_sigma(&self) -> f64 {
        self.triplets.iter().map(|t| t.sigma).sum::<f64>() / self.len() as f64
    }

    /// Indices still open for querying, ascending.
    pub fn eligible(&self) -> Vec<usize> {
        self.triplets
            .iter()
            .filter(|t| !t.annotated)
            .map(|t| t.index)
            .collect()
    }

    pub fn annotated_count(&self) -> usize {
        self.triplets.iter().filter(|t| t.annotated).count()
    }

    /// Records an oracle answer for example `index` in `round`.
    pub fn annotate(&mut self, index: usize, round: u32, sigma: f64) {
        let t = &mut self.triplets[index];
        t.sigma = sigma;
        t.annotated = true;
        t.sigma_history.push(SigmaChange { round, sigma });
    }

    pub fn to_dataset(&self) -> Result<Dataset, DatasetError> {
        Dataset::from_flat(
            self.triplets.iter().flat_map(|t| t.x.iter().copied()).collect(),
            self.triplets.iter().map(|t| t.y).collect(),
            self.num_classes,
            self.dim,
            self.image_shape,
        )
    }
}

/// Clean data plus materialized corrupted copies at each severity.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedEvalSet {
    pub base: Dataset,
    pub family: NoiseFamily,
    pub severities: Vec<f64>,
    pub seed: u64,
    corrupted: Vec<Dataset>,
}

impl CorruptedEvalSet {
    pub(crate) fn new(
        base: Dataset,
        family: NoiseFamily,
        severities: Vec<f64>,
        seed: u64,
        features: Vec<Vec<f64>>,
    ) -> Self {
        let corrupted = features.into_iter().map(|f| base.with_features(f)).collect();
        Self {
            base,
            family,
            severities,
            seed,
            corrupted,
        }
    }

    pub fn at(&self, severity_index: usize) -> &Dataset {
        &self.corrupted[severity_index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &Dataset)> {
        self.severities.iter().copied().zip(&self.corrupted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    pub y: usize,
    pub sigma: f64,
    pub annotated: bool,
    pub sigma_history: Vec<SigmaChange>,
}

/// Checkpoint document. Feature vectors may be left out, in which case
/// loading needs the source dataset to rehydrate them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub round: u32,
    pub num_classes: usize,
    pub dim: usize,
    #[serde(default)]
    pub image_shape: Option<ImageShape>,
    pub triplets: Vec<TripletRecord>,
    pub weights: Classifier,
    pub query_log: Vec<QueryRecord>,
}

impl Checkpoint {
    pub fn capture(
        round: u32,
        triplets: &TripletDataset,
        weights: &Classifier,
        query_log: &[QueryRecord],
        include_features: bool,
    ) -> Self {
        Self {
            round,
            num_classes: triplets.num_classes,
            dim: triplets.dim,
            image_shape: triplets.image_shape,
            triplets: triplets
                .triplets
                .iter()
                .map(|t| TripletRecord {
                    index: t.index,
                    x: include_features.then(|| t.x.clone()),
                    y: t.y,
                    sigma: t.sigma,
                    annotated: t.annotated,
                    sigma_history: t.sigma_history.clone(),
                })
                .collect(),
            weights: weights.clone(),
            query_log: query_log.to_vec(),
        }
    }

    /// Rebuilds the triplet state; `source` supplies features that were not
    /// embedded in the document.
    pub fn triplets(&self, source: Option<&Dataset>) -> Result<TripletDataset, DatasetError> {
        let mut out = Vec::with_capacity(self.triplets.len());
        for (pos, r) in self.triplets.iter().enumerate() {
            if r.index != pos {
                return Err(DatasetError::Mismatch(format!(
                    "triplet at position {pos} has index {}",
                    r.index
                )));
            }
            let x = match (&r.x, source) {
                (Some(x), _) => x.clone(),
                (None, Some(data)) if r.index < data.len() => data.instance(r.index).to_vec(),
                _ => {
                    return Err(DatasetError::Mismatch(format!(
                        "no features available for example {}",
                        r.index
                    )))
                }
            };
            if x.len() != self.dim {
                return Err(DatasetError::Mismatch(format!(
                    "example {} has dimension {}",
                    r.index,
                    x.len()
                )));
            }
            out.push(Triplet {
                index: r.index,
                x,
                y: r.y,
                sigma: r.sigma,
                annotated: r.annotated,
                sigma_history: r.sigma_history.clone(),
            });
        }
        Ok(TripletDataset {
            triplets: out,
            num_classes: self.num_classes,
            dim: self.dim,
            image_shape: self.image_shape,
        })
    }
}

/// Writes the checkpoint atomically: temp file in the same directory, then
/// rename over the destination.
pub fn save_state(path: &Path, checkpoint: &Checkpoint) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let json = serde_json::to_vec_pretty(checkpoint)
        .map_err(|e| DatasetError::Invalid(format!("unserializable checkpoint: {e}")))?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&json).map_err(io)?;
        f.write_all(b"\n").map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub fn load_state(path: &Path) -> Result<Checkpoint, DatasetError> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
        message: "invalid UTF-8".into(),
    })?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })
}
