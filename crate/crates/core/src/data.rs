//! Synthetic class-conditional data sources and labeled dataset containers.
//!
//! Gaussian mixtures stand in for generated calibration corpora: the scoring
//! pipeline consumes only activation statistics, which mixtures provide at
//! desk scale with a controllable quality knob.

use crate::model::{ActivationBatch, Layout};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Default per-class sample budget; estimation is stable well below this.
pub const DEFAULT_SAMPLES_PER_CLASS: usize = 200;

#[derive(Debug)]
pub enum DataError {
    UnknownClass { class: usize, class_count: usize },
    BadSpec(String),
    FormatError { path: String, message: String },
    Io(std::io::Error),
}

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataError::UnknownClass { class, class_count } => {
                write!(f, "unknown class {class} (source has {class_count} classes)")
            }
            DataError::BadSpec(msg) => write!(f, "bad source spec: {msg}"),
            DataError::FormatError { path, message } => {
                write!(f, "format error at {path}: {message}")
            }
            DataError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

/// One isotropic Gaussian component of a class mixture. `cov_scale` is the
/// variance multiplier (covariance = `cov_scale * I`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    pub cov_scale: f64,
    pub weight: f64,
}

/// Per-class Gaussian mixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    pub components: Vec<MixtureComponent>,
}

/// A parametric class-conditional distribution with an input layout and a
/// default seed. Immutable; sampling never mutates shared state.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    pub layout: Layout,
    pub classes: Vec<ClassSpec>,
    pub seed: u64,
}

/// Labeled samples, flattened per the layout.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub layout: Layout,
    pub class_count: usize,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Samples with the given label.
    pub fn filter_class(&self, class: usize) -> LabeledDataset {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (x, &y) in self.xs.iter().zip(&self.ys) {
            if y == class {
                xs.push(x.clone());
                ys.push(y);
            }
        }
        LabeledDataset { layout: self.layout, class_count: self.class_count, xs, ys }
    }

    /// Samples with any label other than `class`.
    pub fn exclude_class(&self, class: usize) -> LabeledDataset {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (x, &y) in self.xs.iter().zip(&self.ys) {
            if y != class {
                xs.push(x.clone());
                ys.push(y);
            }
        }
        LabeledDataset { layout: self.layout, class_count: self.class_count, xs, ys }
    }

    pub fn to_batch(&self) -> ActivationBatch {
        ActivationBatch::from_samples(self.layout, &self.xs).expect("dataset layout is consistent")
    }
}

impl SyntheticSource {
    pub fn new(layout: Layout, classes: Vec<ClassSpec>, seed: u64) -> Result<Self, DataError> {
        let dim = layout.size();
        for (ci, class) in classes.iter().enumerate() {
            if class.components.is_empty() {
                return Err(DataError::BadSpec(format!("class {ci} has no components")));
            }
            let mut total = 0.0;
            for (ki, comp) in class.components.iter().enumerate() {
                if comp.mean.len() != dim {
                    return Err(DataError::BadSpec(format!(
                        "class {ci} component {ki}: mean has {} values, layout needs {dim}",
                        comp.mean.len()
                    )));
                }
                if !(comp.cov_scale > 0.0) {
                    return Err(DataError::BadSpec(format!(
                        "class {ci} component {ki}: cov_scale must be positive"
                    )));
                }
                total += comp.weight;
            }
            if (total - 1.0).abs() > 1e-12 {
                return Err(DataError::BadSpec(format!(
                    "class {ci}: mixture weights sum to {total}, expected 1"
                )));
            }
        }
        Ok(Self { layout, classes, seed })
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    /// Well-separated blobs: one isotropic Gaussian per class with a random
    /// unit-direction mean of norm `radius` and variance `cov_scale`.
    /// Directions are rejection-sampled until every pair of class means is at
    /// least `1.2 * radius` apart.
    pub fn gaussian_blobs(
        layout: Layout,
        class_count: usize,
        radius: f64,
        cov_scale: f64,
        seed: u64,
    ) -> Self {
        let dim = layout.size();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(class_count);
        let min_sep = 1.2 * radius;
        while means.len() < class_count {
            let mut mean: Vec<f64> =
                (0..dim).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            mean.iter_mut().for_each(|v| *v *= radius / norm);
            let separated = means.iter().all(|m| {
                let d2: f64 = m.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= min_sep
            });
            if separated {
                means.push(mean);
            }
        }
        let classes = means
            .into_iter()
            .map(|mean| ClassSpec {
                components: vec![MixtureComponent { mean, cov_scale, weight: 1.0 }],
            })
            .collect();
        Self::new(layout, classes, seed).expect("blob spec is valid")
    }

    /// Draws exactly `n_per_class` samples for each requested class (all
    /// classes when `classes` is `None`).
    ///
    /// Each class has its own substream derived from `(seed, class)`, so the
    /// class-0 slice of a full draw equals a class-0-only draw and disjoint
    /// class subsets never share labels or RNG state.
    pub fn sample(
        &self,
        n_per_class: usize,
        classes: Option<&[usize]>,
        seed: u64,
    ) -> Result<LabeledDataset, DataError> {
        assert!(n_per_class >= 1, "need at least one sample per class");
        let all: Vec<usize> = (0..self.classes.len()).collect();
        let requested = classes.unwrap_or(&all);
        for &c in requested {
            if c >= self.classes.len() {
                return Err(DataError::UnknownClass { class: c, class_count: self.classes.len() });
            }
        }
        let dim = self.layout.size();
        let mut xs = Vec::with_capacity(requested.len() * n_per_class);
        let mut ys = Vec::with_capacity(requested.len() * n_per_class);
        for &c in requested {
            let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64
                .wrapping_mul(c as u64 + 1)));
            let spec = &self.classes[c];
            for _ in 0..n_per_class {
                let comp = pick_component(spec, &mut rng);
                let std = comp.cov_scale.sqrt();
                let x: Vec<f64> = (0..dim)
                    .map(|i| {
                        let g: f64 = rand_distr::StandardNormal.sample(&mut rng);
                        comp.mean[i] + std * g
                    })
                    .collect();
                xs.push(x);
                ys.push(c);
            }
        }
        Ok(LabeledDataset { layout: self.layout, class_count: self.classes.len(), xs, ys })
    }

    /// Lower-fidelity copy of this source: covariance scales inflated by
    /// `(1 + noise_scale)`.
    pub fn degrade(&self, noise_scale: f64) -> SyntheticSource {
        assert!(noise_scale >= 0.0);
        let mut out = self.clone();
        for class in &mut out.classes {
            for comp in &mut class.components {
                comp.cov_scale *= 1.0 + noise_scale;
            }
        }
        out
    }
}

fn pick_component<'a>(spec: &'a ClassSpec, rng: &mut ChaCha12Rng) -> &'a MixtureComponent {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for comp in &spec.components {
        acc += comp.weight;
        if u < acc {
            return comp;
        }
    }
    spec.components.last().expect("non-empty mixture")
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case")]
pub(crate) enum LayoutJson {
    Flat { dim: usize },
    Image { channels: usize, height: usize, width: usize },
    Tokens { len: usize, dim: usize },
}

impl From<Layout> for LayoutJson {
    fn from(l: Layout) -> Self {
        match l {
            Layout::Flat { dim } => LayoutJson::Flat { dim },
            Layout::Image { channels, height, width } => {
                LayoutJson::Image { channels, height, width }
            }
            Layout::Tokens { len, dim } => LayoutJson::Tokens { len, dim },
        }
    }
}

impl From<LayoutJson> for Layout {
    fn from(l: LayoutJson) -> Self {
        match l {
            LayoutJson::Flat { dim } => Layout::Flat { dim },
            LayoutJson::Image { channels, height, width } => {
                Layout::Image { channels, height, width }
            }
            LayoutJson::Tokens { len, dim } => Layout::Tokens { len, dim },
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SourceJson {
    version: u32,
    #[serde(flatten)]
    layout: LayoutJson,
    seed: u64,
    classes: Vec<ClassSpec>,
}

#[derive(Serialize, Deserialize)]
struct SampleJson {
    x: Vec<f64>,
    y: usize,
}

#[derive(Serialize, Deserialize)]
struct DatasetJson {
    version: u32,
    #[serde(flatten)]
    layout: LayoutJson,
    class_count: usize,
    samples: Vec<SampleJson>,
}

pub fn save_source(source: &SyntheticSource, path: &Path) -> Result<(), DataError> {
    let json = SourceJson {
        version: 1,
        layout: source.layout.into(),
        seed: source.seed,
        classes: source.classes.clone(),
    };
    let text = serde_json::to_string_pretty(&json).expect("source serializes");
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_source(path: &Path) -> Result<SyntheticSource, DataError> {
    let text = std::fs::read_to_string(path)?;
    let json: SourceJson = serde_json::from_str(&text).map_err(|e| DataError::FormatError {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    SyntheticSource::new(json.layout.into(), json.classes, json.seed)
}

pub fn save_dataset(data: &LabeledDataset, path: &Path) -> Result<(), DataError> {
    let json = DatasetJson {
        version: 1,
        layout: data.layout.into(),
        class_count: data.class_count,
        samples: data
            .xs
            .iter()
            .zip(&data.ys)
            .map(|(x, &y)| SampleJson { x: x.clone(), y })
            .collect(),
    };
    let text = serde_json::to_string(&json).expect("dataset serializes");
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset, DataError> {
    let text = std::fs::read_to_string(path)?;
    let json: DatasetJson = serde_json::from_str(&text).map_err(|e| DataError::FormatError {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let layout: Layout = json.layout.into();
    let dim = layout.size();
    let mut xs = Vec::with_capacity(json.samples.len());
    let mut ys = Vec::with_capacity(json.samples.len());
    for (i, s) in json.samples.into_iter().enumerate() {
        if s.x.len() != dim {
            return Err(DataError::FormatError {
                path: format!("{}: samples[{i}].x", path.display()),
                message: format!("expected {dim} values, got {}", s.x.len()),
            });
        }
        if s.y >= json.class_count {
            return Err(DataError::FormatError {
                path: format!("{}: samples[{i}].y", path.display()),
                message: format!("label {} out of range", s.y),
            });
        }
        xs.push(s.x);
        ys.push(s.y);
    }
    if xs.is_empty() {
        return Err(DataError::FormatError {
            path: path.display().to_string(),
            message: "dataset has no samples".into(),
        });
    }
    Ok(LabeledDataset { layout, class_count: json.class_count, xs, ys })
}
