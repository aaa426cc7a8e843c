//! Component similarity estimation and subset fidelity.
//!
//! For a tapped layer, output channel `c` is a sum of per-component
//! contributions. The similarity matrix for that channel holds expected
//! pairwise inner products of contributions (Frobenius inner product over
//! spatial/sequence dims). From it, every fidelity quantity is closed-form:
//!
//! - the subset fidelity of a component set `C` — the fraction of the
//!   channel's output energy reconstructable using only `C` after optimally
//!   rescaling the kept contributions;
//! - the optimal compensation `delta_C = 1 + (Q[C,C] + lambda I)^{-1} Q[C,~C] 1`;
//! - singleton scores `s_i = (Q1)_i^2 / (Q_ii * 1'Q1)` with rescale
//!   coefficient `alpha_i = (Q1)_i / Q_ii`;
//! - the row-sum saliency `Q1` and the Cholesky row-norm screening heuristic.

use crate::model::{forward, LayerSpec, LayerTaps, ModelError, ModelGraph};
use crate::numerics::{cholesky_regularized, solve_spd, NumericsError, SymmetricMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Default diagonal regularization for similarity-matrix solves.
pub const DEFAULT_LAMBDA: f64 = 1e-4;

#[derive(Debug)]
pub enum FidelityError {
    /// Taps belong to a different (layer, channel) or have a different shape
    /// than the accumulator.
    TapMismatch { context: String },
    /// Finalizing an accumulator that saw no samples.
    EmptyAccumulator,
    /// Invalid component subset (empty, duplicate, or out of range).
    BadSubset { context: String },
    Numerics(NumericsError),
    Model(ModelError),
    FormatError { path: String, message: String },
    Io(std::io::Error),
}

impl std::fmt::Display for FidelityError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FidelityError::TapMismatch { context } => write!(f, "tap mismatch: {context}"),
            FidelityError::EmptyAccumulator => {
                write!(f, "cannot finalize an accumulator with no samples")
            }
            FidelityError::BadSubset { context } => write!(f, "bad subset: {context}"),
            FidelityError::Numerics(e) => write!(f, "{e}"),
            FidelityError::Model(e) => write!(f, "{e}"),
            FidelityError::FormatError { path, message } => {
                write!(f, "format error at {path}: {message}")
            }
            FidelityError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for FidelityError {}

impl From<NumericsError> for FidelityError {
    fn from(e: NumericsError) -> Self {
        FidelityError::Numerics(e)
    }
}

impl From<ModelError> for FidelityError {
    fn from(e: ModelError) -> Self {
        FidelityError::Model(e)
    }
}

impl From<std::io::Error> for FidelityError {
    fn from(e: std::io::Error) -> Self {
        FidelityError::Io(e)
    }
}

/// Which similarity statistic to estimate.
///
/// `Centered` subtracts the outer product of mean contributions, the right
/// statistic when the layer feeds a batch norm that re-centers its output;
/// `Plain` is the raw second moment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsmVariant {
    Plain,
    Centered,
}

/// Running sums for one (layer, output channel): pairwise inner-product sums
/// and per-component contribution sums. Accumulators merge associatively, so
/// estimation parallelizes by worker and reduces exactly.
#[derive(Debug, Clone)]
pub struct CsmAccumulator {
    pub layer: usize,
    pub channel: usize,
    dim: usize,
    map_size: usize,
    samples: usize,
    /// Sum over samples of `<A_i, A_j>`.
    gram_sum: SymmetricMatrix,
    /// Sum over samples of each contribution map, `dim * map_size`.
    contribution_sum: Vec<f64>,
}

impl CsmAccumulator {
    pub fn new(layer: usize, channel: usize, dim: usize, map_size: usize) -> Self {
        Self {
            layer,
            channel,
            dim,
            map_size,
            samples: 0,
            gram_sum: SymmetricMatrix::zeros(dim),
            contribution_sum: vec![0.0; dim * map_size],
        }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Folds one batch of taps for this accumulator's channel into the sums.
    ///
    /// # Errors
    /// `TapMismatch` unless the taps' layer, component count, and map size
    /// agree with this accumulator and the channel exists.
    pub fn accumulate(&mut self, taps: &LayerTaps) -> Result<(), FidelityError> {
        if taps.layer != self.layer
            || taps.in_components != self.dim
            || taps.map_size != self.map_size
            || self.channel >= taps.out_channels
        {
            return Err(FidelityError::TapMismatch {
                context: format!(
                    "accumulator (layer {}, channel {}, {} components, map {}) vs taps \
                     (layer {}, {} channels, {} components, map {})",
                    self.layer,
                    self.channel,
                    self.dim,
                    self.map_size,
                    taps.layer,
                    taps.out_channels,
                    taps.in_components,
                    taps.map_size
                ),
            });
        }
        let c = self.channel;
        for b in 0..taps.batch {
            for i in 0..self.dim {
                let ai = taps.contribution(c, i, b);
                for s in 0..self.map_size {
                    self.contribution_sum[i * self.map_size + s] += ai[s];
                }
                for j in i..self.dim {
                    let aj = taps.contribution(c, j, b);
                    let dot: f64 = ai.iter().zip(aj).map(|(a, b)| a * b).sum();
                    let cur = self.gram_sum.get(i, j);
                    self.gram_sum.set(i, j, cur + dot);
                }
            }
            self.samples += 1;
        }
        Ok(())
    }

    /// Exact sum of two accumulators over disjoint sample streams.
    pub fn merge(mut self, other: &CsmAccumulator) -> Result<CsmAccumulator, FidelityError> {
        if self.layer != other.layer
            || self.channel != other.channel
            || self.dim != other.dim
            || self.map_size != other.map_size
        {
            return Err(FidelityError::TapMismatch {
                context: "merging accumulators for different (layer, channel) or shapes".into(),
            });
        }
        for i in 0..self.dim {
            for j in i..self.dim {
                let v = self.gram_sum.get(i, j) + other.gram_sum.get(i, j);
                self.gram_sum.set(i, j, v);
            }
        }
        for (a, b) in self.contribution_sum.iter_mut().zip(&other.contribution_sum) {
            *a += b;
        }
        self.samples += other.samples;
        Ok(self)
    }

    /// Finalizes the estimate.
    ///
    /// `Plain` divides the inner-product sums by the sample count; `Centered`
    /// additionally subtracts the outer product of the mean contributions.
    pub fn finalize(&self, variant: CsmVariant) -> Result<Csm, FidelityError> {
        if self.samples == 0 {
            return Err(FidelityError::EmptyAccumulator);
        }
        let n = self.samples as f64;
        let mut matrix = SymmetricMatrix::zeros(self.dim);
        for i in 0..self.dim {
            for j in i..self.dim {
                let mut v = self.gram_sum.get(i, j) / n;
                if variant == CsmVariant::Centered {
                    let mi = &self.contribution_sum[i * self.map_size..(i + 1) * self.map_size];
                    let mj = &self.contribution_sum[j * self.map_size..(j + 1) * self.map_size];
                    let dot: f64 = mi.iter().zip(mj).map(|(a, b)| a * b).sum();
                    v -= dot / (n * n);
                }
                matrix.set(i, j, v);
            }
        }
        let total_energy = matrix.grand_sum();
        Ok(Csm {
            layer: self.layer,
            channel: self.channel,
            variant,
            samples: self.samples,
            total_energy,
            matrix,
        })
    }
}

/// Finalized component similarity matrix for one output channel.
#[derive(Debug, Clone)]
pub struct Csm {
    pub layer: usize,
    pub channel: usize,
    pub variant: CsmVariant,
    pub samples: usize,
    /// `1' Q 1`, the channel's (bias-free) output energy.
    pub total_energy: f64,
    pub matrix: SymmetricMatrix,
}

impl Csm {
    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    /// A channel whose output energy is zero: every subset reconstructs it,
    /// and it must not drive selection.
    pub fn is_dead(&self) -> bool {
        self.total_energy <= 0.0
    }

    /// Builds a CSM directly from a similarity matrix (fixtures, file loads).
    pub fn from_matrix(matrix: SymmetricMatrix, variant: CsmVariant, samples: usize) -> Csm {
        let total_energy = matrix.grand_sum();
        Csm { layer: 0, channel: 0, variant, samples, total_energy, matrix }
    }
}

/// Result of evaluating one component subset.
#[derive(Debug, Clone)]
pub struct SubsetFidelityResult {
    /// Sorted kept components.
    pub subset: Vec<usize>,
    /// Fraction of output energy reconstructed, clamped to [0, 1].
    pub fidelity: f64,
    /// Rescale factors for kept components; zero off the subset.
    pub compensation: Vec<f64>,
    /// Expected squared reconstruction error at the compensation optimum.
    pub residual_energy: f64,
}

/// Per-component singleton fidelities and rescale coefficients.
#[derive(Debug, Clone)]
pub struct SingletonScores {
    pub fidelity: Vec<f64>,
    pub coefficient: Vec<f64>,
}

fn validate_subset(subset: &[usize], dim: usize) -> Result<Vec<usize>, FidelityError> {
    if subset.is_empty() {
        return Err(FidelityError::BadSubset { context: "subset is empty".into() });
    }
    let mut sorted = subset.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != subset.len() {
        return Err(FidelityError::BadSubset { context: "subset has duplicates".into() });
    }
    if *sorted.last().unwrap() >= dim {
        return Err(FidelityError::BadSubset {
            context: format!("index {} out of range ({dim} components)", sorted.last().unwrap()),
        });
    }
    Ok(sorted)
}

/// Fidelity of a component subset with optimal compensation.
///
/// Solves `(Q[C,C] + lambda I) x = Q[C,~C] 1` and sets the kept rescale
/// factors to `1 + x`. The residual is the quadratic form of the removal
/// vector. When regularization makes the compensated residual worse than
/// removing everything, falls back to zero compensation (fidelity 0), which
/// keeps fidelity inside [0, 1] as a code invariant.
///
/// # Errors
/// `BadSubset` for invalid subsets; `NotPositiveDefinite` from the solve.
pub fn subset_fidelity(
    csm: &Csm,
    subset: &[usize],
    lambda: f64,
) -> Result<SubsetFidelityResult, FidelityError> {
    let dim = csm.dim();
    let kept = validate_subset(subset, dim)?;
    if csm.is_dead() {
        // Zero output: any subset reconstructs it exactly.
        let mut compensation = vec![0.0; dim];
        for &i in &kept {
            compensation[i] = 1.0;
        }
        return Ok(SubsetFidelityResult {
            subset: kept,
            fidelity: 1.0,
            compensation,
            residual_energy: 0.0,
        });
    }
    let total = csm.total_energy;
    let q_kept = csm.matrix.submatrix(&kept);
    let row_sums = csm.matrix.row_sums();
    // Q[C, ~C] 1 = (Q 1)[C] - Q[C, C] 1.
    let rhs: Vec<f64> = kept
        .iter()
        .map(|&i| {
            let in_subset: f64 = kept.iter().map(|&j| csm.matrix.get(i, j)).sum();
            row_sums[i] - in_subset
        })
        .collect();
    let x = solve_spd(&q_kept, &rhs, lambda)?;

    let mut compensation = vec![0.0; dim];
    for (k, &i) in kept.iter().enumerate() {
        compensation[i] = 1.0 + x[k];
    }
    // Removal vector: 1 - delta on the subset, 1 elsewhere.
    let removal: Vec<f64> = (0..dim).map(|i| 1.0 - compensation[i]).collect();
    let mut residual = csm.matrix.quadratic_form(&removal)?;
    if residual < 0.0 {
        residual = 0.0;
    }
    if residual > total {
        // Regularized compensation is worse than keeping nothing.
        return Ok(SubsetFidelityResult {
            subset: kept,
            fidelity: 0.0,
            compensation: vec![0.0; dim],
            residual_energy: total,
        });
    }
    let fidelity = (1.0 - residual / total).clamp(0.0, 1.0);
    Ok(SubsetFidelityResult { subset: kept, fidelity, compensation, residual_energy: residual })
}

/// Singleton fidelities and coefficients for every component, in closed form.
/// Components with zero self-energy score zero.
pub fn singleton_scores(csm: &Csm) -> SingletonScores {
    let dim = csm.dim();
    let row_sums = csm.matrix.row_sums();
    let total = csm.total_energy;
    let mut fidelity = vec![0.0; dim];
    let mut coefficient = vec![0.0; dim];
    for i in 0..dim {
        let self_energy = csm.matrix.get(i, i);
        if self_energy <= 0.0 || total <= 0.0 {
            continue;
        }
        coefficient[i] = row_sums[i] / self_energy;
        fidelity[i] = ((row_sums[i] * row_sums[i]) / (self_energy * total)).clamp(0.0, 1.0);
    }
    SingletonScores { fidelity, coefficient }
}

/// Squared row norms of the regularized Cholesky factor of `Q`, a cheap
/// screening score for singleton fidelity. Algebraically the i-th squared
/// row norm equals `(Q + lambda I)_ii`, so the induced ranking is the
/// diagonal ranking; its rank agreement with exact singleton scores is
/// reported by callers rather than assumed.
pub fn cholesky_heuristic(csm: &Csm, lambda: f64) -> Result<Vec<f64>, FidelityError> {
    let factor = cholesky_regularized(&csm.matrix, lambda)?;
    Ok((0..csm.dim()).map(|i| factor.row_norm_sq(i)).collect())
}

/// Row-sum saliency: the expected inner product of each contribution with
/// the channel output, `(Q 1)_i`.
pub fn saliency(csm: &Csm) -> Vec<f64> {
    csm.matrix.row_sums()
}

// ---------------------------------------------------------------------------
// Estimation from a model and samples
// ---------------------------------------------------------------------------

/// Picks the statistic per layer: centered when the next layer re-centers
/// the output (batch norm), plain otherwise.
pub fn variant_for_layer(model: &ModelGraph, layer: usize) -> CsmVariant {
    match model.layers.get(layer + 1) {
        Some(LayerSpec::BatchNorm2D { .. }) => CsmVariant::Centered,
        _ => CsmVariant::Plain,
    }
}

/// Estimates similarity matrices for every output channel of the given
/// tapped layers by batched forward passes over `samples`, with the variant
/// chosen per layer by [`variant_for_layer`].
pub fn estimate_csms(
    model: &ModelGraph,
    samples: &[Vec<f64>],
    layers: &[usize],
    batch_size: usize,
) -> Result<BTreeMap<(usize, usize), Csm>, FidelityError> {
    estimate_csms_with_variant(model, samples, layers, batch_size, None)
}

/// [`estimate_csms`] with an explicit variant override (the local-to-global
/// bound is stated for the plain second moment regardless of what follows
/// the layer).
pub fn estimate_csms_with_variant(
    model: &ModelGraph,
    samples: &[Vec<f64>],
    layers: &[usize],
    batch_size: usize,
    variant: Option<CsmVariant>,
) -> Result<BTreeMap<(usize, usize), Csm>, FidelityError> {
    assert!(batch_size >= 1);
    let layouts = model.activation_layouts()?;
    let mut accs: Vec<CsmAccumulator> = Vec::new();
    for &l in layers {
        let spec = model
            .layers
            .get(l)
            .ok_or(ModelError::BadLayerId { layer: l, len: model.layers.len() })?;
        let (dim, channels) = match (spec.in_components(), spec.out_channels()) {
            (Some(d), Some(c)) => (d, c),
            _ => return Err(ModelError::NonTappable { layer: l, kind: spec.kind_name() }.into()),
        };
        let map_size = match spec {
            LayerSpec::Dense { .. } => 1,
            LayerSpec::Conv2D { .. } => match layouts[l] {
                crate::model::Layout::Image { height, width, .. } => height * width,
                _ => unreachable!("conv input is an image"),
            },
            LayerSpec::FFNBlock { gamma, .. } => layouts[l].size() / gamma.len(),
            _ => unreachable!("tappable kinds are dense/conv/ffn"),
        };
        for c in 0..channels {
            accs.push(CsmAccumulator::new(l, c, dim, map_size));
        }
    }

    for chunk in samples.chunks(batch_size) {
        let batch = crate::model::ActivationBatch::from_samples(model.input, chunk)?;
        let result = forward(model, &batch, layers)?;
        let taps_by_layer: BTreeMap<usize, &LayerTaps> =
            result.taps.iter().map(|t| (t.layer, t)).collect();
        accs.par_iter_mut()
            .map(|acc| acc.accumulate(taps_by_layer[&acc.layer]))
            .collect::<Result<Vec<_>, _>>()?;
    }

    let mut out = BTreeMap::new();
    for acc in &accs {
        let v = variant.unwrap_or_else(|| variant_for_layer(model, acc.layer));
        out.insert((acc.layer, acc.channel), acc.finalize(v)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CSM dump files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CsmJson {
    layer: usize,
    channel: usize,
    variant: CsmVariant,
    dim: usize,
    /// Upper triangle, row-major: entries (i, j) with j >= i.
    q: Vec<f64>,
    n_samples: usize,
}

pub fn save_csm(csm: &Csm, path: &Path) -> Result<(), FidelityError> {
    let dim = csm.dim();
    let mut q = Vec::with_capacity(dim * (dim + 1) / 2);
    for i in 0..dim {
        for j in i..dim {
            q.push(csm.matrix.get(i, j));
        }
    }
    let json = CsmJson {
        layer: csm.layer,
        channel: csm.channel,
        variant: csm.variant,
        dim,
        q,
        n_samples: csm.samples,
    };
    std::fs::write(path, serde_json::to_string(&json).expect("csm serializes"))?;
    Ok(())
}

pub fn load_csm(path: &Path) -> Result<Csm, FidelityError> {
    let text = std::fs::read_to_string(path)?;
    let json: CsmJson = serde_json::from_str(&text).map_err(|e| FidelityError::FormatError {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let expected = json.dim * (json.dim + 1) / 2;
    if json.q.len() != expected {
        return Err(FidelityError::FormatError {
            path: format!("{}: q", path.display()),
            message: format!("expected {expected} upper-triangle values, got {}", json.q.len()),
        });
    }
    let mut matrix = SymmetricMatrix::zeros(json.dim);
    let mut it = json.q.iter();
    for i in 0..json.dim {
        for j in i..json.dim {
            matrix.set(i, j, *it.next().unwrap());
        }
    }
    let mut csm = Csm::from_matrix(matrix, json.variant, json.n_samples);
    csm.layer = json.layer;
    csm.channel = json.channel;
    Ok(csm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builders, ActivationBatch, Layout};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    pub(crate) fn random_spd_csm(dim: usize, seed: u64) -> Csm {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut l = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..i {
                l[i * dim + j] = rng.gen_range(-1.0..1.0);
            }
            l[i * dim + i] = rng.gen_range(0.5..1.5);
        }
        let mut q = SymmetricMatrix::zeros(dim);
        for i in 0..dim {
            for j in 0..=i {
                let mut s = 0.0;
                for k in 0..dim {
                    s += l[i * dim + k] * l[j * dim + k];
                }
                q.set(i, j, s);
            }
        }
        Csm::from_matrix(q, CsmVariant::Plain, 1)
    }

    fn taps_from_identity_dense(inputs: &[Vec<f64>]) -> LayerTaps {
        let dim = inputs[0].len();
        let model = crate::model::ModelGraph::new(
            Layout::Flat { dim },
            vec![crate::model::LayerSpec::Dense {
                weight: crate::numerics::DenseMatrix::identity(dim),
                bias: vec![0.0; dim],
            }],
            vec![],
            dim,
        )
        .unwrap();
        let batch = ActivationBatch::from_samples(Layout::Flat { dim }, inputs).unwrap();
        forward(&model, &batch, &[0]).unwrap().taps.remove(0)
    }

    #[test]
    fn single_sample_accumulation_is_the_gram_matrix() {
        // Channel 0 of a dense layer with weights (1, 1): contributions are
        // a = x_0, b = x_1.
        let model = crate::model::ModelGraph::new(
            Layout::Flat { dim: 2 },
            vec![crate::model::LayerSpec::Dense {
                weight: crate::numerics::DenseMatrix::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap(),
                bias: vec![0.0; 2],
            }],
            vec![],
            2,
        )
        .unwrap();
        let batch = ActivationBatch::new(Layout::Flat { dim: 2 }, 1, vec![3.0, -2.0]).unwrap();
        let taps = forward(&model, &batch, &[0]).unwrap().taps.remove(0);
        let mut acc = CsmAccumulator::new(0, 0, 2, 1);
        acc.accumulate(&taps).unwrap();
        let csm = acc.finalize(CsmVariant::Plain).unwrap();
        assert_eq!(csm.matrix.get(0, 0), 9.0);
        assert_eq!(csm.matrix.get(0, 1), -6.0);
        assert_eq!(csm.matrix.get(1, 1), 4.0);
    }

    #[test]
    fn merge_equals_sequential_accumulation_on_integer_data() {
        let batch1: Vec<Vec<f64>> = vec![vec![1.0, 2.0, -3.0], vec![0.0, 4.0, 2.0]];
        let batch2: Vec<Vec<f64>> = vec![vec![-2.0, 1.0, 1.0], vec![3.0, -1.0, 0.0]];
        let taps1 = taps_from_identity_dense(&batch1);
        let taps2 = taps_from_identity_dense(&batch2);

        let mut sequential = CsmAccumulator::new(0, 1, 3, 1);
        sequential.accumulate(&taps1).unwrap();
        sequential.accumulate(&taps2).unwrap();

        let mut a = CsmAccumulator::new(0, 1, 3, 1);
        a.accumulate(&taps1).unwrap();
        let mut b = CsmAccumulator::new(0, 1, 3, 1);
        b.accumulate(&taps2).unwrap();
        let merged = a.merge(&b).unwrap();

        assert_eq!(merged.samples, sequential.samples);
        assert_eq!(merged.gram_sum, sequential.gram_sum);
        assert_eq!(merged.contribution_sum, sequential.contribution_sum);

        let mut a2 = CsmAccumulator::new(0, 1, 3, 1);
        a2.accumulate(&taps1).unwrap();
        let mut b2 = CsmAccumulator::new(0, 1, 3, 1);
        b2.accumulate(&taps2).unwrap();
        let merged_rev = b2.merge(&a2).unwrap();
        assert_eq!(merged_rev.gram_sum, merged.gram_sum);
    }

    #[test]
    fn disjoint_supports_give_zero_off_diagonals() {
        // 1x1 conv over 3 channels whose spatial supports never overlap.
        let layout = Layout::Image { channels: 3, height: 1, width: 3 };
        let model = crate::model::ModelGraph::new(
            layout,
            vec![crate::model::LayerSpec::Conv2D {
                in_channels: 3,
                out_channels: 1,
                kernel: 1,
                weight: vec![1.0, -2.0, 0.5],
                bias: vec![0.0],
            }],
            vec![],
            3,
        )
        .unwrap();
        let mut samples = Vec::new();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..10 {
            let mut x = vec![0.0; 9];
            for c in 0..3 {
                x[c * 3 + c] = rng.gen_range(-3.0..3.0);
            }
            samples.push(x);
        }
        let batch = ActivationBatch::from_samples(layout, &samples).unwrap();
        let taps = forward(&model, &batch, &[0]).unwrap().taps.remove(0);
        let mut acc = CsmAccumulator::new(0, 0, 3, 3);
        acc.accumulate(&taps).unwrap();
        let csm = acc.finalize(CsmVariant::Plain).unwrap();
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert_eq!(csm.matrix.get(i, j), 0.0);
            }
            assert!(csm.matrix.get(i, i) > 0.0);
        }
    }

    #[test]
    fn centered_variant_of_constant_contributions_is_zero() {
        // Same integer sample four times: mean subtraction is exact.
        let inputs: Vec<Vec<f64>> = vec![vec![2.0, -1.0]; 4];
        let taps = taps_from_identity_dense(&inputs);
        let mut acc = CsmAccumulator::new(0, 0, 2, 1);
        acc.accumulate(&taps).unwrap();
        let centered = acc.finalize(CsmVariant::Centered).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(centered.matrix.get(i, j), 0.0);
            }
        }
        let plain = acc.finalize(CsmVariant::Plain).unwrap();
        assert_eq!(plain.matrix.get(0, 0), 4.0);
        assert_eq!(plain.matrix.get(0, 1), 0.0); // channel 0 only sees x_0
    }

    #[test]
    fn centered_approaches_plain_for_zero_mean_data() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let inputs: Vec<Vec<f64>> =
            (0..10_000).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let taps = taps_from_identity_dense(&inputs);
        let mut acc = CsmAccumulator::new(0, 0, 3, 1);
        acc.accumulate(&taps).unwrap();
        let plain = acc.finalize(CsmVariant::Plain).unwrap();
        let centered = acc.finalize(CsmVariant::Centered).unwrap();
        let mut diff = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                diff = diff.max((plain.matrix.get(i, j) - centered.matrix.get(i, j)).abs());
            }
        }
        // Mean of n zero-mean bounded draws is O(1/sqrt(n)); its square O(1/n).
        assert!(diff < 5e-3, "diff {diff}");
    }

    #[test]
    fn empty_accumulator_cannot_finalize() {
        let acc = CsmAccumulator::new(0, 0, 2, 1);
        assert!(matches!(acc.finalize(CsmVariant::Plain), Err(FidelityError::EmptyAccumulator)));
    }

    #[test]
    fn tap_mismatch_is_rejected() {
        let inputs: Vec<Vec<f64>> = vec![vec![1.0, 2.0]];
        let taps = taps_from_identity_dense(&inputs);
        let mut acc = CsmAccumulator::new(3, 0, 2, 1);
        assert!(matches!(acc.accumulate(&taps), Err(FidelityError::TapMismatch { .. })));
    }

    // -- subset fidelity -----------------------------------------------------

    #[test]
    fn full_set_has_fidelity_one_exactly() {
        for seed in 0..20 {
            let csm = random_spd_csm(5, seed);
            let r = subset_fidelity(&csm, &[0, 1, 2, 3, 4], 0.0).unwrap();
            assert_eq!(r.fidelity, 1.0);
            assert_eq!(r.residual_energy, 0.0);
            assert!(r.compensation.iter().all(|d| (d - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn correlated_pair_single_component() {
        let q = SymmetricMatrix::from_full(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let csm = Csm::from_matrix(q, CsmVariant::Plain, 1);
        let r = subset_fidelity(&csm, &[0], 0.0).unwrap();
        assert!((r.compensation[0] - 1.5).abs() < 1e-12);
        assert_eq!(r.compensation[1], 0.0);
        assert!((r.fidelity - 0.75).abs() < 1e-12);

        // Independent oracle: scan the scalar compensation on a fine grid.
        let residual = |d: f64| {
            let u = [1.0 - d, 1.0];
            2.0 * u[0] * u[0] + 2.0 * u[0] * u[1] + 2.0 * u[1] * u[1]
        };
        let mut best = f64::INFINITY;
        let mut best_d = 0.0;
        for step in 0..=40_000 {
            let d = step as f64 * 1e-4;
            let v = residual(d);
            if v < best {
                best = v;
                best_d = d;
            }
        }
        assert!((best_d - 1.5).abs() < 1e-3);
        assert!((1.0 - best / 6.0 - 0.75).abs() < 1e-6);
    }

    #[test]
    fn diagonal_subset_fidelity_is_energy_fraction() {
        let csm = Csm::from_matrix(
            SymmetricMatrix::from_diagonal(&[1.0, 2.0, 3.0]),
            CsmVariant::Plain,
            1,
        );
        let r = subset_fidelity(&csm, &[2], 0.0).unwrap();
        assert!((r.compensation[2] - 1.0).abs() < 1e-15);
        assert!((r.fidelity - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dead_channel_scores_one_for_any_subset() {
        let csm = Csm::from_matrix(SymmetricMatrix::zeros(3), CsmVariant::Plain, 4);
        assert!(csm.is_dead());
        let r = subset_fidelity(&csm, &[1], 0.0).unwrap();
        assert_eq!(r.fidelity, 1.0);
        assert_eq!(r.residual_energy, 0.0);
    }

    #[test]
    fn bad_subsets_are_rejected() {
        let csm = random_spd_csm(4, 0);
        assert!(matches!(subset_fidelity(&csm, &[], 0.0), Err(FidelityError::BadSubset { .. })));
        assert!(matches!(
            subset_fidelity(&csm, &[1, 1], 0.0),
            Err(FidelityError::BadSubset { .. })
        ));
        assert!(matches!(subset_fidelity(&csm, &[7], 0.0), Err(FidelityError::BadSubset { .. })));
    }

    // -- singleton scores ------------------------------------------------------

    #[test]
    fn diagonal_singletons() {
        let csm = Csm::from_matrix(
            SymmetricMatrix::from_diagonal(&[1.0, 2.0, 3.0]),
            CsmVariant::Plain,
            1,
        );
        let s = singleton_scores(&csm);
        let expect = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for i in 0..3 {
            assert!((s.fidelity[i] - expect[i]).abs() < 1e-15);
            assert!((s.coefficient[i] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn correlated_pair_singletons() {
        let q = SymmetricMatrix::from_full(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let csm = Csm::from_matrix(q, CsmVariant::Plain, 1);
        let s = singleton_scores(&csm);
        for i in 0..2 {
            assert!((s.coefficient[i] - 1.5).abs() < 1e-15);
            assert!((s.fidelity[i] - 0.75).abs() < 1e-15);
        }
    }

    #[test]
    fn dead_component_scores_zero() {
        let mut q = SymmetricMatrix::from_diagonal(&[1.0, 0.0, 3.0]);
        q.set(0, 2, 0.5);
        let csm = Csm::from_matrix(q, CsmVariant::Plain, 1);
        let s = singleton_scores(&csm);
        assert_eq!(s.fidelity[1], 0.0);
        assert_eq!(s.coefficient[1], 0.0);
    }

    #[test]
    fn singleton_consistency_with_subset_fidelity() {
        for seed in 0..50 {
            let dim = 3 + (seed % 6) as usize;
            let csm = random_spd_csm(dim, seed + 100);
            let s = singleton_scores(&csm);
            for i in 0..dim {
                let r = subset_fidelity(&csm, &[i], 0.0).unwrap();
                assert!(
                    (r.fidelity - s.fidelity[i]).abs() < 1e-10,
                    "seed {seed} component {i}: {} vs {}",
                    r.fidelity,
                    s.fidelity[i]
                );
            }
        }
    }

    // -- heuristics -------------------------------------------------------------

    #[test]
    fn cholesky_heuristic_on_diagonal() {
        let csm = Csm::from_matrix(
            SymmetricMatrix::from_diagonal(&[1.0, 2.0, 3.0]),
            CsmVariant::Plain,
            1,
        );
        let scores = cholesky_heuristic(&csm, 0.0).unwrap();
        assert!((scores[0] - 1.0).abs() < 1e-14);
        assert!((scores[1] - 2.0).abs() < 1e-14);
        assert!((scores[2] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn cholesky_heuristic_identity_with_ridge() {
        let csm = Csm::from_matrix(SymmetricMatrix::identity(4), CsmVariant::Plain, 1);
        let scores = cholesky_heuristic(&csm, 1e-4).unwrap();
        for s in scores {
            assert!((s - 1.0001).abs() < 1e-12);
        }
    }

    #[test]
    fn saliency_is_row_sums_and_matches_identity() {
        let q = SymmetricMatrix::from_full(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let csm = Csm::from_matrix(q, CsmVariant::Plain, 1);
        assert_eq!(saliency(&csm), vec![3.0, 3.0]);

        // saliency_i = coefficient_i * Q_ii on random SPD matrices.
        for seed in 0..20 {
            let csm = random_spd_csm(5, seed + 500);
            let sal = saliency(&csm);
            let s = singleton_scores(&csm);
            for i in 0..5 {
                let expect = s.coefficient[i] * csm.matrix.get(i, i);
                assert!((sal[i] - expect).abs() < 1e-10 * expect.abs().max(1.0));
            }
        }
    }

    // -- estimation over a model ---------------------------------------------

    #[test]
    fn identity_dense_csm_is_input_second_moment() {
        let dim = 3;
        let model = crate::model::ModelGraph::new(
            Layout::Flat { dim },
            vec![crate::model::LayerSpec::Dense {
                weight: crate::numerics::DenseMatrix::identity(dim),
                bias: vec![0.0; dim],
            }],
            vec![],
            dim,
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let samples: Vec<Vec<f64>> =
            (0..50).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let csms = estimate_csms(&model, &samples, &[0], 16).unwrap();
        // Channel c only receives a contribution from component c.
        for c in 0..dim {
            let csm = &csms[&(0, c)];
            let second_moment =
                samples.iter().map(|x| x[c] * x[c]).sum::<f64>() / samples.len() as f64;
            assert!((csm.matrix.get(c, c) - second_moment).abs() < 1e-12);
            for i in 0..dim {
                for j in 0..dim {
                    if i != c || j != c {
                        assert_eq!(csm.matrix.get(i, j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn batch_size_does_not_change_estimates_much() {
        let model = builders::mlp(Layout::Flat { dim: 4 }, &[6], 3, 9);
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let samples: Vec<Vec<f64>> =
            (0..30).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let a = estimate_csms(&model, &samples, &[0, 2], 7).unwrap();
        let b = estimate_csms(&model, &samples, &[0, 2], 30).unwrap();
        for (key, csm) in &a {
            let other = &b[key];
            for i in 0..csm.dim() {
                for j in 0..csm.dim() {
                    let d = (csm.matrix.get(i, j) - other.matrix.get(i, j)).abs();
                    assert!(d < 1e-12, "{key:?} ({i},{j}) differs by {d}");
                }
            }
        }
    }

    #[test]
    fn variant_policy_follows_batch_norm() {
        let layout = Layout::Image { channels: 2, height: 4, width: 4 };
        let with_bn = builders::conv_net(layout, &[(3, 3)], true, 2, 1);
        assert_eq!(variant_for_layer(&with_bn, 0), CsmVariant::Centered);
        let without = builders::conv_net(layout, &[(3, 3)], false, 2, 1);
        assert_eq!(variant_for_layer(&without, 0), CsmVariant::Plain);
    }

    #[test]
    fn csm_dump_round_trips() {
        let mut csm = random_spd_csm(6, 3);
        csm.layer = 2;
        csm.channel = 4;
        let dir = std::env::temp_dir().join("modhifi-fidelity-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("csm.json");
        save_csm(&csm, &path).unwrap();
        let loaded = load_csm(&path).unwrap();
        assert_eq!(loaded.layer, 2);
        assert_eq!(loaded.channel, 4);
        assert_eq!(loaded.matrix, csm.matrix);
        assert_eq!(loaded.total_energy, csm.total_energy);
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn spd_csm_strategy(max_dim: usize) -> impl Strategy<Value = Csm> {
        (2usize..=max_dim)
            .prop_flat_map(move |dim| {
                (
                    Just(dim),
                    proptest::collection::vec(-1.0_f64..1.0, dim * dim),
                    proptest::collection::vec(0.4_f64..1.6, dim),
                )
            })
            .prop_map(|(dim, mut l, diag)| {
                for i in 0..dim {
                    l[i * dim + i] = diag[i];
                    for j in (i + 1)..dim {
                        l[i * dim + j] = 0.0;
                    }
                }
                let mut q = SymmetricMatrix::zeros(dim);
                for i in 0..dim {
                    for j in 0..=i {
                        let mut s = 0.0;
                        for k in 0..dim {
                            s += l[i * dim + k] * l[j * dim + k];
                        }
                        q.set(i, j, s);
                    }
                }
                Csm::from_matrix(q, CsmVariant::Plain, 1)
            })
    }

    proptest! {
        /// Fidelity is bounded and monotone under subset inclusion.
        #[test]
        fn fidelity_bounded_and_monotone(
            csm in spd_csm_strategy(8),
            picks in proptest::collection::vec(any::<proptest::sample::Index>(), 1..8),
            inner in proptest::collection::vec(any::<proptest::sample::Index>(), 1..8),
        ) {
            let dim = csm.dim();
            let mut big: Vec<usize> = picks.iter().map(|p| p.index(dim)).collect();
            big.sort_unstable();
            big.dedup();
            let fs_big = subset_fidelity(&csm, &big, 0.0).unwrap().fidelity;
            prop_assert!((0.0..=1.0 + 1e-9).contains(&fs_big));

            let mut small: Vec<usize> =
                inner.iter().map(|p| p.index(big.len())).map(|k| big[k]).collect();
            small.sort_unstable();
            small.dedup();
            let fs_small = subset_fidelity(&csm, &small, 0.0).unwrap().fidelity;
            prop_assert!(
                fs_small <= fs_big + 1e-9,
                "FS({small:?})={fs_small} > FS({big:?})={fs_big}"
            );
        }

        /// The closed-form compensation is a stationary point: the residual
        /// gradient vanishes at the optimum.
        #[test]
        fn compensation_gradient_vanishes(
            csm in spd_csm_strategy(8),
            pick in proptest::collection::vec(any::<proptest::sample::Index>(), 1..6),
        ) {
            let dim = csm.dim();
            let mut subset: Vec<usize> = pick.iter().map(|p| p.index(dim)).collect();
            subset.sort_unstable();
            subset.dedup();
            let r = subset_fidelity(&csm, &subset, 0.0).unwrap();
            // gradient = 2 (Q[C,C] delta_C - Q[C,:] 1)
            let row_sums = csm.matrix.row_sums();
            let mut norm = 0.0f64;
            for &i in &subset {
                let mut g = -row_sums[i];
                for &j in &subset {
                    g += csm.matrix.get(i, j) * r.compensation[j];
                }
                norm += (2.0 * g) * (2.0 * g);
            }
            prop_assert!(norm.sqrt() <= 1e-8 * csm.matrix.frobenius_norm());
        }
    }
}
