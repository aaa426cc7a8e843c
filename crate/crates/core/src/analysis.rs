//! Lipschitz constants, the local-to-global error bound check, and the
//! validation experiments: noising and counterfactual removal of selected
//! components.
//!
//! Per-layer constants: spectral norm for dense/conv weights (conv on the
//! explicitly unrolled operator at desk scale), `max |gamma|/sqrt(var+eps)`
//! for batch norm, `|gamma|_inf / r` for unit-sphere norm layers on inputs
//! with `|Mx| >= r`, 1 for relu, 1.1 for gelu (the sup of its derivative is
//! just below that), `1/p` for mean pooling. Residual joins add the two
//! branch constants. The product over layers after `l` bounds how much a
//! layer-`l` edit can move the output; the bound is loose in practice, which
//! the experiments quantify.

use crate::data::LabeledDataset;
use crate::fidelity::{estimate_csms_with_variant, CsmVariant, FidelityError};
use crate::model::{
    accuracy, forward_activations, ActivationBatch, LayerSpec, Layout, ModelError, ModelGraph,
    NormKind,
};
use crate::modify::{apply_binary_mask, scale_component, ModificationMask, ModifyError};
use crate::numerics::{spectral_norm, DenseMatrix};
use crate::selection::HiFiSet;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;
use serde::Serialize;
use std::collections::BTreeMap;

/// Lipschitz constant used for gelu activations; the true sup of the
/// derivative is about 1.0998.
pub const GELU_LIPSCHITZ: f64 = 1.1;

/// Norms below this invalidate the local Lipschitz assumption.
pub const ZERO_RADIUS_TOL: f64 = 1e-12;

const SPECTRAL_ITERS: usize = 5000;
const SPECTRAL_TOL: f64 = 1e-13;
const SPECTRAL_SEED: u64 = 0x5eed;

#[derive(Debug)]
pub enum AnalysisError {
    /// A norm layer needs an empirical lower bound on its input norm.
    MissingRadius { layer: usize },
    /// A sample drove a norm-layer input below [`ZERO_RADIUS_TOL`].
    ZeroRadius { layer: usize, norm: f64 },
    /// No per-layer constant exists for this kind in isolation.
    UnsupportedLayer { layer: usize, kind: &'static str },
    Model(ModelError),
    Fidelity(FidelityError),
    Modify(ModifyError),
}

impl std::fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AnalysisError::MissingRadius { layer } => {
                write!(f, "layer {layer}: norm layer needs a pre-norm radius")
            }
            AnalysisError::ZeroRadius { layer, norm } => {
                write!(f, "layer {layer}: pre-norm input norm {norm:e} is numerically zero")
            }
            AnalysisError::UnsupportedLayer { layer, kind } => {
                write!(f, "layer {layer} ({kind}) has no standalone Lipschitz constant")
            }
            AnalysisError::Model(e) => write!(f, "{e}"),
            AnalysisError::Fidelity(e) => write!(f, "{e}"),
            AnalysisError::Modify(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for AnalysisError {}

impl From<ModelError> for AnalysisError {
    fn from(e: ModelError) -> Self {
        AnalysisError::Model(e)
    }
}

impl From<FidelityError> for AnalysisError {
    fn from(e: FidelityError) -> Self {
        AnalysisError::Fidelity(e)
    }
}

impl From<ModifyError> for AnalysisError {
    fn from(e: ModifyError) -> Self {
        AnalysisError::Modify(e)
    }
}

/// Builds the explicit linear operator of a size-preserving stride-1 conv as
/// a `(c_out*h*w) x (c_in*h*w)` matrix.
fn unrolled_conv_operator(
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    weight: &[f64],
    h: usize,
    w: usize,
) -> DenseMatrix {
    let plane = h * w;
    let mut m = DenseMatrix::zeros(out_channels * plane, in_channels * plane);
    let pad = (kernel / 2) as isize;
    let ksq = kernel * kernel;
    for c in 0..out_channels {
        for i in 0..in_channels {
            let kern = &weight[(c * in_channels + i) * ksq..][..ksq];
            for y in 0..h {
                for x in 0..w {
                    let row = (c * plane) + y * w + x;
                    for a in 0..kernel {
                        let iy = y as isize + a as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for b in 0..kernel {
                            let ix = x as isize + b as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let col = i * plane + iy as usize * w + ix as usize;
                            m.set(row, col, kern[a * kernel + b]);
                        }
                    }
                }
            }
        }
    }
    m
}

/// Per-kind Lipschitz constant of a single layer. `radius` is required for
/// unit-sphere norm layers (and FFN blocks); `spatial` supplies the conv
/// input size.
pub fn layer_lipschitz(
    layer: &LayerSpec,
    layer_idx: usize,
    radius: Option<f64>,
    spatial: Option<(usize, usize)>,
) -> Result<f64, AnalysisError> {
    match layer {
        LayerSpec::Dense { weight, .. } => {
            Ok(spectral_norm(weight, SPECTRAL_ITERS, SPECTRAL_TOL, SPECTRAL_SEED))
        }
        LayerSpec::Conv2D { in_channels, out_channels, kernel, weight, .. } => {
            let (h, w) = spatial.ok_or(AnalysisError::UnsupportedLayer {
                layer: layer_idx,
                kind: "conv2d without input size",
            })?;
            let op = unrolled_conv_operator(*in_channels, *out_channels, *kernel, weight, h, w);
            Ok(spectral_norm(&op, SPECTRAL_ITERS, SPECTRAL_TOL, SPECTRAL_SEED))
        }
        LayerSpec::BatchNorm2D { gamma, running_var, eps, .. } => Ok(gamma
            .iter()
            .zip(running_var)
            .map(|(g, v)| g.abs() / (v + eps).sqrt())
            .fold(0.0, f64::max)),
        LayerSpec::LayerNorm { gamma, .. } | LayerSpec::RmsNorm { gamma, .. } => {
            let r = radius.ok_or(AnalysisError::MissingRadius { layer: layer_idx })?;
            Ok(gamma.iter().fold(0.0f64, |a, g| a.max(g.abs())) / r)
        }
        LayerSpec::ReLU => Ok(1.0),
        LayerSpec::Gelu => Ok(GELU_LIPSCHITZ),
        LayerSpec::AvgPool2D { pool } => Ok(1.0 / *pool as f64),
        LayerSpec::ResidualAdd => Err(AnalysisError::UnsupportedLayer {
            layer: layer_idx,
            kind: "residual_add",
        }),
        LayerSpec::FFNBlock { gamma, w_up, w_down, .. } => {
            let r = radius.ok_or(AnalysisError::MissingRadius { layer: layer_idx })?;
            let norm_const = gamma.iter().fold(0.0f64, |a, g| a.max(g.abs())) / r;
            let branch = norm_const
                * spectral_norm(w_up, SPECTRAL_ITERS, SPECTRAL_TOL, SPECTRAL_SEED)
                * GELU_LIPSCHITZ
                * spectral_norm(w_down, SPECTRAL_ITERS, SPECTRAL_TOL, SPECTRAL_SEED);
            Ok(1.0 + branch)
        }
    }
}

/// Worst-case amplification of an edit at layer `l` through the rest of the
/// network: the Lipschitz constant of the suffix as a function of the
/// activation entering layer `l + 1`.
///
/// Propagates constants along the chain and adds branch constants at skip
/// joins; a skip whose source precedes the edited layer contributes nothing
/// (that activation is identical in both models). The empty suffix gives 1.
pub fn worst_case_amplification(
    model: &ModelGraph,
    l: usize,
    radii: &BTreeMap<usize, f64>,
) -> Result<f64, AnalysisError> {
    let layouts = model.activation_layouts()?;
    let n = model.layers.len();
    // constant[j] bounds |act_j difference| / |act_{l+1} difference|.
    let mut constant = vec![0.0; n + 1];
    constant[l + 1] = 1.0;
    for j in (l + 2)..=n {
        let layer_idx = j - 1;
        let layer = &model.layers[layer_idx];
        if let LayerSpec::ResidualAdd = layer {
            let edge = model.edge_into(layer_idx).expect("validated");
            let skip = if edge.source >= l + 1 { constant[edge.source] } else { 0.0 };
            constant[j] = constant[j - 1] + skip;
            continue;
        }
        let spatial = match layouts[layer_idx] {
            Layout::Image { height, width, .. } => Some((height, width)),
            _ => None,
        };
        let lf = layer_lipschitz(layer, layer_idx, radii.get(&layer_idx).copied(), spatial)?;
        constant[j] = lf * constant[j - 1];
    }
    Ok(constant[n])
}

/// Distribution summary of one norm layer's input norms.
#[derive(Debug, Clone, Serialize)]
pub struct RadiusStat {
    pub layer: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub rows: usize,
}

fn norm_rows_of_layer(layer: &LayerSpec, act: &ActivationBatch) -> Option<Vec<f64>> {
    let (kind, dim) = match layer {
        LayerSpec::LayerNorm { gamma, .. } => (NormKind::LayerNorm, gamma.len()),
        LayerSpec::RmsNorm { gamma, .. } => (NormKind::RmsNorm, gamma.len()),
        LayerSpec::FFNBlock { norm, gamma, .. } => (*norm, gamma.len()),
        _ => return None,
    };
    let rows = act.data.len() / dim;
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let x = &act.data[r * dim..(r + 1) * dim];
        let norm_sq = match kind {
            NormKind::LayerNorm => {
                let mean = x.iter().sum::<f64>() / dim as f64;
                x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            }
            NormKind::RmsNorm => x.iter().map(|v| v * v).sum::<f64>(),
        };
        out.push(norm_sq.sqrt());
    }
    Some(out)
}

/// Minimum (and summary statistics of) pre-normalization input norms over
/// the data, for every norm-bearing layer.
///
/// # Errors
/// `ZeroRadius` if any sample's norm is numerically zero — the local
/// Lipschitz assumption fails there.
pub fn min_prenorm_radius(
    model: &ModelGraph,
    data: &LabeledDataset,
) -> Result<Vec<RadiusStat>, AnalysisError> {
    assert!(!data.is_empty(), "need data to estimate radii");
    let batch = data.to_batch();
    // Evaluate layer by layer so a vanishing pre-norm input is reported as
    // ZeroRadius before the norm layer turns it into NaNs.
    let mut acts: Vec<ActivationBatch> = vec![batch];
    let mut stats = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        if let Some(mut norms) = norm_rows_of_layer(layer, acts.last().unwrap()) {
            norms.sort_by(|a, b| a.partial_cmp(b).expect("finite norms"));
            let min = norms[0];
            if min < ZERO_RADIUS_TOL {
                return Err(AnalysisError::ZeroRadius { layer: l, norm: min });
            }
            stats.push(RadiusStat {
                layer: l,
                min,
                median: norms[norms.len() / 2],
                max: *norms.last().unwrap(),
                rows: norms.len(),
            });
        }
        let skip = model.edge_into(l).map(|e| e.source);
        let out = {
            let input = acts.last().unwrap();
            crate::model::eval_layer(layer, input, skip.map(|s| &acts[s]), crate::model::BnMode::Inference)?
        };
        if !out.is_finite() {
            return Err(ModelError::NonFiniteActivation { layer: l }.into());
        }
        acts.push(out);
    }
    Ok(stats)
}

/// Per-layer constants and the suffix amplification for every layer.
#[derive(Debug, Clone, Serialize)]
pub struct LayerConstant {
    pub layer: usize,
    pub kind: &'static str,
    pub constant: f64,
    pub provenance: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzReport {
    pub per_layer: Vec<LayerConstant>,
    /// `suffix_amplification[l]` bounds output movement per unit of edit at
    /// layer l.
    pub suffix_amplification: Vec<f64>,
    pub radii: Vec<RadiusStat>,
}

fn provenance_of(layer: &LayerSpec) -> &'static str {
    match layer {
        LayerSpec::Dense { .. } => "spectral norm",
        LayerSpec::Conv2D { .. } => "spectral norm of unrolled operator",
        LayerSpec::BatchNorm2D { .. } => "max |gamma| / sqrt(var + eps)",
        LayerSpec::LayerNorm { .. } | LayerSpec::RmsNorm { .. } => "|gamma|_inf / radius",
        LayerSpec::ReLU => "1-Lipschitz activation",
        LayerSpec::Gelu => "gelu derivative bound",
        LayerSpec::AvgPool2D { .. } => "mean pooling contraction",
        LayerSpec::ResidualAdd => "branch sum",
        LayerSpec::FFNBlock { .. } => "1 + norm * up * gelu * down",
    }
}

/// Full Lipschitz report: per-layer constants (radii estimated from `data`
/// when norm layers are present) and per-layer suffix amplifications.
pub fn lipschitz_report(
    model: &ModelGraph,
    data: &LabeledDataset,
) -> Result<LipschitzReport, AnalysisError> {
    let radii_stats = min_prenorm_radius(model, data)?;
    let radii: BTreeMap<usize, f64> = radii_stats.iter().map(|r| (r.layer, r.min)).collect();
    let layouts = model.activation_layouts()?;
    let mut per_layer = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let constant = if matches!(layer, LayerSpec::ResidualAdd) {
            // Reported as the join's own additive contribution: the skip
            // branch carries constant 1 relative to its source.
            1.0
        } else {
            let spatial = match layouts[l] {
                Layout::Image { height, width, .. } => Some((height, width)),
                _ => None,
            };
            layer_lipschitz(layer, l, radii.get(&l).copied(), spatial)?
        };
        per_layer.push(LayerConstant {
            layer: l,
            kind: layer.kind_name(),
            constant,
            provenance: provenance_of(layer),
        });
    }
    let mut suffix = Vec::with_capacity(model.layers.len());
    for l in 0..model.layers.len() {
        suffix.push(worst_case_amplification(model, l, &radii)?);
    }
    Ok(LipschitzReport { per_layer, suffix_amplification: suffix, radii: radii_stats })
}

// ---------------------------------------------------------------------------
// Local-to-global bound check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BoundCheckResult {
    pub layer: usize,
    /// Fraction of (channel, component) entries removed by the mask.
    pub mask_density: f64,
    /// Mean squared output difference between the model and its masked copy.
    pub global_error: f64,
    /// Sum over channels of the removal quadratic form.
    pub local_form: f64,
    /// `global_error / local_form` (0 when both vanish).
    pub ratio: f64,
    /// Squared worst-case amplification for this layer.
    pub amplification_sq: f64,
    pub satisfied: bool,
}

/// Checks the local-to-global inequality for each mask at layer `l`: the
/// mean squared output change must not exceed the squared suffix Lipschitz
/// constant times the similarity-matrix quadratic form of the removal — with
/// both sides estimated on the same `data`.
///
/// Radii for norm layers are taken as the minimum over the unmasked and the
/// masked activations, so the local Lipschitz constants cover both
/// trajectories.
pub fn bound_check(
    model: &ModelGraph,
    l: usize,
    masks: &[ModificationMask],
    data: &LabeledDataset,
) -> Result<Vec<BoundCheckResult>, AnalysisError> {
    // The theorem's similarity statistic is the plain second moment.
    let csms =
        estimate_csms_with_variant(model, &data.xs, &[l], 64, Some(CsmVariant::Plain))?;
    let batch = data.to_batch();
    let base_acts = forward_activations(model, &batch)?;
    let base_logits = &base_acts.last().unwrap().data;
    let mut base_radii: BTreeMap<usize, f64> = BTreeMap::new();
    for (j, layer) in model.layers.iter().enumerate() {
        if let Some(norms) = norm_rows_of_layer(layer, &base_acts[j]) {
            let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
            base_radii.insert(j, min);
        }
    }

    let mut results = Vec::with_capacity(masks.len());
    for mask in masks {
        assert_eq!(mask.layer, l, "mask layer must match the checked layer");
        let masked = apply_binary_mask(model, mask)?;
        let masked_acts = forward_activations(&masked, &batch)?;
        let masked_logits = &masked_acts.last().unwrap().data;

        let mut radii = base_radii.clone();
        for (j, layer) in masked.layers.iter().enumerate() {
            if let Some(norms) = norm_rows_of_layer(layer, &masked_acts[j]) {
                let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
                radii.entry(j).and_modify(|r| *r = r.min(min)).or_insert(min);
            }
        }
        for (&layer, &r) in &radii {
            if r < ZERO_RADIUS_TOL {
                return Err(AnalysisError::ZeroRadius { layer, norm: r });
            }
        }

        let mut global = 0.0;
        for (a, b) in base_logits.iter().zip(masked_logits) {
            global += (a - b) * (a - b);
        }
        global /= batch.batch as f64;

        let mut local = 0.0;
        for c in 0..mask.out_channels {
            let removal = mask.removal_vector(c);
            local += csms[&(l, c)].matrix.quadratic_form(&removal).expect("dims agree");
        }

        let amplification = worst_case_amplification(model, l, &radii)?;
        let amplification_sq = amplification * amplification;
        let bound = amplification_sq * local;
        let satisfied = global <= bound * (1.0 + 1e-9) + 1e-30;
        let removed = mask.keep.iter().filter(|k| **k == 0.0).count();
        results.push(BoundCheckResult {
            layer: l,
            mask_density: removed as f64 / mask.keep.len() as f64,
            global_error: global,
            local_form: local,
            ratio: if local > 0.0 { global / local } else { 0.0 },
            amplification_sq,
            satisfied,
        });
    }
    Ok(results)
}

// ---------------------------------------------------------------------------
// Noising and counterfactual-removal experiments
// ---------------------------------------------------------------------------

/// Which component pool an experiment draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentPool {
    HiFi,
    NonHiFi,
    Random,
}

/// Flattens selected sets into (layer, channel, component) triples.
fn hifi_triples(sets: &[HiFiSet]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for set in sets {
        for &i in &set.indices {
            out.push((set.layer, set.channel, i));
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Every (layer, channel, component) triple of the layers covered by `sets`.
fn all_triples(model: &ModelGraph, sets: &[HiFiSet]) -> Vec<(usize, usize, usize)> {
    let mut layers: Vec<usize> = sets.iter().map(|s| s.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    let mut out = Vec::new();
    for l in layers {
        let spec = &model.layers[l];
        let (c_in, c_out) = (
            spec.in_components().expect("tapped layer"),
            spec.out_channels().expect("tapped layer"),
        );
        for c in 0..c_out {
            for i in 0..c_in {
                out.push((l, c, i));
            }
        }
    }
    out
}

fn pool_of(
    model: &ModelGraph,
    sets: &[HiFiSet],
    pool: ComponentPool,
) -> Vec<(usize, usize, usize)> {
    let hifi = hifi_triples(sets);
    match pool {
        ComponentPool::HiFi => hifi,
        ComponentPool::Random => all_triples(model, sets),
        ComponentPool::NonHiFi => {
            let set: std::collections::BTreeSet<_> = hifi.into_iter().collect();
            all_triples(model, sets).into_iter().filter(|t| !set.contains(t)).collect()
        }
    }
}

fn sample_triples(
    mut pool: Vec<(usize, usize, usize)>,
    count: usize,
    seed: u64,
) -> Vec<(usize, usize, usize)> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = pool.len();
    let take = count.min(n);
    for i in 0..take {
        let j = i + (rand::Rng::gen_range(&mut rng, 0..(n - i) as u64) as usize);
        pool.swap(i, j);
    }
    pool.truncate(take);
    pool
}

fn perturb_component(
    layer: &mut LayerSpec,
    channel: usize,
    component: usize,
    sigma: f64,
    rng: &mut ChaCha12Rng,
) {
    let mut noise = || -> f64 {
        let g: f64 = rand_distr::StandardNormal.sample(rng);
        sigma * g
    };
    match layer {
        LayerSpec::Dense { weight, .. } => {
            let v = weight.get(channel, component) + noise();
            weight.set(channel, component, v);
        }
        LayerSpec::Conv2D { in_channels, kernel, weight, .. } => {
            let ksq = *kernel * *kernel;
            let off = (channel * *in_channels + component) * ksq;
            for w in &mut weight[off..off + ksq] {
                *w += noise();
            }
        }
        LayerSpec::FFNBlock { w_down, .. } => {
            let v = w_down.get(component, channel) + noise();
            w_down.set(component, channel, v);
        }
        _ => panic!("layer has no component weights"),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentOutcome {
    pub pool: ComponentPool,
    pub treated: usize,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// `accuracy_after - accuracy_before`; negative means degradation.
    pub accuracy_delta: f64,
}

/// Adds independent zero-mean Gaussian noise (std `sigma`) to the weights of
/// a sampled fraction of the chosen component pool and reports the accuracy
/// change. The treated count is `ceil(fraction * |selected components|)` for
/// every pool, so pools are compared at equal size.
pub fn noise_experiment(
    model: &ModelGraph,
    sets: &[HiFiSet],
    sigma: f64,
    fraction: f64,
    pool: ComponentPool,
    seed: u64,
    data: &LabeledDataset,
) -> Result<ExperimentOutcome, AnalysisError> {
    assert!((0.0..=1.0).contains(&fraction));
    assert!(sigma >= 0.0);
    let count = (fraction * hifi_triples(sets).len() as f64).ceil() as usize;
    let chosen = sample_triples(pool_of(model, sets, pool), count, seed);
    let accuracy_before = accuracy(model, data);
    let mut perturbed = model.clone();
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    for &(l, c, i) in &chosen {
        perturb_component(&mut perturbed.layers[l], c, i, sigma, &mut rng);
    }
    let accuracy_after = accuracy(&perturbed, data);
    Ok(ExperimentOutcome {
        pool,
        treated: chosen.len(),
        accuracy_before,
        accuracy_after,
        accuracy_delta: accuracy_after - accuracy_before,
    })
}

/// Zeroes `size` components drawn from the chosen pool and reports the
/// accuracy change.
pub fn counterfactual_removal(
    model: &ModelGraph,
    sets: &[HiFiSet],
    pool: ComponentPool,
    size: usize,
    seed: u64,
    data: &LabeledDataset,
) -> Result<ExperimentOutcome, AnalysisError> {
    let chosen = sample_triples(pool_of(model, sets, pool), size, seed);
    let accuracy_before = accuracy(model, data);
    let mut edited = model.clone();
    for &(l, c, i) in &chosen {
        scale_component(&mut edited.layers[l], c, i, 0.0);
    }
    let accuracy_after = accuracy(&edited, data);
    Ok(ExperimentOutcome {
        pool,
        treated: chosen.len(),
        accuracy_before,
        accuracy_after,
        accuracy_delta: accuracy_after - accuracy_before,
    })
}

/// Top-k components per (layer, channel) by singleton score — the selected
/// sets the experiments treat.
pub fn score_hifi_sets(
    model: &ModelGraph,
    samples: &[Vec<f64>],
    layers: &[usize],
    k_fraction: f64,
    batch_size: usize,
) -> Result<Vec<HiFiSet>, AnalysisError> {
    use crate::fidelity::{singleton_scores, subset_fidelity};
    use crate::selection::{naive_topk, SelectionMethod};
    let csms = crate::fidelity::estimate_csms(model, samples, layers, batch_size)?;
    let mut sets = Vec::new();
    for ((layer, channel), csm) in &csms {
        if csm.is_dead() {
            continue;
        }
        let k = ((k_fraction * csm.dim() as f64).ceil() as usize).clamp(1, csm.dim());
        let indices =
            naive_topk(&singleton_scores(csm), k).map_err(|e| AnalysisError::Modify(e.into()))?;
        let fidelity = subset_fidelity(csm, &indices, 0.0)?.fidelity;
        sets.push(HiFiSet {
            layer: *layer,
            channel: *channel,
            indices,
            k,
            fidelity,
            method: SelectionMethod::NaiveTopK,
        });
    }
    Ok(sets)
}
