//! Model modification: structured pruning with closed-form compensation and
//! batch-norm recalibration, classwise unlearning by zeroing (or negating,
//! on residual paths) the components that carry the forget class, physical
//! compaction of zeroed channels, and FLOP/parameter accounting.

use crate::data::{DataError, LabeledDataset, SyntheticSource};
use crate::fidelity::{
    estimate_csms, singleton_scores, subset_fidelity, FidelityError,
};
use crate::model::{
    accuracy, forward, per_class_accuracy, ActivationBatch, LayerSpec, Layout, ModelError,
    ModelGraph,
};
use crate::numerics::DenseMatrix;
use crate::selection::{naive_topk, SelectionError};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug)]
pub enum ModifyError {
    /// Every output channel of the layer is dead; there is nothing to rank.
    DegenerateLayer { layer: usize },
    /// Forget-class samples carry a different label.
    WrongClassData { expected: usize, got: usize },
    /// A residual edge forbids removing a zeroed channel.
    InconsistentCoupling { layer: usize, context: String },
    /// Negation edits require a residual path around the layer.
    ResidualPathRequired { layer: usize },
    /// The layer has no input-contribution decomposition.
    NotTappable { layer: usize },
    Fidelity(FidelityError),
    Selection(SelectionError),
    Model(ModelError),
    Data(DataError),
}

impl std::fmt::Display for ModifyError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModifyError::DegenerateLayer { layer } => {
                write!(f, "layer {layer}: all output channels are dead")
            }
            ModifyError::WrongClassData { expected, got } => {
                write!(f, "forget data labeled {got}, plan expects class {expected}")
            }
            ModifyError::InconsistentCoupling { layer, context } => {
                write!(f, "layer {layer}: residual edge forbids removal ({context})")
            }
            ModifyError::ResidualPathRequired { layer } => {
                write!(f, "layer {layer}: negation requires a residual path")
            }
            ModifyError::NotTappable { layer } => {
                write!(f, "layer {layer} has no component decomposition")
            }
            ModifyError::Fidelity(e) => write!(f, "{e}"),
            ModifyError::Selection(e) => write!(f, "{e}"),
            ModifyError::Model(e) => write!(f, "{e}"),
            ModifyError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModifyError {}

impl From<FidelityError> for ModifyError {
    fn from(e: FidelityError) -> Self {
        ModifyError::Fidelity(e)
    }
}

impl From<SelectionError> for ModifyError {
    fn from(e: SelectionError) -> Self {
        ModifyError::Selection(e)
    }
}

impl From<ModelError> for ModifyError {
    fn from(e: ModelError) -> Self {
        ModifyError::Model(e)
    }
}

impl From<DataError> for ModifyError {
    fn from(e: DataError) -> Self {
        ModifyError::Data(e)
    }
}

/// What a mask does to the selected weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Prune,
    UnlearnZero,
    UnlearnNegate,
}

/// A binary keep/remove pattern over one tapped layer's (channel, component)
/// weight blocks. Prune masks are column-structured: an input component is
/// kept or dropped jointly for every output channel.
#[derive(Debug, Clone)]
pub struct ModificationMask {
    pub layer: usize,
    pub mode: MaskMode,
    pub out_channels: usize,
    pub in_components: usize,
    /// `keep[c * in_components + i]`, 1.0 keep / 0.0 remove.
    pub keep: Vec<f64>,
}

impl ModificationMask {
    /// Column-structured mask keeping exactly the listed input components.
    pub fn from_kept_columns(
        layer: usize,
        out_channels: usize,
        in_components: usize,
        kept: &BTreeSet<usize>,
    ) -> Self {
        let mut keep = vec![0.0; out_channels * in_components];
        for c in 0..out_channels {
            for &i in kept {
                keep[c * in_components + i] = 1.0;
            }
        }
        Self { layer, mode: MaskMode::Prune, out_channels, in_components, keep }
    }

    #[inline]
    pub fn kept(&self, channel: usize, component: usize) -> bool {
        self.keep[channel * self.in_components + component] != 0.0
    }

    /// Removal indicator for one channel (`1 - m_c`).
    pub fn removal_vector(&self, channel: usize) -> Vec<f64> {
        (0..self.in_components).map(|i| 1.0 - self.keep[channel * self.in_components + i]).collect()
    }
}

/// Multiplies the weight block feeding (channel, component) by `factor`.
/// This is the single mutation primitive behind masking, compensation,
/// zeroing, and negation.
pub fn scale_component(layer: &mut LayerSpec, channel: usize, component: usize, factor: f64) {
    match layer {
        LayerSpec::Dense { weight, .. } => {
            let v = weight.get(channel, component) * factor;
            weight.set(channel, component, v);
        }
        LayerSpec::Conv2D { in_channels, kernel, weight, .. } => {
            let ksq = *kernel * *kernel;
            let off = (channel * *in_channels + component) * ksq;
            for w in &mut weight[off..off + ksq] {
                *w *= factor;
            }
        }
        LayerSpec::FFNBlock { w_down, .. } => {
            let v = w_down.get(component, channel) * factor;
            w_down.set(component, channel, v);
        }
        _ => panic!("layer has no component weights"),
    }
}

/// Applies a binary mask to a copy of the model: removed (channel, component)
/// weight blocks are zeroed.
pub fn apply_binary_mask(
    model: &ModelGraph,
    mask: &ModificationMask,
) -> Result<ModelGraph, ModifyError> {
    let mut out = model.clone();
    let layer = out
        .layers
        .get_mut(mask.layer)
        .ok_or(ModelError::BadLayerId { layer: mask.layer, len: model.layers.len() })?;
    if !layer.tappable() {
        return Err(ModifyError::NotTappable { layer: mask.layer });
    }
    for c in 0..mask.out_channels {
        for i in 0..mask.in_components {
            if !mask.kept(c, i) {
                scale_component(layer, c, i, 0.0);
            }
        }
    }
    Ok(out)
}

/// Accuracy plus size metrics for report bookends.
#[derive(Debug, Clone, Serialize)]
pub struct ModelMetrics {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub params: usize,
    pub macs: usize,
}

impl ModelMetrics {
    pub fn measure(model: &ModelGraph, data: &LabeledDataset) -> ModelMetrics {
        let report = flop_param_report(model);
        ModelMetrics {
            accuracy: accuracy(model, data),
            per_class_accuracy: per_class_accuracy(model, data),
            params: report.total_params,
            macs: report.total_macs,
        }
    }
}

// ---------------------------------------------------------------------------
// Pruning
// ---------------------------------------------------------------------------

/// Structured-pruning plan for one pass.
#[derive(Debug, Clone)]
pub struct PrunePlan {
    /// Tapped layers to prune.
    pub layers: Vec<usize>,
    /// Per-output-channel keep fraction in (0, 1]; the layer keeps the union
    /// of per-channel top-k sets, so realized sparsity is emergent.
    pub keep_fraction: f64,
    /// Ridge term for the compensation solves.
    pub lambda: f64,
    /// Rescale surviving weights by the closed-form compensation.
    pub compensate: bool,
    /// Re-estimate batch-norm running statistics on the source afterwards.
    pub recalibrate: bool,
    pub samples_per_class: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for PrunePlan {
    fn default() -> Self {
        Self {
            layers: vec![],
            keep_fraction: 0.7,
            lambda: crate::fidelity::DEFAULT_LAMBDA,
            compensate: true,
            recalibrate: true,
            samples_per_class: crate::data::DEFAULT_SAMPLES_PER_CLASS,
            seed: 0,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerPruneReport {
    pub layer: usize,
    pub in_components: usize,
    pub kept: usize,
    pub removed: usize,
    pub kept_components: Vec<usize>,
    /// Subset fidelity of the kept set per live output channel.
    pub fs_min: f64,
    pub fs_mean: f64,
    pub fs_max: f64,
    /// Mean squared layer-output error on the calibration set, masked only.
    pub mse_masked: f64,
    /// Same error with compensation applied (equals `mse_masked` when
    /// compensation is disabled).
    pub mse_final: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PruneReport {
    pub per_layer: Vec<LayerPruneReport>,
    pub metrics_before: ModelMetrics,
    pub metrics_after: ModelMetrics,
}

/// Prunes input components of the planned layers: per output channel, the
/// top-k singleton-score components are ranked on samples from `source`; the
/// layer keeps the union over channels; everything else is zeroed for all
/// outputs jointly; surviving weights are rescaled by each channel's
/// compensation; batch-norm statistics are optionally re-estimated.
pub fn modhifi_prune(
    model: &ModelGraph,
    plan: &PrunePlan,
    source: &SyntheticSource,
) -> Result<(ModelGraph, PruneReport), ModifyError> {
    assert!(
        plan.keep_fraction > 0.0 && plan.keep_fraction <= 1.0,
        "keep fraction must be in (0, 1]"
    );
    let calib = source.sample(plan.samples_per_class, None, plan.seed)?;
    let eval = source.sample(plan.samples_per_class, None, plan.seed.wrapping_add(1))?;
    let csms = estimate_csms(model, &calib.xs, &plan.layers, plan.batch_size)?;

    let metrics_before = ModelMetrics::measure(model, &eval);
    let mut pruned = model.clone();
    let mut per_layer = Vec::with_capacity(plan.layers.len());

    for &l in &plan.layers {
        let spec = &model.layers[l];
        let (c_in, c_out) = match (spec.in_components(), spec.out_channels()) {
            (Some(i), Some(o)) => (i, o),
            _ => return Err(ModifyError::NotTappable { layer: l }),
        };
        let k = ((plan.keep_fraction * c_in as f64).ceil() as usize).clamp(1, c_in);

        let mut kept: BTreeSet<usize> = BTreeSet::new();
        let mut live_channels = Vec::new();
        for c in 0..c_out {
            let csm = &csms[&(l, c)];
            if csm.is_dead() {
                continue;
            }
            live_channels.push(c);
            let scores = singleton_scores(csm);
            for i in naive_topk(&scores, k)? {
                kept.insert(i);
            }
        }
        if live_channels.is_empty() {
            return Err(ModifyError::DegenerateLayer { layer: l });
        }

        // Zero removed input components for every output channel.
        let layer = &mut pruned.layers[l];
        for c in 0..c_out {
            for i in 0..c_in {
                if !kept.contains(&i) {
                    scale_component(layer, c, i, 0.0);
                }
            }
        }

        // Per-channel compensation of the survivors.
        let kept_vec: Vec<usize> = kept.iter().copied().collect();
        let mut fs_values = Vec::with_capacity(live_channels.len());
        let mut compensations: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for &c in &live_channels {
            let fs = subset_fidelity(&csms[&(l, c)], &kept_vec, plan.lambda)?;
            fs_values.push(fs.fidelity);
            compensations.insert(c, fs.compensation);
        }
        if plan.compensate {
            let layer = &mut pruned.layers[l];
            for (&c, compensation) in &compensations {
                for &i in &kept_vec {
                    scale_component(layer, c, i, compensation[i]);
                }
            }
        }

        // Layer-output errors on the calibration inputs: both models see the
        // original activations entering this layer, so compensated error is
        // optimal for the same statistics the solve used.
        let calib_batch = calib.to_batch();
        let taps = forward(model, &calib_batch, &[l])?.taps.remove(0);
        let mse_of = |factors: &dyn Fn(usize, usize) -> f64| -> f64 {
            let mut total = 0.0;
            for c in 0..c_out {
                for b in 0..taps.batch {
                    let mut err_sq = 0.0;
                    let original = taps.linear_output(c, b);
                    let mut modified = vec![0.0; taps.map_size];
                    for i in 0..c_in {
                        let f = factors(c, i);
                        if f == 0.0 {
                            continue;
                        }
                        for (m, v) in modified.iter_mut().zip(taps.contribution(c, i, b)) {
                            *m += f * v;
                        }
                    }
                    for (o, m) in original.iter().zip(&modified) {
                        err_sq += (o - m) * (o - m);
                    }
                    total += err_sq;
                }
            }
            total / taps.batch as f64
        };
        let masked_factors = |_c: usize, i: usize| if kept.contains(&i) { 1.0 } else { 0.0 };
        let mse_masked = mse_of(&masked_factors);
        let final_factors = |c: usize, i: usize| {
            if !kept.contains(&i) {
                return 0.0;
            }
            if plan.compensate {
                compensations.get(&c).map_or(1.0, |comp| comp[i])
            } else {
                1.0
            }
        };
        let mse_final = mse_of(&final_factors);

        let n = fs_values.len() as f64;
        per_layer.push(LayerPruneReport {
            layer: l,
            in_components: c_in,
            kept: kept.len(),
            removed: c_in - kept.len(),
            kept_components: kept_vec,
            fs_min: fs_values.iter().copied().fold(f64::INFINITY, f64::min),
            fs_mean: fs_values.iter().sum::<f64>() / n,
            fs_max: fs_values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mse_masked,
            mse_final,
        });
    }

    if plan.recalibrate {
        recalibrate_batch_norm(&mut pruned, &calib)?;
    }

    let metrics_after = ModelMetrics::measure(&pruned, &eval);
    Ok((pruned, PruneReport { per_layer, metrics_before, metrics_after }))
}

/// Re-estimates every batch-norm layer's running statistics from the data,
/// front to back: each layer sees activations produced by already-updated
/// earlier layers.
pub fn recalibrate_batch_norm(
    model: &mut ModelGraph,
    data: &LabeledDataset,
) -> Result<(), ModifyError> {
    let batch = data.to_batch();
    for l in 0..model.layers.len() {
        if !matches!(model.layers[l], LayerSpec::BatchNorm2D { .. }) {
            continue;
        }
        let acts = crate::model::forward_activations(model, &batch)?;
        let (mean, var) = batch_stats_of(&acts[l]);
        if let LayerSpec::BatchNorm2D { running_mean, running_var, .. } = &mut model.layers[l] {
            *running_mean = mean;
            // Keep variances strictly positive (dead channels have none).
            *running_var = var.into_iter().map(|v| v.max(1e-12)).collect();
        }
    }
    Ok(())
}

fn batch_stats_of(input: &ActivationBatch) -> (Vec<f64>, Vec<f64>) {
    // Statistics over (batch, spatial) per channel.
    let (channels, plane) = match input.layout {
        Layout::Image { channels, height, width } => (channels, height * width),
        _ => unreachable!("batch norm input is an image"),
    };
    let count = (input.batch * plane) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for b in 0..input.batch {
        let x = input.sample(b);
        for c in 0..channels {
            for v in &x[c * plane..(c + 1) * plane] {
                mean[c] += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..input.batch {
        let x = input.sample(b);
        for c in 0..channels {
            for v in &x[c * plane..(c + 1) * plane] {
                let d = v - mean[c];
                var[c] += d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

// ---------------------------------------------------------------------------
// Unlearning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlearnVariant {
    /// Zero the forget-class components' weights.
    Zero,
    /// Negate them instead; only valid on residual paths, where the flipped
    /// branch steers the representation away from the forget class.
    Negate,
}

#[derive(Debug, Clone)]
pub struct UnlearnPlan {
    pub forget_class: usize,
    /// Tapped layers to edit.
    pub layers: Vec<usize>,
    /// Per-(layer, channel) edit budget as a fraction of the component
    /// count; zero edits nothing.
    pub k_fraction: f64,
    pub variant: UnlearnVariant,
    pub batch_size: usize,
}

impl Default for UnlearnPlan {
    fn default() -> Self {
        Self {
            forget_class: 0,
            layers: vec![],
            k_fraction: 0.1,
            variant: UnlearnVariant::Zero,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerUnlearnReport {
    pub layer: usize,
    pub k: usize,
    /// Edited components per output channel.
    pub edited: Vec<(usize, Vec<usize>)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct UnlearnReport {
    pub forget_class: usize,
    pub variant: UnlearnVariant,
    pub per_layer: Vec<LayerUnlearnReport>,
    pub forget_accuracy_before: f64,
    pub forget_accuracy_after: f64,
    pub retain_accuracy_before: f64,
    pub retain_accuracy_after: f64,
    pub metrics_before: ModelMetrics,
    pub metrics_after: ModelMetrics,
}

/// Erases the forget class: similarity statistics are estimated on
/// forget-class samples only, and per output channel the top-k components'
/// weights are zeroed (or negated). No compensation and no recalibration —
/// the point is to delete the class's carriers, not to repair the output.
pub fn modhifi_unlearn(
    model: &ModelGraph,
    plan: &UnlearnPlan,
    forget_data: &LabeledDataset,
    eval_data: &LabeledDataset,
) -> Result<(ModelGraph, UnlearnReport), ModifyError> {
    assert!((0.0..=1.0).contains(&plan.k_fraction));
    for &y in &forget_data.ys {
        if y != plan.forget_class {
            return Err(ModifyError::WrongClassData { expected: plan.forget_class, got: y });
        }
    }
    if plan.variant == UnlearnVariant::Negate {
        for &l in &plan.layers {
            if !model.has_residual_path(l) {
                return Err(ModifyError::ResidualPathRequired { layer: l });
            }
        }
    }

    let forget_eval = eval_data.filter_class(plan.forget_class);
    let retain_eval = eval_data.exclude_class(plan.forget_class);
    let metrics_before = ModelMetrics::measure(model, eval_data);
    let forget_accuracy_before = accuracy(model, &forget_eval);
    let retain_accuracy_before = accuracy(model, &retain_eval);

    let csms = estimate_csms(model, &forget_data.xs, &plan.layers, plan.batch_size)?;
    let mut edited_model = model.clone();
    let factor = match plan.variant {
        UnlearnVariant::Zero => 0.0,
        UnlearnVariant::Negate => -1.0,
    };

    let mut per_layer = Vec::with_capacity(plan.layers.len());
    for &l in &plan.layers {
        let spec = &model.layers[l];
        let (c_in, c_out) = match (spec.in_components(), spec.out_channels()) {
            (Some(i), Some(o)) => (i, o),
            _ => return Err(ModifyError::NotTappable { layer: l }),
        };
        let k = (plan.k_fraction * c_in as f64).ceil() as usize;
        let mut edited = Vec::new();
        if k > 0 {
            for c in 0..c_out {
                let csm = &csms[&(l, c)];
                if csm.is_dead() {
                    continue;
                }
                let picks = naive_topk(&singleton_scores(csm), k.min(c_in))?;
                let layer = &mut edited_model.layers[l];
                for &i in &picks {
                    scale_component(layer, c, i, factor);
                }
                edited.push((c, picks));
            }
        }
        per_layer.push(LayerUnlearnReport { layer: l, k, edited });
    }

    let metrics_after = ModelMetrics::measure(&edited_model, eval_data);
    let report = UnlearnReport {
        forget_class: plan.forget_class,
        variant: plan.variant,
        per_layer,
        forget_accuracy_before,
        forget_accuracy_after: accuracy(&edited_model, &forget_eval),
        retain_accuracy_before,
        retain_accuracy_after: accuracy(&edited_model, &retain_eval),
        metrics_before,
        metrics_after,
    };
    Ok((edited_model, report))
}

// ---------------------------------------------------------------------------
// Compaction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CompactReport {
    /// (producer layer, consumer layer, channels removed) per segment.
    pub segments: Vec<(usize, usize, usize)>,
    /// FFN blocks with removed hidden units: (layer, units removed).
    pub ffn_hidden: Vec<(usize, usize)>,
    pub params_before: usize,
    pub params_after: usize,
}

fn is_channelwise(layer: &LayerSpec) -> bool {
    matches!(
        layer,
        LayerSpec::ReLU
            | LayerSpec::Gelu
            | LayerSpec::BatchNorm2D { .. }
            | LayerSpec::AvgPool2D { .. }
    )
}

fn zero_input_components(layer: &LayerSpec) -> Vec<usize> {
    match layer {
        LayerSpec::Dense { weight, .. } => (0..weight.cols())
            .filter(|&i| (0..weight.rows()).all(|c| weight.get(c, i) == 0.0))
            .collect(),
        LayerSpec::Conv2D { in_channels, out_channels, kernel, weight, .. } => {
            let ksq = kernel * kernel;
            (0..*in_channels)
                .filter(|&i| {
                    (0..*out_channels).all(|c| {
                        weight[(c * in_channels + i) * ksq..(c * in_channels + i + 1) * ksq]
                            .iter()
                            .all(|w| *w == 0.0)
                    })
                })
                .collect()
        }
        _ => vec![],
    }
}

/// Removes channels that no longer influence the output: an input component
/// of a linear layer whose weights are all zero is dropped together with the
/// producing unit upstream, through channelwise layers. FFN hidden units
/// with a zero down-projection row are dropped with their up-projection
/// column. Forward outputs are bit-identical.
///
/// # Errors
/// `InconsistentCoupling` if a removable channel is referenced by a residual
/// edge (the skip partner would keep the old shape).
pub fn compact(model: &ModelGraph) -> Result<(ModelGraph, CompactReport), ModifyError> {
    let params_before = model.param_count();
    let layouts = model.activation_layouts()?;
    // Planned removals: producer output channels / consumer input channels.
    let mut drop_rows: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut drop_cols: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut drop_bn: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut segments = Vec::new();

    for t in 0..model.layers.len() {
        let consumer = &model.layers[t];
        if !matches!(consumer, LayerSpec::Dense { .. } | LayerSpec::Conv2D { .. }) {
            continue;
        }
        let zeros = zero_input_components(consumer);
        if zeros.is_empty() {
            continue;
        }
        // Walk back to the producing linear layer through channelwise ops.
        let mut j = t;
        while j > 0 && is_channelwise(&model.layers[j - 1]) {
            j -= 1;
        }
        if j == 0 {
            continue; // producer is the model input
        }
        let p = j - 1;
        let producer_channels = match &model.layers[p] {
            LayerSpec::Dense { weight, .. } => weight.rows(),
            LayerSpec::Conv2D { out_channels, .. } => *out_channels,
            // A skip join produces this activation: the zeroed channel is
            // still carried by the other branch.
            LayerSpec::ResidualAdd => {
                return Err(ModifyError::InconsistentCoupling {
                    layer: t,
                    context: format!("zeroed inputs are produced by the skip join at layer {p}"),
                })
            }
            _ => continue,
        };
        // Producer channel -> consumer component group (flattening may widen).
        let group = match consumer {
            LayerSpec::Dense { weight, .. } => weight.cols() / producer_channels,
            LayerSpec::Conv2D { .. } => 1,
            _ => unreachable!("consumer is linear"),
        };
        let zero_set: BTreeSet<usize> = zeros.into_iter().collect();
        let mut removable = Vec::new();
        for ch in 0..producer_channels {
            if (0..group).all(|g| zero_set.contains(&(ch * group + g))) {
                removable.push(ch);
            }
        }
        if removable.is_empty() {
            continue;
        }
        // Activations with indices p+1..=t change shape; any residual edge
        // touching that span forbids the removal.
        for edge in &model.residual_edges {
            let source_inside = edge.source > p && edge.source <= t;
            let target_inside = edge.target > p && edge.target < t;
            if source_inside || target_inside {
                return Err(ModifyError::InconsistentCoupling {
                    layer: t,
                    context: format!(
                        "edge {} -> {} crosses the segment {}..{}",
                        edge.source, edge.target, p, t
                    ),
                });
            }
        }
        for &ch in &removable {
            drop_rows.entry(p).or_default().insert(ch);
            for g in 0..group {
                drop_cols.entry(t).or_default().insert(ch * group + g);
            }
            for (bn, layer) in model.layers.iter().enumerate().take(t).skip(p + 1) {
                if matches!(layer, LayerSpec::BatchNorm2D { .. }) {
                    drop_bn.entry(bn).or_default().insert(ch);
                }
            }
        }
        segments.push((p, t, removable.len()));
    }

    let mut layers = model.layers.clone();
    let mut ffn_hidden = Vec::new();
    for (l, layer) in layers.iter_mut().enumerate() {
        if let LayerSpec::FFNBlock { w_up, w_down, .. } = layer {
            let hidden = w_down.rows();
            let keep: Vec<usize> = (0..hidden)
                .filter(|&i| w_down.row(i).iter().any(|w| *w != 0.0))
                .collect();
            if keep.len() < hidden {
                *w_up = select_columns(w_up, &keep);
                *w_down = select_rows(w_down, &keep);
                ffn_hidden.push((l, hidden - keep.len()));
            }
        }
    }

    for (l, layer) in layers.iter_mut().enumerate() {
        let rows = drop_rows.get(&l);
        let cols = drop_cols.get(&l);
        let bn = drop_bn.get(&l);
        match layer {
            LayerSpec::Dense { weight, bias } => {
                if let Some(cols) = cols {
                    let keep: Vec<usize> =
                        (0..weight.cols()).filter(|i| !cols.contains(i)).collect();
                    *weight = select_columns(weight, &keep);
                }
                if let Some(rows) = rows {
                    let keep: Vec<usize> =
                        (0..weight.rows()).filter(|r| !rows.contains(r)).collect();
                    *weight = select_rows(weight, &keep);
                    *bias = keep.iter().map(|&r| bias[r]).collect();
                }
            }
            LayerSpec::Conv2D { in_channels, out_channels, kernel, weight, bias } => {
                let ksq = *kernel * *kernel;
                if let Some(cols) = cols {
                    let keep: Vec<usize> =
                        (0..*in_channels).filter(|i| !cols.contains(i)).collect();
                    let mut next = Vec::with_capacity(*out_channels * keep.len() * ksq);
                    for c in 0..*out_channels {
                        for &i in &keep {
                            next.extend_from_slice(
                                &weight[(c * *in_channels + i) * ksq
                                    ..(c * *in_channels + i + 1) * ksq],
                            );
                        }
                    }
                    *weight = next;
                    *in_channels = keep.len();
                }
                if let Some(rows) = rows {
                    let keep: Vec<usize> =
                        (0..*out_channels).filter(|c| !rows.contains(c)).collect();
                    let mut next = Vec::with_capacity(keep.len() * *in_channels * ksq);
                    for &c in &keep {
                        next.extend_from_slice(
                            &weight[c * *in_channels * ksq..(c + 1) * *in_channels * ksq],
                        );
                    }
                    *weight = next;
                    *bias = keep.iter().map(|&c| bias[c]).collect();
                    *out_channels = keep.len();
                }
            }
            LayerSpec::BatchNorm2D { gamma, beta, running_mean, running_var, .. } => {
                if let Some(bn) = bn {
                    let keep: Vec<usize> = (0..gamma.len()).filter(|c| !bn.contains(c)).collect();
                    *gamma = keep.iter().map(|&c| gamma[c]).collect();
                    *beta = keep.iter().map(|&c| beta[c]).collect();
                    *running_mean = keep.iter().map(|&c| running_mean[c]).collect();
                    *running_var = keep.iter().map(|&c| running_var[c]).collect();
                }
            }
            _ => {}
        }
    }

    let compacted = ModelGraph::new(
        model.input,
        layers,
        model.residual_edges.clone(),
        model.class_count,
    )?;
    let _ = layouts;
    let report = CompactReport {
        segments,
        ffn_hidden,
        params_before,
        params_after: compacted.param_count(),
    };
    Ok((compacted, report))
}

fn select_rows(m: &DenseMatrix, keep: &[usize]) -> DenseMatrix {
    let mut data = Vec::with_capacity(keep.len() * m.cols());
    for &r in keep {
        data.extend_from_slice(m.row(r));
    }
    DenseMatrix::new(keep.len(), m.cols(), data).expect("row selection is consistent")
}

fn select_columns(m: &DenseMatrix, keep: &[usize]) -> DenseMatrix {
    let mut data = Vec::with_capacity(m.rows() * keep.len());
    for r in 0..m.rows() {
        let row = m.row(r);
        for &c in keep {
            data.push(row[c]);
        }
    }
    DenseMatrix::new(m.rows(), keep.len(), data).expect("column selection is consistent")
}

// ---------------------------------------------------------------------------
// FLOP / parameter accounting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: &'static str,
    pub params: usize,
    /// Multiply-accumulates for one sample.
    pub macs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlopParamReport {
    pub per_layer: Vec<LayerCost>,
    pub total_params: usize,
    pub total_macs: usize,
}

/// Parameter and per-sample multiply-accumulate counts from shapes alone.
pub fn flop_param_report(model: &ModelGraph) -> FlopParamReport {
    let layouts = model.activation_layouts().expect("model validated");
    let mut per_layer = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let macs = match layer {
            LayerSpec::Dense { weight, .. } => weight.rows() * weight.cols(),
            LayerSpec::Conv2D { in_channels, out_channels, kernel, .. } => {
                match layouts[l + 1] {
                    Layout::Image { height, width, .. } => {
                        out_channels * in_channels * kernel * kernel * height * width
                    }
                    _ => unreachable!(),
                }
            }
            // One multiply per element for the affine map.
            LayerSpec::BatchNorm2D { .. } => layouts[l].size(),
            // Norm + scale: two multiplies per element.
            LayerSpec::LayerNorm { .. } | LayerSpec::RmsNorm { .. } => 2 * layouts[l].size(),
            LayerSpec::ReLU | LayerSpec::Gelu | LayerSpec::ResidualAdd => 0,
            // One rescale per pooled output element.
            LayerSpec::AvgPool2D { .. } => layouts[l + 1].size(),
            LayerSpec::FFNBlock { gamma, w_up, .. } => {
                let tokens = layouts[l].size() / gamma.len();
                let d = gamma.len();
                let hidden = w_up.cols();
                tokens * (2 * d + 2 * d * hidden)
            }
        };
        per_layer.push(LayerCost { layer: l, kind: layer.kind_name(), params: layer.param_count(), macs });
    }
    let total_params = per_layer.iter().map(|c| c.params).sum();
    let total_macs = per_layer.iter().map(|c| c.macs).sum();
    FlopParamReport { per_layer, total_params, total_macs }
}
