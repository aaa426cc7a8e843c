//! Forward evaluation and per-component input-contribution taps.
//!
//! A tapped layer's pre-activation output channel decomposes into a sum of
//! additive contributions, one per input component: dense rows split by input
//! feature, convolution outputs by convolved input channel, and the FFN
//! down-projection by intermediate neuron. Bias terms are affine offsets that
//! survive any weight modification unchanged, so taps and the recorded linear
//! output exclude them.

use super::{ActivationBatch, LayerSpec, Layout, ModelError, ModelGraph, NormKind};
use crate::numerics::DenseMatrix;

/// How batch normalization statistics are sourced during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BnMode {
    /// Use the stored running statistics (deployment behavior).
    Inference,
    /// Use statistics of the current batch (training / recalibration).
    BatchStats,
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Accumulates the size-preserving cross-correlation of `input` (h x w) with
/// `kernel` (k x k, zero-padded) into `out`.
pub(crate) fn corr2d_same_accum(
    input: &[f64],
    h: usize,
    w: usize,
    kernel: &[f64],
    k: usize,
    out: &mut [f64],
) {
    let pad = (k / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for a in 0..k {
                let iy = y as isize + a as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let row = &input[iy as usize * w..(iy as usize + 1) * w];
                for b in 0..k {
                    let ix = x as isize + b as isize - pad;
                    if ix >= 0 && ix < w as isize {
                        s += row[ix as usize] * kernel[a * k + b];
                    }
                }
            }
            out[y * w + x] += s;
        }
    }
}

/// Centering followed by projection to the unit sphere and the affine map:
/// writes `gamma * z/|z| + beta` into `out` for one row.
pub(crate) fn norm_row(
    kind: NormKind,
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
) {
    let d = x.len();
    let mut z: Vec<f64> = x.to_vec();
    if kind == NormKind::LayerNorm {
        let mean = x.iter().sum::<f64>() / d as f64;
        z.iter_mut().for_each(|v| *v -= mean);
    }
    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    for i in 0..d {
        out[i] = gamma[i] * z[i] / n + beta[i];
    }
}

/// Per-channel mean and (biased) variance of an image batch.
pub(crate) fn batch_channel_stats(input: &ActivationBatch) -> (Vec<f64>, Vec<f64>) {
    let (channels, height, width) = match input.layout {
        Layout::Image { channels, height, width } => (channels, height, width),
        _ => unreachable!("batch norm requires image layout"),
    };
    let plane = height * width;
    let count = (input.batch * plane) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for b in 0..input.batch {
        let sample = input.sample(b);
        for c in 0..channels {
            for v in &sample[c * plane..(c + 1) * plane] {
                mean[c] += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..input.batch {
        let sample = input.sample(b);
        for c in 0..channels {
            for v in &sample[c * plane..(c + 1) * plane] {
                let d = v - mean[c];
                var[c] += d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Evaluates one layer. `skip` is the source activation for a residual-add
/// layer, ignored otherwise.
pub(crate) fn eval_layer(
    layer: &LayerSpec,
    input: &ActivationBatch,
    skip: Option<&ActivationBatch>,
    mode: BnMode,
) -> Result<ActivationBatch, ModelError> {
    let out_layout = layer.output_layout(&input.layout)?;
    let batch = input.batch;
    let mut out = ActivationBatch::zeros(out_layout, batch);
    match layer {
        LayerSpec::Dense { weight, bias } => {
            let (rows, cols) = (weight.rows(), weight.cols());
            for b in 0..batch {
                let x = input.sample(b);
                let y = &mut out.data[b * rows..(b + 1) * rows];
                for r in 0..rows {
                    let wrow = weight.row(r);
                    let mut s = bias[r];
                    for c in 0..cols {
                        s += wrow[c] * x[c];
                    }
                    y[r] = s;
                }
            }
        }
        LayerSpec::Conv2D { in_channels, out_channels, kernel, weight, bias } => {
            let (h, w) = match input.layout {
                Layout::Image { height, width, .. } => (height, width),
                _ => unreachable!(),
            };
            let plane = h * w;
            let ksq = kernel * kernel;
            for b in 0..batch {
                let x = input.sample(b);
                let y_off = b * out_channels * plane;
                for c in 0..*out_channels {
                    let y = &mut out.data[y_off + c * plane..y_off + (c + 1) * plane];
                    y.fill(bias[c]);
                    for i in 0..*in_channels {
                        let kern = &weight[(c * in_channels + i) * ksq..][..ksq];
                        corr2d_same_accum(&x[i * plane..(i + 1) * plane], h, w, kern, *kernel, y);
                    }
                }
            }
        }
        LayerSpec::BatchNorm2D { gamma, beta, running_mean, running_var, eps } => {
            let (channels, h, w) = match input.layout {
                Layout::Image { channels, height, width } => (channels, height, width),
                _ => unreachable!(),
            };
            let plane = h * w;
            let (mean, var) = match mode {
                BnMode::Inference => (running_mean.clone(), running_var.clone()),
                BnMode::BatchStats => batch_channel_stats(input),
            };
            for b in 0..batch {
                let x = input.sample(b);
                let y = &mut out.data[b * channels * plane..(b + 1) * channels * plane];
                for c in 0..channels {
                    let scale = gamma[c] / (var[c] + eps).sqrt();
                    let shift = beta[c] - mean[c] * scale;
                    for m in 0..plane {
                        y[c * plane + m] = x[c * plane + m] * scale + shift;
                    }
                }
            }
        }
        LayerSpec::LayerNorm { gamma, beta } | LayerSpec::RmsNorm { gamma, beta } => {
            let kind = if matches!(layer, LayerSpec::LayerNorm { .. }) {
                NormKind::LayerNorm
            } else {
                NormKind::RmsNorm
            };
            let d = gamma.len();
            let rows_per_sample = input.layout.size() / d;
            for b in 0..batch {
                let x = input.sample(b);
                let y = &mut out.data[b * input.layout.size()..(b + 1) * input.layout.size()];
                for t in 0..rows_per_sample {
                    norm_row(kind, &x[t * d..(t + 1) * d], gamma, beta, &mut y[t * d..(t + 1) * d]);
                }
            }
        }
        LayerSpec::ReLU => {
            for (o, x) in out.data.iter_mut().zip(&input.data) {
                *o = x.max(0.0);
            }
        }
        LayerSpec::Gelu => {
            for (o, x) in out.data.iter_mut().zip(&input.data) {
                *o = gelu(*x);
            }
        }
        LayerSpec::AvgPool2D { pool } => {
            let (channels, h, w) = match input.layout {
                Layout::Image { channels, height, width } => (channels, height, width),
                _ => unreachable!(),
            };
            let (oh, ow) = (h / pool, w / pool);
            let inv = 1.0 / ((pool * pool) as f64);
            for b in 0..batch {
                let x = input.sample(b);
                let y = &mut out.data[b * channels * oh * ow..(b + 1) * channels * oh * ow];
                for c in 0..channels {
                    for py in 0..oh {
                        for px in 0..ow {
                            let mut s = 0.0;
                            for dy in 0..*pool {
                                for dx in 0..*pool {
                                    s += x[c * h * w + (py * pool + dy) * w + (px * pool + dx)];
                                }
                            }
                            y[c * oh * ow + py * ow + px] = s * inv;
                        }
                    }
                }
            }
        }
        LayerSpec::ResidualAdd => {
            let skip = skip.expect("residual_add requires a skip activation");
            for (o, (x, s)) in out.data.iter_mut().zip(input.data.iter().zip(&skip.data)) {
                *o = x + s;
            }
        }
        LayerSpec::FFNBlock { norm, gamma, beta, w_up, w_down } => {
            let d = gamma.len();
            let rows_per_sample = input.layout.size() / d;
            let hidden = w_up.cols();
            let mut z = vec![0.0; d];
            let mut act = vec![0.0; hidden];
            for b in 0..batch {
                let x = input.sample(b);
                let y = &mut out.data[b * input.layout.size()..(b + 1) * input.layout.size()];
                for t in 0..rows_per_sample {
                    let row = &x[t * d..(t + 1) * d];
                    norm_row(*norm, row, gamma, beta, &mut z);
                    for j in 0..hidden {
                        let mut s = 0.0;
                        for i in 0..d {
                            s += z[i] * w_up.get(i, j);
                        }
                        act[j] = gelu(s);
                    }
                    let yrow = &mut y[t * d..(t + 1) * d];
                    yrow.copy_from_slice(row);
                    for j in 0..hidden {
                        let a = act[j];
                        if a == 0.0 {
                            continue;
                        }
                        let wrow = w_down.row(j);
                        for c in 0..d {
                            yrow[c] += a * wrow[c];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Runs the whole chain, returning every activation (index 0 = input).
pub(crate) fn eval_chain(
    model: &ModelGraph,
    batch: &ActivationBatch,
    mode: BnMode,
) -> Result<Vec<ActivationBatch>, ModelError> {
    if batch.layout.size() != model.input.size() {
        return Err(ModelError::ShapeMismatch {
            context: "model input".into(),
            expected: format!("{}", model.input),
            got: format!("{}", batch.layout),
        });
    }
    let mut acts: Vec<ActivationBatch> = Vec::with_capacity(model.layers.len() + 1);
    acts.push(batch.clone());
    for (l, layer) in model.layers.iter().enumerate() {
        let skip = model.edge_into(l).map(|e| e.source);
        let out = {
            let input = acts.last().unwrap();
            let skip_act = skip.map(|s| &acts[s]);
            eval_layer(layer, input, skip_act, mode)?
        };
        if !out.is_finite() {
            return Err(ModelError::NonFiniteActivation { layer: l });
        }
        acts.push(out);
    }
    Ok(acts)
}

/// All intermediate activations in inference mode. Useful for measuring
/// pre-normalization input norms and recalibration targets.
pub fn forward_activations(
    model: &ModelGraph,
    batch: &ActivationBatch,
) -> Result<Vec<ActivationBatch>, ModelError> {
    eval_chain(model, batch, BnMode::Inference)
}

/// Input-contribution taps for one tapped layer over a batch: the additive
/// term from every input component to every output channel, plus the summed
/// bias-free linear output for reconstruction checks.
#[derive(Debug, Clone)]
pub struct LayerTaps {
    pub layer: usize,
    pub out_channels: usize,
    pub in_components: usize,
    /// Scalars per contribution: spatial map size for convolutions, token
    /// count for FFN blocks, 1 for dense layers.
    pub map_size: usize,
    pub batch: usize,
    values: Vec<f64>,
    linear: Vec<f64>,
}

impl LayerTaps {
    /// Contribution of component `i` to channel `c` for sample `b`.
    pub fn contribution(&self, c: usize, i: usize, b: usize) -> &[f64] {
        let off = (((c * self.in_components) + i) * self.batch + b) * self.map_size;
        &self.values[off..off + self.map_size]
    }

    /// All samples' contributions of component `i` to channel `c`,
    /// `batch * map_size` scalars, sample-major.
    pub fn contribution_block(&self, c: usize, i: usize) -> &[f64] {
        let off = ((c * self.in_components) + i) * self.batch * self.map_size;
        &self.values[off..off + self.batch * self.map_size]
    }

    /// Bias-free linear output of channel `c` for sample `b` (the sum of all
    /// contributions).
    pub fn linear_output(&self, c: usize, b: usize) -> &[f64] {
        let off = (c * self.batch + b) * self.map_size;
        &self.linear[off..off + self.map_size]
    }

    /// Iterates over per-(channel, component) contribution views.
    pub fn iter(&self) -> impl Iterator<Item = ContributionTap<'_>> + '_ {
        (0..self.out_channels).flat_map(move |c| {
            (0..self.in_components).map(move |i| ContributionTap {
                layer: self.layer,
                channel: c,
                component: i,
                batch: self.batch,
                map_size: self.map_size,
                values: self.contribution_block(c, i),
            })
        })
    }
}

/// View of one (channel, component) contribution across a batch.
#[derive(Debug, Clone, Copy)]
pub struct ContributionTap<'a> {
    pub layer: usize,
    pub channel: usize,
    pub component: usize,
    pub batch: usize,
    pub map_size: usize,
    /// `batch * map_size` scalars, sample-major.
    pub values: &'a [f64],
}

/// Output of [`forward`]: pre-softmax logits and any requested taps.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// `batch x class_count`.
    pub logits: DenseMatrix,
    pub taps: Vec<LayerTaps>,
}

fn compute_taps(
    model: &ModelGraph,
    layer_idx: usize,
    input: &ActivationBatch,
) -> Result<LayerTaps, ModelError> {
    let layer = &model.layers[layer_idx];
    let batch = input.batch;
    match layer {
        LayerSpec::Dense { weight, .. } => {
            let (rows, cols) = (weight.rows(), weight.cols());
            let mut values = vec![0.0; rows * cols * batch];
            let mut linear = vec![0.0; rows * batch];
            for b in 0..batch {
                let x = input.sample(b);
                for c in 0..rows {
                    let wrow = weight.row(c);
                    let mut s = 0.0;
                    for i in 0..cols {
                        let a = wrow[i] * x[i];
                        values[(c * cols + i) * batch + b] = a;
                        s += a;
                    }
                    linear[c * batch + b] = s;
                }
            }
            Ok(LayerTaps {
                layer: layer_idx,
                out_channels: rows,
                in_components: cols,
                map_size: 1,
                batch,
                values,
                linear,
            })
        }
        LayerSpec::Conv2D { in_channels, out_channels, kernel, weight, .. } => {
            let (h, w) = match input.layout {
                Layout::Image { height, width, .. } => (height, width),
                _ => unreachable!(),
            };
            let plane = h * w;
            let ksq = kernel * kernel;
            let mut values = vec![0.0; out_channels * in_channels * batch * plane];
            let mut linear = vec![0.0; out_channels * batch * plane];
            for b in 0..batch {
                let x = input.sample(b);
                for c in 0..*out_channels {
                    for i in 0..*in_channels {
                        let kern = &weight[(c * in_channels + i) * ksq..][..ksq];
                        let off = ((c * in_channels + i) * batch + b) * plane;
                        corr2d_same_accum(
                            &x[i * plane..(i + 1) * plane],
                            h,
                            w,
                            kern,
                            *kernel,
                            &mut values[off..off + plane],
                        );
                        let lin_off = (c * batch + b) * plane;
                        for m in 0..plane {
                            linear[lin_off + m] += values[off + m];
                        }
                    }
                }
            }
            Ok(LayerTaps {
                layer: layer_idx,
                out_channels: *out_channels,
                in_components: *in_channels,
                map_size: plane,
                batch,
                values,
                linear,
            })
        }
        LayerSpec::FFNBlock { norm, gamma, beta, w_up, w_down } => {
            let d = gamma.len();
            let tokens = input.layout.size() / d;
            let hidden = w_up.cols();
            let mut values = vec![0.0; d * hidden * batch * tokens];
            let mut linear = vec![0.0; d * batch * tokens];
            let mut z = vec![0.0; d];
            let mut act = vec![0.0; hidden];
            for b in 0..batch {
                let x = input.sample(b);
                for t in 0..tokens {
                    norm_row(*norm, &x[t * d..(t + 1) * d], gamma, beta, &mut z);
                    for j in 0..hidden {
                        let mut s = 0.0;
                        for i in 0..d {
                            s += z[i] * w_up.get(i, j);
                        }
                        act[j] = gelu(s);
                    }
                    for c in 0..d {
                        let mut s = 0.0;
                        for j in 0..hidden {
                            let a = act[j] * w_down.get(j, c);
                            values[((c * hidden + j) * batch + b) * tokens + t] = a;
                            s += a;
                        }
                        linear[(c * batch + b) * tokens + t] = s;
                    }
                }
            }
            Ok(LayerTaps {
                layer: layer_idx,
                out_channels: d,
                in_components: hidden,
                map_size: tokens,
                batch,
                values,
                linear,
            })
        }
        other => Err(ModelError::NonTappable { layer: layer_idx, kind: other.kind_name() }),
    }
}

/// Forward pass in inference mode.
///
/// Returns pre-softmax logits and, for each layer id in `tap_layers`, the
/// full set of input contributions.
///
/// # Errors
/// `ShapeMismatch` for layout problems, `NonFiniteActivation` when values
/// explode, `NonTappable`/`BadLayerId` for invalid tap requests.
pub fn forward(
    model: &ModelGraph,
    batch: &ActivationBatch,
    tap_layers: &[usize],
) -> Result<ForwardResult, ModelError> {
    for &l in tap_layers {
        if l >= model.layers.len() {
            return Err(ModelError::BadLayerId { layer: l, len: model.layers.len() });
        }
        if !model.layers[l].tappable() {
            return Err(ModelError::NonTappable { layer: l, kind: model.layers[l].kind_name() });
        }
    }
    let acts = eval_chain(model, batch, BnMode::Inference)?;
    let mut taps = Vec::with_capacity(tap_layers.len());
    for &l in tap_layers {
        taps.push(compute_taps(model, l, &acts[l])?);
    }
    let last = acts.last().unwrap();
    let logits = DenseMatrix::new(batch.batch, model.class_count, last.data.clone())
        .expect("head size validated");
    Ok(ForwardResult { logits, taps })
}
