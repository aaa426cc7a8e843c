//! Momentum-SGD trainer with cross-entropy loss, used solely to manufacture
//! well-trained desk-scale fixtures. The modification pipeline never calls
//! into this module.

use super::forward::{batch_channel_stats, eval_chain, gelu, gelu_grad, BnMode};
use super::{ActivationBatch, LayerSpec, Layout, ModelError, ModelGraph, NormKind};
use crate::data::LabeledDataset;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Momentum factor for the running batch-norm statistics during training.
const BN_STATS_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: ModelGraph,
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Per-layer side products of the training-mode forward pass that backward
/// needs beyond the activations themselves.
enum Extra {
    None,
    BatchNorm { mean: Vec<f64>, var: Vec<f64> },
    Ffn {
        /// Unit-normalized rows, `batch * tokens * dim`.
        zhat: Vec<f64>,
        /// Norm of each (possibly centered) row, `batch * tokens`.
        znorm: Vec<f64>,
        /// Pre-activation hidden rows, `batch * tokens * hidden`.
        hidden_pre: Vec<f64>,
        /// gelu(hidden_pre).
        hidden_act: Vec<f64>,
    },
}

/// Training-mode forward: batch statistics for batch norm, plus caches.
fn train_forward(
    model: &ModelGraph,
    batch: &ActivationBatch,
) -> Result<(Vec<ActivationBatch>, Vec<Extra>), ModelError> {
    let mut acts: Vec<ActivationBatch> = Vec::with_capacity(model.layers.len() + 1);
    let mut extras: Vec<Extra> = Vec::with_capacity(model.layers.len());
    acts.push(batch.clone());
    for (l, layer) in model.layers.iter().enumerate() {
        let out = match layer {
            LayerSpec::BatchNorm2D { gamma, beta, eps, .. } => {
                let input = acts.last().unwrap();
                let (mean, var) = batch_channel_stats(input);
                let (channels, plane) = match input.layout {
                    Layout::Image { channels, height, width } => (channels, height * width),
                    _ => unreachable!(),
                };
                let mut out = ActivationBatch::zeros(input.layout, input.batch);
                for b in 0..input.batch {
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
                extras.push(Extra::BatchNorm { mean, var });
                out
            }
            LayerSpec::FFNBlock { norm, gamma, beta, w_up, w_down } => {
                let input = acts.last().unwrap();
                let d = gamma.len();
                let tokens = input.layout.size() / d;
                let hidden = w_up.cols();
                let rows = input.batch * tokens;
                let mut zhat = vec![0.0; rows * d];
                let mut znorm = vec![0.0; rows];
                let mut hidden_pre = vec![0.0; rows * hidden];
                let mut hidden_act = vec![0.0; rows * hidden];
                let mut out = ActivationBatch::zeros(input.layout, input.batch);
                for b in 0..input.batch {
                    let x = input.sample(b);
                    for t in 0..tokens {
                        let r = b * tokens + t;
                        let row = &x[t * d..(t + 1) * d];
                        let zh = &mut zhat[r * d..(r + 1) * d];
                        zh.copy_from_slice(row);
                        if *norm == NormKind::LayerNorm {
                            let mean = row.iter().sum::<f64>() / d as f64;
                            zh.iter_mut().for_each(|v| *v -= mean);
                        }
                        let n = zh.iter().map(|v| v * v).sum::<f64>().sqrt();
                        znorm[r] = n;
                        zh.iter_mut().for_each(|v| *v /= n);
                        let hp = &mut hidden_pre[r * hidden..(r + 1) * hidden];
                        for j in 0..hidden {
                            let mut s = 0.0;
                            for i in 0..d {
                                s += (gamma[i] * zh[i] + beta[i]) * w_up.get(i, j);
                            }
                            hp[j] = s;
                            hidden_act[r * hidden + j] = gelu(s);
                        }
                        let y = &mut out.data[b * tokens * d + t * d..b * tokens * d + (t + 1) * d];
                        y.copy_from_slice(row);
                        for j in 0..hidden {
                            let a = hidden_act[r * hidden + j];
                            if a == 0.0 {
                                continue;
                            }
                            let wrow = w_down.row(j);
                            for c in 0..d {
                                y[c] += a * wrow[c];
                            }
                        }
                    }
                }
                extras.push(Extra::Ffn { zhat, znorm, hidden_pre, hidden_act });
                out
            }
            _ => {
                let input = acts.last().unwrap();
                let skip = model.edge_into(l).map(|e| &acts[e.source]);
                let out = super::forward::eval_layer(layer, input, skip, BnMode::BatchStats)?;
                extras.push(Extra::None);
                out
            }
        };
        if !out.is_finite() {
            return Err(ModelError::NonFiniteActivation { layer: l });
        }
        acts.push(out);
    }
    Ok((acts, extras))
}

/// Backward pass. `grad_out` is the loss gradient w.r.t. the final
/// activation. Returns per-layer parameter gradients aligned with
/// `trainable_params_mut` order.
fn train_backward(
    model: &ModelGraph,
    acts: &[ActivationBatch],
    extras: &[Extra],
    grad_out: Vec<f64>,
) -> Vec<Vec<Vec<f64>>> {
    let n_layers = model.layers.len();
    let mut grad_acts: Vec<Vec<f64>> = acts.iter().map(|a| vec![0.0; a.data.len()]).collect();
    grad_acts[n_layers] = grad_out;
    let mut param_grads: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_layers];

    for l in (0..n_layers).rev() {
        let g = std::mem::take(&mut grad_acts[l + 1]);
        let input = &acts[l];
        let batch = input.batch;
        match &model.layers[l] {
            LayerSpec::Dense { weight, bias } => {
                let (rows, cols) = (weight.rows(), weight.cols());
                let mut gw = vec![0.0; rows * cols];
                let mut gb = vec![0.0; bias.len()];
                let gin = &mut grad_acts[l];
                for b in 0..batch {
                    let x = input.sample(b);
                    let go = &g[b * rows..(b + 1) * rows];
                    for c in 0..rows {
                        let gc = go[c];
                        gb[c] += gc;
                        if gc == 0.0 {
                            continue;
                        }
                        let wrow = weight.row(c);
                        for i in 0..cols {
                            gw[c * cols + i] += gc * x[i];
                            gin[b * cols + i] += gc * wrow[i];
                        }
                    }
                }
                param_grads[l] = vec![gw, gb];
            }
            LayerSpec::Conv2D { in_channels, out_channels, kernel, weight, .. } => {
                let (h, w) = match input.layout {
                    Layout::Image { height, width, .. } => (height, width),
                    _ => unreachable!(),
                };
                let plane = h * w;
                let ksq = kernel * kernel;
                let pad = (kernel / 2) as isize;
                let mut gw = vec![0.0; weight.len()];
                let mut gb = vec![0.0; *out_channels];
                let gin = &mut grad_acts[l];
                for b in 0..batch {
                    let x = input.sample(b);
                    let go = &g[b * out_channels * plane..(b + 1) * out_channels * plane];
                    let gx = &mut gin[b * in_channels * plane..(b + 1) * in_channels * plane];
                    for c in 0..*out_channels {
                        let gc = &go[c * plane..(c + 1) * plane];
                        gb[c] += gc.iter().sum::<f64>();
                        for i in 0..*in_channels {
                            let xi = &x[i * plane..(i + 1) * plane];
                            let gxi = &mut gx[i * plane..(i + 1) * plane];
                            let wk = &weight[(c * in_channels + i) * ksq..][..ksq];
                            let gwk = &mut gw[(c * in_channels + i) * ksq..][..ksq];
                            for y in 0..h {
                                for xx in 0..w {
                                    let gv = gc[y * w + xx];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for a in 0..*kernel {
                                        let iy = y as isize + a as isize - pad;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for bb in 0..*kernel {
                                            let ix = xx as isize + bb as isize - pad;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let idx = iy as usize * w + ix as usize;
                                            gwk[a * kernel + bb] += gv * xi[idx];
                                            gxi[idx] += gv * wk[a * kernel + bb];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                param_grads[l] = vec![gw, gb];
            }
            LayerSpec::BatchNorm2D { gamma, eps, .. } => {
                let (mean, var) = match &extras[l] {
                    Extra::BatchNorm { mean, var } => (mean, var),
                    _ => unreachable!(),
                };
                let (channels, plane) = match input.layout {
                    Layout::Image { channels, height, width } => (channels, height * width),
                    _ => unreachable!(),
                };
                let count = (batch * plane) as f64;
                let mut ggamma = vec![0.0; channels];
                let mut gbeta = vec![0.0; channels];
                let gin = &mut grad_acts[l];
                for c in 0..channels {
                    let inv_std = 1.0 / (var[c] + eps).sqrt();
                    // Accumulate the channel-wide sums first.
                    let mut sum_gxhat = 0.0;
                    let mut sum_gxhat_xhat = 0.0;
                    for b in 0..batch {
                        let x = input.sample(b);
                        let go = &g[b * channels * plane..(b + 1) * channels * plane];
                        for m in 0..plane {
                            let xhat = (x[c * plane + m] - mean[c]) * inv_std;
                            let gv = go[c * plane + m];
                            gbeta[c] += gv;
                            ggamma[c] += gv * xhat;
                            sum_gxhat += gv * gamma[c];
                            sum_gxhat_xhat += gv * gamma[c] * xhat;
                        }
                    }
                    for b in 0..batch {
                        let x = input.sample(b);
                        let go = &g[b * channels * plane..(b + 1) * channels * plane];
                        let gx = &mut gin[b * channels * plane..(b + 1) * channels * plane];
                        for m in 0..plane {
                            let xhat = (x[c * plane + m] - mean[c]) * inv_std;
                            let gxhat = go[c * plane + m] * gamma[c];
                            gx[c * plane + m] += inv_std
                                * (gxhat - sum_gxhat / count - xhat * sum_gxhat_xhat / count);
                        }
                    }
                }
                param_grads[l] = vec![ggamma, gbeta];
            }
            LayerSpec::LayerNorm { gamma, .. } | LayerSpec::RmsNorm { gamma, .. } => {
                let centered = matches!(&model.layers[l], LayerSpec::LayerNorm { .. });
                let d = gamma.len();
                let rows = input.data.len() / d;
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let gin = &mut grad_acts[l];
                for r in 0..rows {
                    let x = &input.data[r * d..(r + 1) * d];
                    let go = &g[r * d..(r + 1) * d];
                    let mut z: Vec<f64> = x.to_vec();
                    if centered {
                        let m = x.iter().sum::<f64>() / d as f64;
                        z.iter_mut().for_each(|v| *v -= m);
                    }
                    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let zhat: Vec<f64> = z.iter().map(|v| v / n).collect();
                    let mut dot = 0.0;
                    for i in 0..d {
                        gbeta[i] += go[i];
                        ggamma[i] += go[i] * zhat[i];
                        dot += go[i] * gamma[i] * zhat[i];
                    }
                    let gx = &mut gin[r * d..(r + 1) * d];
                    let mut dz_sum = 0.0;
                    let mut dz = vec![0.0; d];
                    for i in 0..d {
                        dz[i] = (go[i] * gamma[i] - zhat[i] * dot) / n;
                        dz_sum += dz[i];
                    }
                    for i in 0..d {
                        gx[i] += if centered { dz[i] - dz_sum / d as f64 } else { dz[i] };
                    }
                }
                param_grads[l] = vec![ggamma, gbeta];
            }
            LayerSpec::ReLU => {
                let gin = &mut grad_acts[l];
                for (i, x) in input.data.iter().enumerate() {
                    if *x > 0.0 {
                        gin[i] += g[i];
                    }
                }
                param_grads[l] = vec![];
            }
            LayerSpec::Gelu => {
                let gin = &mut grad_acts[l];
                for (i, x) in input.data.iter().enumerate() {
                    gin[i] += g[i] * gelu_grad(*x);
                }
                param_grads[l] = vec![];
            }
            LayerSpec::AvgPool2D { pool } => {
                let (channels, h, w) = match input.layout {
                    Layout::Image { channels, height, width } => (channels, height, width),
                    _ => unreachable!(),
                };
                let (oh, ow) = (h / pool, w / pool);
                let inv = 1.0 / ((pool * pool) as f64);
                let gin = &mut grad_acts[l];
                for b in 0..batch {
                    let go = &g[b * channels * oh * ow..(b + 1) * channels * oh * ow];
                    let gx = &mut gin[b * channels * h * w..(b + 1) * channels * h * w];
                    for c in 0..channels {
                        for py in 0..oh {
                            for px in 0..ow {
                                let gv = go[c * oh * ow + py * ow + px] * inv;
                                for dy in 0..*pool {
                                    for dx in 0..*pool {
                                        gx[c * h * w + (py * pool + dy) * w + (px * pool + dx)] +=
                                            gv;
                                    }
                                }
                            }
                        }
                    }
                }
                param_grads[l] = vec![];
            }
            LayerSpec::ResidualAdd => {
                let source = model.edge_into(l).expect("validated").source;
                for (i, gv) in g.iter().enumerate() {
                    grad_acts[l][i] += gv;
                }
                for (i, gv) in g.iter().enumerate() {
                    grad_acts[source][i] += gv;
                }
                param_grads[l] = vec![];
            }
            LayerSpec::FFNBlock { gamma, w_up, w_down, .. } => {
                let (zhat, znorm, hidden_pre, hidden_act) = match &extras[l] {
                    Extra::Ffn { zhat, znorm, hidden_pre, hidden_act } => {
                        (zhat, znorm, hidden_pre, hidden_act)
                    }
                    _ => unreachable!(),
                };
                let centered = matches!(
                    &model.layers[l],
                    LayerSpec::FFNBlock { norm: NormKind::LayerNorm, .. }
                );
                let d = gamma.len();
                let hidden = w_up.cols();
                let rows = input.data.len() / d;
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut gwu = vec![0.0; d * hidden];
                let mut gwd = vec![0.0; hidden * d];
                let gin = &mut grad_acts[l];
                for r in 0..rows {
                    let go = &g[r * d..(r + 1) * d];
                    let zh = &zhat[r * d..(r + 1) * d];
                    let hp = &hidden_pre[r * hidden..(r + 1) * hidden];
                    let ha = &hidden_act[r * hidden..(r + 1) * hidden];
                    // Residual: the input receives go directly.
                    let gx = &mut gin[r * d..(r + 1) * d];
                    for c in 0..d {
                        gx[c] += go[c];
                    }
                    // Down projection.
                    let mut gh = vec![0.0; hidden];
                    for j in 0..hidden {
                        let wrow = w_down.row(j);
                        let mut s = 0.0;
                        for c in 0..d {
                            s += go[c] * wrow[c];
                            gwd[j * d + c] += ha[j] * go[c];
                        }
                        gh[j] = s * gelu_grad(hp[j]);
                    }
                    // Up projection: input row is the affine-normed vector.
                    let mut gnormed = vec![0.0; d];
                    for i in 0..d {
                        let normed_i = gamma[i] * zh[i]
                            + match &model.layers[l] {
                                LayerSpec::FFNBlock { beta, .. } => beta[i],
                                _ => unreachable!(),
                            };
                        let mut s = 0.0;
                        for j in 0..hidden {
                            s += gh[j] * w_up.get(i, j);
                            gwu[i * hidden + j] += normed_i * gh[j];
                        }
                        gnormed[i] = s;
                    }
                    // Affine and unit-norm backward.
                    let n = znorm[r];
                    let mut dot = 0.0;
                    for i in 0..d {
                        gbeta[i] += gnormed[i];
                        ggamma[i] += gnormed[i] * zh[i];
                        dot += gnormed[i] * gamma[i] * zh[i];
                    }
                    let mut dz = vec![0.0; d];
                    let mut dz_sum = 0.0;
                    for i in 0..d {
                        dz[i] = (gnormed[i] * gamma[i] - zh[i] * dot) / n;
                        dz_sum += dz[i];
                    }
                    for i in 0..d {
                        gx[i] += if centered { dz[i] - dz_sum / d as f64 } else { dz[i] };
                    }
                }
                param_grads[l] = vec![ggamma, gbeta, gwu, gwd];
            }
        }
    }
    param_grads
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
fn cross_entropy(logits: &[f64], classes: usize, ys: &[usize]) -> (f64, Vec<f64>) {
    let batch = ys.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for b in 0..batch {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += -(row[ys[b]] - max - z.ln());
        for c in 0..classes {
            let p = exps[c] / z;
            grad[b * classes + c] = (p - if c == ys[b] { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    (loss / batch as f64, grad)
}

fn update_running_bn_stats(model: &mut ModelGraph, acts: &[ActivationBatch]) {
    for (l, layer) in model.layers.iter_mut().enumerate() {
        if let LayerSpec::BatchNorm2D { running_mean, running_var, .. } = layer {
            let (mean, var) = batch_channel_stats(&acts[l]);
            for c in 0..mean.len() {
                running_mean[c] = (1.0 - BN_STATS_MOMENTUM) * running_mean[c]
                    + BN_STATS_MOMENTUM * mean[c];
                running_var[c] =
                    (1.0 - BN_STATS_MOMENTUM) * running_var[c] + BN_STATS_MOMENTUM * var[c];
            }
        }
    }
}

/// Trains a copy of `model` on `data` with momentum SGD and cross-entropy.
///
/// Deterministic for a fixed config seed. `epochs == 0` returns the weights
/// unchanged.
///
/// # Errors
/// `Divergence` when the epoch loss turns non-finite; shape errors propagate.
pub fn train(
    model: &ModelGraph,
    data: &LabeledDataset,
    config: &TrainConfig,
) -> Result<TrainResult, ModelError> {
    assert!(!data.is_empty(), "training data must be nonempty");
    assert!(config.batch_size >= 1);
    assert!((0.0..1.0).contains(&config.momentum));
    assert!(config.learning_rate > 0.0);
    if data.class_count != model.class_count {
        return Err(ModelError::ShapeMismatch {
            context: "training data".into(),
            expected: format!("{} classes", model.class_count),
            got: format!("{}", data.class_count),
        });
    }
    let mut trained = model.clone();
    let mut velocity: Vec<Vec<Vec<f64>>> = trained
        .layers
        .iter_mut()
        .map(|l| l.trainable_params_mut().iter().map(|p| vec![0.0; p.len()]).collect())
        .collect();
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let samples: Vec<Vec<f64>> = chunk.iter().map(|&i| data.xs[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| data.ys[i]).collect();
            let batch = ActivationBatch::from_samples(data.layout, &samples)?;
            let (acts, extras) = train_forward(&trained, &batch)?;
            update_running_bn_stats(&mut trained, &acts);
            let logits = &acts.last().unwrap().data;
            let (loss, grad_logits) = cross_entropy(logits, trained.class_count, &ys);
            epoch_loss += loss * ys.len() as f64;
            seen += ys.len();
            let grads = train_backward(&trained, &acts, &extras, grad_logits);
            for (l, layer) in trained.layers.iter_mut().enumerate() {
                let params = layer.trainable_params_mut();
                for ((param, vel), grad) in
                    params.into_iter().zip(&mut velocity[l]).zip(&grads[l])
                {
                    for i in 0..param.len() {
                        let g = grad[i] + config.weight_decay * param[i];
                        vel[i] = config.momentum * vel[i] + g;
                        param[i] -= config.learning_rate * vel[i];
                    }
                }
            }
        }
        let mean_loss = epoch_loss / seen as f64;
        if !mean_loss.is_finite() {
            return Err(ModelError::Divergence { epoch });
        }
        epoch_losses.push(mean_loss);
    }
    Ok(TrainResult { model: trained, epoch_losses })
}

/// Fraction of argmax-correct predictions; argmax ties resolve to the lowest
/// class index.
pub fn accuracy(model: &ModelGraph, data: &LabeledDataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let batch = data.to_batch();
    let acts = eval_chain(model, &batch, BnMode::Inference).expect("evaluation succeeds");
    let logits = &acts.last().unwrap().data;
    let classes = model.class_count;
    let mut correct = 0usize;
    for (b, &y) in data.ys.iter().enumerate() {
        if argmax(&logits[b * classes..(b + 1) * classes]) == y {
            correct += 1;
        }
    }
    correct as f64 / data.len() as f64
}

/// Per-class accuracy; `None` for classes absent from `data`.
pub fn per_class_accuracy(model: &ModelGraph, data: &LabeledDataset) -> Vec<Option<f64>> {
    let batch = data.to_batch();
    let acts = eval_chain(model, &batch, BnMode::Inference).expect("evaluation succeeds");
    let logits = &acts.last().unwrap().data;
    let classes = model.class_count;
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (b, &y) in data.ys.iter().enumerate() {
        total[y] += 1;
        if argmax(&logits[b * classes..(b + 1) * classes]) == y {
            correct[y] += 1;
        }
    }
    (0..classes)
        .map(|c| if total[c] == 0 { None } else { Some(correct[c] as f64 / total[c] as f64) })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
