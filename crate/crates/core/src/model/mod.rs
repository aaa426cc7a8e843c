//! Minimal layer-graph engine: ordered layers with optional residual edges,
//! forward evaluation with per-component input-contribution taps, a small
//! momentum-SGD trainer for producing well-trained desk-scale fixtures, and
//! JSON weight files.

mod forward;
mod io;
mod train;

pub mod builders;

pub use forward::{forward, forward_activations, ContributionTap, ForwardResult, LayerTaps};
pub(crate) use forward::{eval_layer, BnMode};
pub use io::{load_model, save_model};
pub use train::{accuracy, per_class_accuracy, train, TrainConfig, TrainResult};

use crate::numerics::DenseMatrix;

/// Activation tensor layout. Every activation is a batch of samples with one
/// of these per-sample shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Flat feature vector of length `dim`.
    Flat { dim: usize },
    /// Channels-first image tensor.
    Image { channels: usize, height: usize, width: usize },
    /// Token matrix: `len` rows of `dim` features.
    Tokens { len: usize, dim: usize },
}

impl Layout {
    /// Number of scalars per sample.
    pub fn size(&self) -> usize {
        match *self {
            Layout::Flat { dim } => dim,
            Layout::Image { channels, height, width } => channels * height * width,
            Layout::Tokens { len, dim } => len * dim,
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Layout::Flat { dim } => write!(f, "flat[{dim}]"),
            Layout::Image { channels, height, width } => {
                write!(f, "image[{channels}x{height}x{width}]")
            }
            Layout::Tokens { len, dim } => write!(f, "tokens[{len}x{dim}]"),
        }
    }
}

/// A batch of activations; `data` holds `batch` consecutive samples, each of
/// `layout.size()` scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub layout: Layout,
    pub batch: usize,
    pub data: Vec<f64>,
}

impl ActivationBatch {
    pub fn new(layout: Layout, batch: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != batch * layout.size() {
            return Err(ModelError::ShapeMismatch {
                context: "ActivationBatch::new".into(),
                expected: format!("{} values", batch * layout.size()),
                got: format!("{}", data.len()),
            });
        }
        Ok(Self { layout, batch, data })
    }

    pub fn zeros(layout: Layout, batch: usize) -> Self {
        Self { layout, batch, data: vec![0.0; batch * layout.size()] }
    }

    pub fn from_samples(layout: Layout, samples: &[Vec<f64>]) -> Result<Self, ModelError> {
        let size = layout.size();
        let mut data = Vec::with_capacity(samples.len() * size);
        for (i, s) in samples.iter().enumerate() {
            if s.len() != size {
                return Err(ModelError::ShapeMismatch {
                    context: format!("sample {i}"),
                    expected: format!("{size} values"),
                    got: format!("{}", s.len()),
                });
            }
            data.extend_from_slice(s);
        }
        Ok(Self { layout, batch: samples.len(), data })
    }

    #[inline]
    pub fn sample(&self, b: usize) -> &[f64] {
        let size = self.layout.size();
        &self.data[b * size..(b + 1) * size]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Normalization flavor used by norm layers and FFN blocks: scale the
/// (optionally centered) input to the unit sphere, then apply the elementwise
/// affine `gamma`/`beta`. Layer normalization centers first; RMS
/// normalization does not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

/// One layer of a [`ModelGraph`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Fully-connected layer. Flattens any input layout to `weight.cols()`
    /// features and emits `Flat{weight.rows()}`.
    Dense { weight: DenseMatrix, bias: Vec<f64> },
    /// 2-D convolution, stride 1, zero padding preserving spatial size
    /// (odd kernel). Weight is `c_out * c_in * k * k`, row-major.
    Conv2D {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    /// Per-channel batch normalization over image activations. Inference
    /// mode uses the stored running statistics.
    BatchNorm2D {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        eps: f64,
    },
    /// Unit-sphere normalization with centering, per token row.
    LayerNorm { gamma: Vec<f64>, beta: Vec<f64> },
    /// Unit-sphere normalization without centering, per token row.
    RmsNorm { gamma: Vec<f64>, beta: Vec<f64> },
    ReLU,
    Gelu,
    /// Non-overlapping mean pooling with window `pool` in both dimensions.
    AvgPool2D { pool: usize },
    /// Adds the activation recorded at the paired residual edge's source.
    ResidualAdd,
    /// Pre-norm feed-forward block with internal residual:
    /// `x + gelu(norm(x) W_up) W_down`, evaluated per token row.
    FFNBlock {
        norm: NormKind,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        /// `dim x hidden`.
        w_up: DenseMatrix,
        /// `hidden x dim`.
        w_down: DenseMatrix,
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2D { .. } => "conv2d",
            LayerSpec::BatchNorm2D { .. } => "batch_norm2d",
            LayerSpec::LayerNorm { .. } => "layer_norm",
            LayerSpec::RmsNorm { .. } => "rms_norm",
            LayerSpec::ReLU => "relu",
            LayerSpec::Gelu => "gelu",
            LayerSpec::AvgPool2D { .. } => "avg_pool2d",
            LayerSpec::ResidualAdd => "residual_add",
            LayerSpec::FFNBlock { .. } => "ffn_block",
        }
    }

    /// Whether input-contribution taps are defined for this layer. Taps
    /// exist where the output decomposes into additive per-component terms:
    /// dense rows, convolved input channels, and the FFN down-projection.
    pub fn tappable(&self) -> bool {
        matches!(
            self,
            LayerSpec::Dense { .. } | LayerSpec::Conv2D { .. } | LayerSpec::FFNBlock { .. }
        )
    }

    /// Number of input components for tappable layers.
    pub fn in_components(&self) -> Option<usize> {
        match self {
            LayerSpec::Dense { weight, .. } => Some(weight.cols()),
            LayerSpec::Conv2D { in_channels, .. } => Some(*in_channels),
            LayerSpec::FFNBlock { w_down, .. } => Some(w_down.rows()),
            _ => None,
        }
    }

    /// Number of output channels for tappable layers.
    pub fn out_channels(&self) -> Option<usize> {
        match self {
            LayerSpec::Dense { weight, .. } => Some(weight.rows()),
            LayerSpec::Conv2D { out_channels, .. } => Some(*out_channels),
            LayerSpec::FFNBlock { w_down, .. } => Some(w_down.cols()),
            _ => None,
        }
    }

    /// Layout produced for a given input layout.
    pub fn output_layout(&self, input: &Layout) -> Result<Layout, ModelError> {
        let mismatch = |expected: String| ModelError::ShapeMismatch {
            context: format!("{} layer", self.kind_name()),
            expected,
            got: format!("{input}"),
        };
        match self {
            LayerSpec::Dense { weight, .. } => {
                if input.size() != weight.cols() {
                    return Err(mismatch(format!("{} input features", weight.cols())));
                }
                Ok(Layout::Flat { dim: weight.rows() })
            }
            LayerSpec::Conv2D { in_channels, out_channels, kernel, .. } => match *input {
                Layout::Image { channels, height, width } if channels == *in_channels => {
                    if kernel % 2 == 0 {
                        return Err(ModelError::ShapeMismatch {
                            context: "conv2d layer".into(),
                            expected: "odd kernel for size-preserving padding".into(),
                            got: format!("kernel {kernel}"),
                        });
                    }
                    Ok(Layout::Image { channels: *out_channels, height, width })
                }
                _ => Err(mismatch(format!("image with {in_channels} channels"))),
            },
            LayerSpec::BatchNorm2D { gamma, .. } => match *input {
                Layout::Image { channels, .. } if channels == gamma.len() => Ok(*input),
                _ => Err(mismatch(format!("image with {} channels", gamma.len()))),
            },
            LayerSpec::LayerNorm { gamma, .. } | LayerSpec::RmsNorm { gamma, .. } => {
                match *input {
                    Layout::Tokens { dim, .. } | Layout::Flat { dim } if dim == gamma.len() => {
                        Ok(*input)
                    }
                    _ => Err(mismatch(format!("{}-dim rows", gamma.len()))),
                }
            }
            LayerSpec::ReLU | LayerSpec::Gelu => Ok(*input),
            LayerSpec::AvgPool2D { pool } => match *input {
                Layout::Image { channels, height, width }
                    if *pool > 0 && height % pool == 0 && width % pool == 0 =>
                {
                    Ok(Layout::Image { channels, height: height / pool, width: width / pool })
                }
                _ => Err(mismatch(format!("image with dims divisible by {pool}"))),
            },
            LayerSpec::ResidualAdd => Ok(*input),
            LayerSpec::FFNBlock { gamma, w_up, w_down, .. } => {
                let d = gamma.len();
                if w_up.rows() != d || w_up.cols() != w_down.rows() || w_down.cols() != d {
                    return Err(ModelError::ShapeMismatch {
                        context: "ffn_block layer".into(),
                        expected: format!("w_up {d}xH, w_down Hx{d}"),
                        got: format!(
                            "w_up {}x{}, w_down {}x{}",
                            w_up.rows(),
                            w_up.cols(),
                            w_down.rows(),
                            w_down.cols()
                        ),
                    });
                }
                match *input {
                    Layout::Tokens { dim, .. } | Layout::Flat { dim } if dim == d => Ok(*input),
                    _ => Err(mismatch(format!("{d}-dim rows"))),
                }
            }
        }
    }

    /// Number of stored parameter scalars (including running statistics).
    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Dense { weight, bias } => weight.data().len() + bias.len(),
            LayerSpec::Conv2D { weight, bias, .. } => weight.len() + bias.len(),
            LayerSpec::BatchNorm2D { gamma, beta, running_mean, running_var, .. } => {
                gamma.len() + beta.len() + running_mean.len() + running_var.len()
            }
            LayerSpec::LayerNorm { gamma, beta } | LayerSpec::RmsNorm { gamma, beta } => {
                gamma.len() + beta.len()
            }
            LayerSpec::ReLU | LayerSpec::Gelu | LayerSpec::AvgPool2D { .. }
            | LayerSpec::ResidualAdd => 0,
            LayerSpec::FFNBlock { gamma, beta, w_up, w_down, .. } => {
                gamma.len() + beta.len() + w_up.data().len() + w_down.data().len()
            }
        }
    }

    /// Mutable views of the trainable parameter tensors, in a fixed order.
    /// Running statistics are excluded; they are not trained by gradient.
    pub(crate) fn trainable_params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            LayerSpec::Dense { weight, bias } => vec![weight.data_mut(), bias.as_mut_slice()],
            LayerSpec::Conv2D { weight, bias, .. } => {
                vec![weight.as_mut_slice(), bias.as_mut_slice()]
            }
            LayerSpec::BatchNorm2D { gamma, beta, .. } => {
                vec![gamma.as_mut_slice(), beta.as_mut_slice()]
            }
            LayerSpec::LayerNorm { gamma, beta } | LayerSpec::RmsNorm { gamma, beta } => {
                vec![gamma.as_mut_slice(), beta.as_mut_slice()]
            }
            LayerSpec::ReLU | LayerSpec::Gelu | LayerSpec::AvgPool2D { .. }
            | LayerSpec::ResidualAdd => vec![],
            LayerSpec::FFNBlock { gamma, beta, w_up, w_down, .. } => vec![
                gamma.as_mut_slice(),
                beta.as_mut_slice(),
                w_up.data_mut(),
                w_down.data_mut(),
            ],
        }
    }
}

/// A skip connection: the activation *entering* layer `source` (activation
/// index `source`, where index 0 is the model input) is added by the
/// `ResidualAdd` layer at index `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualEdge {
    pub source: usize,
    pub target: usize,
}

/// An ordered layer graph with residual edges and a classification head.
/// The final activation must have exactly `class_count` scalars per sample;
/// those are the pre-softmax logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub input: Layout,
    pub layers: Vec<LayerSpec>,
    pub residual_edges: Vec<ResidualEdge>,
    pub class_count: usize,
}

/// Error type for model construction, evaluation, training, and file I/O.
#[derive(Debug)]
pub enum ModelError {
    ShapeMismatch { context: String, expected: String, got: String },
    NonFiniteActivation { layer: usize },
    NonTappable { layer: usize, kind: &'static str },
    BadLayerId { layer: usize, len: usize },
    Divergence { epoch: usize },
    FormatError { path: String, message: String },
    Io(std::io::Error),
}

impl std::fmt::Display for ModelError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelError::ShapeMismatch { context, expected, got } => {
                write!(f, "shape mismatch in {context}: expected {expected}, got {got}")
            }
            ModelError::NonFiniteActivation { layer } => {
                write!(f, "non-finite activation after layer {layer}")
            }
            ModelError::NonTappable { layer, kind } => {
                write!(f, "layer {layer} ({kind}) has no input-contribution decomposition")
            }
            ModelError::BadLayerId { layer, len } => {
                write!(f, "layer id {layer} out of range (model has {len} layers)")
            }
            ModelError::Divergence { epoch } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}")
            }
            ModelError::FormatError { path, message } => {
                write!(f, "format error at {path}: {message}")
            }
            ModelError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e)
    }
}

impl ModelGraph {
    pub fn new(
        input: Layout,
        layers: Vec<LayerSpec>,
        residual_edges: Vec<ResidualEdge>,
        class_count: usize,
    ) -> Result<Self, ModelError> {
        let model = Self { input, layers, residual_edges, class_count };
        model.validate()?;
        Ok(model)
    }

    /// Checks chain compatibility of layouts, residual edge shape equality,
    /// and that the final activation matches the class count.
    pub fn validate(&self) -> Result<(), ModelError> {
        let layouts = self.activation_layouts()?;
        for edge in &self.residual_edges {
            if edge.target >= self.layers.len() {
                return Err(ModelError::BadLayerId { layer: edge.target, len: self.layers.len() });
            }
            if !matches!(self.layers[edge.target], LayerSpec::ResidualAdd) {
                return Err(ModelError::ShapeMismatch {
                    context: format!("residual edge to layer {}", edge.target),
                    expected: "residual_add target".into(),
                    got: self.layers[edge.target].kind_name().into(),
                });
            }
            if edge.source > edge.target {
                return Err(ModelError::ShapeMismatch {
                    context: format!("residual edge {} -> {}", edge.source, edge.target),
                    expected: "source activation no later than target".into(),
                    got: "source after target".into(),
                });
            }
            if layouts[edge.source].size() != layouts[edge.target].size() {
                return Err(ModelError::ShapeMismatch {
                    context: format!("residual edge {} -> {}", edge.source, edge.target),
                    expected: format!("{}", layouts[edge.target]),
                    got: format!("{}", layouts[edge.source]),
                });
            }
        }
        // Each residual_add layer needs exactly one incoming edge.
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, LayerSpec::ResidualAdd) {
                let n = self.residual_edges.iter().filter(|e| e.target == i).count();
                if n != 1 {
                    return Err(ModelError::ShapeMismatch {
                        context: format!("residual_add layer {i}"),
                        expected: "exactly one incoming edge".into(),
                        got: format!("{n}"),
                    });
                }
            }
        }
        let last = layouts.last().expect("at least the input layout");
        if last.size() != self.class_count {
            return Err(ModelError::ShapeMismatch {
                context: "classification head".into(),
                expected: format!("{} logits", self.class_count),
                got: format!("{last}"),
            });
        }
        Ok(())
    }

    /// Layouts of every activation; index 0 is the model input, index
    /// `layers.len()` the final output.
    pub fn activation_layouts(&self) -> Result<Vec<Layout>, ModelError> {
        let mut layouts = Vec::with_capacity(self.layers.len() + 1);
        layouts.push(self.input);
        for layer in &self.layers {
            let next = layer.output_layout(layouts.last().unwrap())?;
            layouts.push(next);
        }
        Ok(layouts)
    }

    /// The residual edge feeding layer `target`, if any.
    pub fn edge_into(&self, target: usize) -> Option<ResidualEdge> {
        self.residual_edges.iter().copied().find(|e| e.target == target)
    }

    /// Total stored parameter scalars.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Indices of layers with an input-contribution decomposition.
    pub fn tappable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.tappable())
            .map(|(i, _)| i)
            .collect()
    }

    /// Whether layer `l` sits on a residual branch: inside a skip span or a
    /// feed-forward block with its own internal skip. Negation-style edits
    /// rely on this.
    pub fn has_residual_path(&self, l: usize) -> bool {
        if matches!(self.layers.get(l), Some(LayerSpec::FFNBlock { .. })) {
            return true;
        }
        self.residual_edges.iter().any(|e| e.source <= l && l < e.target)
    }
}
