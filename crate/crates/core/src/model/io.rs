//! Model weight files: self-describing JSON with explicit shapes, flat
//! row-major arrays, and a format version. Round-trips are bit-exact.

use super::{LayerSpec, ModelError, ModelGraph, NormKind, ResidualEdge};
use crate::data::LayoutJson;
use crate::numerics::DenseMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerJson {
    Dense { in_features: usize, out_features: usize, weight: Vec<f64>, bias: Vec<f64> },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    BatchNorm2d {
        channels: usize,
        eps: f64,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
    LayerNorm { dim: usize, gamma: Vec<f64>, beta: Vec<f64> },
    RmsNorm { dim: usize, gamma: Vec<f64>, beta: Vec<f64> },
    Relu,
    Gelu,
    AvgPool2d { pool: usize },
    ResidualAdd,
    FfnBlock {
        dim: usize,
        hidden: usize,
        norm: String,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        w_up: Vec<f64>,
        w_down: Vec<f64>,
    },
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    version: u32,
    input: LayoutJson,
    class_count: usize,
    residual_edges: Vec<(usize, usize)>,
    layers: Vec<LayerJson>,
}

fn layer_to_json(layer: &LayerSpec) -> LayerJson {
    match layer {
        LayerSpec::Dense { weight, bias } => LayerJson::Dense {
            in_features: weight.cols(),
            out_features: weight.rows(),
            weight: weight.data().to_vec(),
            bias: bias.clone(),
        },
        LayerSpec::Conv2D { in_channels, out_channels, kernel, weight, bias } => {
            LayerJson::Conv2d {
                in_channels: *in_channels,
                out_channels: *out_channels,
                kernel: *kernel,
                weight: weight.clone(),
                bias: bias.clone(),
            }
        }
        LayerSpec::BatchNorm2D { gamma, beta, running_mean, running_var, eps } => {
            LayerJson::BatchNorm2d {
                channels: gamma.len(),
                eps: *eps,
                gamma: gamma.clone(),
                beta: beta.clone(),
                running_mean: running_mean.clone(),
                running_var: running_var.clone(),
            }
        }
        LayerSpec::LayerNorm { gamma, beta } => {
            LayerJson::LayerNorm { dim: gamma.len(), gamma: gamma.clone(), beta: beta.clone() }
        }
        LayerSpec::RmsNorm { gamma, beta } => {
            LayerJson::RmsNorm { dim: gamma.len(), gamma: gamma.clone(), beta: beta.clone() }
        }
        LayerSpec::ReLU => LayerJson::Relu,
        LayerSpec::Gelu => LayerJson::Gelu,
        LayerSpec::AvgPool2D { pool } => LayerJson::AvgPool2d { pool: *pool },
        LayerSpec::ResidualAdd => LayerJson::ResidualAdd,
        LayerSpec::FFNBlock { norm, gamma, beta, w_up, w_down } => LayerJson::FfnBlock {
            dim: gamma.len(),
            hidden: w_up.cols(),
            norm: match norm {
                NormKind::LayerNorm => "layer_norm".into(),
                NormKind::RmsNorm => "rms_norm".into(),
            },
            gamma: gamma.clone(),
            beta: beta.clone(),
            w_up: w_up.data().to_vec(),
            w_down: w_down.data().to_vec(),
        },
    }
}

fn expect_len(path: String, expected: usize, got: usize) -> Result<(), ModelError> {
    if expected != got {
        return Err(ModelError::FormatError {
            path,
            message: format!("declared shape needs {expected} values, array has {got}"),
        });
    }
    Ok(())
}

fn layer_from_json(idx: usize, layer: LayerJson) -> Result<LayerSpec, ModelError> {
    let at = |field: &str| format!("layers[{idx}].{field}");
    match layer {
        LayerJson::Dense { in_features, out_features, weight, bias } => {
            expect_len(at("weight"), out_features * in_features, weight.len())?;
            expect_len(at("bias"), out_features, bias.len())?;
            let weight = DenseMatrix::new(out_features, in_features, weight).map_err(|e| {
                ModelError::FormatError { path: at("weight"), message: e.to_string() }
            })?;
            Ok(LayerSpec::Dense { weight, bias })
        }
        LayerJson::Conv2d { in_channels, out_channels, kernel, weight, bias } => {
            expect_len(at("weight"), out_channels * in_channels * kernel * kernel, weight.len())?;
            expect_len(at("bias"), out_channels, bias.len())?;
            Ok(LayerSpec::Conv2D { in_channels, out_channels, kernel, weight, bias })
        }
        LayerJson::BatchNorm2d { channels, eps, gamma, beta, running_mean, running_var } => {
            expect_len(at("gamma"), channels, gamma.len())?;
            expect_len(at("beta"), channels, beta.len())?;
            expect_len(at("running_mean"), channels, running_mean.len())?;
            expect_len(at("running_var"), channels, running_var.len())?;
            if running_var.iter().any(|v| *v <= 0.0) {
                return Err(ModelError::FormatError {
                    path: at("running_var"),
                    message: "running variance must be positive".into(),
                });
            }
            Ok(LayerSpec::BatchNorm2D { gamma, beta, running_mean, running_var, eps })
        }
        LayerJson::LayerNorm { dim, gamma, beta } => {
            expect_len(at("gamma"), dim, gamma.len())?;
            expect_len(at("beta"), dim, beta.len())?;
            Ok(LayerSpec::LayerNorm { gamma, beta })
        }
        LayerJson::RmsNorm { dim, gamma, beta } => {
            expect_len(at("gamma"), dim, gamma.len())?;
            expect_len(at("beta"), dim, beta.len())?;
            Ok(LayerSpec::RmsNorm { gamma, beta })
        }
        LayerJson::Relu => Ok(LayerSpec::ReLU),
        LayerJson::Gelu => Ok(LayerSpec::Gelu),
        LayerJson::AvgPool2d { pool } => Ok(LayerSpec::AvgPool2D { pool }),
        LayerJson::ResidualAdd => Ok(LayerSpec::ResidualAdd),
        LayerJson::FfnBlock { dim, hidden, norm, gamma, beta, w_up, w_down } => {
            expect_len(at("gamma"), dim, gamma.len())?;
            expect_len(at("beta"), dim, beta.len())?;
            expect_len(at("w_up"), dim * hidden, w_up.len())?;
            expect_len(at("w_down"), hidden * dim, w_down.len())?;
            let norm = match norm.as_str() {
                "layer_norm" => NormKind::LayerNorm,
                "rms_norm" => NormKind::RmsNorm,
                other => {
                    return Err(ModelError::FormatError {
                        path: at("norm"),
                        message: format!("unknown norm kind '{other}'"),
                    })
                }
            };
            Ok(LayerSpec::FFNBlock {
                norm,
                gamma,
                beta,
                w_up: DenseMatrix::new(dim, hidden, w_up).map_err(|e| {
                    ModelError::FormatError { path: at("w_up"), message: e.to_string() }
                })?,
                w_down: DenseMatrix::new(hidden, dim, w_down).map_err(|e| {
                    ModelError::FormatError { path: at("w_down"), message: e.to_string() }
                })?,
            })
        }
    }
}

/// Writes the model as versioned JSON.
pub fn save_model(model: &ModelGraph, path: &Path) -> Result<(), ModelError> {
    let json = ModelJson {
        version: FORMAT_VERSION,
        input: model.input.into(),
        class_count: model.class_count,
        residual_edges: model.residual_edges.iter().map(|e| (e.source, e.target)).collect(),
        layers: model.layers.iter().map(layer_to_json).collect(),
    };
    let text = serde_json::to_string(&json).expect("model serializes");
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads and validates a model file.
///
/// # Errors
/// `FormatError` naming the offending field for malformed or inconsistent
/// files; `Io` for filesystem problems.
pub fn load_model(path: &Path) -> Result<ModelGraph, ModelError> {
    let text = std::fs::read_to_string(path)?;
    let json: ModelJson = serde_json::from_str(&text).map_err(|e| ModelError::FormatError {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if json.version != FORMAT_VERSION {
        return Err(ModelError::FormatError {
            path: "version".into(),
            message: format!("unsupported version {}", json.version),
        });
    }
    let mut layers = Vec::with_capacity(json.layers.len());
    for (i, layer) in json.layers.into_iter().enumerate() {
        layers.push(layer_from_json(i, layer)?);
    }
    ModelGraph::new(
        json.input.into(),
        layers,
        json.residual_edges
            .into_iter()
            .map(|(source, target)| ResidualEdge { source, target })
            .collect(),
        json.class_count,
    )
}
