use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 1e-2;
pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Pointwise nonlinearity. Serialized as `"relu"`, `"leaky_relu"` (slope
/// 0.01) or `"leaky_relu:<slope>"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE)
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
        }
    }

    /// Derivative at pre-activation `x`, given the already computed `y = f(x)`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::LeakyRelu(_) => "leaky_relu",
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Activation::LeakyRelu(s) if !(s > 0.0 && s < 1.0) => Err(Error::Config(format!(
                "leaky_relu slope must lie in (0, 1), got {s}"
            ))),
            _ => Ok(()),
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::LeakyRelu(s) if *s != DEFAULT_LEAKY_SLOPE => write!(f, "leaky_relu:{s}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let act = match s.trim() {
            "identity" | "linear" => Activation::Identity,
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            "leaky_relu" => Activation::leaky(),
            other => match other.strip_prefix("leaky_relu:") {
                Some(slope) => Activation::LeakyRelu(
                    slope
                        .parse()
                        .map_err(|_| Error::Config(format!("bad leaky_relu slope {slope:?}")))?,
                ),
                None => return Err(Error::Config(format!("unknown activation {other:?}"))),
            },
        };
        act.validate()?;
        Ok(act)
    }
}

impl TryFrom<String> for Activation {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Activation> for String {
    fn from(a: Activation) -> String {
        a.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax over the last axis followed by negative log-likelihood.
    /// Targets are class indices stored as reals.
    CrossEntropySoftmax,
    /// Mean of squared errors over every output element.
    Mse,
}

fn default_eps() -> f64 {
    DEFAULT_BN_EPS
}

fn default_momentum() -> f64 {
    DEFAULT_BN_MOMENTUM
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    BatchNorm {
        features: usize,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Activation {
        activation: Activation,
    },
    Flatten,
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    pub fn batch_norm(features: usize) -> Self {
        LayerSpec::BatchNorm {
            features,
            eps: DEFAULT_BN_EPS,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn activation(activation: Activation) -> Self {
        LayerSpec::Activation { activation }
    }

    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Per-sample output shape given the per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(Error::Dimension(format!(
                        "dense({inputs},{outputs}) fed a sample of shape {input:?}"
                    )));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let &[c, h, w] = input else {
                    return Err(Error::Dimension(format!(
                        "conv2d expects C×H×W samples, got {input:?}"
                    )));
                };
                let g = crate::tensor::ConvGeometry::new(
                    [c, h, w],
                    [out_channels, in_channels, kernel, kernel],
                    stride,
                    padding,
                )?;
                Ok(vec![out_channels, g.out_h, g.out_w])
            }
            LayerSpec::BatchNorm { features, .. } => {
                if input.first() != Some(&features) || !matches!(input.len(), 1 | 3) {
                    return Err(Error::Dimension(format!(
                        "batch_norm({features}) fed a sample of shape {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Activation { .. } => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { inputs, outputs } if inputs == 0 || outputs == 0 => {
                Err(Error::Config("dense layer with zero width".into()))
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 => {
                Err(Error::Config("conv2d with zero extent or stride".into()))
            }
            LayerSpec::BatchNorm {
                features,
                eps,
                momentum,
            } => {
                if features == 0 {
                    Err(Error::Config("batch_norm with zero features".into()))
                } else if eps.is_nan() || eps <= 0.0 {
                    Err(Error::Config(format!(
                        "batch_norm eps must be > 0, got {eps}"
                    )))
                } else if !(0.0..=1.0).contains(&momentum) {
                    Err(Error::Config(format!(
                        "batch_norm momentum must lie in [0,1], got {momentum}"
                    )))
                } else {
                    Ok(())
                }
            }
            LayerSpec::Activation { activation } => activation.validate(),
            _ => Ok(()),
        }
    }
}

/// Additive connection: the input of layer `from` is added to the output of
/// layer `to` (`from <= to`). Without `projection` the two shapes must match;
/// with it a learned bias-free linear map is applied to the flattened source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEdge {
    pub from: usize,
    pub to: usize,
    #[serde(default)]
    pub projection: bool,
}

impl SkipEdge {
    pub fn identity(from: usize, to: usize) -> Self {
        Self {
            from,
            to,
            projection: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Shape of one sample, without the batch axis.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub skip_edges: Vec<SkipEdge>,
    pub loss: LossKind,
}

impl NetworkSpec {
    /// Checks layer parameters and skip edges, returning the per-sample shape
    /// of every value `v_0 = input, v_{i+1} = output of layer i`.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "bad input shape {:?}",
                self.input_shape
            )));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            layer
                .validate()
                .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
            let next = layer
                .output_shape(&shapes[i])
                .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        for (j, edge) in self.skip_edges.iter().enumerate() {
            if edge.from > edge.to || edge.to >= self.layers.len() {
                return Err(Error::Config(format!(
                    "skip edge {j} ({} -> {}) must satisfy from <= to < {}",
                    edge.from,
                    edge.to,
                    self.layers.len()
                )));
            }
            if !edge.projection && shapes[edge.from] != shapes[edge.to + 1] {
                return Err(Error::Config(format!(
                    "skip edge {j}: shapes {:?} and {:?} differ and no projection declared",
                    shapes[edge.from],
                    shapes[edge.to + 1]
                )));
            }
        }
        let out = shapes.last().expect("non-empty");
        if self.loss == LossKind::CrossEntropySoftmax && out.len() != 1 {
            return Err(Error::Config(format!(
                "cross_entropy_softmax needs flat logits, network outputs {out:?}"
            )));
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.validate()?.pop().expect("non-empty"))
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_string_forms() {
        assert_eq!("relu".parse::<Activation>().unwrap(), Activation::Relu);
        assert_eq!(
            "leaky_relu".parse::<Activation>().unwrap(),
            Activation::LeakyRelu(0.01)
        );
        assert_eq!(
            "leaky_relu:0.2".parse::<Activation>().unwrap(),
            Activation::LeakyRelu(0.2)
        );
        assert!("leaky_relu:1.5".parse::<Activation>().is_err());
        assert!("swish".parse::<Activation>().is_err());
        assert_eq!(Activation::LeakyRelu(0.2).to_string(), "leaky_relu:0.2");
        assert_eq!(Activation::leaky().to_string(), "leaky_relu");
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(Activation::Sigmoid.apply(-800.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(800.0), 1.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
    }

    #[test]
    fn validate_rejects_bad_skip() {
        let spec = NetworkSpec {
            input_shape: vec![3],
            layers: vec![LayerSpec::dense(3, 4), LayerSpec::dense(4, 4)],
            skip_edges: vec![SkipEdge::identity(0, 1)],
            loss: LossKind::Mse,
        };
        assert!(spec.validate().is_err());
        let mut ok = spec.clone();
        ok.skip_edges = vec![SkipEdge::identity(1, 1)];
        assert_eq!(ok.validate().unwrap().len(), 3);
        let mut proj = spec;
        proj.skip_edges[0].projection = true;
        assert!(proj.validate().is_ok());
    }

    #[test]
    fn validate_rejects_bad_layers() {
        let bn = NetworkSpec {
            input_shape: vec![3],
            layers: vec![LayerSpec::BatchNorm {
                features: 3,
                eps: 0.0,
                momentum: 0.1,
            }],
            skip_edges: vec![],
            loss: LossKind::Mse,
        };
        assert!(bn.validate().is_err());
        let conv = NetworkSpec {
            input_shape: vec![1, 4, 4],
            layers: vec![LayerSpec::conv2d(1, 2, 3, 2, 0)],
            skip_edges: vec![],
            loss: LossKind::Mse,
        };
        assert!(conv.validate().is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let spec = NetworkSpec {
            input_shape: vec![1, 5, 5],
            layers: vec![
                LayerSpec::conv2d(1, 2, 3, 1, 1),
                LayerSpec::batch_norm(2),
                LayerSpec::activation(Activation::leaky()),
                LayerSpec::Flatten,
                LayerSpec::dense(50, 3),
            ],
            skip_edges: vec![],
            loss: LossKind::CrossEntropySoftmax,
        };
        let text = toml::to_string(&spec).unwrap();
        let back: NetworkSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.digest(), spec.digest());
    }
}
