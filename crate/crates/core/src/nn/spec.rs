use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One layer of a declarative network description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: usize,
        padding: usize,
        stride: usize,
    },
    Dense {
        units: usize,
    },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d,
    Dropout {
        p: f64,
    },
    Flatten,
    Softmax,
}

impl LayerSpec {
    /// 3x3 kernel, padding 1, stride 1.
    pub fn conv3x3(filters: usize) -> Self {
        LayerSpec::Conv2d {
            filters,
            kernel: 3,
            padding: 1,
            stride: 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d => "maxpool2d",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let fail = |reason: String| Err(Error::Spec(format!("{}: {reason}", self.kind())));
        match *self {
            LayerSpec::Conv2d {
                filters,
                kernel,
                padding,
                stride,
            } => {
                if filters == 0 || kernel == 0 || stride == 0 {
                    return fail("filters, kernel and stride must be positive".into());
                }
                let &[_, h, w] = input else {
                    return fail(format!("expects a [C, H, W] input, got {input:?}"));
                };
                let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                if ph < kernel || pw < kernel {
                    return fail(format!("kernel {kernel} larger than padded input {ph}x{pw}"));
                }
                Ok(vec![
                    filters,
                    (ph - kernel) / stride + 1,
                    (pw - kernel) / stride + 1,
                ])
            }
            LayerSpec::Dense { units } => {
                if units == 0 {
                    return fail("units must be positive".into());
                }
                if input.len() != 1 {
                    return fail(format!(
                        "expects a flat input, got {input:?} (missing flatten?)"
                    ));
                }
                Ok(vec![units])
            }
            LayerSpec::MaxPool2d => {
                let &[c, h, w] = input else {
                    return fail(format!("expects a [C, H, W] input, got {input:?}"));
                };
                if h % 2 != 0 || w % 2 != 0 {
                    return fail(format!("spatial dims {h}x{w} must be even"));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return fail(format!("probability {p} outside [0, 1)"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return fail(format!("expects a flat input, got {input:?}"));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Ordered layer list plus the per-sample input shape and class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Per-sample shapes after each layer; checks that the stack composes and
    /// ends in a softmax over `classes`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Spec(format!(
                "input shape {:?} must be non-empty with positive dims",
                self.input_shape
            )));
        }
        if self.classes < 2 {
            return Err(Error::Spec("at least two classes are required".into()));
        }
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::Spec(format!("layer {i}: {e}")))?;
            shapes.push(shape.clone());
        }
        match self.layers.last() {
            Some(LayerSpec::Softmax) if shape == [self.classes] => Ok(shapes),
            Some(LayerSpec::Softmax) => Err(Error::Spec(format!(
                "softmax width {shape:?} does not match {} classes",
                self.classes
            ))),
            _ => Err(Error::Spec("final layer must be softmax".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// SHA-256 of the canonical JSON encoding; stamped into checkpoints.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).into()
    }

    pub fn conv_filters(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv2d { filters, .. } => Some(*filters),
                _ => None,
            })
            .collect()
    }

    pub fn dense_units(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { units } => Some(*units),
                _ => None,
            })
            .collect()
    }
}

/// Two 3x3 conv layers (32, 64 filters), a 2x2 max-pool and a 10-way dense
/// softmax head, on 1x28x28 inputs. Also used for Fashion-MNIST.
pub fn preset_mnist() -> NetworkSpec {
    NetworkSpec {
        input_shape: vec![1, 28, 28],
        classes: 10,
        layers: vec![
            LayerSpec::conv3x3(32),
            LayerSpec::Relu,
            LayerSpec::conv3x3(64),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 10 },
            LayerSpec::Softmax,
        ],
    }
}

/// The MNIST topology on 3x32x32 inputs with a second max-pool, placed after
/// the first conv block.
pub fn preset_cifar10() -> NetworkSpec {
    NetworkSpec {
        input_shape: vec![3, 32, 32],
        classes: 10,
        layers: vec![
            LayerSpec::conv3x3(32),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d,
            LayerSpec::conv3x3(64),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 10 },
            LayerSpec::Softmax,
        ],
    }
}

/// Six 3x3 conv layers (64, 64, 128, 128, 256, 256) in pairs, each pair
/// followed by max-pool and dropout 0.25, then dense 512, dropout 0.5 and a
/// 100-way softmax head.
pub fn preset_cifar100() -> NetworkSpec {
    let mut layers = Vec::new();
    for filters in [64, 128, 256] {
        layers.extend([
            LayerSpec::conv3x3(filters),
            LayerSpec::Relu,
            LayerSpec::conv3x3(filters),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d,
            LayerSpec::Dropout { p: 0.25 },
        ]);
    }
    layers.extend([
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 512 },
        LayerSpec::Relu,
        LayerSpec::Dropout { p: 0.5 },
        LayerSpec::Dense { units: 100 },
        LayerSpec::Softmax,
    ]);
    NetworkSpec {
        input_shape: vec![3, 32, 32],
        classes: 100,
        layers,
    }
}
