//! Layers, network specs and presets, the softmax/cross-entropy head, SGD,
//! and parameter checkpoints.

pub mod checkpoint;
mod layer;
pub mod loss;
mod network;
mod spec;

pub use layer::{Layer, Param};
pub use loss::{cross_entropy, entropy, softmax, softmax_backward, softmax_cross_entropy_grad};
pub use network::{Network, SgdConfig};
pub use spec::{preset_cifar10, preset_cifar100, preset_mnist, LayerSpec, NetworkSpec};

use crate::error::{Error, Result};

/// Named architecture presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Mnist,
    Cifar10,
    Cifar100,
}

impl Preset {
    pub fn spec(self) -> NetworkSpec {
        match self {
            Preset::Mnist => preset_mnist(),
            Preset::Cifar10 => preset_cifar10(),
            Preset::Cifar100 => preset_cifar100(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Mnist => "mnist",
            Preset::Cifar10 => "cifar10",
            Preset::Cifar100 => "cifar100",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" | "fashion-mnist" => Ok(Preset::Mnist),
            "cifar10" => Ok(Preset::Cifar10),
            "cifar100" => Ok(Preset::Cifar100),
            other => Err(Error::InvalidArgument(format!("unknown preset {other:?}"))),
        }
    }
}
