//! Training objectives. Each loss returns its value together with the gradient
//! with respect to the estimate, so callers can chain it into the network's
//! backward pass.

mod mae;
mod modulation;
mod stoi_loss;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use mae::mae_loss;
pub use modulation::{modulation_loss, ModulationConfig, ModulationLoss};
pub use stoi_loss::stoi_loss;

/// Selectable training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mae,
    Stoi,
    Modulation,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Mae, LossKind::Stoi, LossKind::Modulation];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Mae => "mae",
            LossKind::Stoi => "stoi",
            LossKind::Modulation => "modulation",
        }
    }

    /// Whether the loss is computed on resynthesised waveforms.
    pub fn is_waveform_domain(self) -> bool {
        !matches!(self, LossKind::Mae)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mae" => Ok(LossKind::Mae),
            "stoi" => Ok(LossKind::Stoi),
            "modulation" => Ok(LossKind::Modulation),
            other => Err(crate::Error::Config(format!(
                "unknown loss `{other}` (expected mae, stoi or modulation)"
            ))),
        }
    }
}

/// Scalar loss plus optional named sub-terms for logging.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub components: Vec<(String, T)>,
}

impl<T> LossValue<T> {
    pub fn scalar(value: T) -> Self {
        Self { value, components: Vec::new() }
    }
}
