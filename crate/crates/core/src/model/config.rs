use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::check_dropout_p;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    Regression,
    Classification,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
        })
    }
}

/// How the conditional scale enters the adaptive layer norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AdaLnStyle {
    /// `LN(x) ⊙ γ + β`
    #[default]
    Direct,
    /// `LN(x) ⊙ (1 + γ) + β`
    OnePlusGamma,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtpConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub dropout_p: f64,
    /// Target-conditioned norms in the self-attention block. When off, the
    /// block keeps its self-attention but uses static learned norms.
    pub enable_mts: bool,
    /// Pocket cross-attention layers.
    pub enable_mps: bool,
    /// Feedforward refinement inside the self-attention block and after
    /// every pocket layer.
    pub enable_ffn: bool,
    /// Keys/values from `[F_mol; F_pocket]` instead of the pocket alone.
    pub kv_concat_mol: bool,
    pub adaln_style: AdaLnStyle,
    pub task: Task,
    pub seed: u64,
}

impl Default for MtpConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_layers: 3,
            n_heads: 1,
            ffn_hidden: 512,
            dropout_p: 0.1,
            enable_mts: true,
            enable_mps: true,
            enable_ffn: true,
            kv_concat_mol: false,
            adaln_style: AdaLnStyle::Direct,
            task: Task::Regression,
            seed: 0,
        }
    }
}

impl MtpConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model < 2 {
            return fail(format!("d_model must be at least 2, got {}", self.d_model));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.ffn_hidden == 0 {
            return fail("ffn_hidden must be at least 1".into());
        }
        check_dropout_p(self.dropout_p)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Raw embedding widths of the molecule and protein inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub d_mol: usize,
    pub d_pro: usize,
}
