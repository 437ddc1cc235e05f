//! Run configuration: a TOML file with `[model]`, `[train]` and `[paths]`
//! tables, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use mtp::data::Split;
use mtp::model::{AdaLnStyle, MtpConfig, Task};
use mtp::train::TrainConfig;
use mtp::{Error, Result};
use serde::{Deserialize, Serialize};

pub const OUTPUT_ENV: &str = "MTP_OUTPUT_DIR";
pub const DEFAULT_OUTPUT: &str = "mtp-out";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Relative paths are taken from the config file's directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: MtpConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.manifest, &mut cfg.paths.output_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Output root: flag, then environment, then config file, then the default.
pub fn output_dir(flag: Option<&Path>, config: &RunConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    config
        .paths
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    match s {
        "regression" => Ok(Task::Regression),
        "classification" => Ok(Task::Classification),
        _ => Err(format!("expected regression|classification, got {s:?}")),
    }
}

fn parse_adaln(s: &str) -> std::result::Result<AdaLnStyle, String> {
    match s {
        "direct" => Ok(AdaLnStyle::Direct),
        "one-plus-gamma" => Ok(AdaLnStyle::OnePlusGamma),
        _ => Err(format!("expected direct|one-plus-gamma, got {s:?}")),
    }
}

pub fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Clone, Debug, Default)]
pub struct ModelOverrides {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub ffn_hidden: Option<usize>,
    #[arg(long)]
    pub dropout_p: Option<f64>,
    /// Target-conditioned norms in the self-attention block.
    #[arg(long, value_name = "BOOL")]
    pub enable_mts: Option<bool>,
    /// Pocket cross-attention layers.
    #[arg(long, value_name = "BOOL")]
    pub enable_mps: Option<bool>,
    /// Feedforward refinement sub-blocks.
    #[arg(long, value_name = "BOOL")]
    pub enable_ffn: Option<bool>,
    /// Attend over molecule and pocket rows together.
    #[arg(long, value_name = "BOOL")]
    pub kv_concat_mol: Option<bool>,
    /// direct | one-plus-gamma
    #[arg(long, value_parser = parse_adaln)]
    pub adaln_style: Option<AdaLnStyle>,
    /// regression | classification
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    /// Parameter initialization seed.
    #[arg(long)]
    pub model_seed: Option<u64>,
}

impl ModelOverrides {
    pub fn apply(&self, m: &mut MtpConfig) {
        macro_rules! set {
            ($($f:ident => $g:ident),*) => {$(
                if let Some(v) = self.$f.clone() {
                    m.$g = v;
                }
            )*};
        }
        set!(d_model => d_model, n_layers => n_layers, n_heads => n_heads, ffn_hidden => ffn_hidden,
             dropout_p => dropout_p, enable_mts => enable_mts, enable_mps => enable_mps,
             enable_ffn => enable_ffn, kv_concat_mol => kv_concat_mol, adaln_style => adaln_style,
             task => task, model_seed => seed);
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Shuffling and dropout seed.
    #[arg(long)]
    pub train_seed: Option<u64>,
    /// Split evaluated after every epoch: train | test
    #[arg(long, value_parser = parse_split)]
    pub eval_split: Option<Split>,
}

impl TrainOverrides {
    pub fn apply(&self, t: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident => $g:ident),*) => {$(
                if let Some(v) = self.$f {
                    t.$g = v;
                }
            )*};
        }
        set!(epochs => epochs, lr => lr, beta1 => beta1, beta2 => beta2, eps => eps,
             batch_size => batch_size, train_seed => seed, eval_split => eval_split);
        if let Some(p) = self.patience {
            t.patience = Some(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "[model]\nd_model = 8\nenable_mps = false\n[train]\nepochs = 3\npatience = 1\n[paths]\nmanifest = \"data/manifest.json\"\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.model.d_model, 8);
        assert!(!cfg.model.enable_mps);
        assert_eq!(cfg.train.patience, Some(1));
        assert_eq!(cfg.paths.manifest.unwrap(), dir.path().join("data/manifest.json"));
        assert_eq!(cfg.model.n_layers, MtpConfig::default().n_layers);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[model]\nd_modl = 8\n").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("d_modl"), "{err}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.patience = Some(3);
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::default();
        ModelOverrides {
            enable_mps: Some(false),
            d_model: Some(12),
            ..Default::default()
        }
        .apply(&mut cfg.model);
        TrainOverrides {
            epochs: Some(2),
            ..Default::default()
        }
        .apply(&mut cfg.train);
        assert!(!cfg.model.enable_mps);
        assert_eq!((cfg.model.d_model, cfg.train.epochs), (12, 2));
    }
}
