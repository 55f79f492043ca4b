//! Run configuration: one JSON document, every field overridable with
//! `--set dotted.path=value`.

use std::path::PathBuf;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use sdt_core::eval::FilterConfig;
use sdt_core::fnda::{AttentionKind, MaskMode, TokenEncoderConfig};
use sdt_core::model::{ModelConfig, Toggles};
use sdt_core::objective::{LossConfig, Normalization};
use sdt_core::token_post::IcdConfig;

use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunToggles {
    pub t_encoder: bool,
    pub i_encoder: bool,
    pub da_loss: bool,
    pub icd: bool,
    pub spatial_fusion: bool,
    /// `fnda` or `mhsa` attention in the token encoder.
    pub attention: AttentionKind,
}

impl Default for RunToggles {
    fn default() -> Self {
        Self {
            t_encoder: true,
            i_encoder: true,
            da_loss: true,
            icd: true,
            spatial_fusion: true,
            attention: AttentionKind::Fnda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub train: PathBuf,
    pub test: PathBuf,
    pub feasibility: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            train: "data/train.jsonl".into(),
            test: "data/test.jsonl".into(),
            feasibility: "data/feasibility.json".into(),
            run_dir: "runs/default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub d: usize,
    #[serde(rename = "C")]
    pub num_verbs: usize,
    #[serde(rename = "L_T")]
    pub l_t: usize,
    #[serde(rename = "L_I")]
    pub l_i: usize,
    pub heads: usize,
    /// Hidden width of every feed-forward network and the verb head.
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub lambda_train: f64,
    pub lambda_infer: f64,
    pub mask_mode: MaskMode,
    pub toggles: RunToggles,
    pub focal_gamma: f64,
    pub focal_balance: f64,
    pub normalization: Normalization,
    pub da_alpha_init: f64,
    pub da_beta_init: f64,
    pub prior: f64,
    pub icd: IcdConfig,
    pub filter: FilterConfig,
    pub distant_threshold: f64,
    pub bin_width: f64,
    pub seed: u64,
    pub synth: SynthConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d: 256,
            num_verbs: 117,
            l_t: 3,
            l_i: 3,
            heads: 8,
            hidden: 1024,
            dropout: 0.1,
            lr: 2e-4,
            weight_decay: 1e-4,
            epochs: 20,
            lr_drop_epoch: 10,
            lr_drop_factor: 0.1,
            batch_size: 16,
            lambda_train: 1.0,
            lambda_infer: 2.8,
            mask_mode: MaskMode::Additive,
            toggles: RunToggles::default(),
            focal_gamma: 2.0,
            focal_balance: 0.25,
            normalization: Normalization::PositivePairs,
            da_alpha_init: 1.0,
            da_beta_init: 0.0,
            prior: 0.01,
            icd: IcdConfig::default(),
            filter: FilterConfig::default(),
            distant_threshold: 0.5,
            bin_width: 0.05,
            seed: 0,
            synth: SynthConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Small settings that train in well under a minute on one core.
    pub fn desk() -> Self {
        let mut c = Self {
            d: 32,
            num_verbs: 10,
            l_t: 2,
            l_i: 1,
            heads: 4,
            hidden: 64,
            dropout: 0.0,
            lr: 1e-3,
            epochs: 12,
            lr_drop_epoch: 9,
            prior: 0.05,
            da_alpha_init: 4.0,
            da_beta_init: -2.0,
            ..Self::default()
        };
        c.synth.d = 32;
        c.synth.num_verbs = 10;
        c
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            num_verbs: self.num_verbs,
            token_encoder: TokenEncoderConfig {
                layers: self.l_t,
                heads: self.heads,
                hidden: self.hidden,
                mask_mode: self.mask_mode,
                attention: self.toggles.attention,
            },
            interaction_layers: self.l_i,
            ffn_hidden: self.hidden,
            verb_hidden: self.hidden,
            dropout: self.dropout,
            toggles: Toggles {
                t_encoder: self.toggles.t_encoder,
                i_encoder: self.toggles.i_encoder,
                icd: self.toggles.icd,
                spatial_fusion: self.toggles.spatial_fusion,
            },
            icd: self.icd,
            prior: self.prior,
            da_alpha_init: self.da_alpha_init,
            da_beta_init: self.da_beta_init,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            focal_gamma: self.focal_gamma,
            focal_balance: self.focal_balance,
            normalization: self.normalization,
            da_enabled: self.toggles.da_loss,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model_config().validate()?;
        self.loss_config().validate()?;
        anyhow::ensure!(self.batch_size > 0, "batch_size must be positive");
        anyhow::ensure!(self.lr > 0.0 && self.lr.is_finite(), "lr must be positive");
        anyhow::ensure!(self.weight_decay >= 0.0, "weight_decay must be >= 0");
        anyhow::ensure!(self.lambda_infer >= 1.0 && self.lambda_train >= 1.0, "lambda must be >= 1");
        anyhow::ensure!(self.bin_width > 0.0, "bin_width must be positive");
        anyhow::ensure!(
            self.filter.min_keep <= self.filter.max_keep,
            "filter.min_keep exceeds filter.max_keep"
        );
        Ok(())
    }

    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Applies `key=value` overrides. Values parse as JSON when they can and
    /// are taken as strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> anyhow::Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .with_context(|| format!("override `{o}` is not key=value"))?;
            let value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, key, value)?;
        }
        serde_json::from_value(v).context("config after overrides")
    }

    /// SHA-256 of the model-shaping fields.
    pub fn model_hash(&self) -> String {
        model_hash(&self.model_config())
    }
}

pub fn model_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            bail!("`{key}`: `{part}` is not inside an object");
        };
        let Some(next) = map.get_mut(*part) else {
            bail!("unknown config key `{key}`");
        };
        if k + 1 == parts.len() {
            *next = value;
            return Ok(());
        }
        cur = next;
    }
    bail!("empty config key")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.d, c.heads, c.hidden, c.l_t, c.epochs, c.lr_drop_epoch), (256, 8, 1024, 3, 20, 10));
        assert_eq!((c.lr, c.weight_decay, c.dropout), (2e-4, 1e-4, 0.1));
        assert_eq!((c.lambda_train, c.lambda_infer, c.batch_size), (1.0, 2.8, 16));
        c.validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::desk();
        let v = serde_json::to_value(&c).unwrap();
        let back = RunConfig::from_json(&v.to_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(serde_json::to_value(&back).unwrap(), v);
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides(&["epochs=3", "toggles.attention=mhsa", "synth.seed=9", "toggles.da_loss=false"])
            .unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.toggles.attention, AttentionKind::Mhsa);
        assert_eq!(c.synth.seed, 9);
        assert!(!c.toggles.da_loss);
        assert!(RunConfig::default().with_overrides(&["nope=1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["epochs"]).is_err());
        assert!(RunConfig::default().with_overrides(&["epochs=many"]).is_err());
    }

    #[test]
    fn hash_tracks_model_shape_only() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        b.epochs = 99;
        assert_eq!(a.model_hash(), b.model_hash());
        b.hidden = 65;
        assert_ne!(a.model_hash(), b.model_hash());
    }
}
