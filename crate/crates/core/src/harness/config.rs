//! Flat `key = value` run configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ThresholdRule;
use crate::tmem::{TmemMode, Upsample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 - step / total)^0.9`
    Poly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train_data: PathBuf,
    pub val_data: Option<PathBuf>,
    pub run_dir: PathBuf,
    pub vocab: Option<PathBuf>,
    /// Category lexicon used when a corpus lacks decomposed fragments.
    pub categories: Option<PathBuf>,
    pub spatial: Option<PathBuf>,
    pub image_size: usize,

    pub channels: [usize; 4],
    pub text_dim: usize,
    pub max_text_len: usize,
    pub attn_dim: usize,
    pub mlp_hidden: usize,
    pub tmem_blocks: usize,
    pub reduction: usize,
    pub decoder_dim: usize,
    pub max_grid: usize,

    pub fiam: bool,
    pub tmem: TmemMode,
    pub channel_modulation: bool,
    pub object_branch: bool,
    pub spatial_branch: bool,
    pub pos_embedding: bool,
    pub upsample: Upsample,

    pub optimizer: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub epochs: usize,
    /// Stop after this many optimisation steps; 0 means no cap.
    pub max_steps: usize,
    pub batch_size: usize,
    pub dice_weight: f64,
    pub seed: u64,
    pub threshold_rule: ThresholdRule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train_data: PathBuf::from("data/train"),
            val_data: None,
            run_dir: PathBuf::from("runs/default"),
            vocab: None,
            categories: None,
            spatial: None,
            image_size: 96,
            channels: [32, 64, 128, 256],
            text_dim: 64,
            max_text_len: 16,
            attn_dim: 64,
            mlp_hidden: 256,
            tmem_blocks: 2,
            reduction: 4,
            decoder_dim: 32,
            max_grid: 32,
            fiam: true,
            tmem: TmemMode::Text,
            channel_modulation: true,
            object_branch: true,
            spatial_branch: true,
            pos_embedding: true,
            upsample: Upsample::Nearest,
            optimizer: "adamw".into(),
            lr: 1e-3,
            weight_decay: 0.1,
            lr_schedule: LrSchedule::Constant,
            epochs: 30,
            max_steps: 0,
            batch_size: 8,
            dice_weight: 0.1,
            seed: 0,
            threshold_rule: ThresholdRule::Strict,
        }
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {v:?}"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl fmt::Display for TmemMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TmemMode::Text => "on",
            TmemMode::GridSelfAttention => "cim-stub",
            TmemMode::Off => "off",
        })
    }
}

impl FromStr for TmemMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(TmemMode::Text),
            "cim-stub" => Ok(TmemMode::GridSelfAttention),
            "off" => Ok(TmemMode::Off),
            _ => Err(Error::Config(format!("tmem: expected on|cim-stub|off, got {s:?}"))),
        }
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 37] = [
        "train_data",
        "val_data",
        "run_dir",
        "vocab",
        "categories",
        "spatial",
        "image_size",
        "channels",
        "text_dim",
        "max_text_len",
        "attn_dim",
        "mlp_hidden",
        "tmem_blocks",
        "reduction",
        "decoder_dim",
        "max_grid",
        "fiam",
        "tmem",
        "channel_modulation",
        "object_branch",
        "spatial_branch",
        "pos_embedding",
        "upsample",
        "optimizer",
        "lr",
        "weight_decay",
        "lr_schedule",
        "epochs",
        "max_steps",
        "batch_size",
        "dice_weight",
        "seed",
        "threshold_rule",
        // aliases kept for readability of hand-written configs
        "cm",
        "gob",
        "spb",
        "dims",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "train_data" => self.train_data = PathBuf::from(v),
            "val_data" => self.val_data = opt_path(v),
            "run_dir" => self.run_dir = PathBuf::from(v),
            "vocab" => self.vocab = opt_path(v),
            "categories" => self.categories = opt_path(v),
            "spatial" => self.spatial = opt_path(v),
            "image_size" => self.image_size = parse_num(key, v)?,
            "channels" | "dims" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| parse_num(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.channels = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected 4 comma-separated values")))?;
            }
            "text_dim" => self.text_dim = parse_num(key, v)?,
            "max_text_len" => self.max_text_len = parse_num(key, v)?,
            "attn_dim" => self.attn_dim = parse_num(key, v)?,
            "mlp_hidden" => self.mlp_hidden = parse_num(key, v)?,
            "tmem_blocks" => self.tmem_blocks = parse_num(key, v)?,
            "reduction" => self.reduction = parse_num(key, v)?,
            "decoder_dim" => self.decoder_dim = parse_num(key, v)?,
            "max_grid" => self.max_grid = parse_num(key, v)?,
            "fiam" => self.fiam = parse_bool(key, v)?,
            "tmem" => self.tmem = v.parse()?,
            "channel_modulation" | "cm" => self.channel_modulation = parse_bool(key, v)?,
            "object_branch" | "gob" => self.object_branch = parse_bool(key, v)?,
            "spatial_branch" | "spb" => self.spatial_branch = parse_bool(key, v)?,
            "pos_embedding" => self.pos_embedding = parse_bool(key, v)?,
            "upsample" => {
                self.upsample = match v {
                    "nearest" => Upsample::Nearest,
                    "bilinear" => Upsample::Bilinear,
                    _ => return Err(Error::Config(format!("upsample: unknown mode {v:?}"))),
                }
            }
            "optimizer" => {
                if v != "adamw" {
                    return Err(Error::Config(format!("optimizer: only adamw is supported, got {v:?}")));
                }
                self.optimizer = v.to_string();
            }
            "lr" => self.lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "lr_schedule" => {
                self.lr_schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "poly" => LrSchedule::Poly,
                    _ => return Err(Error::Config(format!("lr_schedule: unknown {v:?}"))),
                }
            }
            "epochs" => self.epochs = parse_num(key, v)?,
            "max_steps" => self.max_steps = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "dice_weight" => self.dice_weight = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "threshold_rule" => {
                self.threshold_rule = match v {
                    "strict" => ThresholdRule::Strict,
                    "inclusive" => ThresholdRule::Inclusive,
                    _ => return Err(Error::Config(format!("threshold_rule: unknown {v:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parse a config body. Later keys override the defaults; unknown or
    /// repeated keys are errors.
    pub fn parse(body: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in body.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("text_dim", self.text_dim),
            ("max_text_len", self.max_text_len),
            ("attn_dim", self.attn_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("tmem_blocks", self.tmem_blocks),
            ("reduction", self.reduction),
            ("decoder_dim", self.decoder_dim),
            ("max_grid", self.max_grid),
            ("batch_size", self.batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.image_size % 32 != 0 {
            return Err(Error::Config("image_size must be divisible by 32".into()));
        }
        if self.image_size / 32 > self.max_grid {
            return Err(Error::Config("max_grid is smaller than the stage-4 grid".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.dice_weight < 0.0 {
            return Err(Error::Config("lr must be positive; weight_decay, dice_weight non-negative".into()));
        }
        Ok(())
    }

    /// Every field, one per line, in a fixed order; parses back to `self`.
    pub fn to_text(&self) -> String {
        let c = self.channels;
        let lines = [
            ("train_data", self.train_data.display().to_string()),
            ("val_data", show_path(&self.val_data)),
            ("run_dir", self.run_dir.display().to_string()),
            ("vocab", show_path(&self.vocab)),
            ("categories", show_path(&self.categories)),
            ("spatial", show_path(&self.spatial)),
            ("image_size", self.image_size.to_string()),
            ("channels", format!("{},{},{},{}", c[0], c[1], c[2], c[3])),
            ("text_dim", self.text_dim.to_string()),
            ("max_text_len", self.max_text_len.to_string()),
            ("attn_dim", self.attn_dim.to_string()),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("tmem_blocks", self.tmem_blocks.to_string()),
            ("reduction", self.reduction.to_string()),
            ("decoder_dim", self.decoder_dim.to_string()),
            ("max_grid", self.max_grid.to_string()),
            ("fiam", on_off(self.fiam).into()),
            ("tmem", self.tmem.to_string()),
            ("channel_modulation", on_off(self.channel_modulation).into()),
            ("object_branch", on_off(self.object_branch).into()),
            ("spatial_branch", on_off(self.spatial_branch).into()),
            ("pos_embedding", on_off(self.pos_embedding).into()),
            (
                "upsample",
                match self.upsample {
                    Upsample::Nearest => "nearest",
                    Upsample::Bilinear => "bilinear",
                }
                .into(),
            ),
            ("optimizer", self.optimizer.clone()),
            ("lr", format!("{:e}", self.lr)),
            ("weight_decay", self.weight_decay.to_string()),
            (
                "lr_schedule",
                match self.lr_schedule {
                    LrSchedule::Constant => "constant",
                    LrSchedule::Poly => "poly",
                }
                .into(),
            ),
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("dice_weight", self.dice_weight.to_string()),
            ("seed", self.seed.to_string()),
            (
                "threshold_rule",
                match self.threshold_rule {
                    ThresholdRule::Strict => "strict",
                    ThresholdRule::Inclusive => "inclusive",
                }
                .into(),
            ),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.val_data = Some("v".into());
        cfg.tmem = TmemMode::GridSelfAttention;
        cfg.spatial_branch = false;
        cfg.lr = 3e-5;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("seed"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("image_size = 100").is_err());
        assert!(RunConfig::parse("channels = 1,2,3").is_err());
        assert!(RunConfig::parse("fiam = maybe").is_err());
        assert!(RunConfig::parse("tmem_blocks = 0").is_err());
        assert!(RunConfig::parse("optimizer = sgd").is_err());
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = RunConfig::parse("# hi\nseed = 9 # trailing\n\ntmem = off\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.tmem, TmemMode::Off);
        assert_eq!(cfg.weight_decay, 0.1);
        assert_eq!(cfg.dice_weight, 0.1);
    }
}
