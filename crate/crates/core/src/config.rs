//! Run configuration: flat `section.key = value` settings with defaults,
//! loaded from a file and overridden from the command line.
//!
//! A file may also group keys under `[section]` headers, after which the
//! section prefix can be left off. `#` starts a comment line.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::dtw::{BidtwMode, DtwConfig, Scope};
use crate::error::{Error, Result};
use crate::eval::{CropSpec, Protocol, Reversal};
use crate::model::{ModelConfig, ModelVariant};
use crate::synth::{ClassSpec, SynthSpec};
use crate::train::TrainConfig;

/// Every accepted key with its default and a one-line description.
/// `auto` defers to the model variant or scale, an empty default means the
/// key has no value until set.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("model.variant", "m1", "m1, m2, m3, m1-3d, m2-3d or m3-3d"),
    ("model.scale", "desk", "desk (16x16, minutes on a CPU) or full (256x256)"),
    ("model.frame_size", "auto", "frame side in pixels, a multiple of 8"),
    ("model.clip_len", "auto", "frames per clip"),
    ("model.hidden", "auto", "ConvLSTM widths of the three blocks, comma separated"),
    ("model.proj_channels", "auto", "channels after each block projection"),
    ("model.embedding_dim", "auto", "clip embedding width"),
    ("model.kernel", "3", "odd convolution kernel size"),
    ("model.init_seed", "0", "seed of the weight initialization"),
    ("train.lr", "0.001", "initial learning rate of every stage"),
    ("train.lr_decay", "0.1", "learning-rate multiplier"),
    ("train.lr_decay_every", "10", "epochs between learning-rate decays"),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.weight_decay", "0.001", "L2 coefficient of the triplet objective"),
    ("train.margin", "0.5", "triplet margin"),
    ("train.pretrain_epochs", "50", "autoencoder pretraining epochs"),
    ("train.triplet_epochs", "50", "triplet training epochs"),
    ("train.finetune_epochs", "50", "challenging-sample fine-tuning epochs"),
    ("train.patience", "5", "epochs without validation improvement before stopping"),
    ("train.batch", "auto", "batch size, 32 for 2D and 8 for 3D variants"),
    ("train.mining_fraction", "0.2", "share of triplets mined as hard"),
    ("train.remix_ratio", "0.5", "share of hard triplets in each fine-tuning batch"),
    ("train.per_anchor", "1", "triplets sampled per anchor clip"),
    ("train.validation_fraction", "0.15", "share of clips or triplets held out for early stopping"),
    ("train.pretrain", "true", "run autoencoder pretraining"),
    ("train.triplet", "true", "run triplet training"),
    ("train.challenging", "true", "run hard-triplet mining and fine-tuning"),
    ("train.seed", "", "training seed, required"),
    ("dtw.mode", "one-reversed", "forward, both-reversed or one-reversed"),
    ("dtw.scope", "subsequence", "full or subsequence"),
    ("dtw.top_k", "10", "results returned by query"),
    ("eval.protocol", "by-class", "by-class or by-clip relevance"),
    ("eval.queries", "60", "number of generated test queries"),
    ("eval.crop_runs", "2", "runs of consecutive frames per query"),
    ("eval.crop_run_frames", "8", "frames per run, whole clips; 0 takes the full video"),
    ("eval.crop_max_gap", "4", "largest gap between runs in frames"),
    ("eval.reversal", "none", "none, clip-order or frames"),
    ("eval.reverse_fraction", "0", "share of queries that are reversed"),
    ("eval.seed", "", "query generation seed, required"),
    ("data.stride", "auto", "frames between clip starts, defaults to the clip length"),
    ("data.classes", "square-left,circle-bounce,triangle-rotate", "synthetic classes as shape-motion pairs"),
    ("data.videos_per_class", "20", "synthetic videos per class"),
    ("data.frames", "32", "frames per synthetic video"),
    ("data.size", "auto", "synthetic frame side, defaults to the model frame size"),
    ("data.channels", "auto", "3 (RGB) or 4 (RGB + depth), defaults to the variant's input"),
    ("data.noise_std", "0.05", "Gaussian pixel noise"),
    ("data.velocity", "1", "motion step in pixels per frame"),
    ("data.object_size", "6", "shape side in pixels"),
    ("data.shared_trajectory", "none", "none, or the jitter of a class-wide start position"),
    ("data.reversed_fraction", "0", "share of synthetic videos stored played backward"),
    ("data.color_jitter", "1", "spread of per-video colors, 0 to 1"),
    ("data.seed", "", "synthetic data seed, required"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", n + 1)))?;
            let k = k.trim();
            let key = if k.contains('.') || section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            self.set(&key, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.merge_text(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("`{key}` is not a config key"))
    }

    fn is_auto(&self, key: &str) -> bool {
        self.get(key) == "auto"
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
        }
    }

    /// The seed under `key`, which has no default.
    pub fn seed(&self, key: &str) -> Result<u64> {
        if self.get(key).is_empty() {
            return Err(Error::Config(format!("`{key}` is required (pass --seed or set it in the config)")));
        }
        self.parse(key)
    }

    /// Effective settings with descriptions, loadable by [`RunConfig::merge_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, _, doc) in KEYS {
            let (sec, name) = key.split_once('.').expect("sectioned key");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{sec}]\n"));
                section = sec;
            }
            out.push_str(&format!("# {doc}\n{name} = {}\n", self.get(key)));
        }
        out
    }

    pub fn variant(&self) -> Result<ModelVariant> {
        self.parse("model.variant")
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let variant = self.variant()?;
        let mut m = match self.get("model.scale") {
            "desk" => ModelConfig::desk(variant),
            "full" => ModelConfig::full(variant),
            s => return Err(Error::Config(format!("`model.scale`: expected desk or full, got `{s}`"))),
        };
        if !self.is_auto("model.frame_size") {
            m.frame_size = self.parse("model.frame_size")?;
        }
        if !self.is_auto("model.clip_len") {
            m.clip_len = self.parse("model.clip_len")?;
        }
        if !self.is_auto("model.hidden") {
            m.hidden = self
                .get("model.hidden")
                .split(',')
                .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("`model.hidden`: bad width `{v}`"))))
                .collect::<Result<_>>()?;
        }
        if !self.is_auto("model.proj_channels") {
            m.proj_channels = self.parse("model.proj_channels")?;
        }
        if !self.is_auto("model.embedding_dim") {
            m.embedding_dim = self.parse("model.embedding_dim")?;
        }
        m.kernel = self.parse("model.kernel")?;
        m.validate()?;
        Ok(m)
    }

    pub fn init_seed(&self) -> Result<u64> {
        self.parse("model.init_seed")
    }

    /// Training settings; the seed is left at 0 when `train.seed` is unset.
    pub fn train(&self) -> Result<TrainConfig> {
        let variant = self.variant()?;
        let base = TrainConfig::for_variant(variant);
        let cfg = TrainConfig {
            lr: self.parse("train.lr")?,
            lr_decay: self.parse("train.lr_decay")?,
            lr_decay_every: self.parse("train.lr_decay_every")?,
            momentum: self.parse("train.momentum")?,
            weight_decay: self.parse("train.weight_decay")?,
            margin: self.parse("train.margin")?,
            pretrain_epochs: self.parse("train.pretrain_epochs")?,
            triplet_epochs: self.parse("train.triplet_epochs")?,
            finetune_epochs: self.parse("train.finetune_epochs")?,
            early_stop_patience: self.parse("train.patience")?,
            batch: if self.is_auto("train.batch") { base.batch } else { self.parse("train.batch")? },
            mining_fraction: self.parse("train.mining_fraction")?,
            remix_ratio: self.parse("train.remix_ratio")?,
            per_anchor: self.parse("train.per_anchor")?,
            validation_fraction: self.parse("train.validation_fraction")?,
            pretrain: self.flag("train.pretrain")?,
            triplet: self.flag("train.triplet")?,
            challenging: self.flag("train.challenging")?,
            seed: if self.get("train.seed").is_empty() { 0 } else { self.parse("train.seed")? },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dtw(&self) -> Result<DtwConfig> {
        Ok(DtwConfig { mode: self.parse::<BidtwMode>("dtw.mode")?, scope: self.parse::<Scope>("dtw.scope")? })
    }

    pub fn top_k(&self) -> Result<usize> {
        self.parse("dtw.top_k")
    }

    pub fn protocol(&self) -> Result<Protocol> {
        self.parse("eval.protocol")
    }

    pub fn crop(&self) -> Result<CropSpec> {
        let reversal = match self.get("eval.reversal") {
            "none" => Reversal::None,
            "clip-order" | "clip_order" => Reversal::ClipOrder,
            "frames" => Reversal::Frames,
            v => return Err(Error::Config(format!("`eval.reversal`: expected none, clip-order or frames, got `{v}`"))),
        };
        let reverse_fraction: f64 = self.parse("eval.reverse_fraction")?;
        if !(0.0..=1.0).contains(&reverse_fraction) {
            return Err(Error::Config(format!("`eval.reverse_fraction` {reverse_fraction} must be in [0, 1]")));
        }
        Ok(CropSpec {
            runs: self.parse("eval.crop_runs")?,
            run_frames: self.parse("eval.crop_run_frames")?,
            max_gap: self.parse("eval.crop_max_gap")?,
            reversal,
            reverse_fraction,
        })
    }

    /// Clip stride in frames.
    pub fn stride(&self) -> Result<usize> {
        if self.is_auto("data.stride") {
            Ok(self.model()?.clip_len)
        } else {
            let s: usize = self.parse("data.stride")?;
            if s == 0 {
                return Err(Error::Config("`data.stride` must be positive".into()));
            }
            Ok(s)
        }
    }

    /// Synthetic data settings; needs `data.seed`.
    pub fn synth(&self) -> Result<SynthSpec> {
        let model = self.model()?;
        let classes = self
            .get("data.classes")
            .split(',')
            .map(|c| c.trim().parse::<ClassSpec>())
            .collect::<Result<Vec<_>>>()?;
        let spec = SynthSpec {
            classes,
            videos_per_class: self.parse("data.videos_per_class")?,
            frames: self.parse("data.frames")?,
            size: if self.is_auto("data.size") { model.frame_size } else { self.parse("data.size")? },
            channels: if self.is_auto("data.channels") { model.input_channels } else { self.parse("data.channels")? },
            noise_std: self.parse("data.noise_std")?,
            seed: self.seed("data.seed")?,
            velocity: self.parse("data.velocity")?,
            object_size: self.parse("data.object_size")?,
            shared_trajectory: match self.get("data.shared_trajectory") {
                "none" => None,
                _ => Some(self.parse("data.shared_trajectory")?),
            },
            reversed_fraction: self.parse("data.reversed_fraction")?,
            color_jitter: self.parse("data.color_jitter")?,
        };
        spec.validate(model.clip_len)?;
        Ok(spec)
    }
}
