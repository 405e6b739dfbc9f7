use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// The six encoder/decoder pairings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    M1,
    M2,
    M3,
    M1_3d,
    M2_3d,
    M3_3d,
}

/// Temporal core used inside each decoder up-sampling block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    /// URB (2D) / R3BP (3D): residual ConvLSTM.
    ConvLstm,
    /// UQB (2D) / U4DB (3D): factorized convolution over time and space.
    Quasi4d,
    /// UTB: self-attention over per-timestep latents, then convolutional
    /// up-sampling.
    Transformer,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 6] = [
        ModelVariant::M1,
        ModelVariant::M2,
        ModelVariant::M3,
        ModelVariant::M1_3d,
        ModelVariant::M2_3d,
        ModelVariant::M3_3d,
    ];

    pub fn decoder_kind(self) -> DecoderKind {
        match self {
            ModelVariant::M1 | ModelVariant::M1_3d => DecoderKind::ConvLstm,
            ModelVariant::M2 | ModelVariant::M2_3d => DecoderKind::Quasi4d,
            ModelVariant::M3 | ModelVariant::M3_3d => DecoderKind::Transformer,
        }
    }

    pub fn is_3d(self) -> bool {
        matches!(self, ModelVariant::M1_3d | ModelVariant::M2_3d | ModelVariant::M3_3d)
    }

    /// Block names as listed in the architecture table: (encoder, decoder).
    pub fn block_names(self) -> (&'static str, &'static str) {
        match self {
            ModelVariant::M1 => ("LRBP", "URB"),
            ModelVariant::M2 => ("LRBP", "UQB"),
            ModelVariant::M3 => ("LRBP", "UTB"),
            ModelVariant::M1_3d => ("L3RBP", "R3BP"),
            ModelVariant::M2_3d => ("L3RBP", "U4DB"),
            ModelVariant::M3_3d => ("L3RBP", "UTB"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::M1 => "m1",
            ModelVariant::M2 => "m2",
            ModelVariant::M3 => "m3",
            ModelVariant::M1_3d => "m1-3d",
            ModelVariant::M2_3d => "m2-3d",
            ModelVariant::M3_3d => "m3-3d",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s) || v.as_str().replace('-', "_").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub intermediate: usize,
}

impl TransformerConfig {
    pub const FULL: TransformerConfig = TransformerConfig { layers: 5, heads: 3, hidden: 512, intermediate: 2048 };
    pub const DESK: TransformerConfig = TransformerConfig { layers: 1, heads: 3, hidden: 24, intermediate: 48 };

    /// Width of one attention head. Heads share `hidden` by integer
    /// division, so with 512 wide and 3 heads each head is 170 wide.
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    /// 2 for frames, 3 for volumetric frames.
    pub spatial_rank: usize,
    pub input_channels: usize,
    /// Every spatial extent of a frame.
    pub frame_size: usize,
    pub clip_len: usize,
    /// ConvLSTM hidden channels of the three encoder blocks (per direction
    /// for the bidirectional layer). The decoder uses them in reverse.
    pub hidden: Vec<usize>,
    /// Channels after each block's 1x1 projection.
    pub proj_channels: usize,
    pub embedding_dim: usize,
    pub kernel: usize,
    pub transformer: Option<TransformerConfig>,
    pub leaky_slope: f64,
    pub norm_eps: f64,
}

pub const BLOCKS: usize = 3;

impl ModelConfig {
    /// Small configuration that trains in minutes on a CPU.
    pub fn desk(variant: ModelVariant) -> Self {
        ModelConfig {
            variant,
            spatial_rank: 2,
            input_channels: if variant.is_3d() { 4 } else { 3 },
            frame_size: 16,
            clip_len: 4,
            hidden: vec![4, 4, 4],
            proj_channels: 8,
            embedding_dim: 32,
            kernel: 3,
            transformer: (variant.decoder_kind() == DecoderKind::Transformer).then_some(TransformerConfig::DESK),
            leaky_slope: 0.2,
            norm_eps: 1e-5,
        }
    }

    /// Full-size configuration: 256x256 RGB frames, 64/32 ConvLSTM
    /// hidden states, 16 projected channels and a 4000-wide embedding.
    pub fn full(variant: ModelVariant) -> Self {
        ModelConfig {
            variant,
            spatial_rank: 2,
            input_channels: if variant.is_3d() { 4 } else { 3 },
            frame_size: 256,
            clip_len: 3,
            hidden: vec![32, 32, 32],
            proj_channels: 16,
            embedding_dim: 4000,
            kernel: 3,
            transformer: (variant.decoder_kind() == DecoderKind::Transformer).then_some(TransformerConfig::FULL),
            leaky_slope: 0.2,
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=3).contains(&self.spatial_rank) {
            return bad(format!("spatial_rank must be 2 or 3, got {}", self.spatial_rank));
        }
        if self.hidden.len() != BLOCKS {
            return bad(format!("expected {BLOCKS} hidden sizes, got {}", self.hidden.len()));
        }
        if self.frame_size == 0 || self.frame_size % (1 << BLOCKS) != 0 {
            return bad(format!("frame_size {} must be a positive multiple of 8", self.frame_size));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        for (name, v) in [
            ("input_channels", self.input_channels),
            ("clip_len", self.clip_len),
            ("proj_channels", self.proj_channels),
            ("embedding_dim", self.embedding_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.hidden.contains(&0) {
            return bad("hidden sizes must be positive".into());
        }
        match (self.variant.decoder_kind(), &self.transformer) {
            (DecoderKind::Transformer, None) => return bad(format!("{} needs a transformer section", self.variant)),
            (DecoderKind::Transformer, Some(t)) => {
                if t.layers == 0 || t.heads == 0 || t.intermediate == 0 || t.head_dim() == 0 {
                    return bad(format!("invalid transformer settings {t:?}"));
                }
            }
            _ => {}
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope {} must be in (0, 1)", self.leaky_slope));
        }
        Ok(())
    }

    /// Spatial extents of one input frame.
    pub fn frame_extents(&self) -> Vec<usize> {
        vec![self.frame_size; self.spatial_rank]
    }

    /// Shape of a clip tensor: `(T, spatial..., C)`.
    pub fn clip_shape(&self) -> Vec<usize> {
        let mut s = vec![self.clip_len];
        s.extend(self.frame_extents());
        s.push(self.input_channels);
        s
    }

    /// Extent of the latent frame after three halvings.
    pub fn latent_size(&self) -> usize {
        self.frame_size >> BLOCKS
    }

    pub fn latent_len(&self) -> usize {
        self.latent_size().pow(self.spatial_rank as u32) * self.proj_channels
    }

    /// `key=value` lines, the inverse of [`ModelConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("variant={}", self.variant),
            format!("spatial_rank={}", self.spatial_rank),
            format!("input_channels={}", self.input_channels),
            format!("frame_size={}", self.frame_size),
            format!("clip_len={}", self.clip_len),
            format!("hidden={}", self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",")),
            format!("proj_channels={}", self.proj_channels),
            format!("embedding_dim={}", self.embedding_dim),
            format!("kernel={}", self.kernel),
            format!("leaky_slope={}", self.leaky_slope),
            format!("norm_eps={}", self.norm_eps),
        ];
        if let Some(t) = &self.transformer {
            lines.push(format!("transformer.layers={}", t.layers));
            lines.push(format!("transformer.heads={}", t.heads));
            lines.push(format!("transformer.hidden={}", t.hidden));
            lines.push(format!("transformer.intermediate={}", t.intermediate));
        }
        lines.join("\n") + "\n"
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut variant = None;
        let mut cfg = ModelConfig::desk(ModelVariant::M1);
        let mut tr = TransformerConfig { layers: 0, heads: 0, hidden: 0, intermediate: 0 };
        let mut has_tr = false;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| -> Result<usize> {
                v.parse().map_err(|_| Error::Config(format!("`{key}`: not an integer: `{v}`")))
            };
            let real = |v: &str| -> Result<f64> {
                v.parse().map_err(|_| Error::Config(format!("`{key}`: not a number: `{v}`")))
            };
            match key {
                "variant" => variant = Some(value.parse::<ModelVariant>()?),
                "spatial_rank" => cfg.spatial_rank = num(value)?,
                "input_channels" => cfg.input_channels = num(value)?,
                "frame_size" => cfg.frame_size = num(value)?,
                "clip_len" => cfg.clip_len = num(value)?,
                "hidden" => cfg.hidden = value.split(',').map(|v| num(v.trim())).collect::<Result<_>>()?,
                "proj_channels" => cfg.proj_channels = num(value)?,
                "embedding_dim" => cfg.embedding_dim = num(value)?,
                "kernel" => cfg.kernel = num(value)?,
                "leaky_slope" => cfg.leaky_slope = real(value)?,
                "norm_eps" => cfg.norm_eps = real(value)?,
                "transformer.layers" => (tr.layers, has_tr) = (num(value)?, true),
                "transformer.heads" => (tr.heads, has_tr) = (num(value)?, true),
                "transformer.hidden" => (tr.hidden, has_tr) = (num(value)?, true),
                "transformer.intermediate" => (tr.intermediate, has_tr) = (num(value)?, true),
                other => return Err(Error::Config(format!("unknown model key `{other}`"))),
            }
        }
        cfg.variant = variant.ok_or_else(|| Error::Config("missing `variant`".into()))?;
        cfg.transformer = has_tr.then_some(tr);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_pairings() {
        use ModelVariant::*;
        let expect = [
            (M1, "LRBP", "URB"),
            (M2, "LRBP", "UQB"),
            (M3, "LRBP", "UTB"),
            (M1_3d, "L3RBP", "R3BP"),
            (M2_3d, "L3RBP", "U4DB"),
            (M3_3d, "L3RBP", "UTB"),
        ];
        for (v, e, d) in expect {
            assert_eq!(v.block_names(), (e, d));
        }
    }

    #[test]
    fn text_roundtrip_all_variants() {
        for v in ModelVariant::ALL {
            for cfg in [ModelConfig::desk(v), ModelConfig::full(v)] {
                let back = ModelConfig::from_text(&cfg.to_text()).unwrap();
                assert_eq!(back, cfg);
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::desk(ModelVariant::M1);
        c.frame_size = 12;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(ModelVariant::M3);
        c.transformer = None;
        assert!(c.validate().is_err());
        assert!(ModelConfig::from_text("variant=m1\nbogus=1\n").is_err());
        assert!("m4".parse::<ModelVariant>().is_err());
        assert_eq!("M2-3D".parse::<ModelVariant>().unwrap(), ModelVariant::M2_3d);
    }
}
