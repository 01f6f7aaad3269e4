use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenMode {
    PerVideo,
    PerFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvType {
    #[serde(rename = "2d")]
    D2,
    #[serde(rename = "2+1d")]
    D2Plus1,
    #[serde(rename = "3d")]
    D3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DownsamplePosition {
    Stem,
    PerStage,
}

impl TokenMode {
    pub fn name(self) -> &'static str {
        match self {
            TokenMode::PerVideo => "per-video",
            TokenMode::PerFrame => "per-frame",
        }
    }
}

impl ConvType {
    pub fn name(self) -> &'static str {
        match self {
            ConvType::D2 => "2d",
            ConvType::D2Plus1 => "2+1d",
            ConvType::D3 => "3d",
        }
    }
}

impl DownsamplePosition {
    pub fn name(self) -> &'static str {
        match self {
            DownsamplePosition::Stem => "stem",
            DownsamplePosition::PerStage => "per-stage",
        }
    }
}

/// Declarative description of a variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks_per_stage: [usize; 4],
    /// Channels of the stem and of stage 1; each later stage doubles it.
    pub base_dim: usize,
    pub expansion: f64,
    pub resolution: usize,
    pub temporal_stride: usize,
    pub frames: usize,
    pub token_count: usize,
    pub token_dim: usize,
    pub token_mode: TokenMode,
    pub conv_type: ConvType,
    pub activation: Activation,
    pub downsample_position: DownsamplePosition,
    pub former_enabled: bool,
    pub num_classes: usize,
    /// Attention heads of the Former block and both bridges.
    pub heads: usize,
    /// Hidden width of the classifier head; 0 means `4·(C4 + d)`.
    pub head_hidden: usize,
    /// Dynamic ReLU on both activations of a Mobile block rather than only
    /// the first.
    pub dyrelu_both: bool,
}

/// Field names in canonical order.
pub const FIELDS: [&str; 17] = [
    "blocks_per_stage",
    "base_dim",
    "expansion",
    "resolution",
    "temporal_stride",
    "frames",
    "token_count",
    "token_dim",
    "token_mode",
    "conv_type",
    "activation",
    "downsample_position",
    "former_enabled",
    "num_classes",
    "heads",
    "head_hidden",
    "dyrelu_both",
];

// Sanity ceilings, far above any variant, so a config read from a file can
// never ask for an absurd layout.
const MAX_BLOCKS: usize = 64;
const MAX_WIDTH: usize = 1 << 16;
const MAX_EXTENT: usize = 1 << 16;
const MAX_EXPANSION: f64 = 64.0;

pub const PRESETS: [&str; 5] = ["micro", "vmf-560m", "vmf-1g", "vmf-2g", "vmf-5g"];

/// Geometry of one block, derived from the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub stage: usize,
    pub c_in: usize,
    pub c_hid: usize,
    pub c_out: usize,
    pub spatial_stride: usize,
    pub temporal_stride: usize,
}

impl Default for ModelConfig {
    /// The desk-scale micro model.
    fn default() -> Self {
        Self {
            blocks_per_stage: [1, 1, 2, 1],
            base_dim: 8,
            expansion: 2.0,
            resolution: 32,
            temporal_stride: 4,
            frames: 16,
            token_count: 4,
            token_dim: 32,
            token_mode: TokenMode::PerVideo,
            conv_type: ConvType::D3,
            activation: Activation::FrameDyrelu,
            downsample_position: DownsamplePosition::Stem,
            former_enabled: true,
            num_classes: 8,
            heads: 4,
            head_hidden: 0,
            dyrelu_both: true,
        }
    }
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        // The head width is a free choice, calibrated so the parameter
        // census lands on the variant table.
        let variant =
            |blocks, base_dim, expansion, resolution, temporal_stride, head_hidden| Self {
                blocks_per_stage: blocks,
                head_hidden,
                base_dim,
                expansion,
                resolution,
                temporal_stride,
                frames: 64,
                token_count: 6,
                token_dim: 128,
                num_classes: 400,
                ..Self::default()
            };
        Ok(match name {
            "micro" => Self::default(),
            "vmf-560m" => variant([1, 2, 3, 2], 16, 2.25, 172, 8, 4416),
            "vmf-1g" => variant([1, 2, 3, 2], 16, 2.25, 224, 4, 4416),
            "vmf-2g" => variant([1, 2, 4, 2], 20, 2.25, 224, 4, 6400),
            "vmf-5g" => variant([1, 2, 12, 4], 24, 3.0, 224, 4, 5952),
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    /// Parses `key=value` lines over the default config. Blank lines and
    /// lines starting with `#` are skipped; a repeated key overrides.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply_override(line)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip(e))))?;
        }
        Ok(())
    }

    /// Applies one `key=value` pair.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {kv:?}")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("{key}: invalid {what} {value:?}"));
        let uint = || value.parse::<usize>().map_err(|_| bad("integer"));
        let flag = || match value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad("boolean")),
        };
        match key {
            "blocks_per_stage" => {
                let parts = value
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad("block list"))?;
                self.blocks_per_stage = parts.try_into().map_err(|_| {
                    Error::Config(format!("{key}: expected exactly 4 stages, got {value:?}"))
                })?;
            }
            "base_dim" => self.base_dim = uint()?,
            "expansion" => {
                self.expansion = value
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad("number"))?
            }
            "resolution" => self.resolution = uint()?,
            "temporal_stride" => self.temporal_stride = uint()?,
            "frames" => self.frames = uint()?,
            "token_count" => self.token_count = uint()?,
            "token_dim" => self.token_dim = uint()?,
            "token_mode" => {
                self.token_mode = match value {
                    "per-video" => TokenMode::PerVideo,
                    "per-frame" => TokenMode::PerFrame,
                    _ => return Err(bad("token mode")),
                }
            }
            "conv_type" => {
                self.conv_type = match value {
                    "2d" => ConvType::D2,
                    "2+1d" => ConvType::D2Plus1,
                    "3d" => ConvType::D3,
                    _ => return Err(bad("conv type")),
                }
            }
            "activation" => {
                self.activation = Activation::parse(value).ok_or_else(|| bad("activation"))?
            }
            "downsample_position" => {
                self.downsample_position = match value {
                    "stem" => DownsamplePosition::Stem,
                    "per-stage" => DownsamplePosition::PerStage,
                    _ => return Err(bad("downsample position")),
                }
            }
            "former_enabled" => self.former_enabled = flag()?,
            "num_classes" => self.num_classes = uint()?,
            "heads" => self.heads = uint()?,
            "head_hidden" => self.head_hidden = uint()?,
            "dyrelu_both" => self.dyrelu_both = flag()?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Canonical `key=value` text; [`ModelConfig::parse`] inverts it.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in FIELDS {
            let _ = writeln!(s, "{key}={}", self.value_text(key));
        }
        s
    }

    pub fn value_text(&self, key: &str) -> String {
        match key {
            "blocks_per_stage" => {
                let b = self.blocks_per_stage;
                format!("{},{},{},{}", b[0], b[1], b[2], b[3])
            }
            "base_dim" => self.base_dim.to_string(),
            "expansion" => format!("{:?}", self.expansion),
            "resolution" => self.resolution.to_string(),
            "temporal_stride" => self.temporal_stride.to_string(),
            "frames" => self.frames.to_string(),
            "token_count" => self.token_count.to_string(),
            "token_dim" => self.token_dim.to_string(),
            "token_mode" => self.token_mode.name().into(),
            "conv_type" => self.conv_type.name().into(),
            "activation" => self.activation.name().into(),
            "downsample_position" => self.downsample_position.name().into(),
            "former_enabled" => self.former_enabled.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "heads" => self.heads.to_string(),
            "head_hidden" => self.head_hidden.to_string(),
            "dyrelu_both" => self.dyrelu_both.to_string(),
            _ => String::new(),
        }
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        std::array::from_fn(|s| self.base_dim << s)
    }

    /// Hidden width of a block whose output has `c` channels.
    pub fn hidden_channels(&self, c: usize) -> usize {
        (c as f64 * self.expansion).round() as usize
    }

    /// Number of stages that halve time in per-stage downsampling mode.
    pub fn temporal_halvings(&self) -> usize {
        match self.downsample_position {
            DownsamplePosition::Stem => 0,
            DownsamplePosition::PerStage => (self.temporal_stride.trailing_zeros() as usize).min(3),
        }
    }

    /// Temporal stride of the stem.
    pub fn stem_stride(&self) -> usize {
        self.temporal_stride >> self.temporal_halvings()
    }

    /// The effective activation: Mobile3D mode has no tokens to drive a
    /// dynamic ReLU, so it falls back to plain ReLU.
    pub fn effective_activation(&self) -> Activation {
        if self.former_enabled {
            self.activation
        } else {
            Activation::Relu
        }
    }

    /// Dynamic activations per Mobile block.
    pub fn generators_per_block(&self) -> usize {
        match self.effective_activation() {
            Activation::Relu => 0,
            _ if self.dyrelu_both => 2,
            _ => 1,
        }
    }

    pub fn head_width(&self) -> usize {
        if self.head_hidden > 0 {
            self.head_hidden
        } else {
            4 * (self.stage_channels()[3] + self.token_dim)
        }
    }

    pub fn blocks(&self) -> Vec<BlockSpec> {
        let channels = self.stage_channels();
        let halvings = self.temporal_halvings();
        let mut out = Vec::new();
        let mut c_in = self.base_dim;
        for (stage, &n) in self.blocks_per_stage.iter().enumerate() {
            let c_out = channels[stage];
            for i in 0..n {
                let first = i == 0;
                out.push(BlockSpec {
                    stage,
                    c_in,
                    c_hid: self.hidden_channels(c_out),
                    c_out,
                    spatial_stride: if first { 2 } else { 1 },
                    temporal_stride: if first && stage < halvings { 2 } else { 1 },
                });
                c_in = c_out;
            }
        }
        out
    }

    /// Checks every invariant a model build relies on.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let limits = [
            (
                "blocks per stage",
                self.blocks_per_stage.iter().copied().max().unwrap_or(0),
                MAX_BLOCKS,
            ),
            ("base_dim", self.base_dim, MAX_WIDTH),
            ("token_dim", self.token_dim, MAX_WIDTH),
            ("head_hidden", self.head_hidden, MAX_WIDTH),
            ("token_count", self.token_count, MAX_WIDTH),
            ("heads", self.heads, MAX_WIDTH),
            ("num_classes", self.num_classes, MAX_WIDTH),
            ("resolution", self.resolution, MAX_EXTENT),
            ("frames", self.frames, MAX_EXTENT),
            ("temporal_stride", self.temporal_stride, MAX_EXTENT),
        ];
        if let Some((what, v, max)) = limits.into_iter().find(|&(_, v, max)| v > max) {
            return fail(format!("{what} {v} exceeds the limit {max}"));
        }
        if !(self.expansion <= MAX_EXPANSION) {
            return fail(format!(
                "expansion {} exceeds the limit {MAX_EXPANSION}",
                self.expansion
            ));
        }
        if self.blocks_per_stage.contains(&0) {
            return fail(format!(
                "every stage needs at least one block, got {:?}",
                self.blocks_per_stage
            ));
        }
        if self.base_dim == 0 || self.resolution == 0 || self.num_classes == 0 {
            return fail("base_dim, resolution and num_classes must be positive".into());
        }
        if !(self.expansion > 0.0) || self.hidden_channels(self.base_dim) == 0 {
            return fail(format!(
                "expansion {} leaves no hidden channels",
                self.expansion
            ));
        }
        if self.temporal_stride == 0 {
            return fail("temporal_stride must be positive".into());
        }
        if self.frames < 3 {
            return fail(format!("frames must be at least 3, got {}", self.frames));
        }
        if !self.frames.is_multiple_of(self.temporal_stride) {
            return fail(format!(
                "frames {} not divisible by temporal_stride {}",
                self.frames, self.temporal_stride
            ));
        }
        if self.downsample_position == DownsamplePosition::PerStage {
            if !self.temporal_stride.is_power_of_two() {
                return fail(format!(
                    "per-stage downsampling needs a power-of-two temporal_stride, got {}",
                    self.temporal_stride
                ));
            }
            if self.former_enabled && self.token_mode == TokenMode::PerFrame {
                return fail(
                    "per-frame tokens need a constant frame count; use downsample_position=stem"
                        .into(),
                );
            }
        }
        if self.former_enabled {
            if self.token_count == 0 {
                return fail("token_count must be at least 1".into());
            }
            if self.heads == 0 || self.token_dim == 0 || !self.token_dim.is_multiple_of(self.heads)
            {
                return fail(format!(
                    "token_dim {} not divisible into {} heads",
                    self.token_dim, self.heads
                ));
            }
            if let Some(c) = self.stage_channels().iter().find(|&&c| c % self.heads != 0) {
                return fail(format!(
                    "{c} channels not divisible into {} heads",
                    self.heads
                ));
            }
        }
        Ok(())
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_variant_table() {
        let c = ModelConfig::preset("vmf-1g").unwrap();
        assert_eq!(c.blocks_per_stage, [1, 2, 3, 2]);
        assert_eq!(c.stage_channels(), [16, 32, 64, 128]);
        assert_eq!(ModelConfig::preset("vmf-560m").unwrap().temporal_stride, 8);
        assert_eq!(ModelConfig::preset("vmf-5g").unwrap().expansion, 3.0);
        assert!(ModelConfig::preset("vmf-9g").is_err());
        for p in PRESETS {
            ModelConfig::preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn text_roundtrip() {
        for p in PRESETS {
            let c = ModelConfig::preset(p).unwrap();
            assert_eq!(ModelConfig::parse(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn parse_rejects_unknown_and_malformed() {
        assert!(ModelConfig::parse("bogus=1").is_err());
        assert!(ModelConfig::parse("base_dim").is_err());
        assert!(ModelConfig::parse("blocks_per_stage=1,2,3").is_err());
        assert!(ModelConfig::parse("activation=swish").is_err());
        assert!(ModelConfig::parse("expansion=nan").is_err());
        let c = ModelConfig::parse("# c\n\nbase_dim=4\nbase_dim = 12\n").unwrap();
        assert_eq!(c.base_dim, 12);
    }

    #[test]
    fn per_stage_strides() {
        let mut c = ModelConfig::preset("vmf-1g").unwrap();
        c.downsample_position = DownsamplePosition::PerStage;
        assert_eq!(c.stem_stride(), 1);
        let ts: Vec<_> = c.blocks().iter().map(|b| b.temporal_stride).collect();
        assert_eq!(ts, [2, 2, 1, 1, 1, 1, 1, 1]);
        c.temporal_stride = 16;
        c.frames = 64;
        assert_eq!(c.stem_stride(), 2);
    }

    #[test]
    fn validation_diagnostics() {
        let mut c = ModelConfig::default();
        c.token_count = 0;
        assert!(c.validate().is_err());
        c.former_enabled = false;
        assert!(c.validate().is_ok());
        let mut c = ModelConfig::default();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.frames = 18;
        assert!(c.validate().is_err());
    }
}
