//! Method switchboard: which tokens act as the shared sink, how positions are
//! assigned, and the softmax temperature. Presets realize the compared
//! methods as fixed flag combinations.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layout::{partition, partition_by_tokens, BlockPartition, SequenceLayout};
use crate::positions::{MRopeSplit, PositionMode, RopeScheme, DEFAULT_ROPE_BASE};

/// Which tokens every context block attends besides itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinkMode {
    /// System tokens plus the first `sink_frames` frames.
    SysPlusFrames,
    /// System tokens only (shared text prefix).
    SysOnly,
    /// No shared sink: blocks attend only themselves.
    None,
    /// System tokens plus the first context block as an anchor prefix.
    AnchorFirstBlock,
}

impl SinkMode {
    pub(crate) fn blocks_see_sink(self) -> bool {
        self != SinkMode::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Full,
    Pevlm,
    Ape,
    Star,
    BlockAttention,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Full,
        Preset::Pevlm,
        Preset::Ape,
        Preset::Star,
        Preset::BlockAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Pevlm => "pevlm",
            Preset::Ape => "ape",
            Preset::Star => "star",
            Preset::BlockAttention => "block",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Preset::Full),
            "pevlm" => Ok(Preset::Pevlm),
            "ape" => Ok(Preset::Ape),
            "star" => Ok(Preset::Star),
            "block" | "block-attention" => Ok(Preset::BlockAttention),
            other => Err(Error::Method(format!("unknown preset {other:?}"))),
        }
    }
}

/// Complete description of one parallel-encoding method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    /// Preset this configuration was expanded from; `None` for hand-built
    /// configurations.
    pub preset: Option<Preset>,
    pub sink_frames: usize,
    pub block_frames: usize,
    /// When set, context blocks are cut every `block_tokens` tokens instead
    /// of on frame boundaries.
    pub block_tokens: Option<usize>,
    pub position_mode: PositionMode,
    pub scheme: RopeScheme,
    pub temperature: f64,
    pub sink_mode: SinkMode,
    pub rope_base: f64,
    /// Rotation-pair split for the 3D scheme; the default split is derived
    /// from the head dimension when unset.
    pub mrope_split: Option<MRopeSplit>,
}

impl MethodConfig {
    /// Expands a preset. `sink_frames` is ignored by presets whose sink holds
    /// system tokens only; `block_frames` is ignored by `Full`.
    pub fn preset(preset: Preset, sink_frames: usize, block_frames: usize) -> Self {
        let (sink_mode, position_mode) = match preset {
            Preset::Full | Preset::Pevlm => (SinkMode::SysPlusFrames, PositionMode::Sequential),
            Preset::Ape => (SinkMode::SysOnly, PositionMode::ReusedPerBlock),
            Preset::Star => (SinkMode::AnchorFirstBlock, PositionMode::ReusedPerBlock),
            Preset::BlockAttention => (SinkMode::None, PositionMode::Sequential),
        };
        let sink_frames = match sink_mode {
            SinkMode::SysPlusFrames if preset != Preset::Full => sink_frames,
            _ => 0,
        };
        Self {
            preset: Some(preset),
            sink_frames,
            block_frames,
            block_tokens: None,
            position_mode,
            scheme: RopeScheme::Rope1D,
            temperature: 1.0,
            sink_mode,
            rope_base: DEFAULT_ROPE_BASE,
            mrope_split: None,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_scheme(mut self, scheme: RopeScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_position_mode(mut self, mode: PositionMode) -> Self {
        self.position_mode = mode;
        self
    }

    pub fn name(&self) -> String {
        self.preset
            .map_or_else(|| "custom".to_string(), |p| p.name().to_string())
    }

    pub fn is_full(&self) -> bool {
        self.preset == Some(Preset::Full)
    }

    /// Whether the sink must hold at least one token.
    pub fn requires_sink(&self) -> bool {
        !self.is_full() && self.sink_mode != SinkMode::None
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidTemperature(self.temperature));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return Err(Error::Position(format!(
                "rope base must be positive, got {}",
                self.rope_base
            )));
        }
        if !self.is_full() && self.block_frames < 1 && self.block_tokens.is_none() {
            return Err(Error::Partition("block_frames must be at least 1".into()));
        }
        Ok(())
    }

    /// Sink frames actually placed in the sink under this sink mode.
    pub fn effective_sink_frames(&self) -> usize {
        match self.sink_mode {
            SinkMode::SysPlusFrames => self.sink_frames,
            _ => 0,
        }
    }

    /// Partition of `layout` under this method. `Full` is a single context
    /// block spanning every frame.
    pub fn partition_for(&self, layout: &SequenceLayout) -> Result<BlockPartition> {
        self.validate()?;
        if self.is_full() {
            return partition(layout, 0, layout.num_frames.max(1));
        }
        match self.block_tokens {
            Some(tokens) => partition_by_tokens(layout, self.effective_sink_frames(), tokens),
            None => partition(layout, self.effective_sink_frames(), self.block_frames),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_flags() {
        let ape = MethodConfig::preset(Preset::Ape, 4, 2);
        assert_eq!(ape.sink_mode, SinkMode::SysOnly);
        assert_eq!(ape.position_mode, PositionMode::ReusedPerBlock);
        assert_eq!(ape.effective_sink_frames(), 0);

        let star = MethodConfig::preset(Preset::Star, 4, 2);
        assert_eq!(star.sink_mode, SinkMode::AnchorFirstBlock);
        assert_eq!(star.position_mode, PositionMode::ReusedPerBlock);

        let block = MethodConfig::preset(Preset::BlockAttention, 4, 2);
        assert_eq!(block.sink_mode, SinkMode::None);
        assert_eq!(block.position_mode, PositionMode::Sequential);
        assert!(!block.requires_sink());

        let pevlm = MethodConfig::preset(Preset::Pevlm, 4, 2);
        assert_eq!(pevlm.effective_sink_frames(), 4);
        assert_eq!(pevlm.temperature, 1.0);
        assert!(pevlm.requires_sink());
    }

    #[test]
    fn full_preset_is_one_block() {
        let layout = SequenceLayout::build(3, 7, 2, 2).unwrap();
        let p = MethodConfig::preset(Preset::Full, 3, 2)
            .partition_for(&layout)
            .unwrap();
        assert_eq!(p.sink.len(), 3);
        assert_eq!(p.num_blocks(), 1);
        assert_eq!(p.context_blocks[0], layout.video());
    }

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("nope".parse::<Preset>().is_err());
    }

    #[test]
    fn rejects_bad_temperature() {
        let cfg = MethodConfig::preset(Preset::Ape, 0, 1).with_temperature(0.0);
        assert!(matches!(cfg.validate(), Err(Error::InvalidTemperature(_))));
    }
}
