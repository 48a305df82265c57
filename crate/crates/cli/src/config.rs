//! Command-line flags, the matching key-value config file, and their merge
//! into a validated [`RunConfig`].

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use pevlm::{FrameGrid, HeadLayout, MethodConfig, PositionMode, Preset, RopeScheme, SequenceLayout};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "pevlm", version, about = "Parallel-encoding prefill: verification, benchmarks, traces and cost sweeps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Check the partitioned engine, cost formulas and position invariants
    /// against their references.
    Verify,
    /// Time dense and partitioned prefill attention.
    Bench,
    /// Dump received attention per key token for the question queries.
    Trace,
    /// Operation-count sweep or latency-budget search.
    Cost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeArg {
    Rope1d,
    Mrope3d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionModeArg {
    Sequential,
    Reused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetArg {
    Full,
    Pevlm,
    Ape,
    Star,
    Block,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Full => Preset::Full,
            PresetArg::Pevlm => Preset::Pevlm,
            PresetArg::Ape => Preset::Ape,
            PresetArg::Star => Preset::Star,
            PresetArg::Block => Preset::BlockAttention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    BlockFrames,
    SinkFrames,
}

/// Every flag, all optional so file values can fill the gaps. The config file
/// uses the same names in kebab-case.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct Settings {
    /// Seed for all generated states.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run in 64-bit floating point.
    #[arg(long, global = true)]
    pub float64: bool,
    /// Key-value (TOML) file with defaults for any flag.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output path; stdout when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[arg(long, global = true)]
    pub sys_len: Option<usize>,
    #[arg(long, global = true)]
    pub frames: Option<usize>,
    #[arg(long, global = true)]
    pub tokens_per_frame: Option<usize>,
    #[arg(long, global = true)]
    pub question_len: Option<usize>,

    #[arg(long, global = true, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long, global = true)]
    pub sink_frames: Option<usize>,
    #[arg(long, global = true)]
    pub block_frames: Option<usize>,
    /// Cut context blocks every N tokens instead of on frame boundaries.
    #[arg(long, global = true)]
    pub block_tokens: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub position_mode: Option<PositionModeArg>,
    #[arg(long, global = true, value_enum)]
    pub scheme: Option<SchemeArg>,
    #[arg(long, global = true)]
    pub grid_height: Option<usize>,
    #[arg(long, global = true)]
    pub grid_width: Option<usize>,
    #[arg(long, global = true)]
    pub rope_base: Option<f64>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Moving-average window for traces.
    #[arg(long, global = true)]
    pub window: Option<usize>,

    #[arg(long, global = true)]
    pub heads: Option<usize>,
    #[arg(long, global = true)]
    pub head_dim: Option<usize>,
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    /// Layer whose attention a trace reports.
    #[arg(long, global = true)]
    pub layer: Option<usize>,

    /// Timed repetitions per benchmark point (at least 3).
    #[arg(long, global = true)]
    pub repeat: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub sweep: Option<SweepAxis>,
    /// Comma-separated sweep values.
    #[arg(long, global = true, value_delimiter = ',')]
    pub values: Option<Vec<usize>>,
    /// Encode context blocks on the thread pool while benchmarking.
    #[arg(long, global = true)]
    pub parallel: bool,

    /// Random configurations in the engine-versus-reference check.
    #[arg(long, global = true)]
    pub cases: Option<usize>,
    /// Flip one bit of the reference mask (the suite must then fail).
    #[arg(long, global = true)]
    pub inject_fault: bool,

    /// Cost sweep: sink tokens (comma-separated).
    #[arg(long = "cost-sink", global = true, value_delimiter = ',')]
    pub cost_sink: Option<Vec<u64>>,
    /// Cost sweep: tokens per context block.
    #[arg(long = "cost-block", global = true, value_delimiter = ',')]
    pub cost_block: Option<Vec<u64>>,
    /// Cost sweep: number of context blocks.
    #[arg(long = "cost-blocks", global = true, value_delimiter = ',')]
    pub cost_blocks: Option<Vec<u64>>,
    /// Cost sweep: question tokens.
    #[arg(long = "cost-question", global = true, value_delimiter = ',')]
    pub cost_question: Option<Vec<u64>>,
    /// Cost sweep: hidden sizes.
    #[arg(long = "cost-hidden", global = true, value_delimiter = ',')]
    pub cost_hidden: Option<Vec<u64>>,
    /// Latency budget in seconds; switches `cost` to budget search.
    #[arg(long, global = true)]
    pub budget: Option<f64>,
    /// Attention throughput in operations per second for budget search.
    #[arg(long, global = true)]
    pub throughput: Option<f64>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub sink_grid: Option<Vec<usize>>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub block_grid: Option<Vec<usize>>,
}

macro_rules! overlay {
    ($cli:ident, $file:ident; $($field:ident),* ; $($flag:ident),*) => {
        Settings {
            config: $cli.config,
            $($field: $cli.$field.or($file.$field),)*
            $($flag: $cli.$flag || $file.$flag,)*
        }
    };
}

impl Settings {
    /// Flags given on the command line win over values from `file`.
    pub fn overlay(self, file: Settings) -> Settings {
        let cli = self;
        overlay!(cli, file;
            seed, out, sys_len, frames, tokens_per_frame, question_len, preset, sink_frames,
            block_frames, block_tokens, position_mode, scheme, grid_height, grid_width, rope_base,
            temperature, window, heads, head_dim, layers, layer, repeat, sweep, values, cases,
            cost_sink, cost_block, cost_blocks, cost_question, cost_hidden, budget, throughput,
            sink_grid, block_grid;
            float64, parallel, inject_fault)
    }

    pub fn from_file(path: &Path) -> Result<Settings, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved and validated settings of one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub layout: SequenceLayout,
    pub method: MethodConfig,
    pub heads: HeadLayout,
    pub layers: usize,
    pub layer: usize,
    pub seed: u64,
    pub repeat: usize,
    pub window: usize,
    pub float64: bool,
    pub out: Option<PathBuf>,
    pub sweep: Option<(SweepAxis, Vec<usize>)>,
    pub parallel: bool,
    pub cases: usize,
    pub inject_fault: bool,
    pub cost: CostOptions,
}

#[derive(Debug, Clone, Default)]
pub struct CostOptions {
    pub sink: Option<Vec<u64>>,
    pub block: Option<Vec<u64>>,
    pub blocks: Option<Vec<u64>>,
    pub question: Option<Vec<u64>>,
    pub hidden: Option<Vec<u64>>,
    pub budget: Option<f64>,
    pub throughput: Option<f64>,
    pub sink_grid: Vec<usize>,
    pub block_grid: Vec<usize>,
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

impl RunConfig {
    /// Parses nothing; merges `settings` with its config file (if any) and
    /// validates the result.
    pub fn resolve(command: Command, settings: Settings) -> Result<Self, CliError> {
        let s = match &settings.config {
            Some(path) => {
                let file = Settings::from_file(path)?;
                settings.overlay(file)
            }
            None => settings,
        };

        let layout = SequenceLayout::build(
            s.sys_len.unwrap_or(8),
            s.frames.unwrap_or(16),
            s.tokens_per_frame.unwrap_or(16),
            s.question_len.unwrap_or(8),
        )
        .map_err(usage)?;

        let preset: Preset = s.preset.unwrap_or(PresetArg::Pevlm).into();
        let mut method = MethodConfig::preset(preset, s.sink_frames.unwrap_or(2), s.block_frames.unwrap_or(4));
        if let Some(mode) = s.position_mode {
            method.position_mode = match mode {
                PositionModeArg::Sequential => PositionMode::Sequential,
                PositionModeArg::Reused => PositionMode::ReusedPerBlock,
            };
        }
        method.block_tokens = s.block_tokens;
        if let Some(t) = s.temperature {
            method.temperature = t;
        }
        if let Some(base) = s.rope_base {
            method.rope_base = base;
        }
        method.scheme = match s.scheme.unwrap_or(SchemeArg::Rope1d) {
            SchemeArg::Rope1d => RopeScheme::Rope1D,
            SchemeArg::Mrope3d => {
                let inferred = FrameGrid::infer(layout.tokens_per_frame);
                RopeScheme::MRope3D(FrameGrid {
                    height: s.grid_height.unwrap_or(inferred.height),
                    width: s.grid_width.unwrap_or(inferred.width),
                })
            }
        };
        method.validate().map_err(usage)?;
        method.partition_for(&layout).map_err(usage)?;

        let heads = HeadLayout::new(s.heads.unwrap_or(2), s.head_dim.unwrap_or(16)).map_err(usage)?;
        let layers = s.layers.unwrap_or(1);
        if layers < 1 {
            return Err(usage("layers must be at least 1"));
        }
        let layer = s.layer.unwrap_or(0);
        if layer >= layers {
            return Err(usage(format!("layer {layer} out of range for {layers} layers")));
        }
        let repeat = s.repeat.unwrap_or(3);
        if command == Command::Bench && repeat < 3 {
            return Err(usage(format!("bench needs at least 3 repeats, got {repeat}")));
        }
        if repeat < 1 {
            return Err(usage("repeat must be at least 1"));
        }
        let window = s.window.unwrap_or(64);
        if window < 1 {
            return Err(usage("window must be at least 1"));
        }
        let sweep = match (s.sweep, s.values) {
            (Some(axis), Some(values)) if !values.is_empty() => Some((axis, values)),
            (Some(_), _) => return Err(usage("--sweep needs --values")),
            (None, Some(_)) => return Err(usage("--values needs --sweep")),
            (None, None) => None,
        };

        Ok(Self {
            command,
            layout,
            method,
            heads,
            layers,
            layer,
            seed: s.seed.unwrap_or(0),
            repeat,
            window,
            float64: s.float64,
            out: s.out,
            sweep,
            parallel: s.parallel,
            cases: s.cases.unwrap_or(100),
            inject_fault: s.inject_fault,
            cost: CostOptions {
                sink: s.cost_sink,
                block: s.cost_block,
                blocks: s.cost_blocks,
                question: s.cost_question,
                hidden: s.cost_hidden,
                budget: s.budget,
                throughput: s.throughput,
                sink_grid: s.sink_grid.unwrap_or_else(|| vec![2, 4, 8, 16]),
                block_grid: s.block_grid.unwrap_or_else(|| vec![4, 8, 16]),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("pevlm").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "seed = 9\nframes = 12\nsink-frames = 3\npreset = \"ape\"\nfloat64 = true").unwrap();
        let cli = parse(&[
            "trace",
            "--config",
            file.path().to_str().unwrap(),
            "--frames",
            "20",
        ]);
        let cfg = RunConfig::resolve(cli.command, cli.settings).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.layout.num_frames, 20);
        assert!(cfg.float64);
        assert_eq!(cfg.method.preset, Some(Preset::Ape));
    }

    #[test]
    fn unknown_file_keys_are_usage_errors() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "bogus = 1").unwrap();
        let cli = parse(&["verify", "--config", file.path().to_str().unwrap()]);
        assert!(matches!(
            RunConfig::resolve(cli.command, cli.settings),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn bench_rejects_single_repeat() {
        let cli = parse(&["bench", "--repeat", "1"]);
        assert!(matches!(
            RunConfig::resolve(cli.command, cli.settings),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn mrope_grid_defaults_to_near_square() {
        let cli = parse(&["verify", "--scheme", "mrope3d", "--tokens-per-frame", "12"]);
        let cfg = RunConfig::resolve(cli.command, cli.settings).unwrap();
        assert_eq!(cfg.method.scheme, RopeScheme::MRope3D(FrameGrid { height: 3, width: 4 }));
    }

    #[test]
    fn bad_partition_is_usage_error() {
        let cli = parse(&["verify", "--frames", "2", "--sink-frames", "5"]);
        assert!(matches!(
            RunConfig::resolve(cli.command, cli.settings),
            Err(CliError::Usage(_))
        ));
    }
}
