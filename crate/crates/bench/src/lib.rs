//! Fixtures shared by the criterion benchmarks.

use pevlm::{generate_states, Engine, HeadLayout, MethodConfig, Preset, Qkv, SequenceLayout};

pub struct Fixture {
    pub layout: SequenceLayout,
    pub heads: HeadLayout,
    pub states: Vec<Qkv<f32>>,
}

impl Fixture {
    /// `frames` frames of 64 tokens behind a 32-token system prompt and
    /// ahead of a 32-token question.
    pub fn video(frames: usize) -> Self {
        let layout = SequenceLayout::build(32, frames, 64, 32).expect("valid layout");
        let heads = HeadLayout::new(2, 16).expect("valid heads");
        let states = generate_states(0, layout.total_len(), heads.hidden(), 1);
        Self { layout, heads, states }
    }

    pub fn engine(&self, preset: Preset, sink_frames: usize, block_frames: usize) -> Engine {
        Engine::new(self.heads, MethodConfig::preset(preset, sink_frames, block_frames)).expect("valid method")
    }
}
