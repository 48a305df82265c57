//! Synthetic multimodal token layouts and their Sink / Context / Question
//! partition, plus the dense mask equivalent to a partitioned encoding.

use std::fmt;
use std::ops::Range;

use crate::attention::MaskSpec;
use crate::error::{Error, Result};
use crate::method::{MethodConfig, SinkMode};

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, token: usize) -> bool {
        (self.start..self.end).contains(&token)
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

impl From<Span> for Range<usize> {
    fn from(s: Span) -> Self {
        s.range()
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.start, self.end)
    }
}

/// System text, `num_frames` frames of `tokens_per_frame` visual tokens, then
/// question text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub sys_len: usize,
    pub num_frames: usize,
    pub tokens_per_frame: usize,
    pub question_len: usize,
}

impl SequenceLayout {
    pub fn build(
        sys_len: usize,
        num_frames: usize,
        tokens_per_frame: usize,
        question_len: usize,
    ) -> Result<Self> {
        let layout = Self {
            sys_len,
            num_frames,
            tokens_per_frame,
            question_len,
        };
        if layout.checked_total().is_none() {
            return Err(Error::Layout("token count overflows".into()));
        }
        if layout.total_len() == 0 {
            return Err(Error::Layout("sequence has no tokens".into()));
        }
        Ok(layout)
    }

    fn checked_total(&self) -> Option<usize> {
        self.num_frames
            .checked_mul(self.tokens_per_frame)?
            .checked_add(self.sys_len)?
            .checked_add(self.question_len)
    }

    /// Total token count `L`.
    pub fn total_len(&self) -> usize {
        self.sys_len + self.video_len() + self.question_len
    }

    pub fn video_len(&self) -> usize {
        self.num_frames * self.tokens_per_frame
    }

    pub fn video(&self) -> Span {
        Span::new(self.sys_len, self.sys_len + self.video_len())
    }

    pub fn question(&self) -> Span {
        let start = self.sys_len + self.video_len();
        Span::new(start, start + self.question_len)
    }

    pub fn frame(&self, f: usize) -> Span {
        let start = self.sys_len + f * self.tokens_per_frame;
        Span::new(start, start + self.tokens_per_frame)
    }

    /// Frame index and within-frame index of a visual token, `None` for text.
    pub fn frame_of(&self, token: usize) -> Option<(usize, usize)> {
        if !self.video().contains(token) {
            return None;
        }
        let offset = token - self.sys_len;
        Some((
            offset / self.tokens_per_frame,
            offset % self.tokens_per_frame,
        ))
    }
}

/// How the video after the sink was cut into context blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockSplit {
    /// Whole frames per block.
    Frames { block_frames: usize },
    /// Fixed token count per block, ignoring frame boundaries. Exists for the
    /// frame-division ablation only.
    Tokens { block_tokens: usize },
    /// Built directly from token sizes (cost-model oracle).
    Sizes,
}

/// Sink / Context / Question decomposition of a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    pub sink: Span,
    pub context_blocks: Vec<Span>,
    pub question: Span,
    pub sink_frames: usize,
    pub split: BlockSplit,
}

impl BlockPartition {
    pub fn total_len(&self) -> usize {
        self.question.end
    }

    pub fn num_blocks(&self) -> usize {
        self.context_blocks.len()
    }

    /// Length of the longest context block (0 when there are none).
    pub fn max_block_len(&self) -> usize {
        self.context_blocks.iter().map(Span::len).max().unwrap_or(0)
    }

    /// Every range in sequence order: sink, blocks, question.
    pub fn spans(&self) -> impl Iterator<Item = Span> + '_ {
        std::iter::once(self.sink)
            .chain(self.context_blocks.iter().copied())
            .chain(std::iter::once(self.question))
    }

    /// Index of the context block holding `token`.
    pub fn block_of(&self, token: usize) -> Option<usize> {
        self.context_blocks.iter().position(|b| b.contains(token))
    }

    /// Partition from raw token sizes: a sink of `sink` tokens, `n_blocks`
    /// blocks of `block` tokens and `question` trailing tokens. Blocks may be
    /// empty.
    pub fn from_sizes(sink: usize, block: usize, n_blocks: usize, question: usize) -> Self {
        let context_blocks = (0..n_blocks)
            .map(|i| Span::new(sink + i * block, sink + (i + 1) * block))
            .collect();
        let q_start = sink + n_blocks * block;
        Self {
            sink: Span::new(0, sink),
            context_blocks,
            question: Span::new(q_start, q_start + question),
            sink_frames: 0,
            split: BlockSplit::Sizes,
        }
    }

    /// Number of frames in each context block. Only meaningful for
    /// frame-aligned partitions.
    pub fn block_frame_counts(&self, layout: &SequenceLayout) -> Vec<usize> {
        self.context_blocks
            .iter()
            .map(|b| b.len() / layout.tokens_per_frame.max(1))
            .collect()
    }
}

fn check_sink_frames(layout: &SequenceLayout, sink_frames: usize) -> Result<()> {
    if sink_frames > layout.num_frames {
        return Err(Error::Partition(format!(
            "sink_frames {sink_frames} exceeds the {} available frames",
            layout.num_frames
        )));
    }
    if layout.num_frames > 0 && layout.tokens_per_frame == 0 {
        return Err(Error::Partition("frames carry no tokens".into()));
    }
    Ok(())
}

/// Frame-aligned partition: the sink holds the system tokens plus the first
/// `sink_frames` frames; the remaining frames form blocks of `block_frames`
/// frames, the last one holding the remainder.
pub fn partition(
    layout: &SequenceLayout,
    sink_frames: usize,
    block_frames: usize,
) -> Result<BlockPartition> {
    if block_frames < 1 {
        return Err(Error::Partition("block_frames must be at least 1".into()));
    }
    check_sink_frames(layout, sink_frames)?;
    let sink = Span::new(0, layout.frame(sink_frames).start);
    let mut context_blocks = Vec::new();
    let mut f = sink_frames;
    while f < layout.num_frames {
        let end = (f + block_frames).min(layout.num_frames);
        context_blocks.push(Span::new(layout.frame(f).start, layout.frame(end).start));
        f = end;
    }
    Ok(BlockPartition {
        sink,
        context_blocks,
        question: layout.question(),
        sink_frames,
        split: BlockSplit::Frames { block_frames },
    })
}

/// Token-count partition used to ablate frame-aligned splitting: the sink is
/// as in [`partition`], the rest of the video is cut every `block_tokens`
/// tokens regardless of frame boundaries.
pub fn partition_by_tokens(
    layout: &SequenceLayout,
    sink_frames: usize,
    block_tokens: usize,
) -> Result<BlockPartition> {
    if block_tokens < 1 {
        return Err(Error::Partition("block_tokens must be at least 1".into()));
    }
    check_sink_frames(layout, sink_frames)?;
    let sink = Span::new(0, layout.frame(sink_frames).start);
    let video_end = layout.video().end;
    let mut context_blocks = Vec::new();
    let mut t = sink.end;
    while t < video_end {
        let end = (t + block_tokens).min(video_end);
        context_blocks.push(Span::new(t, end));
        t = end;
    }
    Ok(BlockPartition {
        sink,
        context_blocks,
        question: layout.question(),
        sink_frames,
        split: BlockSplit::Tokens { block_tokens },
    })
}

/// Within-block attention convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Causality {
    /// Decoder semantics, what the engine computes.
    Causal,
    /// Every block attends all of its own keys; the operation-count convention.
    NonCausal,
}

/// Dense mask equivalent to the partitioned encoding under `method`.
pub fn encode_mask(partition: &BlockPartition, method: &MethodConfig) -> Result<MaskSpec> {
    encode_mask_with(partition, method.sink_mode, Causality::Causal)
}

/// Dense mask with an explicit within-block convention.
pub fn encode_mask_with(
    partition: &BlockPartition,
    sink_mode: SinkMode,
    causality: Causality,
) -> Result<MaskSpec> {
    if sink_mode == SinkMode::AnchorFirstBlock && partition.context_blocks.is_empty() {
        return Err(Error::Method(
            "anchor mode requires at least one context block".into(),
        ));
    }
    let l = partition.total_len();
    let mut mask = MaskSpec::empty(l, l);
    let own = |q: usize, span: Span| match causality {
        Causality::Causal => span.start..q + 1,
        Causality::NonCausal => span.range(),
    };

    for q in partition.sink.range() {
        mask.allow_range(q, own(q, partition.sink));
    }
    let anchor = partition.context_blocks.first().copied();
    for (i, &block) in partition.context_blocks.iter().enumerate() {
        for q in block.range() {
            if sink_mode.blocks_see_sink() {
                mask.allow_range(q, partition.sink.range());
            }
            if sink_mode == SinkMode::AnchorFirstBlock && i > 0 {
                mask.allow_range(q, anchor.expect("checked above").range());
            }
            mask.allow_range(q, own(q, block));
        }
    }
    for q in partition.question.range() {
        mask.allow_range(q, 0..partition.question.start);
        mask.allow_range(q, own(q, partition.question));
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::method::Preset;
    use proptest::prelude::*;

    fn spans(v: &[(usize, usize)]) -> Vec<Span> {
        v.iter().map(|&(a, b)| Span::new(a, b)).collect()
    }

    #[test]
    fn layout_lengths() {
        assert_eq!(SequenceLayout::build(2, 8, 4, 3).unwrap().total_len(), 37);
        assert_eq!(SequenceLayout::build(0, 1, 1, 0).unwrap().total_len(), 1);
        assert_eq!(
            SequenceLayout::build(35, 256, 196, 64).unwrap().total_len(),
            50_275
        );
        assert!(matches!(
            SequenceLayout::build(0, 0, 5, 0),
            Err(Error::Layout(_))
        ));
    }

    #[test]
    fn frame_partition_example() {
        let layout = SequenceLayout::build(2, 8, 4, 3).unwrap();
        let p = partition(&layout, 2, 3).unwrap();
        assert_eq!(p.sink, Span::new(0, 10));
        assert_eq!(p.context_blocks, spans(&[(10, 22), (22, 34)]));
        assert_eq!(p.question, Span::new(34, 37));
    }

    #[test]
    fn remainder_forms_a_smaller_last_block() {
        let layout = SequenceLayout::build(2, 9, 4, 3).unwrap();
        let p = partition(&layout, 2, 3).unwrap();
        assert_eq!(p.block_frame_counts(&layout), vec![3, 3, 1]);
    }

    #[test]
    fn zero_sink_frames_keeps_system_tokens() {
        let layout = SequenceLayout::build(5, 4, 2, 1).unwrap();
        let p = partition(&layout, 0, 2).unwrap();
        assert_eq!(p.sink, Span::new(0, 5));
    }

    #[test]
    fn partition_errors() {
        let layout = SequenceLayout::build(1, 4, 2, 1).unwrap();
        assert!(matches!(partition(&layout, 0, 0), Err(Error::Partition(_))));
        assert!(matches!(partition(&layout, 5, 1), Err(Error::Partition(_))));
        assert!(partition(&layout, 4, 1).unwrap().context_blocks.is_empty());
    }

    #[test]
    fn token_split_crosses_frames() {
        let layout = SequenceLayout::build(0, 4, 4, 0).unwrap();
        let p = partition_by_tokens(&layout, 1, 5).unwrap();
        assert_eq!(p.context_blocks, spans(&[(4, 9), (9, 14), (14, 16)]));
    }

    #[test]
    fn single_block_mask_is_full_causal() {
        let layout = SequenceLayout::build(3, 5, 2, 4).unwrap();
        let p = partition(&layout, 0, 5).unwrap();
        let mask = encode_mask(&p, &MethodConfig::preset(Preset::Pevlm, 0, 5)).unwrap();
        assert_eq!(mask, MaskSpec::causal(layout.total_len()));
    }

    #[test]
    fn sinkless_blocks_attend_only_themselves() {
        let layout = SequenceLayout::build(0, 6, 2, 0).unwrap();
        let p = partition(&layout, 0, 2).unwrap();
        let mask = encode_mask(&p, &MethodConfig::preset(Preset::BlockAttention, 0, 2)).unwrap();
        for q in 0..12 {
            let block = p.context_blocks[q / 4];
            for k in 0..12 {
                assert_eq!(mask.allowed(q, k), block.contains(k) && k <= q, "({q},{k})");
            }
        }
    }

    #[test]
    fn anchor_mode_needs_a_block() {
        let layout = SequenceLayout::build(2, 2, 2, 1).unwrap();
        let p = partition(&layout, 2, 1).unwrap();
        assert!(matches!(
            encode_mask_with(&p, SinkMode::AnchorFirstBlock, Causality::Causal),
            Err(Error::Method(_))
        ));
    }

    // Rule enumeration written out per (query, key) pair.
    fn brute_force_allowed(p: &BlockPartition, q: usize, k: usize) -> bool {
        if k > q {
            return false;
        }
        if p.sink.contains(q) {
            return p.sink.contains(k);
        }
        if p.question.contains(q) {
            return true;
        }
        let block = p.context_blocks.iter().find(|b| b.contains(q)).unwrap();
        p.sink.contains(k) || block.contains(k)
    }

    #[test]
    fn pevlm_mask_matches_enumeration() {
        let layout = SequenceLayout::build(2, 8, 4, 3).unwrap();
        let p = partition(&layout, 2, 3).unwrap();
        let mask = encode_mask(&p, &MethodConfig::preset(Preset::Pevlm, 2, 3)).unwrap();
        let l = layout.total_len();
        let mut count = 0;
        for q in 0..l {
            for k in 0..l {
                let expected = brute_force_allowed(&p, q, k);
                assert_eq!(mask.allowed(q, k), expected);
                count += expected as u64;
            }
        }
        assert_eq!(mask.count_allowed(), count);
        // sink 10*11/2, two blocks of 12 rows each seeing 10 sink keys plus
        // 1..=12 own keys, 3 question rows seeing 34..=36 keys.
        assert_eq!(count, 55 + 2 * (120 + 78) + (35 + 36 + 37));
    }

    proptest! {
        #[test]
        fn partition_tiles_and_respects_frames(
            sys in 0usize..6, frames in 0usize..20, tpf in 1usize..6, question in 0usize..6,
            sink_frames in 0usize..20, block_frames in 1usize..8,
        ) {
            prop_assume!(sys + frames * tpf + question > 0);
            let sink_frames = sink_frames.min(frames);
            let layout = SequenceLayout::build(sys, frames, tpf, question).unwrap();
            let p = partition(&layout, sink_frames, block_frames).unwrap();
            let mut cursor = 0;
            for s in p.spans() {
                prop_assert_eq!(s.start, cursor);
                cursor = s.end;
            }
            prop_assert_eq!(cursor, layout.total_len());
            let expected_blocks = (frames - sink_frames).div_ceil(block_frames);
            prop_assert_eq!(p.num_blocks(), expected_blocks);
            for (i, b) in p.context_blocks.iter().enumerate() {
                prop_assert_eq!((b.start - sys) % tpf, 0);
                prop_assert_eq!((b.end - sys) % tpf, 0);
                prop_assert!(b.len() <= block_frames * tpf);
                if i + 1 < p.num_blocks() {
                    prop_assert_eq!(b.len(), block_frames * tpf);
                }
            }
        }

        #[test]
        fn mask_nests_in_causal_and_question_rows_are_full(
            sys in 0usize..4, frames in 1usize..10, tpf in 1usize..4, question in 0usize..4,
            sink_frames in 0usize..10, block_frames in 1usize..4, mode in 0usize..4,
        ) {
            let sink_frames = sink_frames.min(frames);
            let layout = SequenceLayout::build(sys, frames, tpf, question).unwrap();
            let p = partition(&layout, sink_frames, block_frames).unwrap();
            let sink_mode = [SinkMode::SysPlusFrames, SinkMode::SysOnly, SinkMode::None, SinkMode::AnchorFirstBlock][mode];
            prop_assume!(!(sink_mode == SinkMode::AnchorFirstBlock && p.context_blocks.is_empty()));
            let mask = encode_mask_with(&p, sink_mode, Causality::Causal).unwrap();
            let full = MaskSpec::causal(layout.total_len());
            prop_assert!(mask.is_subset_of(&full));
            prop_assert_eq!(mask.first_unattended_row(), None);
            for q in p.question.range() {
                prop_assert_eq!(mask.row(q), full.row(q));
            }
        }
    }
}
