//! Position identifiers (sequential or reused per context block) and rotary
//! embeddings, both 1D and a simplified temporal/height/width 3D variant.

use std::fmt;
use std::str::FromStr;

use crate::attention::{Matrix, Real};
use crate::error::{Error, Result};
use crate::layout::{BlockPartition, SequenceLayout, Span};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionMode {
    /// Every token keeps its global index.
    Sequential,
    /// Every context block restarts right after the sink.
    ReusedPerBlock,
}

impl fmt::Display for PositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionMode::Sequential => "sequential",
            PositionMode::ReusedPerBlock => "reused",
        })
    }
}

impl FromStr for PositionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sequential" | "seq" => Ok(PositionMode::Sequential),
            "reused" | "reused-per-block" | "reuse" => Ok(PositionMode::ReusedPerBlock),
            other => Err(Error::Position(format!("unknown position mode {other:?}"))),
        }
    }
}

/// Height × width arrangement of the visual tokens of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGrid {
    pub height: usize,
    pub width: usize,
}

impl FrameGrid {
    /// Near-square factorization of `tokens_per_frame`.
    pub fn infer(tokens_per_frame: usize) -> Self {
        let mut height = (tokens_per_frame as f64).sqrt() as usize;
        while height > 1 && !tokens_per_frame.is_multiple_of(height) {
            height -= 1;
        }
        let height = height.max(1);
        Self {
            height,
            width: tokens_per_frame.max(1) / height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RopeScheme {
    Rope1D,
    MRope3D(FrameGrid),
}

impl fmt::Display for RopeScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RopeScheme::Rope1D => f.write_str("rope1d"),
            RopeScheme::MRope3D(g) => write!(f, "mrope3d({}x{})", g.height, g.width),
        }
    }
}

/// Number of rotation pairs driven by the temporal, height and width indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MRopeSplit {
    pub temporal: usize,
    pub height: usize,
    pub width: usize,
}

impl MRopeSplit {
    pub fn new(temporal: usize, height: usize, width: usize) -> Result<Self> {
        if temporal == 0 || height == 0 || width == 0 {
            return Err(Error::Position("every 3D rotary section needs a pair".into()));
        }
        Ok(Self {
            temporal,
            height,
            width,
        })
    }

    /// 2:1:1 split of the `head_dim / 2` rotation pairs.
    pub fn default_for(head_dim: usize) -> Result<Self> {
        let pairs = head_dim / 2;
        if !head_dim.is_multiple_of(2) || pairs < 3 {
            return Err(Error::Position(format!(
                "head dim {head_dim} too small for a 3D rotary split"
            )));
        }
        let temporal = pairs / 2;
        let height = (pairs - temporal) / 2;
        Self::new(temporal, height, pairs - temporal - height)
    }

    pub fn pairs(&self) -> usize {
        self.temporal + self.height + self.width
    }

    fn check(&self, head_dim: usize) -> Result<()> {
        if self.pairs() * 2 != head_dim {
            return Err(Error::Position(format!(
                "3D rotary split {}+{}+{} does not cover head dim {head_dim}",
                self.temporal, self.height, self.width
            )));
        }
        Ok(())
    }

    /// Which position component drives rotation pair `i`.
    fn axis(&self, i: usize) -> usize {
        if i < self.temporal {
            0
        } else if i < self.temporal + self.height {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PositionIds {
    Scalar(Vec<usize>),
    /// `(t, h, w)` per token.
    Triple(Vec<[usize; 3]>),
}

impl PositionIds {
    pub fn len(&self) -> usize {
        match self {
            PositionIds::Scalar(v) => v.len(),
            PositionIds::Triple(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-token position identifiers for a whole sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionMap {
    pub mode: PositionMode,
    pub scheme: RopeScheme,
    pub ids: PositionIds,
    pub rope_base: f64,
    /// Scalar position a token appended after this sequence receives.
    pub next_id: usize,
}

impl PositionMap {
    pub fn with_base(mut self, base: f64) -> Self {
        self.rope_base = base;
        self
    }

    pub fn scalar_ids(&self) -> Option<&[usize]> {
        match &self.ids {
            PositionIds::Scalar(v) => Some(v),
            PositionIds::Triple(_) => None,
        }
    }

    pub fn triple_ids(&self) -> Option<&[[usize; 3]]> {
        match &self.ids {
            PositionIds::Triple(v) => Some(v),
            PositionIds::Scalar(_) => None,
        }
    }

    /// Rotates the rows `rows` of `x` (one row per token in that range) with
    /// this map's ids. Columns are `x.cols() / head_dim` heads.
    pub fn rotate<T: Real>(
        &self,
        x: &Matrix<T>,
        rows: Span,
        head_dim: usize,
        split: Option<MRopeSplit>,
    ) -> Result<Matrix<T>> {
        match &self.ids {
            PositionIds::Scalar(ids) => apply_rope(x, &ids[rows.range()], head_dim, self.rope_base),
            PositionIds::Triple(ids) => {
                let split = match split {
                    Some(s) => s,
                    None => MRopeSplit::default_for(head_dim)?,
                };
                apply_mrope3d(x, &ids[rows.range()], head_dim, split, self.rope_base)
            }
        }
    }
}

/// Position ids for every token of `layout` under `partition`.
pub fn assign_positions(
    partition: &BlockPartition,
    layout: &SequenceLayout,
    mode: PositionMode,
    scheme: RopeScheme,
) -> Result<PositionMap> {
    let l = layout.total_len();
    if partition.total_len() != l {
        return Err(Error::Position(format!(
            "partition covers {} tokens, layout has {l}",
            partition.total_len()
        )));
    }
    let sink_len = partition.sink.len();
    let question_base = sink_len + partition.max_block_len();

    // Scalar id under the configured mode.
    let scalar = |k: usize| -> usize {
        match mode {
            PositionMode::Sequential => k,
            PositionMode::ReusedPerBlock => {
                if let Some(b) = partition.block_of(k) {
                    sink_len + (k - partition.context_blocks[b].start)
                } else if partition.question.contains(k) {
                    question_base + (k - partition.question.start)
                } else {
                    k
                }
            }
        }
    };
    let next_id = match mode {
        PositionMode::Sequential => l,
        PositionMode::ReusedPerBlock => question_base + partition.question.len(),
    };

    let ids = match scheme {
        RopeScheme::Rope1D => PositionIds::Scalar((0..l).map(scalar).collect()),
        RopeScheme::MRope3D(grid) => {
            if layout.num_frames > 0 && grid.height * grid.width != layout.tokens_per_frame {
                return Err(Error::Position(format!(
                    "{} tokens per frame do not form a {}x{} grid",
                    layout.tokens_per_frame, grid.height, grid.width
                )));
            }
            let first_frame = |span: Span| layout.frame_of(span.start).map(|(f, _)| f);
            let anchor_frame = partition.context_blocks.first().and_then(|b| first_frame(*b));
            let ids = (0..l)
                .map(|k| match layout.frame_of(k) {
                    None => {
                        let p = scalar(k);
                        [p, p, p]
                    }
                    Some((f, j)) => {
                        let t = match (mode, partition.block_of(k)) {
                            (PositionMode::ReusedPerBlock, Some(b)) => {
                                let start = first_frame(partition.context_blocks[b])
                                    .expect("context blocks hold visual tokens");
                                anchor_frame.expect("block exists") + (f - start)
                            }
                            _ => f,
                        };
                        [t, j / grid.width, j % grid.width]
                    }
                })
                .collect();
            PositionIds::Triple(ids)
        }
    };
    Ok(PositionMap {
        mode,
        scheme,
        ids,
        rope_base: DEFAULT_ROPE_BASE,
        next_id,
    })
}

fn inverse_frequencies(head_dim: usize, base: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|i| base.powf(-(2.0 * i as f64) / head_dim as f64))
        .collect()
}

fn check_rotary_shape<T: Real>(x: &Matrix<T>, n_ids: usize, head_dim: usize) -> Result<()> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::Position(format!(
            "rotary embedding needs an even head dim, got {head_dim}"
        )));
    }
    if !x.cols().is_multiple_of(head_dim) {
        return Err(Error::Shape(format!(
            "{} columns are not a multiple of head dim {head_dim}",
            x.cols()
        )));
    }
    if x.rows() != n_ids {
        return Err(Error::Shape(format!(
            "{} rows but {n_ids} position ids",
            x.rows()
        )));
    }
    Ok(())
}

#[inline]
fn rotate_row<T: Real>(row: &mut [T], head_dim: usize, angle_of_pair: impl Fn(usize) -> f64) {
    let pairs = head_dim / 2;
    let rotations: Vec<(T, T)> = (0..pairs)
        .map(|i| {
            let (s, c) = angle_of_pair(i).sin_cos();
            (T::from_f64_lossy(c), T::from_f64_lossy(s))
        })
        .collect();
    for head in row.chunks_exact_mut(head_dim) {
        for (pair, &(cos, sin)) in head.chunks_exact_mut(2).zip(&rotations) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * cos - b * sin;
            pair[1] = a * sin + b * cos;
        }
    }
}

/// Rotates each consecutive coordinate pair `(2i, 2i+1)` of every head by
/// `p * base^(-2i / head_dim)`.
pub fn apply_rope<T: Real>(
    x: &Matrix<T>,
    positions: &[usize],
    head_dim: usize,
    base: f64,
) -> Result<Matrix<T>> {
    check_rotary_shape(x, positions.len(), head_dim)?;
    let inv_freq = inverse_frequencies(head_dim, base);
    let mut out = x.clone();
    for (r, &p) in positions.iter().enumerate() {
        rotate_row(out.row_mut(r), head_dim, |i| p as f64 * inv_freq[i]);
    }
    Ok(out)
}

/// 3D variant: the first `split.temporal` pairs rotate by `t`, the next
/// `split.height` by `h`, the rest by `w`, each keeping the 1D frequency of
/// its pair index.
pub fn apply_mrope3d<T: Real>(
    x: &Matrix<T>,
    positions: &[[usize; 3]],
    head_dim: usize,
    split: MRopeSplit,
    base: f64,
) -> Result<Matrix<T>> {
    check_rotary_shape(x, positions.len(), head_dim)?;
    split.check(head_dim)?;
    let inv_freq = inverse_frequencies(head_dim, base);
    let mut out = x.clone();
    for (r, p) in positions.iter().enumerate() {
        rotate_row(out.row_mut(r), head_dim, |i| {
            p[split.axis(i)] as f64 * inv_freq[i]
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{partition, SequenceLayout};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn pair_norms(x: &Matrix<f64>) -> Vec<f64> {
        x.data()
            .chunks_exact(2)
            .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
            .collect()
    }

    // sink of 3 text tokens, two 4-token blocks, 2 question tokens
    fn small() -> (SequenceLayout, BlockPartition) {
        let layout = SequenceLayout::build(3, 4, 2, 2).unwrap();
        let p = partition(&layout, 0, 2).unwrap();
        (layout, p)
    }

    #[test]
    fn sequential_ids_are_token_indices() {
        let (layout, p) = small();
        let map = assign_positions(&p, &layout, PositionMode::Sequential, RopeScheme::Rope1D).unwrap();
        let ids = map.scalar_ids().unwrap();
        assert_eq!(&ids[3..7], &[3, 4, 5, 6]);
        assert_eq!(&ids[7..11], &[7, 8, 9, 10]);
        assert_eq!(map.next_id, 13);
    }

    #[test]
    fn reused_ids_restart_per_block() {
        let (layout, p) = small();
        let map =
            assign_positions(&p, &layout, PositionMode::ReusedPerBlock, RopeScheme::Rope1D).unwrap();
        let ids = map.scalar_ids().unwrap();
        assert_eq!(&ids[0..3], &[0, 1, 2]);
        assert_eq!(&ids[3..7], &[3, 4, 5, 6]);
        assert_eq!(&ids[7..11], &[3, 4, 5, 6]);
        assert_eq!(&ids[11..13], &[7, 8]);
        assert_eq!(map.next_id, 9);
    }

    #[test]
    fn mrope_visual_ids() {
        let layout = SequenceLayout::build(0, 8, 4, 0).unwrap();
        let p = partition(&layout, 2, 3).unwrap();
        let grid = FrameGrid { height: 2, width: 2 };
        let seq =
            assign_positions(&p, &layout, PositionMode::Sequential, RopeScheme::MRope3D(grid)).unwrap();
        // frame 5, token 3
        assert_eq!(seq.triple_ids().unwrap()[5 * 4 + 3], [5, 1, 1]);

        let reused =
            assign_positions(&p, &layout, PositionMode::ReusedPerBlock, RopeScheme::MRope3D(grid))
                .unwrap();
        // frame 5 is the first frame of the second block, mapped onto frame 2
        assert_eq!(reused.triple_ids().unwrap()[5 * 4 + 3], [2, 1, 1]);
        assert_eq!(reused.triple_ids().unwrap()[4 + 2], [1, 1, 0]);
    }

    #[test]
    fn mrope_rejects_mismatched_grid() {
        let layout = SequenceLayout::build(0, 2, 5, 0).unwrap();
        let p = partition(&layout, 0, 1).unwrap();
        let grid = FrameGrid { height: 2, width: 2 };
        assert!(matches!(
            assign_positions(&p, &layout, PositionMode::Sequential, RopeScheme::MRope3D(grid)),
            Err(Error::Position(_))
        ));
    }

    #[test]
    fn sink_and_first_block_agree_across_modes() {
        let layout = SequenceLayout::build(2, 9, 2, 3).unwrap();
        let p = partition(&layout, 2, 3).unwrap();
        for scheme in [
            RopeScheme::Rope1D,
            RopeScheme::MRope3D(FrameGrid { height: 1, width: 2 }),
        ] {
            let a = assign_positions(&p, &layout, PositionMode::Sequential, scheme).unwrap();
            let b = assign_positions(&p, &layout, PositionMode::ReusedPerBlock, scheme).unwrap();
            let upto = p.context_blocks[0].end;
            match (&a.ids, &b.ids) {
                (PositionIds::Scalar(x), PositionIds::Scalar(y)) => assert_eq!(x[..upto], y[..upto]),
                (PositionIds::Triple(x), PositionIds::Triple(y)) => assert_eq!(x[..upto], y[..upto]),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn zero_position_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 3, 8);
        let y = apply_rope(&x, &[0, 0, 0], 8, DEFAULT_ROPE_BASE).unwrap();
        assert!(x.bitwise_eq(&y));
        let split = MRopeSplit::default_for(8).unwrap();
        let z = apply_mrope3d(&x, &[[0, 0, 0]; 3], 8, split, DEFAULT_ROPE_BASE).unwrap();
        assert!(x.bitwise_eq(&z));
    }

    #[test]
    fn rope_rejects_odd_dims() {
        let x = Matrix::<f32>::zeros(1, 3);
        assert!(matches!(
            apply_rope(&x, &[1], 3, DEFAULT_ROPE_BASE),
            Err(Error::Position(_))
        ));
        let x = Matrix::<f32>::zeros(1, 8);
        let bad = MRopeSplit::new(1, 1, 1).unwrap();
        assert!(matches!(
            apply_mrope3d(&x, &[[1, 1, 1]], 8, bad, DEFAULT_ROPE_BASE),
            Err(Error::Position(_))
        ));
    }

    #[test]
    fn default_split_is_two_one_one() {
        assert_eq!(MRopeSplit::default_for(16).unwrap(), MRopeSplit::new(4, 2, 2).unwrap());
        assert_eq!(MRopeSplit::default_for(6).unwrap(), MRopeSplit::new(1, 1, 1).unwrap());
        assert!(MRopeSplit::default_for(4).is_err());
    }

    #[test]
    fn text_triple_equals_scalar_rope() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 4, 12);
        let split = MRopeSplit::default_for(12).unwrap();
        let ps = [0, 3, 17, 250];
        let a = apply_rope(&x, &ps, 12, DEFAULT_ROPE_BASE).unwrap();
        let triples: Vec<[usize; 3]> = ps.iter().map(|&p| [p, p, p]).collect();
        let b = apply_mrope3d(&x, &triples, 12, split, DEFAULT_ROPE_BASE).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn temporal_offset_only_moves_temporal_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let row = random(&mut rng, 1, 16);
        let x = Matrix::from_fn(2, 16, |_, c| row.get(0, c));
        let split = MRopeSplit::default_for(16).unwrap();
        let out = apply_mrope3d(&x, &[[2, 1, 3], [9, 1, 3]], 16, split, DEFAULT_ROPE_BASE).unwrap();
        let temporal_cols = 2 * split.temporal;
        let differs = (0..temporal_cols).any(|c| (out.get(0, c) - out.get(1, c)).abs() > 1e-9);
        assert!(differs);
        for c in temporal_cols..16 {
            assert_eq!(out.get(0, c).to_bits(), out.get(1, c).to_bits(), "col {c}");
        }
    }

    #[test]
    fn relative_position_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 16;
        for _ in 0..200 {
            let q = random(&mut rng, 1, d);
            let k = random(&mut rng, 1, d);
            let (p1, p2, c) = (
                rng.random_range(0..512),
                rng.random_range(0..512),
                rng.random_range(0..512),
            );
            let dot = |a: &Matrix<f64>, b: &Matrix<f64>| -> f64 {
                a.row(0).iter().zip(b.row(0)).map(|(x, y)| x * y).sum()
            };
            let lhs = dot(
                &apply_rope(&q, &[p1], d, DEFAULT_ROPE_BASE).unwrap(),
                &apply_rope(&k, &[p2], d, DEFAULT_ROPE_BASE).unwrap(),
            );
            let rhs = dot(
                &apply_rope(&q, &[p1 + c], d, DEFAULT_ROPE_BASE).unwrap(),
                &apply_rope(&k, &[p2 + c], d, DEFAULT_ROPE_BASE).unwrap(),
            );
            assert!((lhs - rhs).abs() <= 1e-5);
        }
    }

    #[test]
    fn frame_grid_inference() {
        assert_eq!(FrameGrid::infer(196), FrameGrid { height: 14, width: 14 });
        assert_eq!(FrameGrid::infer(6), FrameGrid { height: 2, width: 3 });
        assert_eq!(FrameGrid::infer(7), FrameGrid { height: 1, width: 7 });
    }

    proptest! {
        #[test]
        fn rotations_preserve_pair_norms(seed in any::<u64>(), p in 0usize..100_000, t in 0usize..64, h in 0usize..16, w in 0usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, 1, 16);
            let before = pair_norms(&x);
            let a = apply_rope(&x, &[p], 16, DEFAULT_ROPE_BASE).unwrap();
            let b = apply_mrope3d(&x, &[[t, h, w]], 16, MRopeSplit::default_for(16).unwrap(), DEFAULT_ROPE_BASE).unwrap();
            for (n0, (n1, n2)) in before.iter().zip(pair_norms(&a).iter().zip(pair_norms(&b).iter())) {
                prop_assert!((n0 - n1).abs() <= 1e-6);
                prop_assert!((n0 - n2).abs() <= 1e-6);
            }
        }
    }
}
