//! Partitioned prefill: the sink is encoded first, context blocks are then
//! encoded independently against the sink (and, for the anchor variant, the
//! first block), and the question attends the assembled cache.
//!
//! The engine works on already-projected per-layer Q/K/V states. Attention
//! work is proportional to the number of attended pairs: keys outside a
//! block's visible set are never touched.

use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{check_temperature, dot, softmax_in_place, HeadLayout, Matrix, MatrixView, Real};
use crate::error::{Error, Result};
use crate::layout::{BlockPartition, SequenceLayout, Span};
use crate::method::{MethodConfig, SinkMode};
use crate::positions::{apply_mrope3d, apply_rope, assign_positions, MRopeSplit, PositionMap, RopeScheme};

pub use crate::method::Preset;

/// Query, key and value states of one layer, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct Qkv<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

impl<T: Real> Qkv<T> {
    pub fn rows(&self) -> usize {
        self.q.rows()
    }

    pub fn slice(&self, span: Span) -> Self {
        Self {
            q: self.q.slice_rows(span.range()),
            k: self.k.slice_rows(span.range()),
            v: self.v.slice_rows(span.range()),
        }
    }

    /// Copies the states of the tokens in `from` over the tokens in `to`.
    pub fn copy_rows(&mut self, from: Span, to: Span) {
        assert_eq!(from.len(), to.len());
        for m in [&mut self.q, &mut self.k, &mut self.v] {
            let src = m.slice_rows(from.range());
            m.write_rows(to.start, src.view());
        }
    }

    pub fn cast<U: Real>(&self) -> Qkv<U> {
        Qkv {
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
        }
    }
}

/// Seeded uniform(-1, 1) states for `num_layers` layers. Values are drawn in
/// f64 and rounded, so f32 and f64 runs from one seed share content.
pub fn generate_states<T: Real>(
    seed: u64,
    total_len: usize,
    hidden: usize,
    num_layers: usize,
) -> Vec<Qkv<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = || {
        let data: Vec<T> = (0..total_len * hidden)
            .map(|_| T::from_f64_lossy(rng.random_range(-1.0..1.0)))
            .collect();
        Matrix::new(total_len, hidden, data).expect("finite by construction")
    };
    (0..num_layers)
        .map(|_| Qkv {
            q: next(),
            k: next(),
            v: next(),
        })
        .collect()
}

/// Cached keys (rotated) and values of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Kv<T> {
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

impl<T: Real> Kv<T> {
    fn of(states: &Qkv<T>) -> Self {
        Self {
            k: states.k.clone(),
            v: states.v.clone(),
        }
    }

    pub fn bitwise_eq(&self, other: &Kv<T>) -> bool {
        self.k.bitwise_eq(&other.k) && self.v.bitwise_eq(&other.v)
    }
}

/// Output and KV rows of one encoded block, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded<T> {
    pub kv: Vec<Kv<T>>,
    pub output: Vec<Matrix<T>>,
}

impl<T: Real> Encoded<T> {
    pub fn bitwise_eq(&self, other: &Encoded<T>) -> bool {
        self.kv.len() == other.kv.len()
            && self.kv.iter().zip(&other.kv).all(|(a, b)| a.bitwise_eq(b))
            && self
                .output
                .iter()
                .zip(&other.output)
                .all(|(a, b)| a.bitwise_eq(b))
    }
}

/// Per-layer key/value cache assembled in sequence order.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    layers: Vec<Kv<T>>,
    prefill_len: Option<usize>,
    next_position: usize,
}

impl<T: Real> KvCache<T> {
    /// Concatenates encoded parts (sink, then blocks in order).
    pub fn assemble<'a>(num_layers: usize, parts: impl IntoIterator<Item = &'a [Kv<T>]>) -> Result<Self> {
        let mut layers: Vec<Kv<T>> = (0..num_layers)
            .map(|_| Kv {
                k: Matrix::zeros(0, 0),
                v: Matrix::zeros(0, 0),
            })
            .collect();
        for part in parts {
            if part.len() != num_layers {
                return Err(Error::Cache(format!(
                    "part has {} layers, cache has {num_layers}",
                    part.len()
                )));
            }
            for (layer, kv) in layers.iter_mut().zip(part) {
                layer.k.push_rows(kv.k.view())?;
                layer.v.push_rows(kv.v.view())?;
            }
        }
        Ok(Self {
            layers,
            prefill_len: None,
            next_position: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.k.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> &Kv<T> {
        &self.layers[i]
    }

    /// Prompt length once prefill has completed.
    pub fn prefill_len(&self) -> Option<usize> {
        self.prefill_len
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn bitwise_eq(&self, other: &KvCache<T>) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.bitwise_eq(b))
            && self.prefill_len == other.prefill_len
    }
}

/// Execution order for independent context blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Schedule {
    Serial,
    /// Blocks run on the rayon pool.
    Concurrent,
    /// Blocks complete in exactly this order (a permutation of block indices).
    Permuted(Vec<usize>),
    /// One OS thread per block, started in reverse order, each yielding a
    /// block-dependent number of times before running.
    Staggered,
}

/// One contiguous run of keys visible to a query block.
struct KeySegment<'a, T> {
    k: MatrixView<'a, T>,
    v: MatrixView<'a, T>,
    first_token: usize,
    /// Query row `r` sees only rows `0..=r` of this segment.
    causal: bool,
}

impl<'a, T: Real> KeySegment<'a, T> {
    fn full(kv: &'a Kv<T>, first_token: usize) -> Self {
        Self {
            k: kv.k.view(),
            v: kv.v.view(),
            first_token,
            causal: false,
        }
    }

    fn own(states: &'a Qkv<T>, first_token: usize) -> Self {
        Self {
            k: states.k.view(),
            v: states.v.view(),
            first_token,
            causal: true,
        }
    }

    fn visible(&self, query_row: usize) -> usize {
        if self.causal {
            (query_row + 1).min(self.k.rows())
        } else {
            self.k.rows()
        }
    }
}

/// Called with (query row, head, key token indices, softmax weights).
pub type WeightObserver<'o, T> = &'o mut dyn FnMut(usize, usize, &[usize], &[T]);

fn attend_segments<T: Real>(
    q: &Matrix<T>,
    segments: &[KeySegment<'_, T>],
    heads: HeadLayout,
    temperature: T,
    mut observer: Option<WeightObserver<'_, T>>,
) -> Result<Matrix<T>> {
    let hidden = heads.hidden();
    if q.cols() != hidden
        || segments
            .iter()
            .any(|s| s.k.cols() != hidden || s.v.cols() != hidden || s.k.rows() != s.v.rows())
    {
        return Err(Error::Shape(format!(
            "states must have {hidden} columns and matching key/value rows"
        )));
    }
    let scale = T::from_usize(heads.head_dim())
        .expect("head dim fits the float type")
        .sqrt();
    let mut out = Matrix::zeros(q.rows(), hidden);
    let mut logits = Vec::new();
    let mut key_tokens = Vec::new();
    for r in 0..q.rows() {
        for h in 0..heads.num_heads() {
            let cols = heads.head_cols(h);
            let qh = &q.row(r)[cols.clone()];
            logits.clear();
            key_tokens.clear();
            for seg in segments {
                for j in 0..seg.visible(r) {
                    logits.push(dot(qh, &seg.k.row(j)[cols.clone()]) / scale);
                }
                if observer.is_some() {
                    key_tokens.extend(seg.first_token..seg.first_token + seg.visible(r));
                }
            }
            if logits.is_empty() {
                return Err(Error::UnattendedQuery { row: r });
            }
            softmax_in_place(&mut logits, temperature);
            if let Some(obs) = observer.as_mut() {
                obs(r, h, &key_tokens, &logits);
            }
            let acc = &mut out.row_mut(r)[cols.clone()];
            let mut weights = logits.iter();
            for seg in segments {
                for j in 0..seg.visible(r) {
                    let w = *weights.next().expect("one weight per visible key");
                    for (o, &x) in acc.iter_mut().zip(&seg.v.row(j)[cols.clone()]) {
                        *o = *o + w * x;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Result of a full prefill.
#[derive(Debug, Clone)]
pub struct Prefill<T> {
    pub cache: KvCache<T>,
    /// Per-layer attention output, one row per prompt token.
    pub outputs: Vec<Matrix<T>>,
    pub partition: BlockPartition,
    pub positions: PositionMap,
}

/// Partitioned-attention engine for one method and head layout.
#[derive(Debug, Clone)]
pub struct Engine {
    heads: HeadLayout,
    config: MethodConfig,
}

impl Engine {
    pub fn new(heads: HeadLayout, config: MethodConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { heads, config })
    }

    pub fn heads(&self) -> HeadLayout {
        self.heads
    }

    pub fn config(&self) -> &MethodConfig {
        &self.config
    }

    fn temperature<T: Real>(&self) -> Result<T> {
        let t = T::from_f64_lossy(self.config.temperature);
        check_temperature(t)?;
        Ok(t)
    }

    fn check_states<T: Real>(&self, states: &[Qkv<T>], rows: usize) -> Result<()> {
        for (i, s) in states.iter().enumerate() {
            for m in [&s.q, &s.k, &s.v] {
                if m.rows() != rows || m.cols() != self.heads.hidden() {
                    return Err(Error::Shape(format!(
                        "layer {i}: expected {rows}x{} states, got {}x{}",
                        self.heads.hidden(),
                        m.rows(),
                        m.cols()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Causal self-attention over the sink tokens. `first_token` is the
    /// sink's starting index (always 0 in a prefill).
    pub fn encode_sink<T: Real>(&self, sink: &[Qkv<T>], first_token: usize) -> Result<Encoded<T>> {
        let rows = sink.first().map_or(0, Qkv::rows);
        if rows == 0 && self.config.requires_sink() {
            return Err(Error::Method(format!(
                "method {} needs a non-empty sink block",
                self.config.name()
            )));
        }
        self.check_states(sink, rows)?;
        let temperature = self.temperature()?;
        let output = sink
            .iter()
            .map(|s| {
                attend_segments(
                    &s.q,
                    &[KeySegment::own(s, first_token)],
                    self.heads,
                    temperature,
                    None,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Encoded {
            kv: sink.iter().map(Kv::of).collect(),
            output,
        })
    }

    /// Encodes context block `index` against the sink (unless the method has
    /// none) and, for blocks after the first, the anchor block when given.
    /// `spans` are the token ranges of sink, anchor and this block, used only
    /// for weight bookkeeping.
    pub fn encode_context_block<T: Real>(
        &self,
        index: usize,
        sink: &[Kv<T>],
        anchor: Option<&[Kv<T>]>,
        block: &[Qkv<T>],
        spans: BlockSpans,
    ) -> Result<Encoded<T>> {
        let rows = block.first().map_or(0, Qkv::rows);
        self.check_states(block, rows)?;
        if sink.len() != block.len() {
            return Err(Error::Shape(format!(
                "sink has {} layers, block has {}",
                sink.len(),
                block.len()
            )));
        }
        let temperature = self.temperature()?;
        let use_anchor = self.config.sink_mode == SinkMode::AnchorFirstBlock && index > 0;
        if use_anchor && anchor.is_none() {
            return Err(Error::Method("anchor mode needs the first block's states".into()));
        }
        let output = block
            .iter()
            .enumerate()
            .map(|(layer, states)| {
                let mut segments = Vec::with_capacity(3);
                if self.config.sink_mode.blocks_see_sink() {
                    segments.push(KeySegment::full(&sink[layer], spans.sink.start));
                }
                if use_anchor {
                    let anchor = anchor.expect("checked above");
                    segments.push(KeySegment::full(&anchor[layer], spans.anchor.start));
                }
                segments.push(KeySegment::own(states, spans.block.start));
                attend_segments(&states.q, &segments, self.heads, temperature, None)
            })
            .collect::<Result<_>>()?;
        Ok(Encoded {
            kv: block.iter().map(Kv::of).collect(),
            output,
        })
    }

    /// Encodes every context block. The result is assembled in block order
    /// and does not depend on `schedule`.
    pub fn encode_all_blocks<T: Real>(
        &self,
        blocks: &[Vec<Qkv<T>>],
        sink: &[Kv<T>],
        partition: &BlockPartition,
        schedule: &Schedule,
    ) -> Result<Vec<Encoded<T>>> {
        if blocks.len() != partition.num_blocks() {
            return Err(Error::Shape(format!(
                "{} block states for {} context blocks",
                blocks.len(),
                partition.num_blocks()
            )));
        }
        let anchor: Option<Vec<Kv<T>>> = match (self.config.sink_mode, blocks.first()) {
            (SinkMode::AnchorFirstBlock, Some(first)) => Some(first.iter().map(Kv::of).collect()),
            _ => None,
        };
        let encode = |i: usize| {
            let spans = BlockSpans {
                sink: partition.sink,
                anchor: partition.context_blocks[0],
                block: partition.context_blocks[i],
            };
            self.encode_context_block(i, sink, anchor.as_deref(), &blocks[i], spans)
                .map_err(|e| Error::Block {
                    index: i,
                    source: Box::new(e),
                })
        };
        let n = blocks.len();
        match schedule {
            Schedule::Serial => (0..n).map(encode).collect(),
            Schedule::Concurrent => (0..n).into_par_iter().map(encode).collect(),
            Schedule::Permuted(order) => {
                let mut sorted = order.clone();
                sorted.sort_unstable();
                if sorted != (0..n).collect::<Vec<_>>() {
                    return Err(Error::Method(format!(
                        "schedule {order:?} is not a permutation of {n} blocks"
                    )));
                }
                let mut slots: Vec<Option<Encoded<T>>> = (0..n).map(|_| None).collect();
                for &i in order {
                    slots[i] = Some(encode(i)?);
                }
                Ok(slots.into_iter().map(|s| s.expect("every slot filled")).collect())
            }
            Schedule::Staggered => {
                let slots: Vec<Mutex<Option<Result<Encoded<T>>>>> =
                    (0..n).map(|_| Mutex::new(None)).collect();
                std::thread::scope(|scope| {
                    for i in (0..n).rev() {
                        let slot = &slots[i];
                        let encode = &encode;
                        scope.spawn(move || {
                            for _ in 0..(n - i) * 64 {
                                std::thread::yield_now();
                            }
                            *slot.lock().expect("slot lock") = Some(encode(i));
                        });
                    }
                });
                slots
                    .into_iter()
                    .map(|s| s.into_inner().expect("slot lock").expect("thread ran"))
                    .collect()
            }
        }
    }

    /// Question tokens attend every cached key plus question keys causally;
    /// their KV rows are appended and the cache is marked prefilled.
    pub fn answer_question<T: Real>(
        &self,
        question: Span,
        states: &[Qkv<T>],
        cache: &mut KvCache<T>,
    ) -> Result<Vec<Matrix<T>>> {
        self.answer_question_observed(question, states, cache, None)
    }

    fn answer_question_observed<T: Real>(
        &self,
        question: Span,
        states: &[Qkv<T>],
        cache: &mut KvCache<T>,
        mut observer: Option<(usize, WeightObserver<'_, T>)>,
    ) -> Result<Vec<Matrix<T>>> {
        if cache.prefill_len.is_some() {
            return Err(Error::Cache("prefill already completed".into()));
        }
        if cache.len() != question.start || cache.num_layers() != states.len() {
            return Err(Error::Cache(format!(
                "incomplete cache: {} rows over {} layers, question starts at {} over {} layers",
                cache.len(),
                cache.num_layers(),
                question.start,
                states.len()
            )));
        }
        self.check_states(states, question.len())?;
        let temperature = self.temperature()?;
        let mut outputs = Vec::with_capacity(states.len());
        for (layer, s) in states.iter().enumerate() {
            let segments = [
                KeySegment::full(&cache.layers[layer], 0),
                KeySegment::own(s, question.start),
            ];
            let obs = match observer.as_mut() {
                Some((l, f)) if *l == layer => Some(&mut **f as WeightObserver<'_, T>),
                _ => None,
            };
            outputs.push(attend_segments(&s.q, &segments, self.heads, temperature, obs)?);
        }
        for (layer, s) in cache.layers.iter_mut().zip(states) {
            layer.k.push_rows(s.k.view())?;
            layer.v.push_rows(s.v.view())?;
        }
        cache.prefill_len = Some(question.end);
        Ok(outputs)
    }

    /// Rotates Q and K of every layer with the method's position ids.
    pub fn rotate_states<T: Real>(
        &self,
        layout: &SequenceLayout,
        states: &[Qkv<T>],
    ) -> Result<(BlockPartition, PositionMap, Vec<Qkv<T>>)> {
        let partition = self.config.partition_for(layout)?;
        let positions = assign_positions(
            &partition,
            layout,
            self.config.position_mode,
            self.config.scheme,
        )?
        .with_base(self.config.rope_base);
        let l = layout.total_len();
        self.check_states(states, l)?;
        let all = Span::new(0, l);
        let d = self.heads.head_dim();
        let rotated = states
            .iter()
            .map(|s| {
                Ok(Qkv {
                    q: positions.rotate(&s.q, all, d, self.config.mrope_split)?,
                    k: positions.rotate(&s.k, all, d, self.config.mrope_split)?,
                    v: s.v.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok((partition, positions, rotated))
    }

    /// Sink, blocks and question over states whose Q and K are already
    /// rotated. This is the attention-only part of a prefill.
    pub fn prefill_rotated<T: Real>(
        &self,
        partition: &BlockPartition,
        rotated: &[Qkv<T>],
        schedule: &Schedule,
    ) -> Result<(KvCache<T>, Vec<Matrix<T>>)> {
        self.prefill_rotated_observed(partition, rotated, schedule, None)
    }

    fn prefill_rotated_observed<T: Real>(
        &self,
        partition: &BlockPartition,
        rotated: &[Qkv<T>],
        schedule: &Schedule,
        observer: Option<(usize, WeightObserver<'_, T>)>,
    ) -> Result<(KvCache<T>, Vec<Matrix<T>>)> {
        if rotated.is_empty() {
            return Err(Error::Shape("no layers".into()));
        }
        let num_layers = rotated.len();
        let slice = |span: Span| -> Vec<Qkv<T>> { rotated.iter().map(|s| s.slice(span)).collect() };

        let sink = self.encode_sink(&slice(partition.sink), partition.sink.start)?;
        let blocks: Vec<Vec<Qkv<T>>> = partition.context_blocks.iter().map(|&b| slice(b)).collect();
        let encoded = self.encode_all_blocks(&blocks, &sink.kv, partition, schedule)?;

        let mut cache = KvCache::assemble(
            num_layers,
            std::iter::once(sink.kv.as_slice()).chain(encoded.iter().map(|e| e.kv.as_slice())),
        )?;
        let question_out =
            self.answer_question_observed(partition.question, &slice(partition.question), &mut cache, observer)?;

        let hidden = self.heads.hidden();
        let outputs = (0..num_layers)
            .map(|layer| {
                let mut parts = vec![sink.output[layer].view()];
                parts.extend(encoded.iter().map(|e| e.output[layer].view()));
                parts.push(question_out[layer].view());
                let mut out = Matrix::vstack(&parts)?;
                if out.rows() == 0 {
                    out = Matrix::zeros(0, hidden);
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok((cache, outputs))
    }

    /// Full prefill of raw (unrotated) per-layer states shaped `L x hidden`.
    pub fn prefill<T: Real>(
        &self,
        layout: &SequenceLayout,
        states: &[Qkv<T>],
        schedule: &Schedule,
    ) -> Result<Prefill<T>> {
        let (partition, positions, rotated) = self.rotate_states(layout, states)?;
        let (mut cache, outputs) = self.prefill_rotated(&partition, &rotated, schedule)?;
        cache.next_position = positions.next_id;
        Ok(Prefill {
            cache,
            outputs,
            partition,
            positions,
        })
    }

    /// Softmax weights of the question queries of `layer` over their keys,
    /// reported as (query index within the question, head, key tokens,
    /// weights).
    pub fn question_attention<T: Real>(
        &self,
        layout: &SequenceLayout,
        states: &[Qkv<T>],
        layer: usize,
        observer: WeightObserver<'_, T>,
    ) -> Result<Prefill<T>> {
        if layer >= states.len() {
            return Err(Error::Trace(format!(
                "layer {layer} out of range for {} layers",
                states.len()
            )));
        }
        let (partition, positions, rotated) = self.rotate_states(layout, states)?;
        let (mut cache, outputs) =
            self.prefill_rotated_observed(&partition, &rotated, &Schedule::Serial, Some((layer, observer)))?;
        cache.next_position = positions.next_id;
        Ok(Prefill {
            cache,
            outputs,
            partition,
            positions,
        })
    }

    /// One decode token: attends every cached key plus itself at the next
    /// position id, then appends its KV.
    pub fn decode_step<T: Real>(&self, token: &[Qkv<T>], cache: &mut KvCache<T>) -> Result<Vec<Matrix<T>>> {
        if cache.prefill_len.is_none() {
            return Err(Error::Cache("decode called before prefill".into()));
        }
        if token.len() != cache.num_layers() {
            return Err(Error::Shape(format!(
                "{} layers of token states for a {}-layer cache",
                token.len(),
                cache.num_layers()
            )));
        }
        self.check_states(token, 1)?;
        let temperature = self.temperature()?;
        let p = cache.next_position;
        let d = self.heads.head_dim();
        let base = self.config.rope_base;
        let rotate = |x: &Matrix<T>| match self.config.scheme {
            RopeScheme::Rope1D => apply_rope(x, &[p], d, base),
            RopeScheme::MRope3D(_) => {
                let split = match self.config.mrope_split {
                    Some(s) => s,
                    None => MRopeSplit::default_for(d)?,
                };
                apply_mrope3d(x, &[[p, p, p]], d, split, base)
            }
        };
        let position = cache.len();
        let mut outputs = Vec::with_capacity(token.len());
        let mut rotated = Vec::with_capacity(token.len());
        for (layer, s) in token.iter().enumerate() {
            let r = Qkv {
                q: rotate(&s.q)?,
                k: rotate(&s.k)?,
                v: s.v.clone(),
            };
            let segments = [
                KeySegment::full(&cache.layers[layer], 0),
                KeySegment::own(&r, position),
            ];
            outputs.push(attend_segments(&r.q, &segments, self.heads, temperature, None)?);
            rotated.push(r);
        }
        for (layer, r) in cache.layers.iter_mut().zip(&rotated) {
            layer.k.push_rows(r.k.view())?;
            layer.v.push_rows(r.v.view())?;
        }
        cache.next_position += 1;
        Ok(outputs)
    }
}

/// Token ranges a context block's keys come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpans {
    pub sink: Span,
    pub anchor: Span,
    pub block: Span,
}

/// Dense evaluation of the same method: rotate the whole sequence with the
/// method's position ids and run masked multi-head attention under the
/// equivalent dense mask.
pub mod reference {
    use super::*;
    use crate::attention::mha;
    use crate::layout::encode_mask;

    pub fn dense_prefill<T: Real>(
        heads: HeadLayout,
        config: &MethodConfig,
        layout: &SequenceLayout,
        states: &[Qkv<T>],
    ) -> Result<Vec<Matrix<T>>> {
        let partition = config.partition_for(layout)?;
        let mask = encode_mask(&partition, config)?;
        dense_prefill_with_mask(heads, config, layout, states, &mask)
    }

    /// As [`dense_prefill`] but with a caller-supplied mask.
    pub fn dense_prefill_with_mask<T: Real>(
        heads: HeadLayout,
        config: &MethodConfig,
        layout: &SequenceLayout,
        states: &[Qkv<T>],
        mask: &crate::attention::MaskSpec,
    ) -> Result<Vec<Matrix<T>>> {
        let partition = config.partition_for(layout)?;
        let positions = assign_positions(&partition, layout, config.position_mode, config.scheme)?
            .with_base(config.rope_base);
        let all = Span::new(0, layout.total_len());
        let temperature = T::from_f64_lossy(config.temperature);
        states
            .iter()
            .map(|s| {
                let q = positions.rotate(&s.q, all, heads.head_dim(), config.mrope_split)?;
                let k = positions.rotate(&s.k, all, heads.head_dim(), config.mrope_split)?;
                mha(&q, &k, &s.v, heads, mask, temperature)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{mha, MaskSpec};
    use crate::layout::{encode_mask, SequenceLayout};
    use crate::method::Preset;
    use crate::positions::{FrameGrid, PositionMode};

    fn heads() -> HeadLayout {
        HeadLayout::new(2, 4).unwrap()
    }

    fn max_diff(a: &[Matrix<f32>], b: &[Matrix<f32>]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
    }

    #[test]
    fn one_token_sink_returns_its_value() {
        let engine = Engine::new(heads(), MethodConfig::preset(Preset::Pevlm, 0, 1)).unwrap();
        let states = generate_states::<f32>(1, 1, 8, 1);
        let enc = engine.encode_sink(&states, 0).unwrap();
        assert!(enc.output[0].bitwise_eq(&states[0].v));
    }

    #[test]
    fn empty_sink_rejected_when_required() {
        let engine = Engine::new(heads(), MethodConfig::preset(Preset::Ape, 0, 1)).unwrap();
        let layout = SequenceLayout::build(0, 4, 2, 1).unwrap();
        let states = generate_states::<f32>(1, layout.total_len(), 8, 1);
        assert!(matches!(
            engine.prefill(&layout, &states, &Schedule::Serial),
            Err(Error::Method(_))
        ));
    }

    #[test]
    fn question_after_one_token_sink() {
        let engine = Engine::new(HeadLayout::new(1, 2).unwrap(), MethodConfig::preset(Preset::Pevlm, 0, 1)).unwrap();
        let layout = SequenceLayout::build(1, 0, 0, 1).unwrap();
        let states = generate_states::<f64>(3, 2, 2, 1);
        let mut seen = Vec::new();
        engine
            .question_attention(&layout, &states, 0, &mut |_, _, keys, w| {
                seen.push((keys.to_vec(), w.len()));
            })
            .unwrap();
        assert_eq!(seen, vec![(vec![0, 1], 2)]);
    }

    #[test]
    fn sinkless_block_is_plain_causal() {
        let engine = Engine::new(heads(), MethodConfig::preset(Preset::BlockAttention, 0, 2)).unwrap();
        let layout = SequenceLayout::build(0, 4, 3, 0).unwrap();
        let states = generate_states::<f32>(5, layout.total_len(), 8, 1);
        let pre = engine.prefill(&layout, &states, &Schedule::Serial).unwrap();
        let (_, _, rotated) = engine.rotate_states(&layout, &states).unwrap();
        let block = rotated[0].slice(Span::new(6, 12));
        let expected = mha(&block.q, &block.k, &block.v, heads(), &MaskSpec::causal(6), 1.0).unwrap();
        assert!(pre.outputs[0].slice_rows(6..12).max_abs_diff(&expected) <= 1e-6);
    }

    #[test]
    fn prefill_matches_dense_reference_for_every_preset() {
        let layout = SequenceLayout::build(3, 7, 4, 3).unwrap();
        let states = generate_states::<f32>(11, layout.total_len(), 8, 2);
        for preset in Preset::ALL {
            for scheme in [RopeScheme::Rope1D, RopeScheme::MRope3D(FrameGrid { height: 2, width: 2 })] {
                let config = MethodConfig::preset(preset, 2, 2).with_scheme(scheme);
                let h = HeadLayout::new(1, 8).unwrap();
                let engine = Engine::new(h, config.clone()).unwrap();
                let pre = engine.prefill(&layout, &states, &Schedule::Serial).unwrap();
                let dense = reference::dense_prefill(h, &config, &layout, &states).unwrap();
                assert!(max_diff(&pre.outputs, &dense) <= 1e-6, "{preset} {scheme}");
                assert_eq!(pre.cache.len(), layout.total_len());
                assert_eq!(pre.cache.prefill_len(), Some(layout.total_len()));
            }
        }
    }

    #[test]
    fn full_preset_equals_causal_attention() {
        let layout = SequenceLayout::build(2, 5, 3, 2).unwrap();
        let states = generate_states::<f32>(2, layout.total_len(), 8, 1);
        let config = MethodConfig::preset(Preset::Full, 0, 0);
        let engine = Engine::new(heads(), config).unwrap();
        let pre = engine.prefill(&layout, &states, &Schedule::Serial).unwrap();
        let (_, _, rotated) = engine.rotate_states(&layout, &states).unwrap();
        let r = &rotated[0];
        let causal = mha(&r.q, &r.k, &r.v, heads(), &MaskSpec::causal(layout.total_len()), 1.0).unwrap();
        assert!(pre.outputs[0].bitwise_eq(&causal));
    }

    #[test]
    fn identical_blocks_under_reuse() {
        let layout = SequenceLayout::build(2, 6, 2, 1).unwrap();
        let mut states = generate_states::<f32>(4, layout.total_len(), 8, 1);
        let config = MethodConfig::preset(Preset::Ape, 0, 3);
        let partition = config.partition_for(&layout).unwrap();
        let (b0, b1) = (partition.context_blocks[0], partition.context_blocks[1]);
        states[0].copy_rows(b0, b1);
        let engine = Engine::new(heads(), config).unwrap();
        let pre = engine.prefill(&layout, &states, &Schedule::Serial).unwrap();
        let out = &pre.outputs[0];
        assert!(out.slice_rows(b0.range()).bitwise_eq(&out.slice_rows(b1.range())));
        let kv = pre.cache.layer(0);
        assert!(kv.k.slice_rows(b0.range()).bitwise_eq(&kv.k.slice_rows(b1.range())));
    }

    #[test]
    fn schedules_agree_bitwise() {
        let layout = SequenceLayout::build(2, 12, 3, 2).unwrap();
        let states = generate_states::<f32>(8, layout.total_len(), 8, 2);
        let engine = Engine::new(heads(), MethodConfig::preset(Preset::Star, 0, 2)).unwrap();
        let (partition, _, rotated) = engine.rotate_states(&layout, &states).unwrap();
        let slice = |s: Span| -> Vec<Qkv<f32>> { rotated.iter().map(|r| r.slice(s)).collect() };
        let sink = engine.encode_sink(&slice(partition.sink), 0).unwrap();
        let blocks: Vec<_> = partition.context_blocks.iter().map(|&b| slice(b)).collect();
        let serial = engine.encode_all_blocks(&blocks, &sink.kv, &partition, &Schedule::Serial).unwrap();
        let n = blocks.len();
        for schedule in [
            Schedule::Concurrent,
            Schedule::Staggered,
            Schedule::Permuted((0..n).rev().collect()),
        ] {
            let other = engine.encode_all_blocks(&blocks, &sink.kv, &partition, &schedule).unwrap();
            assert!(serial.iter().zip(&other).all(|(a, b)| a.bitwise_eq(b)), "{schedule:?}");
        }
        assert!(engine
            .encode_all_blocks(&blocks, &sink.kv, &partition, &Schedule::Permuted(vec![0, 0]))
            .is_err());
    }

    #[test]
    fn single_block_schedule_is_plain_encoding() {
        let layout = SequenceLayout::build(2, 3, 2, 0).unwrap();
        let states = generate_states::<f32>(8, layout.total_len(), 8, 1);
        let engine = Engine::new(heads(), MethodConfig::preset(Preset::Pevlm, 1, 2)).unwrap();
        let (partition, _, rotated) = engine.rotate_states(&layout, &states).unwrap();
        assert_eq!(partition.num_blocks(), 1);
        let sink = engine.encode_sink(&[rotated[0].slice(partition.sink)], 0).unwrap();
        let block = vec![rotated[0].slice(partition.context_blocks[0])];
        let all = engine
            .encode_all_blocks(std::slice::from_ref(&block), &sink.kv, &partition, &Schedule::Concurrent)
            .unwrap();
        let spans = BlockSpans {
            sink: partition.sink,
            anchor: partition.context_blocks[0],
            block: partition.context_blocks[0],
        };
        let alone = engine.encode_context_block(0, &sink.kv, None, &block, spans).unwrap();
        assert!(all[0].bitwise_eq(&alone));
    }

    #[test]
    fn perturbing_one_block_leaves_others_untouched() {
        let layout = SequenceLayout::build(2, 8, 2, 2).unwrap();
        let config = MethodConfig::preset(Preset::Pevlm, 2, 2);
        let engine = Engine::new(heads(), config.clone()).unwrap();
        let states = generate_states::<f32>(21, layout.total_len(), 8, 1);
        let partition = config.partition_for(&layout).unwrap();
        let mut perturbed = states.clone();
        let target = partition.context_blocks[1];
        let noise = generate_states::<f32>(99, target.len(), 8, 1);
        perturbed[0].q.write_rows(target.start, noise[0].q.view());
        perturbed[0].k.write_rows(target.start, noise[0].k.view());
        let a = engine.prefill(&layout, &states, &Schedule::Serial).unwrap();
        let b = engine.prefill(&layout, &perturbed, &Schedule::Serial).unwrap();
        for (i, blk) in partition.context_blocks.iter().enumerate() {
            let same = a.cache.layer(0).k.slice_rows(blk.range()).bitwise_eq(&b.cache.layer(0).k.slice_rows(blk.range()))
                && a.outputs[0].slice_rows(blk.range()).bitwise_eq(&b.outputs[0].slice_rows(blk.range()));
            assert_eq!(same, i != 1, "block {i}");
        }
    }

    #[test]
    fn answer_question_rejects_incomplete_cache() {
        let engine = Engine::new(heads(), MethodConfig::preset(Preset::Pevlm, 0, 1)).unwrap();
        let mut cache = KvCache::<f32>::assemble(1, std::iter::empty()).unwrap();
        let q = generate_states::<f32>(1, 2, 8, 1);
        assert!(matches!(
            engine.answer_question(Span::new(3, 5), &q, &mut cache),
            Err(Error::Cache(_))
        ));
    }

    #[test]
    fn decode_before_prefill_fails() {
        let engine = Engine::new(heads(), MethodConfig::preset(Preset::Pevlm, 0, 1)).unwrap();
        let mut cache = KvCache::<f32>::assemble(1, std::iter::empty()).unwrap();
        let token = generate_states::<f32>(1, 1, 8, 1);
        assert!(matches!(engine.decode_step(&token, &mut cache), Err(Error::Cache(_))));
    }

    #[test]
    fn decode_after_full_prefill_matches_longer_causal_run() {
        let layout = SequenceLayout::build(2, 4, 3, 2).unwrap();
        let l = layout.total_len();
        let all = generate_states::<f32>(6, l + 1, 8, 1);
        let prompt: Vec<_> = all.iter().map(|s| s.slice(Span::new(0, l))).collect();
        let token: Vec<_> = all.iter().map(|s| s.slice(Span::new(l, l + 1))).collect();
        let engine = Engine::new(heads(), MethodConfig::preset(Preset::Full, 0, 0)).unwrap();
        let mut pre = engine.prefill(&layout, &prompt, &Schedule::Serial).unwrap();
        let out = engine.decode_step(&token, &mut pre.cache).unwrap();
        assert_eq!(pre.cache.len(), l + 1);

        let ids: Vec<usize> = (0..=l).collect();
        let q = apply_rope(&all[0].q, &ids, 4, crate::positions::DEFAULT_ROPE_BASE).unwrap();
        let k = apply_rope(&all[0].k, &ids, 4, crate::positions::DEFAULT_ROPE_BASE).unwrap();
        let dense = mha(&q, &k, &all[0].v, heads(), &MaskSpec::causal(l + 1), 1.0).unwrap();
        assert!(out[0].max_abs_diff(&dense.slice_rows(l..l + 1)) <= 1e-5);
    }

    #[test]
    fn decode_after_pevlm_prefill_matches_extended_mask() {
        let layout = SequenceLayout::build(2, 6, 2, 2).unwrap();
        let l = layout.total_len();
        let config = MethodConfig::preset(Preset::Pevlm, 1, 2).with_position_mode(PositionMode::Sequential);
        let all = generate_states::<f32>(7, l + 1, 8, 1);
        let prompt: Vec<_> = all.iter().map(|s| s.slice(Span::new(0, l))).collect();
        let token: Vec<_> = all.iter().map(|s| s.slice(Span::new(l, l + 1))).collect();
        let engine = Engine::new(heads(), config.clone()).unwrap();
        let mut pre = engine.prefill(&layout, &prompt, &Schedule::Serial).unwrap();
        let before = pre.cache.len();
        let out = engine.decode_step(&token, &mut pre.cache).unwrap();
        assert_eq!(pre.cache.len(), before + 1);

        let mask = encode_mask(&pre.partition, &config).unwrap().with_appended_token();
        let ids: Vec<usize> = (0..=l).collect();
        let q = apply_rope(&all[0].q, &ids, 4, crate::positions::DEFAULT_ROPE_BASE).unwrap();
        let k = apply_rope(&all[0].k, &ids, 4, crate::positions::DEFAULT_ROPE_BASE).unwrap();
        let dense = mha(&q, &k, &all[0].v, heads(), &mask, 1.0).unwrap();
        assert!(out[0].max_abs_diff(&dense.slice_rows(l..l + 1)) <= 1e-5);
    }
}
