//! Operation counts for dense and partitioned prefill attention.
//!
//! Counts use `2 * H` operations per attended query-key pair, and count a
//! block's own pairs non-causally (every query sees its whole block), so the
//! dense prefill costs `2 H L^2`.

use crate::attention::MaskSpec;
use crate::error::{Error, Result};
use crate::layout::{encode_mask_with, partition, BlockPartition, Causality, SequenceLayout};
use crate::method::SinkMode;

/// Token sizes of a uniformly partitioned prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostParams {
    /// Sink block tokens `S`.
    pub sink: u64,
    /// Tokens per context block `B`.
    pub block: u64,
    /// Number of context blocks `N`.
    pub blocks: u64,
    /// Question tokens `Q`.
    pub question: u64,
    /// Hidden size `H`.
    pub hidden: u64,
    /// Total tokens `L = S + N B + Q`.
    pub total: u64,
}

impl CostParams {
    pub fn new(sink: u64, block: u64, blocks: u64, question: u64, hidden: u64) -> Result<Self> {
        let total = blocks
            .checked_mul(block)
            .and_then(|x| x.checked_add(sink))
            .and_then(|x| x.checked_add(question))
            .ok_or(Error::Overflow("total token count"))?;
        Self::with_total(sink, block, blocks, question, hidden, total)
    }

    /// Like [`CostParams::new`] with an explicit `L`, which must equal
    /// `S + N B + Q`.
    pub fn with_total(
        sink: u64,
        block: u64,
        blocks: u64,
        question: u64,
        hidden: u64,
        total: u64,
    ) -> Result<Self> {
        if hidden < 1 {
            return Err(Error::Cost("hidden size must be at least 1".into()));
        }
        let expected = blocks
            .checked_mul(block)
            .and_then(|x| x.checked_add(sink))
            .and_then(|x| x.checked_add(question))
            .ok_or(Error::Overflow("total token count"))?;
        if expected != total {
            return Err(Error::Cost(format!(
                "L = {total} but S + N*B + Q = {expected}"
            )));
        }
        Ok(Self {
            sink,
            block,
            blocks,
            question,
            hidden,
            total,
        })
    }
}

/// Operation counts of one configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub op_full: u128,
    pub op_sink: u128,
    pub op_blocks: u128,
    pub op_question: u128,
    pub op_pevlm: u128,
    pub predicted_speedup: f64,
}

fn mul(a: u128, b: u128, what: &'static str) -> Result<u128> {
    a.checked_mul(b).ok_or(Error::Overflow(what))
}

fn add(a: u128, b: u128, what: &'static str) -> Result<u128> {
    a.checked_add(b).ok_or(Error::Overflow(what))
}

/// `2 H L^2`.
pub fn op_full(total: u64, hidden: u64) -> Result<u128> {
    let l = total as u128;
    mul(mul(2 * hidden as u128, l, "op_full")?, l, "op_full")
}

fn speedup(op_full: u128, op_pevlm: u128) -> f64 {
    match (op_full, op_pevlm) {
        (0, 0) => 1.0,
        (_, 0) => f64::INFINITY,
        (a, b) => a as f64 / b as f64,
    }
}

/// Part-wise counts: sink `2 H S^2`, blocks `N * 2 H B (S + B)`, question
/// `2 H Q L`. The total is cross-checked against [`op_pevlm_expanded`].
pub fn op_pevlm(params: &CostParams) -> Result<CostReport> {
    let two_h = 2 * params.hidden as u128;
    let (s, b, n, q, l) = (
        params.sink as u128,
        params.block as u128,
        params.blocks as u128,
        params.question as u128,
        params.total as u128,
    );
    let op_sink = mul(mul(two_h, s, "op_sink")?, s, "op_sink")?;
    let per_block = mul(mul(two_h, b, "op_blocks")?, add(s, b, "op_blocks")?, "op_blocks")?;
    let op_blocks = mul(n, per_block, "op_blocks")?;
    let op_question = mul(mul(two_h, q, "op_question")?, l, "op_question")?;
    let op_pevlm = add(add(op_sink, op_blocks, "op_pevlm")?, op_question, "op_pevlm")?;
    let expanded = op_pevlm_expanded(params)?;
    if expanded != op_pevlm {
        return Err(Error::Cost(format!(
            "part sum {op_pevlm} disagrees with expanded form {expanded}"
        )));
    }
    let op_full = op_full(params.total, params.hidden)?;
    Ok(CostReport {
        op_full,
        op_sink,
        op_blocks,
        op_question,
        op_pevlm,
        predicted_speedup: speedup(op_full, op_pevlm),
    })
}

/// Expanded form `2H (S^2 + Q^2 + N B^2 + Q S + N Q B + N S B)`.
pub fn op_pevlm_expanded(params: &CostParams) -> Result<u128> {
    let (s, b, n, q) = (
        params.sink as u128,
        params.block as u128,
        params.blocks as u128,
        params.question as u128,
    );
    let what = "op_pevlm_expanded";
    let terms = [
        mul(s, s, what)?,
        mul(q, q, what)?,
        mul(mul(n, b, what)?, b, what)?,
        mul(q, s, what)?,
        mul(mul(n, q, what)?, b, what)?,
        mul(mul(n, s, what)?, b, what)?,
    ];
    let sum = terms.iter().try_fold(0u128, |acc, &t| add(acc, t, what))?;
    mul(2 * params.hidden as u128, sum, what)
}

/// `2 H` times the number of allowed pairs in `mask`.
pub fn op_from_mask(mask: &MaskSpec, hidden: u64) -> Result<u128> {
    mul(2 * hidden as u128, mask.count_allowed() as u128, "op_from_mask")
}

/// Non-causal mask of a uniform partition with a shared sink, the pair set
/// the part-wise counts describe.
pub fn cost_mask(params: &CostParams) -> Result<MaskSpec> {
    let to_usize = |x: u64| usize::try_from(x).map_err(|_| Error::Overflow("mask size"));
    let p = BlockPartition::from_sizes(
        to_usize(params.sink)?,
        to_usize(params.block)?,
        to_usize(params.blocks)?,
        to_usize(params.question)?,
    );
    encode_mask_with(&p, SinkMode::SysPlusFrames, Causality::NonCausal)
}

/// Counts for an arbitrary partition; blocks may differ in length.
pub fn report_for_partition(partition: &BlockPartition, hidden: u64) -> Result<CostReport> {
    if hidden < 1 {
        return Err(Error::Cost("hidden size must be at least 1".into()));
    }
    let two_h = 2 * hidden as u128;
    let s = partition.sink.len() as u128;
    let q = partition.question.len() as u128;
    let l = partition.total_len() as u128;
    let op_sink = mul(mul(two_h, s, "op_sink")?, s, "op_sink")?;
    let op_blocks = partition.context_blocks.iter().try_fold(0u128, |acc, blk| {
        let b = blk.len() as u128;
        let part = mul(mul(two_h, b, "op_blocks")?, add(s, b, "op_blocks")?, "op_blocks")?;
        add(acc, part, "op_blocks")
    })?;
    let op_question = mul(mul(two_h, q, "op_question")?, l, "op_question")?;
    let op_pevlm = add(add(op_sink, op_blocks, "op_pevlm")?, op_question, "op_pevlm")?;
    let op_full = op_full(partition.total_len() as u64, hidden)?;
    Ok(CostReport {
        op_full,
        op_sink,
        op_blocks,
        op_question,
        op_pevlm,
        predicted_speedup: speedup(op_full, op_pevlm),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetCandidate {
    pub sink_frames: usize,
    pub block_frames: usize,
    pub ops: u128,
    pub latency_s: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetSearch {
    /// Feasible configurations, largest (sink_frames, block_frames) first.
    pub feasible: Vec<BudgetCandidate>,
    pub infeasible: Vec<BudgetCandidate>,
}

/// Estimates each grid point's latency as `op_pevlm / throughput` and keeps
/// the ones within `budget_s`. Larger sinks and blocks rank first.
pub fn latency_budget_search(
    budget_s: f64,
    throughput: f64,
    layout: &SequenceLayout,
    hidden: u64,
    grid: &[(usize, usize)],
) -> Result<BudgetSearch> {
    if budget_s.is_nan() || budget_s <= 0.0 {
        return Err(Error::Cost(format!("budget must be positive, got {budget_s}")));
    }
    if !(throughput > 0.0 && throughput.is_finite()) {
        return Err(Error::Cost(format!(
            "throughput must be positive and finite, got {throughput}"
        )));
    }
    let mut feasible = Vec::new();
    let mut infeasible = Vec::new();
    for &(sink_frames, block_frames) in grid {
        let p = partition(layout, sink_frames, block_frames)?;
        let ops = report_for_partition(&p, hidden)?.op_pevlm;
        let latency_s = ops as f64 / throughput;
        let candidate = BudgetCandidate {
            sink_frames,
            block_frames,
            ops,
            latency_s,
            feasible: latency_s <= budget_s,
        };
        if candidate.feasible {
            feasible.push(candidate);
        } else {
            infeasible.push(candidate);
        }
    }
    feasible.sort_by_key(|c| std::cmp::Reverse((c.sink_frames, c.block_frames)));
    Ok(BudgetSearch {
        feasible,
        infeasible,
    })
}
