//! `cost`: operation-count sweeps and latency-budget search.

use std::io::Write;

use pevlm::costmodel::{latency_budget_search, report_for_partition};
use pevlm::{op_pevlm, CostParams, Error};

use crate::{CliError, RunConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub sink: u64,
    pub block: u64,
    pub blocks: u64,
    pub question: u64,
    pub hidden: u64,
    /// `None` when a count overflows.
    pub ops: Option<(u128, u128, f64)>,
}

/// Cartesian product of the `--cost-*` lists. Lists left out take the value
/// of the configured layout and method (block size is the largest block).
pub fn cost_rows(config: &RunConfig) -> Result<Vec<CostRow>, CliError> {
    let p = config.method.partition_for(&config.layout)?;
    let c = &config.cost;
    let pick = |list: &Option<Vec<u64>>, default: usize| list.clone().unwrap_or_else(|| vec![default as u64]);
    let sinks = pick(&c.sink, p.sink.len());
    let block_sizes = pick(&c.block, p.max_block_len());
    let counts = pick(&c.blocks, p.num_blocks());
    let questions = pick(&c.question, p.question.len());
    let hiddens = pick(&c.hidden, config.heads.hidden());
    let mut rows = Vec::new();
    for &sink in &sinks {
        for &block in &block_sizes {
            for &blocks in &counts {
                for &question in &questions {
                    for &hidden in &hiddens {
                        let params = CostParams::new(sink, block, blocks, question, hidden)
                            .map_err(|e| CliError::Usage(e.to_string()))?;
                        let ops = match op_pevlm(&params) {
                            Ok(r) => Some((r.op_full, r.op_pevlm, r.predicted_speedup)),
                            Err(Error::Overflow(_)) => None,
                            Err(e) => return Err(e.into()),
                        };
                        rows.push(CostRow {
                            sink,
                            block,
                            blocks,
                            question,
                            hidden,
                            ops,
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

fn write_sweep(rows: &[CostRow], out: &mut dyn Write) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["S", "B", "N", "Q", "H", "op_full", "op_pevlm", "predicted_speedup"])?;
    for r in rows {
        let (full, pevlm, speedup) = match r.ops {
            Some((f, p, s)) => (f.to_string(), p.to_string(), s.to_string()),
            None => ("overflow".into(), "overflow".into(), "overflow".into()),
        };
        w.write_record([
            r.sink.to_string(),
            r.block.to_string(),
            r.blocks.to_string(),
            r.question.to_string(),
            r.hidden.to_string(),
            full,
            pevlm,
            speedup,
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_budget(config: &RunConfig, budget: f64, throughput: f64, out: &mut dyn Write) -> Result<(), CliError> {
    let frames = config.layout.num_frames;
    let grid: Vec<(usize, usize)> = config
        .cost
        .sink_grid
        .iter()
        .flat_map(|&s| config.cost.block_grid.iter().map(move |&b| (s, b)))
        .filter(|&(s, b)| s <= frames && b >= 1)
        .collect();
    if grid.is_empty() {
        return Err(CliError::Usage(format!("no grid point fits {frames} frames")));
    }
    let hidden = config.heads.hidden() as u64;
    let search = latency_budget_search(budget, throughput, &config.layout, hidden, &grid)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rank", "sink_frames", "block_frames", "ops", "latency_s", "feasible"])?;
    let ranked = search.feasible.iter().enumerate().map(|(i, c)| (Some(i + 1), c));
    for (rank, c) in ranked.chain(search.infeasible.iter().map(|c| (None, c))) {
        w.write_record([
            rank.map_or(String::new(), |r| r.to_string()),
            c.sink_frames.to_string(),
            c.block_frames.to_string(),
            c.ops.to_string(),
            c.latency_s.to_string(),
            c.feasible.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_cost(config: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    match (config.cost.budget, config.cost.throughput) {
        (Some(budget), Some(throughput)) => write_budget(config, budget, throughput, out),
        (None, None) => {
            if no_lists(config) {
                let p = config.method.partition_for(&config.layout)?;
                let r = report_for_partition(&p, config.heads.hidden() as u64)?;
                let row = CostRow {
                    sink: p.sink.len() as u64,
                    block: p.max_block_len() as u64,
                    blocks: p.num_blocks() as u64,
                    question: p.question.len() as u64,
                    hidden: config.heads.hidden() as u64,
                    ops: Some((r.op_full, r.op_pevlm, r.predicted_speedup)),
                };
                write_sweep(&[row], out)
            } else {
                write_sweep(&cost_rows(config)?, out)
            }
        }
        _ => Err(CliError::Usage("--budget and --throughput go together".into())),
    }
}

fn no_lists(config: &RunConfig) -> bool {
    let c = &config.cost;
    c.sink.is_none() && c.block.is_none() && c.blocks.is_none() && c.question.is_none() && c.hidden.is_none()
}
