//! `trace`: attention received by each key token from the question queries.

use std::io::Write;

use pevlm::{generate_states, BlockPartition, Engine, Real};

use crate::{CliError, RunConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AttnTrace {
    /// Received weight per key token, summed over question queries and
    /// averaged over heads.
    pub raw: Vec<f64>,
    /// `moving[i]` is the mean of `raw[i..i + window]`.
    pub moving: Vec<f64>,
    pub window: usize,
    pub segments: Vec<String>,
    pub queries: usize,
    pub layer: usize,
    /// Largest |sum of weights - 1| over query rows and heads.
    pub max_row_error: f64,
}

impl AttnTrace {
    pub fn mass(&self) -> f64 {
        self.raw.iter().sum()
    }

    pub fn write(&self, out: &mut dyn Write) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["token", "segment", "raw", "moving_average", "layer", "window"])?;
        let (layer, window) = (self.layer.to_string(), self.window.to_string());
        for (t, (raw, segment)) in self.raw.iter().zip(&self.segments).enumerate() {
            // the average over raw[t + 1 - window..=t] is reported at its last token
            let moving = (t + 1)
                .checked_sub(self.window)
                .map_or(String::new(), |i| self.moving[i].to_string());
            w.write_record([&t.to_string(), segment, &raw.to_string(), &moving, &layer, &window])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Means of every full window of length `window`.
pub fn moving_average(values: &[f64], window: usize) -> Result<Vec<f64>, CliError> {
    if window == 0 || window > values.len() {
        return Err(CliError::Usage(format!(
            "window {window} must be in 1..={}",
            values.len()
        )));
    }
    Ok(values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect())
}

pub fn segment_labels(partition: &BlockPartition) -> Vec<String> {
    let mut labels = vec!["sink".to_string(); partition.sink.len()];
    for (i, b) in partition.context_blocks.iter().enumerate() {
        labels.extend(std::iter::repeat_n(format!("block{i}"), b.len()));
    }
    labels.extend(std::iter::repeat_n("question".to_string(), partition.question.len()));
    labels
}

/// Trace for `config` with the window clamped to the sequence length.
pub fn compute_trace<T: Real>(config: &RunConfig) -> Result<AttnTrace, CliError> {
    let layout = &config.layout;
    if layout.question_len == 0 {
        return Err(CliError::Usage("trace needs at least one question token".into()));
    }
    let l = layout.total_len();
    let states = generate_states::<T>(config.seed, l, config.heads.hidden(), config.layers);
    let engine = Engine::new(config.heads, config.method.clone())?;
    let num_heads = config.heads.num_heads() as f64;
    let mut raw = vec![0.0f64; l];
    let mut max_row_error = 0.0f64;
    let prefill = engine.question_attention(layout, &states, config.layer, &mut |_, _, keys, weights| {
        let mut sum = 0.0;
        for (&k, w) in keys.iter().zip(weights) {
            raw[k] += w.as_f64() / num_heads;
            sum += w.as_f64();
        }
        max_row_error = max_row_error.max((sum - 1.0).abs());
    })?;
    let window = config.window.min(l);
    let moving = moving_average(&raw, window)?;
    Ok(AttnTrace {
        moving,
        window,
        segments: segment_labels(&prefill.partition),
        queries: layout.question_len,
        layer: config.layer,
        max_row_error,
        raw,
    })
}

pub fn cmd_trace(config: &RunConfig, out: &mut dyn Write) -> Result<AttnTrace, CliError> {
    let trace = if config.float64 {
        compute_trace::<f64>(config)?
    } else {
        compute_trace::<f32>(config)?
    };
    trace.write(out)?;
    Ok(trace)
}
