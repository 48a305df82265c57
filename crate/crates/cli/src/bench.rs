//! `bench`: wall-clock prefill attention, Full against the configured method.

use std::io::Write;
use std::time::{Duration, Instant};

use pevlm::costmodel::report_for_partition;
use pevlm::{generate_states, Engine, MethodConfig, Preset, Qkv, Real, Schedule};

use crate::config::SweepAxis;
use crate::{CliError, RunConfig};

/// Medians below this are dominated by timer noise.
const MIN_RELIABLE: Duration = Duration::from_millis(1);

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub sweep: String,
    pub sink_frames: usize,
    pub block_frames: usize,
    pub total_len: usize,
    pub num_blocks: usize,
    pub full_ms: f64,
    pub method_ms: f64,
    pub measured_speedup: f64,
    pub predicted_speedup: f64,
}

fn median(mut samples: Vec<Duration>) -> Duration {
    samples.sort();
    samples[samples.len() / 2]
}

fn time_prefill<T: Real>(
    engine: &Engine,
    config: &RunConfig,
    states: &[Qkv<T>],
    schedule: &Schedule,
) -> Result<(Duration, usize), CliError> {
    let (partition, _, rotated) = engine.rotate_states(&config.layout, states)?;
    let mut samples = Vec::with_capacity(config.repeat);
    for _ in 0..config.repeat {
        let start = Instant::now();
        let out = engine.prefill_rotated(&partition, &rotated, schedule)?;
        samples.push(start.elapsed());
        std::hint::black_box(out);
    }
    Ok((median(samples), partition.num_blocks()))
}

fn methods(config: &RunConfig) -> Vec<(String, MethodConfig)> {
    match &config.sweep {
        None => vec![("none".to_string(), config.method.clone())],
        Some((axis, values)) => values
            .iter()
            .map(|&v| {
                let mut m = config.method.clone();
                let label = match axis {
                    SweepAxis::BlockFrames => {
                        m.block_frames = v;
                        format!("block_frames={v}")
                    }
                    SweepAxis::SinkFrames => {
                        m.sink_frames = v;
                        format!("sink_frames={v}")
                    }
                };
                (label, m)
            })
            .collect(),
    }
}

fn bench_typed<T: Real>(config: &RunConfig) -> Result<Vec<BenchRow>, CliError> {
    let layout = &config.layout;
    let states = generate_states::<T>(config.seed, layout.total_len(), config.heads.hidden(), config.layers);
    let full = Engine::new(config.heads, MethodConfig::preset(Preset::Full, 0, 0))?;
    let (full_time, _) = time_prefill(&full, config, &states, &Schedule::Serial)?;
    let schedule = if config.parallel {
        Schedule::Concurrent
    } else {
        Schedule::Serial
    };
    let mut rows = Vec::new();
    for (label, method) in methods(config) {
        let partition = method
            .partition_for(layout)
            .map_err(|e| CliError::Usage(format!("{label}: {e}")))?;
        let predicted = report_for_partition(&partition, config.heads.hidden() as u64)?.predicted_speedup;
        let engine = Engine::new(config.heads, method.clone())?;
        let (time, num_blocks) = time_prefill(&engine, config, &states, &schedule)?;
        if time < MIN_RELIABLE || full_time < MIN_RELIABLE {
            eprintln!("pevlm: warning: {label} timings below {MIN_RELIABLE:?}; speedups are at timer resolution");
        }
        rows.push(BenchRow {
            sweep: label,
            sink_frames: method.effective_sink_frames(),
            block_frames: method.block_frames,
            total_len: layout.total_len(),
            num_blocks,
            full_ms: full_time.as_secs_f64() * 1e3,
            method_ms: time.as_secs_f64() * 1e3,
            measured_speedup: full_time.as_secs_f64() / time.as_secs_f64().max(f64::MIN_POSITIVE),
            predicted_speedup: predicted,
        });
    }
    Ok(rows)
}

/// Times every configuration without writing anything.
pub fn run_bench(config: &RunConfig) -> Result<Vec<BenchRow>, CliError> {
    if config.float64 {
        bench_typed::<f64>(config)
    } else {
        bench_typed::<f32>(config)
    }
}

pub fn write_rows(rows: &[BenchRow], method: &str, out: &mut dyn Write) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "sweep",
        "method",
        "sink_frames",
        "block_frames",
        "total_len",
        "num_blocks",
        "full_ms",
        "method_ms",
        "measured_speedup",
        "predicted_speedup",
    ])?;
    for r in rows {
        w.write_record([
            r.sweep.clone(),
            method.to_string(),
            r.sink_frames.to_string(),
            r.block_frames.to_string(),
            r.total_len.to_string(),
            r.num_blocks.to_string(),
            format!("{:.4}", r.full_ms),
            format!("{:.4}", r.method_ms),
            format!("{:.4}", r.measured_speedup),
            format!("{:.4}", r.predicted_speedup),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_bench(config: &RunConfig, out: &mut dyn Write) -> Result<Vec<BenchRow>, CliError> {
    let rows = run_bench(config)?;
    write_rows(&rows, &config.method.name(), out)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Command, Settings};

    #[test]
    fn sweep_produces_one_row_per_value() {
        let config = RunConfig::resolve(
            Command::Bench,
            Settings {
                frames: Some(8),
                tokens_per_frame: Some(4),
                sweep: Some(SweepAxis::BlockFrames),
                values: Some(vec![1, 2, 6]),
                ..Settings::default()
            },
        )
        .unwrap();
        let rows = run_bench(&config).unwrap();
        assert_eq!(rows.iter().map(|r| r.num_blocks).collect::<Vec<_>>(), vec![6, 3, 1]);
        assert!(rows.iter().all(|r| r.predicted_speedup > 0.0 && r.full_ms >= 0.0));
        let mut buf = Vec::new();
        write_rows(&rows, "pevlm", &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }

    #[test]
    fn median_is_the_middle_sample() {
        let ms = Duration::from_millis;
        assert_eq!(median(vec![ms(5), ms(1), ms(3)]), ms(3));
    }
}
