//! `verify`: engine against the dense reference, cost formulas against mask
//! pair counts, and the position/numeric invariants.

use std::io::Write;

use pevlm::costmodel::{cost_mask, op_pevlm_expanded};
use pevlm::engine::reference::dense_prefill_with_mask;
use pevlm::layout::Causality;
use pevlm::positions::{apply_mrope3d, apply_rope, DEFAULT_ROPE_BASE};
use pevlm::{
    encode_mask, generate_states, op_from_mask, op_pevlm, stable_softmax, CostParams, Engine, FrameGrid,
    HeadLayout, MRopeSplit, MaskSpec, Matrix, MethodConfig, PositionMode, Preset, Qkv, Real, RopeScheme,
    Schedule, SequenceLayout, SinkMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::{CliError, RunConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// CSV with columns `check,status,detail`.
    pub fn write(&self, out: &mut dyn Write) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["check", "status", "detail"])?;
        for c in &self.checks {
            w.write_record([c.name, if c.passed { "pass" } else { "fail" }, c.detail.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One randomly drawn engine configuration.
#[derive(Debug, Clone)]
pub struct Case {
    pub layout: SequenceLayout,
    pub method: MethodConfig,
    pub heads: HeadLayout,
    pub layers: usize,
}

/// Draws case `index`. Presets cycle with the index; position mode and rotary
/// scheme alternate over longer periods so every combination appears within
/// 20 consecutive cases. Sequences stay at or below 512 tokens.
pub fn random_case(rng: &mut ChaCha8Rng, index: usize) -> Case {
    let preset = Preset::ALL[index % Preset::ALL.len()];
    let tokens_per_frame = [1, 2, 4, 6, 9][rng.random_range(0..5)];
    let grid = FrameGrid::infer(tokens_per_frame);
    let needs_sink = !matches!(preset, Preset::Full | Preset::BlockAttention);
    loop {
        let sys_len = rng.random_range(usize::from(needs_sink)..8);
        let num_frames = rng.random_range(1..=40);
        let question_len = rng.random_range(0..8);
        if sys_len + num_frames * tokens_per_frame + question_len > 512 {
            continue;
        }
        let sink_frames = rng.random_range(0..=num_frames.min(4));
        let block_frames = rng.random_range(1..=8);
        let mut method = MethodConfig::preset(preset, sink_frames, block_frames);
        if (index / 5) % 2 == 1 {
            method.position_mode = match method.position_mode {
                PositionMode::Sequential => PositionMode::ReusedPerBlock,
                PositionMode::ReusedPerBlock => PositionMode::Sequential,
            };
        }
        if (index / 10) % 2 == 1 {
            method.scheme = RopeScheme::MRope3D(grid);
        }
        if preset == Preset::Ape {
            method.temperature = rng.random_range(0.5..2.0);
        }
        let heads = HeadLayout::new(rng.random_range(1..=4), [6, 8, 12][rng.random_range(0..3)])
            .expect("nonzero head layout");
        let layout = SequenceLayout::build(sys_len, num_frames, tokens_per_frame, question_len)
            .expect("at least one frame token");
        return Case {
            layout,
            method,
            heads,
            layers: rng.random_range(1..=2),
        };
    }
}

/// Clears the first allowed key of the last row that has at least two.
pub fn flip_one_bit(mask: &mut MaskSpec) -> bool {
    for q in (0..mask.rows()).rev() {
        let allowed: Vec<usize> = (0..mask.cols()).filter(|&k| mask.allowed(q, k)).collect();
        if allowed.len() >= 2 {
            mask.set(q, allowed[0], false);
            return true;
        }
    }
    false
}

fn max_diff<T: Real>(a: &[Matrix<T>], b: &[Matrix<T>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

/// Largest engine-versus-reference difference over `cases` random cases.
pub fn oracle_equivalence<T: Real>(seed: u64, cases: usize, inject_fault: bool) -> Result<f64, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..cases {
        let case = random_case(&mut rng, i);
        let l = case.layout.total_len();
        let states = generate_states::<T>(seed.wrapping_add(i as u64), l, case.heads.hidden(), case.layers);
        let engine = Engine::new(case.heads, case.method.clone())?;
        let got = engine.prefill(&case.layout, &states, &Schedule::Serial)?;
        let mut mask = encode_mask(&got.partition, &case.method)?;
        if inject_fault {
            flip_one_bit(&mut mask);
        }
        let dense = dense_prefill_with_mask(case.heads, &case.method, &case.layout, &states, &mask)?;
        worst = worst.max(max_diff(&got.outputs, &dense));
    }
    Ok(worst)
}

/// PEVLM with a single context block and sequential positions against the
/// Full preset.
pub fn degenerate_collapse<T: Real>(seed: u64, cases: usize) -> Result<f64, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC011_A95E);
    let mut worst = 0.0f64;
    for i in 0..cases {
        let frames = rng.random_range(1..=24);
        let layout = SequenceLayout::build(
            rng.random_range(1..6),
            frames,
            rng.random_range(1..=8),
            rng.random_range(0..6),
        )?;
        let sink_frames = rng.random_range(0..frames);
        let heads = HeadLayout::new(rng.random_range(1..=4), 8)?;
        let pevlm = MethodConfig::preset(Preset::Pevlm, sink_frames, frames - sink_frames);
        let full = MethodConfig::preset(Preset::Full, 0, 0);
        let states = generate_states::<T>(seed.wrapping_add(1000 + i as u64), layout.total_len(), heads.hidden(), 1);
        let a = Engine::new(heads, pevlm)?.prefill(&layout, &states, &Schedule::Serial)?;
        if a.partition.num_blocks() != 1 {
            return Err(CliError::Verification("collapse case drew more than one block".into()));
        }
        let b = Engine::new(heads, full)?.prefill(&layout, &states, &Schedule::Serial)?;
        worst = worst.max(max_diff(&a.outputs, &b.outputs));
    }
    Ok(worst)
}

/// Formula against mask pair count, and part sum against the expanded form,
/// for every `S, B, Q` in `0..=max_tokens` and `N` in `0..=max_blocks`.
/// Returns (configurations checked, mismatches).
pub fn cost_exactness(max_tokens: u64, max_blocks: u64, hiddens: &[u64]) -> Result<(u64, u64), CliError> {
    let results: Vec<Result<(u64, u64), CliError>> = (0..=max_tokens)
        .into_par_iter()
        .map(|s| {
            let (mut checked, mut bad) = (0u64, 0u64);
            for b in 0..=max_tokens {
                for q in 0..=max_tokens {
                    for n in 0..=max_blocks {
                        let params = CostParams::new(s, b, n, q, 1)?;
                        let mask = cost_mask(&params)?;
                        for &h in hiddens {
                            let p = CostParams::new(s, b, n, q, h)?;
                            let report = op_pevlm(&p)?;
                            let parts = report.op_sink + report.op_blocks + report.op_question;
                            checked += 1;
                            if report.op_pevlm != op_from_mask(&mask, h)? || parts != op_pevlm_expanded(&p)? {
                                bad += 1;
                            }
                        }
                    }
                }
            }
            Ok((checked, bad))
        })
        .collect();
    results
        .into_iter()
        .try_fold((0, 0), |(c, b), r| r.map(|(c2, b2)| (c + c2, b + b2)))
}

/// Mask nesting in full causal attention and exact question rows, plus the
/// non-causal cost mask matching the formula, over random cases.
pub fn mask_structure(seed: u64, cases: usize) -> Result<usize, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3A5C);
    let mut violations = 0;
    for i in 0..cases {
        let case = random_case(&mut rng, i);
        let p = case.method.partition_for(&case.layout)?;
        let mask = encode_mask(&p, &case.method)?;
        let causal = MaskSpec::causal(case.layout.total_len());
        if !mask.is_subset_of(&causal) || mask.first_unattended_row().is_some() {
            violations += 1;
        }
        if p.question.range().any(|q| mask.row(q) != causal.row(q)) {
            violations += 1;
        }
        let noncausal = pevlm::layout::encode_mask_with(&p, case.method.sink_mode, Causality::NonCausal)?;
        if !mask.is_subset_of(&noncausal) {
            violations += 1;
        }
    }
    Ok(violations)
}

/// (max |K_0 - K_1| under reuse, min over cases of max |K_0 - K_1| under
/// sequential positions) for two context blocks with identical content.
pub fn position_reuse<T: Real>(seed: u64) -> Result<(f64, f64), CliError> {
    let layout = SequenceLayout::build(4, 12, 4, 3)?;
    let heads = HeadLayout::new(2, 8)?;
    let mut reused_worst = 0.0f64;
    let mut sequential_min = f64::INFINITY;
    for (i, scheme) in [RopeScheme::Rope1D, RopeScheme::MRope3D(FrameGrid { height: 2, width: 2 })]
        .into_iter()
        .enumerate()
    {
        for mode in [PositionMode::ReusedPerBlock, PositionMode::Sequential] {
            let method = MethodConfig::preset(Preset::Pevlm, 2, 5)
                .with_scheme(scheme)
                .with_position_mode(mode);
            let p = method.partition_for(&layout)?;
            let (b0, b1) = (p.context_blocks[0], p.context_blocks[1]);
            let mut states = generate_states::<T>(seed.wrapping_add(i as u64), layout.total_len(), heads.hidden(), 1);
            states[0].copy_rows(b0, b1);
            let pre = Engine::new(heads, method)?.prefill(&layout, &states, &Schedule::Serial)?;
            let k = &pre.cache.layer(0).k;
            let (k0, k1) = (k.slice_rows(b0.range()), k.slice_rows(b1.range()));
            match mode {
                PositionMode::ReusedPerBlock => {
                    let d = if k0.bitwise_eq(&k1) { 0.0 } else { k0.max_abs_diff(&k1).max(f64::MIN_POSITIVE) };
                    reused_worst = reused_worst.max(d);
                }
                PositionMode::Sequential => sequential_min = sequential_min.min(k0.max_abs_diff(&k1)),
            }
        }
    }
    Ok((reused_worst, sequential_min))
}

/// (worst pair-norm drift, worst relative-position identity error over
/// `triples` random triples).
pub fn rope_numerics<T: Real>(seed: u64, triples: usize) -> Result<(f64, f64), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0509);
    let d = 16;
    let split = MRopeSplit::default_for(d)?;
    let mut norm_drift = 0.0f64;
    let mut identity_err = 0.0f64;
    let random_row = |rng: &mut ChaCha8Rng| -> Matrix<T> {
        Matrix::from_fn(1, d, |_, _| T::from_f64_lossy(rng.random_range(-1.0..1.0)))
    };
    let norms = |m: &Matrix<T>| -> Vec<f64> {
        m.data()
            .chunks_exact(2)
            .map(|p| (p[0].as_f64().powi(2) + p[1].as_f64().powi(2)).sqrt())
            .collect()
    };
    let dot = |a: &Matrix<T>, b: &Matrix<T>| -> f64 { a.row(0).iter().zip(b.row(0)).map(|(x, y)| x.as_f64() * y.as_f64()).sum() };
    for _ in 0..triples {
        let (q, k) = (random_row(&mut rng), random_row(&mut rng));
        let (p1, p2, c) = (
            rng.random_range(0..4096usize),
            rng.random_range(0..4096usize),
            rng.random_range(0..4096usize),
        );
        let rq = apply_rope(&q, &[p1], d, DEFAULT_ROPE_BASE)?;
        let rk = apply_rope(&k, &[p2], d, DEFAULT_ROPE_BASE)?;
        let sq = apply_rope(&q, &[p1 + c], d, DEFAULT_ROPE_BASE)?;
        let sk = apply_rope(&k, &[p2 + c], d, DEFAULT_ROPE_BASE)?;
        identity_err = identity_err.max((dot(&rq, &rk) - dot(&sq, &sk)).abs());

        let m3 = apply_mrope3d(&q, &[[p1, p2 % 32, c % 32]], d, split, DEFAULT_ROPE_BASE)?;
        let base = norms(&q);
        for rotated in [&rq, &m3] {
            for (a, b) in base.iter().zip(norms(rotated)) {
                norm_drift = norm_drift.max((a - b).abs());
            }
        }
    }
    Ok((norm_drift, identity_err))
}

/// Worst |sum - 1| over random softmax rows and temperatures.
pub fn softmax_normalization<T: Real>(seed: u64, rows: usize) -> Result<f64, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x50F7);
    let mut worst = 0.0f64;
    for _ in 0..rows {
        let n = rng.random_range(1..256);
        let scale = rng.random_range(0.1..50.0);
        let logits: Vec<T> = (0..n).map(|_| T::from_f64_lossy(rng.random_range(-scale..scale))).collect();
        let t = T::from_f64_lossy(rng.random_range(0.05..10.0));
        let sum: f64 = stable_softmax(&logits, t)?.iter().map(|x| x.as_f64()).sum();
        worst = worst.max((sum - 1.0).abs());
    }
    Ok(worst)
}

/// APE at temperature 1 against the hand-built shared-prefix, reused-position
/// configuration. True when outputs and caches are bitwise identical.
pub fn ape_identity<T: Real>(seed: u64, cases: usize) -> Result<bool, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA9E);
    for i in 0..cases {
        let layout = SequenceLayout::build(
            rng.random_range(1..6),
            rng.random_range(1..30),
            rng.random_range(1..6),
            rng.random_range(0..6),
        )?;
        let block_frames = rng.random_range(1..6);
        let heads = HeadLayout::new(2, 8)?;
        let ape = MethodConfig::preset(Preset::Ape, 0, block_frames).with_temperature(1.0);
        let plain = MethodConfig {
            preset: None,
            sink_frames: 0,
            block_frames,
            block_tokens: None,
            position_mode: PositionMode::ReusedPerBlock,
            scheme: RopeScheme::Rope1D,
            temperature: 1.0,
            sink_mode: SinkMode::SysOnly,
            rope_base: DEFAULT_ROPE_BASE,
            mrope_split: None,
        };
        let states = generate_states::<T>(seed.wrapping_add(i as u64), layout.total_len(), heads.hidden(), 1);
        let a = Engine::new(heads, ape)?.prefill(&layout, &states, &Schedule::Serial)?;
        let b = Engine::new(heads, plain)?.prefill(&layout, &states, &Schedule::Serial)?;
        let same = a.outputs.iter().zip(&b.outputs).all(|(x, y)| x.bitwise_eq(y)) && a.cache.bitwise_eq(&b.cache);
        if !same {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Serial, pooled, staggered-thread and permuted block encoding produce
/// bitwise-identical blocks. Returns the number of disagreeing cases.
pub fn schedule_determinism<T: Real>(seed: u64, cases: usize) -> Result<usize, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5C4E);
    let mut bad = 0;
    for i in 0..cases {
        let case = random_case(&mut rng, i);
        let l = case.layout.total_len();
        let states = generate_states::<T>(seed.wrapping_add(i as u64), l, case.heads.hidden(), case.layers);
        let engine = Engine::new(case.heads, case.method.clone())?;
        let (partition, _, rotated) = engine.rotate_states(&case.layout, &states)?;
        let slice = |s: pevlm::Span| -> Vec<Qkv<T>> { rotated.iter().map(|r| r.slice(s)).collect() };
        let sink = engine.encode_sink(&slice(partition.sink), 0)?;
        let blocks: Vec<_> = partition.context_blocks.iter().map(|&b| slice(b)).collect();
        let serial = engine.encode_all_blocks(&blocks, &sink.kv, &partition, &Schedule::Serial)?;
        let mut order: Vec<usize> = (0..blocks.len()).collect();
        for j in (1..order.len()).rev() {
            order.swap(j, rng.random_range(0..=j));
        }
        for schedule in [Schedule::Concurrent, Schedule::Staggered, Schedule::Permuted(order)] {
            let other = engine.encode_all_blocks(&blocks, &sink.kv, &partition, &schedule)?;
            if !serial.iter().zip(&other).all(|(a, b)| a.bitwise_eq(b)) || other.len() != serial.len() {
                bad += 1;
            }
        }
    }
    Ok(bad)
}

fn run_suite<T: Real>(config: &RunConfig) -> Result<VerifyReport, CliError> {
    let seed = config.seed;
    let tol = if config.float64 { 1e-10 } else { 1e-5 };
    let mut checks = Vec::new();

    let d = oracle_equivalence::<T>(seed, config.cases, config.inject_fault)?;
    checks.push(CheckResult::new(
        "oracle_equivalence",
        d <= tol,
        format!("max abs diff {d:.3e} over {} cases (tol {tol:.0e})", config.cases),
    ));

    let d = degenerate_collapse::<T>(seed, 20)?;
    checks.push(CheckResult::new(
        "degenerate_collapse",
        d <= tol,
        format!("max abs diff {d:.3e} over 20 cases (tol {tol:.0e})"),
    ));

    let (checked, bad) = cost_exactness(32, 8, &[1, 8])?;
    checks.push(CheckResult::new(
        "cost_exactness",
        bad == 0,
        format!("{bad} mismatches over {checked} configurations"),
    ));

    let v = mask_structure(seed, 100)?;
    checks.push(CheckResult::new("mask_structure", v == 0, format!("{v} violations over 100 cases")));

    let (reused, sequential) = position_reuse::<T>(seed)?;
    checks.push(CheckResult::new(
        "position_reuse",
        reused == 0.0 && sequential > 1e-3,
        format!("reused max diff {reused:.3e}, sequential min diff {sequential:.3e}"),
    ));

    let (norm, identity) = rope_numerics::<T>(seed, 1000)?;
    checks.push(CheckResult::new(
        "rope_numerics",
        norm <= 1e-6 && identity <= 1e-5,
        format!("pair norm drift {norm:.3e}, relative identity error {identity:.3e}"),
    ));

    let s = softmax_normalization::<T>(seed, 1000)?;
    checks.push(CheckResult::new("softmax_normalization", s <= 1e-6, format!("max |sum - 1| {s:.3e}")));

    let same = ape_identity::<T>(seed, 20)?;
    checks.push(CheckResult::new(
        "ape_identity",
        same,
        if same { "bitwise identical" } else { "outputs differ" },
    ));

    let bad = schedule_determinism::<T>(seed, 20)?;
    checks.push(CheckResult::new(
        "schedule_determinism",
        bad == 0,
        format!("{bad} disagreeing schedules over 20 cases"),
    ));

    Ok(VerifyReport { checks })
}

pub fn cmd_verify(config: &RunConfig) -> Result<VerifyReport, CliError> {
    if config.float64 {
        run_suite::<f64>(config)
    } else {
        run_suite::<f32>(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_cases_cover_the_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cases: Vec<Case> = (0..20).map(|i| random_case(&mut rng, i)).collect();
        for preset in Preset::ALL {
            for mode in [PositionMode::Sequential, PositionMode::ReusedPerBlock] {
                for mrope in [false, true] {
                    assert!(
                        cases.iter().any(|c| c.method.preset == Some(preset)
                            && c.method.position_mode == mode
                            && matches!(c.method.scheme, RopeScheme::MRope3D(_)) == mrope),
                        "{preset} {mode} mrope={mrope}"
                    );
                }
            }
        }
        assert!(cases.iter().all(|c| c.layout.total_len() <= 512 && c.heads.num_heads() <= 4));
    }

    #[test]
    fn fault_flip_changes_a_row() {
        let mut m = MaskSpec::causal(4);
        assert!(flip_one_bit(&mut m));
        assert!(!m.allowed(3, 0));
        let mut tiny = MaskSpec::causal(1);
        assert!(!flip_one_bit(&mut tiny));
    }

    #[test]
    fn injected_fault_breaks_equivalence() {
        let clean = oracle_equivalence::<f32>(3, 10, false).unwrap();
        let faulty = oracle_equivalence::<f32>(3, 10, true).unwrap();
        assert!(clean <= 1e-5);
        assert!(faulty > 1e-5);
    }

    #[test]
    fn small_cost_sweep_is_exact() {
        assert_eq!(cost_exactness(6, 3, &[1, 8]).unwrap(), (7 * 7 * 7 * 4 * 2, 0));
    }
}
