//! Evaluation: validation perplexity, unigram entropy of samples, and a self-contained
//! invariant suite that exercises every module at random small shapes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::corpus::{detokenize, make_batches, tokenize, CorpusSplit};
use crate::error::{ArmdError, Result};
use crate::masks::{build_masks, MaskPair};
use crate::model::{
    forward, forward_layout, forward_on_tape, forward_streams, parameter_count, ModelConfig,
    ModelParams, Params, QueryMode,
};
use crate::numkernel::ops::{log_softmax_f64, rope_rotate};
use crate::numkernel::{grad_check_subset, Tape, Tensor, Var};
use crate::objective::{
    diffusion_loss, diffusion_loss_on_tape, elbo_sequential_oracle, order_nll, LossWeights,
    NetworkModel,
};
use crate::sampler::{
    generate_full_recompute, generate_sequential, generate_strided, generate_with_plan,
    GenerationPlan,
};
use crate::schedule::{
    apply_partial_shuffle, make_plan_from_tau, progressive_perm_count, sample_masking_order,
    strided_permutation, BlockPlan, CurriculumState, SequenceLayout,
};
use crate::trainer::{train, AdamW, TrainConfig};

/// Summary written by the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean per-token negative log-likelihood on validation windows, in nats.
    pub validation_nll: f64,
    pub perplexity: f64,
    pub validation_windows: usize,
    /// Mean unigram entropy of generated samples, when samples were drawn.
    pub mean_unigram_entropy: Option<f64>,
    pub model_calls: Option<usize>,
    pub seconds_per_sequence: Option<f64>,
}

impl EvalReport {
    pub fn from_nll(validation_nll: f64, validation_windows: usize) -> Self {
        Self {
            validation_nll,
            perplexity: validation_nll.exp(),
            validation_windows,
            mean_unigram_entropy: None,
            model_calls: None,
            seconds_per_sequence: None,
        }
    }
}

/// Mean next-token NLL over `windows` under the left-to-right plan, evaluated at 64 bits.
pub fn mean_nll(params: &ModelParams, cfg: &ModelConfig, windows: &[&[usize]]) -> Result<f64> {
    if windows.is_empty() {
        return Err(ArmdError::Validation("no windows to evaluate".into()));
    }
    let p64 = params.cast::<f64>(cfg);
    let mut total = 0.0;
    let mut plans: HashMap<usize, BlockPlan> = HashMap::new();
    for w in windows {
        let plan = match plans.get(&w.len()) {
            Some(p) => p,
            None => plans
                .entry(w.len())
                .or_insert(BlockPlan::identity(w.len())?),
        };
        let logits = forward(&p64, cfg, w, plan)?;
        total += diffusion_loss(&logits, w, plan, &LossWeights::uniform(w.len()))?;
    }
    Ok(total / windows.len() as f64)
}

/// Validation NLL and perplexity `exp(NLL)`.
pub fn eval_perplexity(
    params: &ModelParams,
    cfg: &ModelConfig,
    split: &CorpusSplit,
) -> Result<(f64, f64)> {
    let windows = split.validation_windows();
    if windows.is_empty() {
        return Err(ArmdError::Validation("validation split is empty".into()));
    }
    let nll = mean_nll(params, cfg, &windows)?;
    Ok((nll, nll.exp()))
}

/// Shannon entropy (nats) of the token frequencies within one sequence.
pub fn unigram_entropy(tokens: &[usize]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(ArmdError::Validation("entropy of an empty sequence".into()));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let n = tokens.len() as f64;
    Ok(-counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>())
}

/// Average of [`unigram_entropy`] across sequences.
pub fn mean_unigram_entropy(sequences: &[Vec<usize>]) -> Result<f64> {
    if sequences.is_empty() {
        return Err(ArmdError::Validation("no sequences".into()));
    }
    let mut total = 0.0;
    for s in sequences {
        total += unigram_entropy(s)?;
    }
    Ok(total / sequences.len() as f64)
}

/// Seconds elapsed while running `f`, with its result.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

/// One row of the invariant table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantResult {
    pub module: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantReport {
    pub seed: u64,
    pub results: Vec<InvariantResult>,
}

impl InvariantReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&InvariantResult> {
        self.results.iter().filter(|r| !r.passed).collect()
    }
}

/// Fault injection for demonstrating that the suite catches broken code.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SuiteOptions {
    /// Opens one same-block entry of the strict mask in the leak checks.
    pub corrupt_strict_mask: bool,
}

#[derive(Debug)]
struct Fail(String);

impl From<ArmdError> for Fail {
    fn from(e: ArmdError) -> Self {
        Fail(format!("error: {e}"))
    }
}

type Outcome = std::result::Result<String, Fail>;
type Check = fn(&mut ChaCha8Rng, &SuiteOptions) -> Outcome;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(Fail(format!($($fmt)+)));
        }
    };
}

/// Every invariant checked by [`run_invariant_suite`], in report order.
pub const INVARIANTS: &[(&str, &str)] = &[
    ("numkernel", "gradients_match_finite_differences"),
    ("numkernel", "masked_softmax_rows_sum_to_one_or_zero"),
    ("numkernel", "rope_preserves_pair_norms"),
    ("numkernel", "kernels_are_deterministic"),
    ("schedule", "plan_structure"),
    ("schedule", "strided_groups_maximize_min_distance"),
    ("schedule", "plan_from_tau_is_deterministic"),
    ("masks", "strict_is_causal_minus_diagonal_blocks"),
    ("masks", "identity_plan_gives_triangular_masks"),
    ("masks", "mask_construction_is_deterministic"),
    ("model", "strict_causality"),
    ("model", "causal_stream_causality"),
    ("model", "condition_set_permutation_equivariance"),
    ("model", "full_model_gradients"),
    ("model", "two_stream_parameter_overhead"),
    ("objective", "single_pass_matches_multi_pass"),
    ("objective", "within_block_target_invariance"),
    ("objective", "each_target_scored_once"),
    ("sampler", "strided_one_stream_is_sequential"),
    ("sampler", "kv_cache_matches_recompute"),
    ("sampler", "sampling_runs_at_64_bits"),
    ("sampler", "parallel_group_draw_factorizes"),
    ("trainer", "runs_are_bit_reproducible"),
    ("trainer", "curriculum_trace"),
    ("trainer", "weight_decay_is_decoupled"),
    ("corpus", "tokenization_round_trip"),
    ("corpus", "batches_deterministic_and_cover_epoch"),
    ("evalcli", "unigram_entropy_invariances"),
    ("evalcli", "perplexity_matches_next_token_oracle"),
];

const CHECKS: &[Check] = &[
    check_gradients,
    check_softmax_rows,
    check_rope_norms,
    check_kernel_determinism,
    check_plan_structure,
    check_strided_distance,
    check_tau_determinism,
    check_strict_identity,
    check_identity_masks,
    check_mask_determinism,
    check_strict_causality,
    check_causal_stream,
    check_equivariance,
    check_model_gradients,
    check_parameter_overhead,
    check_single_pass,
    check_within_block,
    check_scored_once,
    check_strided_one,
    check_kv_cache,
    check_sampling_precision,
    check_factorized_draw,
    check_reproducible_training,
    check_curriculum,
    check_weight_decay,
    check_tokenization,
    check_batches,
    check_entropy_invariance,
    check_perplexity_oracle,
];

/// Runs every invariant at random small shapes derived from `seed`.
pub fn run_invariant_suite(seed: u64) -> InvariantReport {
    run_invariant_suite_with(seed, &SuiteOptions::default())
}

pub fn run_invariant_suite_with(seed: u64, options: &SuiteOptions) -> InvariantReport {
    let results = INVARIANTS
        .iter()
        .zip(CHECKS)
        .enumerate()
        .map(|(i, (&(module, name), check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)),
            );
            let (passed, detail) = match check(&mut rng, options) {
                Ok(d) => (true, d),
                Err(Fail(d)) => (false, d),
            };
            InvariantResult {
                module,
                name,
                passed,
                detail,
            }
        })
        .collect();
    InvariantReport { seed, results }
}

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let layers = rng.gen_range(1..=3);
    ModelConfig {
        vocab: rng.gen_range(5..=12),
        d: if rng.gen_bool(0.5) { 8 } else { 16 },
        heads: 2,
        layers,
        two_stream_layers: rng.gen_range(0..=layers),
        pe_dim: 4,
        ffn_mult: 2,
        dropout: 0.0,
        query_mode: QueryMode::TwoStream,
    }
}

/// Weights drawn from N(0, scale^2) everywhere, so every path carries signal.
fn random_params(
    cfg: &ModelConfig,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Params<Tensor<f64>>> {
    let normal = Normal::new(0.0, scale).expect("valid scale");
    Params::build(cfg, |_, shape| {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| normal.sample(&mut *rng)).collect(),
        )
    })
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape")
}

/// A plan with random timesteps, so blocks of any size occur.
fn random_plan(n: usize, rng: &mut ChaCha8Rng) -> Result<BlockPlan> {
    let t = rng.gen_range(1..=n);
    let tau: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=t)).collect();
    make_plan_from_tau(&tau, t)
}

fn random_tokens(n: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Opens one entry of the strict mask inside a diagonal block.
fn corrupt(masks: &mut MaskPair, blocks: &[usize]) {
    let n = blocks.len();
    let (r, c) = (0..n)
        .flat_map(|r| (0..n).map(move |c| (r, c)))
        .find(|&(r, c)| r != c && blocks[r] == blocks[c])
        .unwrap_or((n - 1, n - 1));
    masks.strict.set(r, c, true);
}

fn check_gradients(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let n = rng.gen_range(2..=4);
        let (d, vocab) = (4, 5);
        let ids = random_tokens(n, vocab, rng);
        let targets = random_tokens(n, vocab, rng);
        let positions: Vec<usize> = (0..n).map(|_| rng.gen_range(0..16)).collect();
        let allowed: Vec<bool> = (0..n * n)
            .map(|i| i % (n + 1) == 0 || rng.gen_bool(0.5))
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let inputs = vec![
            random_tensor(&[n, d], rng),
            random_tensor(&[d, d], rng),
            random_tensor(&[d], rng),
            random_tensor(&[d], rng),
            random_tensor(&[vocab, d], rng),
            random_tensor(&[d], rng),
            random_tensor(&[d, vocab], rng),
        ];
        let report = grad_check_subset(
            |t: &mut Tape<f64>, v: &[Var]| {
                let e = t.embedding(v[4], &ids)?;
                let h = t.add(v[0], e)?;
                let h = t.layer_norm(h, v[2], v[3])?;
                let h = t.matmul(h, v[1])?;
                let h = t.add_row(h, v[3])?;
                let h = t.gelu(h);
                let h = t.rope(h, &positions, 2)?;
                let a = t.attention(h, h, h, &allowed, 2, None)?;
                let s = t.shift_rows(a, v[5])?;
                let m = t.mul(s, h)?;
                let m = t.scale(m, 0.7);
                let sc = t.matmul_nt(m, h)?;
                let sm = t.masked_softmax(sc, &allowed)?;
                let mixed = t.matmul(sm, m)?;
                let logits = t.matmul(mixed, v[6])?;
                let ce = t.cross_entropy(logits, &targets, &weights)?;
                let sq = t.mul(sm, sm)?;
                let reg = t.sum(sq);
                t.add(ce, reg)
            },
            &inputs,
            usize::MAX,
        )?;
        worst = worst.max(report.max_rel_error);
    }
    ensure!(worst < 1e-4, "max relative error {worst:.3e}");
    Ok(format!("max relative error {worst:.2e}"))
}

fn check_softmax_rows(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let (rows, cols) = (rng.gen_range(2..8), rng.gen_range(1..8));
    let x = random_tensor(&[rows, cols], rng).map(|v| v * 30.0);
    let mut allowed: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.6)).collect();
    allowed[..cols].iter_mut().for_each(|a| *a = false);
    let y = crate::numkernel::ops::masked_softmax(&x, &allowed)?;
    for r in 0..rows {
        let any = allowed[r * cols..(r + 1) * cols].iter().any(|&a| a);
        let sum: f64 = y.row(r).iter().sum();
        let expect = if any { 1.0 } else { 0.0 };
        ensure!((sum - expect).abs() < 1e-12, "row {r} sums to {sum}");
        for c in 0..cols {
            ensure!(
                allowed[r * cols + c] || y.row(r)[c] == 0.0,
                "masked entry ({r},{c}) is nonzero"
            );
        }
    }
    Ok(format!("{rows}x{cols}"))
}

fn check_rope_norms(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let (n, head_dim, heads) = (
        rng.gen_range(1..10),
        2 * rng.gen_range(1..5),
        rng.gen_range(1..4),
    );
    let d = head_dim * heads;
    let x = random_tensor(&[n, d], rng);
    let positions: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4096)).collect();
    let y = rope_rotate(&x, &positions, head_dim)?;
    for r in 0..n {
        for (a, b) in x.row(r).chunks(2).zip(y.row(r).chunks(2)) {
            let (na, nb) = (a[0].hypot(a[1]), b[0].hypot(b[1]));
            ensure!((na - nb).abs() < 1e-10, "pair norm {na} became {nb}");
        }
    }
    Ok(format!("{n}x{d}, head width {head_dim}"))
}

fn check_kernel_determinism(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let cfg = random_config(rng);
    let params = random_params(&cfg, 0.5, rng)?;
    let n = rng.gen_range(2..10);
    let plan = random_plan(n, rng)?;
    let tokens = random_tokens(n, cfg.vocab, rng);
    let a = forward(&params, &cfg, &tokens, &plan)?;
    let b = forward(&params, &cfg, &tokens, &plan)?;
    let same = a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    ensure!(same, "two identical forward passes differ");
    Ok(format!("n={n}"))
}

fn check_plan_structure(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    for _ in 0..50 {
        let n = rng.gen_range(1..=64);
        let plan = match rng.gen_range(0..3) {
            0 => random_plan(n, rng)?,
            1 => sample_masking_order(n, rng)?,
            _ => {
                let k = rng.gen_range(0..=n);
                apply_partial_shuffle(&BlockPlan::identity(n)?, k, rng)?
            }
        };
        plan.validate()?;
        let (pi, tau, blocks) = (plan.pi(), plan.tau(), plan.block_of());
        let mut seen = vec![false; n];
        for &j in pi {
            ensure!(!seen[j], "position {j} appears twice in the permutation");
            seen[j] = true;
        }
        for p in 1..n {
            let (a, b) = (tau[pi[p - 1]], tau[pi[p]]);
            ensure!(
                a > b || (a == b && pi[p - 1] < pi[p]),
                "sort broken at slot {p}"
            );
            ensure!(
                blocks[p - 1] <= blocks[p],
                "block index decreases at slot {p}"
            );
            ensure!(
                (a == b) == (blocks[p - 1] == blocks[p]),
                "block boundary disagrees with tau at {p}"
            );
        }
        ensure!(
            blocks.first() == Some(&1) || n == 0,
            "first block is {:?}",
            blocks.first()
        );
        ensure!(
            blocks.last() == Some(&plan.t_blocks()),
            "last block is not T"
        );
        if plan.block_sizes().iter().all(|&s| s > 0)
            && plan.t_blocks() == tau.iter().max().copied().unwrap_or(0)
        {
            for p in 0..n {
                ensure!(
                    blocks[p] == plan.t_blocks() - tau[pi[p]] + 1,
                    "B != T - tau + 1 at slot {p}"
                );
            }
        }
    }
    Ok("50 plans".into())
}

fn partition_feasible(n: usize, s: usize, min_gap: usize) -> bool {
    fn fill(free: &mut [bool], s: usize, min_gap: usize) -> bool {
        let Some(first) = free.iter().position(|&f| f) else {
            return true;
        };
        free[first] = false;
        let ok = extend(free, &mut vec![first], s, min_gap, first + 1);
        free[first] = true;
        ok
    }
    fn extend(
        free: &mut [bool],
        group: &mut Vec<usize>,
        s: usize,
        min_gap: usize,
        from: usize,
    ) -> bool {
        if group.len() == s {
            return fill(free, s, min_gap);
        }
        for c in from..free.len() {
            if free[c] && group.iter().all(|&g| c - g >= min_gap) {
                free[c] = false;
                group.push(c);
                let ok = extend(free, group, s, min_gap, c + 1);
                group.pop();
                free[c] = true;
                if ok {
                    return true;
                }
            }
        }
        false
    }
    fill(&mut vec![true; n], s, min_gap)
}

fn check_strided_distance(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let cases: Vec<(usize, usize)> = (2..=16usize)
        .flat_map(|n| (2..n).filter(move |s| n % s == 0).map(move |s| (n, s)))
        .collect();
    let &(n, s) = cases.choose(rng).expect("cases");
    let plan = strided_permutation(n, s)?;
    let len = n / s;
    let mut min_gap = usize::MAX;
    for group in plan.groups().iter().filter(|g| g.len() > 1) {
        let mut pos: Vec<usize> = group.iter().map(|&p| plan.pi()[p]).collect();
        pos.sort_unstable();
        for w in pos.windows(2) {
            min_gap = min_gap.min(w[1] - w[0]);
        }
    }
    ensure!(
        min_gap == len || len == 1,
        "n={n} s={s}: min distance {min_gap}, expected {len}"
    );
    ensure!(
        !partition_feasible(n, s, len + 1),
        "n={n} s={s}: a wider partition exists"
    );
    Ok(format!("n={n} s={s}"))
}

fn check_tau_determinism(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let n = rng.gen_range(1..40);
    let t = rng.gen_range(1..=n);
    let tau: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=t)).collect();
    ensure!(
        make_plan_from_tau(&tau, t)? == make_plan_from_tau(&tau, t)?,
        "plans differ"
    );
    Ok(format!("n={n}"))
}

fn check_strict_identity(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    for _ in 0..20 {
        let plan = random_plan(rng.gen_range(1..30), rng)?;
        let masks = build_masks(&plan);
        let b = plan.block_of();
        for r in 0..plan.n() {
            for c in 0..plan.n() {
                ensure!(masks.causal.get(r, c) == (b[c] <= b[r]), "causal ({r},{c})");
                let expect = masks.causal.get(r, c) && b[c] != b[r];
                ensure!(masks.strict.get(r, c) == expect, "strict ({r},{c})");
            }
        }
    }
    Ok("20 plans".into())
}

fn check_identity_masks(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let n = rng.gen_range(1..40);
    let masks = build_masks(&BlockPlan::identity(n)?);
    for r in 0..n {
        for c in 0..n {
            ensure!(masks.causal.get(r, c) == (c <= r), "causal ({r},{c})");
            ensure!(masks.strict.get(r, c) == (c < r), "strict ({r},{c})");
        }
    }
    Ok(format!("n={n}"))
}

fn check_mask_determinism(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let plan = random_plan(rng.gen_range(1..50), rng)?;
    let (a, b) = (build_masks(&plan), build_masks(&plan));
    ensure!(a == b, "mask builds differ");
    ensure!(
        a.causal.allowed().len() == plan.n() * plan.n(),
        "mask is not n x n"
    );
    Ok(format!("n={}", plan.n()))
}

fn check_strict_causality(rng: &mut ChaCha8Rng, options: &SuiteOptions) -> Outcome {
    let cases = 6;
    for case in 0..cases {
        let cfg = random_config(rng);
        let params = random_params(&cfg, 0.5, rng)?;
        let n = rng.gen_range(2..10);
        let plan = if case == 0 {
            BlockPlan::identity(n)?
        } else {
            random_plan(n, rng)?
        };
        let layout = plan.layout();
        let mut masks = build_masks(&plan);
        if options.corrupt_strict_mask {
            corrupt(&mut masks, &layout.blocks);
        }
        let tokens = random_tokens(n, cfg.vocab, rng);
        let base = forward_layout(&params, &cfg, &tokens, &layout, &masks)?;
        let b = &layout.blocks;
        for slot in 0..n {
            let mut moved = tokens.clone();
            moved[slot] = (moved[slot] + 1) % cfg.vocab;
            let out = forward_layout(&params, &cfg, &moved, &layout, &masks)?;
            for r in (0..n).filter(|&r| b[slot] >= b[r]) {
                ensure!(
                    base.row(r) == out.row(r),
                    "token in slot {slot} leaked into logits of slot {r}"
                );
            }
        }
        // autodiff: the gradient of one logit row reaches only earlier blocks
        let mut tape = Tape::new();
        let p = params.register(&cfg, &mut tape, true);
        let out = forward_on_tape(&mut tape, &p, &cfg, &tokens, &layout, &masks, &mut None)?;
        let r = rng.gen_range(0..n);
        let vocab_w: Vec<f64> = (0..n * cfg.vocab)
            .map(|i| {
                if i / cfg.vocab == r {
                    rng.gen_range(-1.0..1.0)
                } else {
                    0.0
                }
            })
            .collect();
        let w = tape.constant(Tensor::new(vec![n, cfg.vocab], vocab_w)?);
        let prod = tape.mul(out.logits, w)?;
        let probe = tape.sum(prod);
        let grads = tape.backward(probe)?;
        let ge = grads.get(out.embedded);
        for i in (0..n).filter(|&i| b[i] >= b[r]) {
            ensure!(
                ge.row(i).iter().all(|&g| g == 0.0),
                "nonzero Jacobian from slot {i} to logits of slot {r}"
            );
        }
    }
    Ok(format!("{cases} random models and plans"))
}

fn check_causal_stream(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    for _ in 0..4 {
        let mut cfg = random_config(rng);
        cfg.two_stream_layers = cfg.two_stream_layers.max(1);
        let params = random_params(&cfg, 0.5, rng)?;
        let n = rng.gen_range(2..10);
        let plan = random_plan(n, rng)?;
        let tokens = random_tokens(n, cfg.vocab, rng);
        let (base, _) = forward_streams(&params, &cfg, &tokens, &plan)?;
        let b = plan.block_of();
        for slot in 0..n {
            let mut moved = tokens.clone();
            moved[slot] = (moved[slot] + 1) % cfg.vocab;
            let (out, _) = forward_streams(&params, &cfg, &moved, &plan)?;
            for r in (0..n).filter(|&r| b[slot] > b[r]) {
                ensure!(
                    base.x.row(r) == out.x.row(r),
                    "slot {slot} reached causal stream row {r}"
                );
            }
        }
    }
    Ok("4 random models".into())
}

/// Reorders slots inside each listed block, carrying tokens and positions along.
fn shuffle_within_blocks(
    layout: &SequenceLayout,
    tokens: &[usize],
    which: &HashSet<usize>,
    rng: &mut ChaCha8Rng,
) -> (SequenceLayout, Vec<usize>, Vec<usize>) {
    let n = layout.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end < n && layout.blocks[end] == layout.blocks[start] {
            end += 1;
        }
        if which.contains(&layout.blocks[start]) {
            order[start..end].shuffle(rng);
        }
        start = end;
    }
    let new_tokens = order.iter().map(|&s| tokens[s]).collect();
    (layout.select(&order), new_tokens, order)
}

fn check_equivariance(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..6 {
        let cfg = random_config(rng);
        let params = random_params(&cfg, 0.5, rng)?;
        let n = rng.gen_range(3..12);
        let plan = random_plan(n, rng)?;
        let t = plan.t_blocks();
        if t < 2 {
            continue;
        }
        let cut = rng.gen_range(2..=t);
        let layout = plan.layout();
        let tokens = random_tokens(n, cfg.vocab, rng);
        let which: HashSet<usize> = (1..cut).collect();
        let (moved, moved_tokens, order) = shuffle_within_blocks(&layout, &tokens, &which, rng);
        let base = forward_layout(
            &params,
            &cfg,
            &tokens,
            &layout,
            &MaskPair::from_blocks(&layout.blocks),
        )?;
        let out = forward_layout(
            &params,
            &cfg,
            &moved_tokens,
            &moved,
            &MaskPair::from_blocks(&moved.blocks),
        )?;
        for (new_slot, &old_slot) in order.iter().enumerate() {
            if layout.blocks[old_slot] >= cut {
                for (a, b) in base.row(old_slot).iter().zip(out.row(new_slot)) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    ensure!(worst < 1e-8, "later-block logits moved by {worst:.3e}");
    Ok(format!("max change {worst:.2e}"))
}

fn check_model_gradients(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let layers = rng.gen_range(1..=2);
    let cfg = ModelConfig {
        vocab: 6,
        d: 8,
        heads: 2,
        layers,
        two_stream_layers: rng.gen_range(1..=layers),
        pe_dim: 4,
        ffn_mult: 2,
        dropout: 0.0,
        query_mode: QueryMode::TwoStream,
    };
    let params = random_params(&cfg, 0.3, rng)?;
    let n = rng.gen_range(3..=6);
    let plan = random_plan(n, rng)?;
    let tokens = random_tokens(n, cfg.vocab, rng);
    let weights = LossWeights::uniform(plan.t_blocks());
    let inputs: Vec<Tensor<f64>> = params.slots().into_iter().cloned().collect();
    let layout = plan.layout();
    let masks = build_masks(&plan);
    let report = grad_check_subset(
        |tape: &mut Tape<f64>, vars: &[Var]| {
            let mut it = vars.iter().copied();
            let p = Params::build(&cfg, |_, _| Ok(it.next().expect("one var per slot")))?;
            let out = forward_on_tape(tape, &p, &cfg, &tokens, &layout, &masks, &mut None)?;
            diffusion_loss_on_tape(tape, out.logits, &tokens, &plan, &weights)
        },
        &inputs,
        12,
    )?;
    ensure!(
        report.max_rel_error < 1e-4,
        "max relative error {:.3e}",
        report.max_rel_error
    );
    Ok(format!(
        "{} coordinates, max relative error {:.2e}",
        report.checked, report.max_rel_error
    ))
}

fn check_parameter_overhead(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let cfg = random_config(rng);
    let (d, v, h, pe, q) = (cfg.d, cfg.vocab, cfg.ffn_hidden(), cfg.pe_dim, cfg.d / 4);
    let ffn = 2 * d + d * h + h + h * d + d;
    let layer = 2 * d + 4 * d * d + ffn;
    let single_stream = v * d + cfg.layers * layer + 2 * d + d * v + v;
    let projector = pe * q + q + q * pe + pe;
    let expect = single_stream + cfg.two_stream_layers * ffn + projector;
    let got = parameter_count(&cfg);
    ensure!(got == expect, "{got} parameters, expected {expect}");
    Ok(format!(
        "{got} = {single_stream} + {} extra",
        got - single_stream
    ))
}

fn check_single_pass(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let cfg = random_config(rng);
        let params = random_params(&cfg, 0.5, rng)?;
        let n = rng.gen_range(1..=10);
        let plan = random_plan(n, rng)?;
        let processed = plan.to_processed(&random_tokens(n, cfg.vocab, rng));
        let t = plan.t_blocks();
        let gamma: Vec<f64> = (0..t).map(|_| rng.gen_range(0.1..1.0)).collect();
        let weights = LossWeights { gamma };
        let single = diffusion_loss(
            &forward(&params, &cfg, &processed, &plan)?,
            &processed,
            &plan,
            &weights,
        )?;
        let mut model = NetworkModel {
            params: &params,
            cfg: &cfg,
        };
        let multi = elbo_sequential_oracle(&mut model, &processed, &plan, &weights)?;
        worst = worst.max((single - multi).abs());
    }
    ensure!(worst < 1e-8, "single and multi pass differ by {worst:.3e}");
    Ok(format!("max difference {worst:.2e}"))
}

fn check_within_block(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let cfg = random_config(rng);
        let params = random_params(&cfg, 0.5, rng)?;
        let n = rng.gen_range(2..=10);
        let plan = random_plan(n, rng)?;
        let layout = plan.layout();
        let tokens = random_tokens(n, cfg.vocab, rng);
        let target = rng.gen_range(1..=plan.t_blocks());
        let (moved, moved_tokens, _) =
            shuffle_within_blocks(&layout, &tokens, &HashSet::from([target]), rng);
        let w = LossWeights::uniform(plan.t_blocks());
        let loss = |layout: &SequenceLayout, tokens: &[usize]| -> Result<f64> {
            let logits = forward_layout(
                &params,
                &cfg,
                tokens,
                layout,
                &MaskPair::from_blocks(&layout.blocks),
            )?;
            diffusion_loss(&logits, tokens, &plan, &w)
        };
        worst = worst.max((loss(&layout, &tokens)? - loss(&moved, &moved_tokens)?).abs());
    }
    ensure!(worst < 1e-8, "loss moved by {worst:.3e}");
    Ok(format!("max change {worst:.2e}"))
}

fn check_scored_once(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let n = rng.gen_range(1..=12);
    let vocab = rng.gen_range(2..8);
    let plan = random_plan(n, rng)?;
    let logits = random_tensor(&[n, vocab], rng);
    let tokens = random_tokens(n, vocab, rng);
    let gamma: Vec<f64> = (0..plan.t_blocks())
        .map(|_| rng.gen_range(0.1..1.0))
        .collect();
    let weights = LossWeights { gamma };
    let mut tape = Tape::new();
    let l = tape.param(logits.clone());
    let loss = diffusion_loss_on_tape(&mut tape, l, &tokens, &plan, &weights)?;
    let g = tape.backward(loss)?.get(l);
    for r in 0..n {
        let lp = log_softmax_f64(logits.row(r));
        let gamma = weights.gamma[plan.block_of()[r] - 1];
        for c in 0..vocab {
            let expect = gamma * (lp[c].exp() - if c == tokens[r] { 1.0 } else { 0.0 });
            ensure!(
                (g.row(r)[c] - expect).abs() < 1e-12,
                "row {r} col {c}: {} vs {expect}",
                g.row(r)[c]
            );
        }
    }
    Ok(format!("n={n}"))
}

fn check_strided_one(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let cfg = random_config(rng);
    let params = random_params(&cfg, 0.5, rng)?;
    let n = rng.gen_range(1..=16);
    let seed = rng.gen();
    let a = generate_strided(&params, &cfg, n, 1, 1.0, seed)?;
    let b = generate_sequential(&params, &cfg, n, 1.0, seed)?;
    ensure!(a.tokens == b.tokens, "{:?} vs {:?}", a.tokens, b.tokens);
    Ok(format!("n={n}"))
}

fn check_kv_cache(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let cfg = random_config(rng);
        let params = random_params(&cfg, 0.5, rng)?;
        let n = 4 * rng.gen_range(1..=8);
        let s = *[1, 2, 4].choose(rng).expect("choices");
        let gen = if rng.gen_bool(0.3) {
            GenerationPlan::from_plan(sample_masking_order(n, rng)?)
        } else {
            GenerationPlan::strided(n, s)?
        };
        let seed = rng.gen();
        let cached = generate_with_plan(
            &params,
            &cfg,
            &gen,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )?;
        let full = generate_full_recompute(&params, &cfg, &gen, 1.0, seed)?;
        ensure!(cached.tokens == full.tokens, "token streams diverged");
        for (a, b) in cached.logits.iter().zip(&full.logits) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    ensure!(worst < 1e-8, "cached logits differ by {worst:.3e}");
    Ok(format!("max difference {worst:.2e}"))
}

fn check_sampling_precision(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let cfg = random_config(rng);
    let params: ModelParams = random_params(&cfg, 0.5, rng)?.cast(&cfg);
    let n = rng.gen_range(2..=12);
    let out = generate_sequential(&params, &cfg, n, 1.0, rng.gen())?;
    for (pos, row) in out.logits.iter().enumerate() {
        let reference = log_softmax_f64(row);
        ensure!(
            reference[out.tokens[pos]].to_bits() == out.log_probs[pos].to_bits(),
            "log-probability at {pos} was not computed in double precision"
        );
        let single: Vec<f32> = row.iter().map(|&v| v as f32).collect();
        ensure!(
            single.iter().zip(row).all(|(&s, &d)| s as f64 == d),
            "logits at {pos} are not widened single values"
        );
    }
    Ok(format!("n={n} at 32-bit weights"))
}

fn check_factorized_draw(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let cfg = ModelConfig {
        vocab: 3,
        ..random_config(rng)
    };
    let params = random_params(&cfg, 0.6, rng)?;
    let gen = GenerationPlan::strided(4, 2)?;
    let group = gen.groups.last().expect("groups").clone();
    ensure!(
        group.len() == 2,
        "expected a two-token final group, got {group:?}"
    );
    let draws = 6000;
    let mut by_context: HashMap<Vec<usize>, Vec<(usize, usize)>> = HashMap::new();
    let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    for _ in 0..draws {
        let out = generate_with_plan(&params, &cfg, &gen, 1.0, &mut sample_rng)?;
        let context: Vec<usize> = (0..4)
            .filter(|p| !group.contains(p))
            .map(|p| out.tokens[p])
            .collect();
        by_context
            .entry(context)
            .or_default()
            .push((out.tokens[group[0]], out.tokens[group[1]]));
    }
    let (context, pairs) = by_context
        .into_iter()
        .max_by_key(|(c, v)| (v.len(), c.clone()))
        .expect("samples");
    let mut tokens = vec![0; 4];
    for (p, &t) in (0..4).filter(|p| !group.contains(p)).zip(&context) {
        tokens[p] = t;
    }
    let plan = gen.plan.clone();
    let logits = forward(&params, &cfg, &plan.to_processed(&tokens), &plan)?;
    let marginal = |pos: usize| -> Vec<f64> {
        log_softmax_f64(logits.row(plan.pi_inv()[pos]))
            .iter()
            .map(|l| l.exp())
            .collect()
    };
    let (p0, p1) = (marginal(group[0]), marginal(group[1]));
    let m = pairs.len() as f64;
    for a in 0..3 {
        for b in 0..3 {
            let expect = p0[a] * p1[b];
            let seen = pairs.iter().filter(|&&(x, y)| x == a && y == b).count() as f64 / m;
            let se = (expect * (1.0 - expect) / m).sqrt().max(1e-3);
            ensure!(
                (seen - expect).abs() < 5.0 * se,
                "pair ({a},{b}): frequency {seen:.4} vs product of conditionals {expect:.4}"
            );
        }
    }
    Ok(format!("{} draws in the most common context", pairs.len()))
}

fn tiny_train_config(rng: &mut ChaCha8Rng) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            vocab: 9,
            d: 8,
            heads: 2,
            layers: 2,
            two_stream_layers: 1,
            pe_dim: 4,
            ffn_mult: 2,
            dropout: 0.1,
            query_mode: QueryMode::TwoStream,
        },
        batch_size: 2,
        seq_len: 8,
        stride: 4,
        total_steps: 6,
        warmup_steps: 2,
        i_ar: 1,
        i_perm: 4,
        rho: 4,
        sbp_steps: 2,
        learning_rate: 1e-2,
        seed: rng.gen(),
        ..TrainConfig::default()
    }
}

fn check_reproducible_training(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let cfg = tiny_train_config(rng);
    let tokens = random_tokens(160, cfg.model.vocab, rng);
    let split = CorpusSplit::new(tokens, 0.1, cfg.seq_len, cfg.stride)?;
    let a = train(&cfg, &split, None, |_| {})?;
    let b = train(&cfg, &split, None, |_| {})?;
    let bits = |m: &[crate::trainer::TrainMetrics]| -> Vec<(u64, u64)> {
        m.iter()
            .map(|x| (x.loss.to_bits(), x.grad_norm.to_bits()))
            .collect()
    };
    ensure!(
        bits(&a.metrics) == bits(&b.metrics),
        "metrics differ between runs"
    );
    ensure!(a.params == b.params, "weights differ between runs");
    Ok(format!("{} steps", a.metrics.len()))
}

fn check_curriculum(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let i_ar = rng.gen_range(0..50);
    let i_perm = i_ar + rng.gen_range(1..100);
    let rho = rng.gen_range(1..40);
    let c = CurriculumState::new(i_ar, i_perm, rho)?;
    let mut prev = 0;
    for it in 0..i_perm + 50 {
        let k = progressive_perm_count(&c.at(it));
        if it <= i_ar {
            ensure!(k == 0, "nonzero count {k} at iteration {it} <= i_ar");
        }
        if it >= i_perm {
            ensure!(k == rho, "count {k} != rho at iteration {it}");
        }
        ensure!(k >= prev && k <= rho, "count {k} not monotone at {it}");
        prev = k;
    }
    Ok(format!("i_ar={i_ar} i_perm={i_perm} rho={rho}"))
}

fn check_weight_decay(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let cfg = random_config(rng);
    let mut params: ModelParams = Params::init(&cfg, rng)?;
    let before = params.clone();
    let (lr, wd) = (rng.gen_range(0.01..0.1), rng.gen_range(0.1..0.5));
    let zeros: Vec<Vec<f32>> = params
        .slots()
        .iter()
        .map(|t| vec![0.0; t.numel()])
        .collect();
    let mut opt = AdamW::new(&params, [0.9, 0.999], 1e-8, wd);
    opt.step(&mut params, &zeros, lr);
    let shrink = (1.0 - lr * wd) as f32;
    for (after, orig) in params.slots().iter().zip(before.slots()) {
        let decayed = orig.shape().len() == 2;
        for (&a, &o) in after.data().iter().zip(orig.data()) {
            let expect = if decayed { o * shrink } else { o };
            ensure!(a == expect, "weight {o} became {a}, expected {expect}");
        }
    }
    Ok(format!("lr={lr:.3} wd={wd:.3}"))
}

fn check_tokenization(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let len = rng.gen_range(0..300);
    let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
    ensure!(
        detokenize(&tokenize(&bytes))? == bytes,
        "round trip changed the bytes"
    );
    Ok(format!("{len} bytes"))
}

fn check_batches(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let tokens = random_tokens(rng.gen_range(100..400), 257, rng);
    let seq_len = rng.gen_range(4..16);
    let split = CorpusSplit::new(tokens, 0.1, seq_len, rng.gen_range(1..=seq_len))?;
    let seed = rng.gen();
    let per_epoch = split.train_windows().len();
    let batch = 3;
    let a: Vec<Vec<Vec<usize>>> = make_batches(&split, batch, seed)?.take(per_epoch).collect();
    let b: Vec<Vec<Vec<usize>>> = make_batches(&split, batch, seed)?.take(per_epoch).collect();
    ensure!(a == b, "same seed produced different batches");
    let first_epoch: Vec<&Vec<usize>> = a.iter().flatten().take(per_epoch).collect();
    let mut expect: Vec<Vec<usize>> = split.train_windows().iter().map(|w| w.to_vec()).collect();
    let mut got: Vec<Vec<usize>> = first_epoch.into_iter().cloned().collect();
    expect.sort();
    got.sort();
    ensure!(
        got == expect,
        "first epoch does not visit every window exactly once"
    );
    Ok(format!("{per_epoch} windows"))
}

fn check_entropy_invariance(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let tokens = random_tokens(rng.gen_range(1..80), 20, rng);
    let h = unigram_entropy(&tokens)?;
    let mut relabel: Vec<usize> = (0..20).map(|t| t * 7 + 100).collect();
    relabel.shuffle(rng);
    let renamed: Vec<usize> = tokens.iter().map(|&t| relabel[t]).collect();
    let mut shuffled = tokens.clone();
    shuffled.shuffle(rng);
    for (what, other) in [
        ("relabeling", unigram_entropy(&renamed)?),
        ("permutation", unigram_entropy(&shuffled)?),
    ] {
        ensure!(
            (h - other).abs() < 1e-12,
            "{what} changed entropy from {h} to {other}"
        );
    }
    Ok(format!("{} tokens, H={h:.4}", tokens.len()))
}

fn check_perplexity_oracle(rng: &mut ChaCha8Rng, _: &SuiteOptions) -> Outcome {
    let cfg = random_config(rng);
    let params: ModelParams = random_params(&cfg, 0.3, rng)?.cast(&cfg);
    let seq_len = rng.gen_range(2..8);
    let tokens = random_tokens(seq_len * 6, cfg.vocab, rng);
    let split = CorpusSplit::new(tokens, 0.34, seq_len, seq_len)?;
    let (nll, ppl) = eval_perplexity(&params, &cfg, &split)?;
    let p64 = params.cast::<f64>(&cfg);
    let mut model = NetworkModel {
        params: &p64,
        cfg: &cfg,
    };
    let windows = split.validation_windows();
    let order: Vec<usize> = (0..seq_len).collect();
    let mut total = 0.0;
    for w in &windows {
        total += order_nll(&mut model, w, &order)? / seq_len as f64;
    }
    let oracle = total / windows.len() as f64;
    ensure!(
        (nll - oracle).abs() < 1e-9,
        "NLL {nll} vs next-token oracle {oracle}"
    );
    ensure!(ppl == nll.exp(), "perplexity is not exp(NLL)");
    Ok(format!("{} windows, NLL {nll:.4}", windows.len()))
}
