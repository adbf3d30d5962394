//! Masking orders, the permutation and block partition they induce, and the
//! curriculum permutations used during training and generation.
//!
//! Conventions: sequence positions are 0-based. Masking timesteps `tau` and block
//! indices are 1-based, so that `block_of[p] == t_blocks - tau[pi[p]] + 1` holds
//! literally.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ArmdError, Result};

/// A masking order together with its induced permutation and block partition.
///
/// All masks and losses are derived from this one structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    n: usize,
    t_blocks: usize,
    /// Masking timestep per original position, in `1..=t_blocks`.
    tau: Vec<usize>,
    /// Processed index -> original position.
    pi: Vec<usize>,
    /// Original position -> processed index.
    pi_inv: Vec<usize>,
    /// Block index (1-based) per processed index.
    block_of: Vec<usize>,
    block_sizes: Vec<usize>,
}

/// Original position and block index of each processed slot.
///
/// This is what the network consumes. Unlike a [`BlockPlan`] it may describe a
/// subset of a longer sequence, which the multi-pass loss oracle relies on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub positions: Vec<usize>,
    pub blocks: Vec<usize>,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Keeps the given processed slots, in the given order.
    pub fn select(&self, slots: &[usize]) -> SequenceLayout {
        SequenceLayout {
            positions: slots.iter().map(|&s| self.positions[s]).collect(),
            blocks: slots.iter().map(|&s| self.blocks[s]).collect(),
        }
    }

    /// True when every block holds exactly one slot and blocks increase along the order.
    pub fn is_sequential(&self) -> bool {
        self.blocks.windows(2).all(|w| w[0] < w[1])
    }
}

impl BlockPlan {
    /// Builds a plan from per-position masking timesteps.
    ///
    /// Positions are sorted by `tau` descending, ties broken by ascending position.
    /// Timesteps that no position uses are squeezed out, so `t_blocks` of the result
    /// may be smaller than the one passed in.
    pub fn from_tau(tau: &[usize], t_blocks: usize) -> Result<Self> {
        if tau.is_empty() {
            return Err(ArmdError::EmptyPlan);
        }
        if let Some((j, &t)) = tau.iter().enumerate().find(|(_, &t)| t < 1 || t > t_blocks) {
            return Err(ArmdError::Validation(format!(
                "tau[{j}] = {t} outside 1..={t_blocks}"
            )));
        }
        let n = tau.len();
        let mut used: Vec<usize> = tau.to_vec();
        used.sort_unstable();
        used.dedup();
        let t_squeezed = used.len();
        // rank of each timestep among the used ones, 1-based
        let squeeze = |t: usize| used.binary_search(&t).expect("used timestep") + 1;
        let tau: Vec<usize> = tau.iter().map(|&t| squeeze(t)).collect();

        let mut pi: Vec<usize> = (0..n).collect();
        pi.sort_by(|&a, &b| tau[b].cmp(&tau[a]).then(a.cmp(&b)));
        let mut pi_inv = vec![0; n];
        for (p, &j) in pi.iter().enumerate() {
            pi_inv[j] = p;
        }
        let block_of: Vec<usize> = pi.iter().map(|&j| t_squeezed - tau[j] + 1).collect();
        let mut block_sizes = vec![0; t_squeezed];
        for &b in &block_of {
            block_sizes[b - 1] += 1;
        }
        Ok(Self {
            n,
            t_blocks: t_squeezed,
            tau,
            pi,
            pi_inv,
            block_of,
            block_sizes,
        })
    }

    /// Left-to-right order with singleton blocks.
    pub fn identity(n: usize) -> Result<Self> {
        let tau: Vec<usize> = (0..n).map(|j| n - j).collect();
        Self::from_tau(&tau, n)
    }

    /// Singleton-block plan visiting original positions in the order given.
    pub fn from_order(order: &[usize]) -> Result<Self> {
        let n = order.len();
        let mut tau = vec![0; n];
        for (p, &j) in order.iter().enumerate() {
            if j >= n || tau[j] != 0 {
                return Err(ArmdError::Validation(format!(
                    "order is not a permutation of 0..{n}"
                )));
            }
            tau[j] = n - p;
        }
        Self::from_tau(&tau, n)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t_blocks(&self) -> usize {
        self.t_blocks
    }

    pub fn tau(&self) -> &[usize] {
        &self.tau
    }

    pub fn pi(&self) -> &[usize] {
        &self.pi
    }

    pub fn pi_inv(&self) -> &[usize] {
        &self.pi_inv
    }

    pub fn block_of(&self) -> &[usize] {
        &self.block_of
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    pub fn is_singleton(&self) -> bool {
        self.t_blocks == self.n
    }

    pub fn layout(&self) -> SequenceLayout {
        SequenceLayout {
            positions: self.pi.clone(),
            blocks: self.block_of.clone(),
        }
    }

    /// Processed slots of each block, in block order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.t_blocks];
        for (p, &b) in self.block_of.iter().enumerate() {
            out[b - 1].push(p);
        }
        out
    }

    /// Reorders a sequence given in original order into processed order.
    pub fn to_processed<T: Copy>(&self, original: &[T]) -> Vec<T> {
        self.pi.iter().map(|&j| original[j]).collect()
    }

    /// Inverse of [`BlockPlan::to_processed`].
    pub fn to_original<T: Copy>(&self, processed: &[T]) -> Vec<T> {
        self.pi_inv.iter().map(|&p| processed[p]).collect()
    }

    /// Checks every structural invariant of the plan.
    pub fn validate(&self) -> Result<()> {
        let fail = |what: &str| Err(ArmdError::Validation(format!("block plan: {what}")));
        let n = self.n;
        if n == 0 {
            return Err(ArmdError::EmptyPlan);
        }
        if self.tau.len() != n
            || self.pi.len() != n
            || self.pi_inv.len() != n
            || self.block_of.len() != n
        {
            return fail("field lengths differ from n");
        }
        if self.tau.iter().any(|&t| t < 1 || t > self.t_blocks) {
            return fail("tau out of range");
        }
        if self.pi.windows(2).any(|w| self.tau[w[0]] < self.tau[w[1]]) {
            return fail("pi does not sort tau descending");
        }
        for p in 0..n {
            if self.pi[p] >= n || self.pi_inv[self.pi[p]] != p {
                return fail("pi_inv is not the inverse of pi");
            }
            if self.block_of[p] != self.t_blocks - self.tau[self.pi[p]] + 1 {
                return fail("block_of disagrees with tau");
            }
        }
        if self.block_of.windows(2).any(|w| w[0] > w[1]) {
            return fail("block_of decreases");
        }
        if self.block_sizes.len() != self.t_blocks
            || self.block_sizes.iter().sum::<usize>() != n
            || self.block_sizes.contains(&0)
        {
            return fail("block sizes do not partition n into non-empty blocks");
        }
        Ok(())
    }

    /// Line-oriented text form: `n T`, then the space-separated `tau` values.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.n, self.t_blocks);
        let taus: Vec<String> = self.tau.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "{}", taus.join(" "));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |why: &str| ArmdError::Validation(format!("plan text: {why}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("missing header"))?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("header is not two integers"))?;
        let [n, t] = nums[..] else {
            return Err(bad("header is not two integers"));
        };
        let tau: Vec<usize> = lines
            .next()
            .unwrap_or("")
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("tau is not a list of integers"))?;
        if tau.len() != n {
            return Err(bad(&format!(
                "header says n={n}, found {} tau values",
                tau.len()
            )));
        }
        Self::from_tau(&tau, t)
    }
}

/// Samples a uniformly random masking order with singleton blocks (`T = n`).
pub fn sample_masking_order<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<BlockPlan> {
    if n == 0 {
        return Err(ArmdError::EmptyPlan);
    }
    let mut tau: Vec<usize> = (1..=n).collect();
    tau.shuffle(rng);
    BlockPlan::from_tau(&tau, n)
}

pub fn make_plan_from_tau(tau: &[usize], t_blocks: usize) -> Result<BlockPlan> {
    BlockPlan::from_tau(tau, t_blocks)
}

/// Interleaves `s` equal streams of length `n/s`.
///
/// The `s` stream heads come first as singleton blocks; every later block groups the
/// tokens sharing one relative position across streams.
pub fn strided_permutation(n: usize, s: usize) -> Result<BlockPlan> {
    if n == 0 {
        return Err(ArmdError::EmptyPlan);
    }
    if s == 0 || !n.is_multiple_of(s) {
        return Err(ArmdError::Validation(format!(
            "stream count {s} does not divide length {n}"
        )));
    }
    let len = n / s;
    let t_blocks = s + len - 1;
    let mut tau = vec![0; n];
    for stream in 0..s {
        for j in 0..len {
            let block = if j == 0 { stream + 1 } else { s + j };
            tau[stream * len + j] = t_blocks - block + 1;
        }
    }
    BlockPlan::from_tau(&tau, t_blocks)
}

/// Parameters of the progressive permutation curriculum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumState {
    /// Last iteration of the pure left-to-right phase.
    pub i_ar: usize,
    /// Iteration at which the shuffle count reaches `rho`.
    pub i_perm: usize,
    /// Maximum number of shuffled tokens.
    pub rho: usize,
    pub iteration: usize,
}

impl CurriculumState {
    pub fn new(i_ar: usize, i_perm: usize, rho: usize) -> Result<Self> {
        if i_ar > i_perm {
            return Err(ArmdError::Validation(format!(
                "curriculum needs i_ar <= i_perm, got {i_ar} > {i_perm}"
            )));
        }
        Ok(Self {
            i_ar,
            i_perm,
            rho,
            iteration: 0,
        })
    }

    pub fn at(self, iteration: usize) -> Self {
        Self { iteration, ..self }
    }
}

/// Number of tokens to shuffle at the state's iteration: zero through `i_ar`, then a
/// linear integer ramp from 1 that reaches `rho` at `i_perm`.
pub fn progressive_perm_count(state: &CurriculumState) -> usize {
    let CurriculumState {
        i_ar,
        i_perm,
        rho,
        iteration,
    } = *state;
    if rho == 0 || iteration <= i_ar {
        return 0;
    }
    if iteration >= i_perm {
        return rho;
    }
    1 + (rho - 1) * (iteration - i_ar) / (i_perm - i_ar)
}

/// Picks `k` processed slots uniformly without replacement and randomly permutes the
/// positions occupying them. The plan must have singleton blocks.
pub fn apply_partial_shuffle<R: Rng + ?Sized>(
    plan: &BlockPlan,
    k: usize,
    rng: &mut R,
) -> Result<BlockPlan> {
    let n = plan.n();
    if k > n {
        return Err(ArmdError::Validation(format!(
            "cannot shuffle {k} of {n} tokens"
        )));
    }
    if !plan.is_singleton() {
        return Err(ArmdError::Validation(
            "partial shuffles need a singleton-block plan".into(),
        ));
    }
    let mut order = plan.pi().to_vec();
    if k >= 2 {
        let mut slots = rand::seq::index::sample(rng, n, k).into_vec();
        slots.sort_unstable();
        let mut chosen: Vec<usize> = slots.iter().map(|&s| order[s]).collect();
        chosen.shuffle(rng);
        for (&s, j) in slots.iter().zip(chosen) {
            order[s] = j;
        }
    } else if k == 1 {
        // a single selected slot can only map to itself; still consume the draw
        let _ = rng.gen_range(0..n);
    }
    BlockPlan::from_order(&order)
}

/// Stream count for one strided fine-tuning step, uniform over {1, 2, 4}.
pub fn sample_sbp_stream_count<R: Rng + ?Sized>(rng: &mut R) -> usize {
    const CHOICES: [usize; 3] = [1, 2, 4];
    CHOICES[rng.gen_range(0..CHOICES.len())]
}
