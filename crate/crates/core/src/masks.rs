//! Causal and strictly-causal attention masks derived from a block plan.

use serde::Serialize;

use crate::error::{ArmdError, Result};
use crate::schedule::{strided_permutation, BlockPlan};

/// Square boolean attention mask. Rows are query slots, columns key slots, both in
/// processed order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MaskMatrix {
    n: usize,
    allowed: Vec<bool>,
}

impl MaskMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                allowed.push(f(r, c));
            }
        }
        Self { n, allowed }
    }

    pub fn from_grid(n: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n * n {
            return Err(ArmdError::Dimension(format!(
                "mask of side {n} needs {} entries, got {}",
                n * n,
                allowed.len()
            )));
        }
        Ok(Self { n, allowed })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Row-major grid, `n * n` entries.
    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.n + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.allowed[row * self.n + col] = value;
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// True if every entry allowed here is allowed in `other`.
    pub fn is_subset_of(&self, other: &MaskMatrix) -> bool {
        self.n == other.n
            && self
                .allowed
                .iter()
                .zip(&other.allowed)
                .all(|(&a, &b)| !a || b)
    }

    /// Sub-mask keeping the given rows and columns.
    pub fn select(&self, slots: &[usize]) -> MaskMatrix {
        MaskMatrix::from_fn(slots.len(), |r, c| self.get(slots[r], slots[c]))
    }

    /// One line per row, `1` for allowed and `0` for forbidden.
    pub fn render(&self) -> String {
        let mut s = String::with_capacity(self.n * (self.n + 1));
        for row in self.allowed.chunks(self.n.max(1)).take(self.n) {
            s.extend(row.iter().map(|&a| if a { '1' } else { '0' }));
            s.push('\n');
        }
        s
    }
}

/// The two masks every forward pass needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MaskPair {
    /// Key allowed iff its block is at most the query's.
    pub causal: MaskMatrix,
    /// Key allowed iff its block is strictly before the query's.
    pub strict: MaskMatrix,
}

impl MaskPair {
    /// Masks for slots carrying the given block indices.
    pub fn from_blocks(blocks: &[usize]) -> Self {
        let n = blocks.len();
        Self {
            causal: MaskMatrix::from_fn(n, |r, c| blocks[c] <= blocks[r]),
            strict: MaskMatrix::from_fn(n, |r, c| blocks[c] < blocks[r]),
        }
    }

    /// Checks that the strict mask is the causal mask minus its diagonal blocks.
    pub fn validate(&self, blocks: &[usize]) -> Result<()> {
        let n = blocks.len();
        if self.causal.n() != n || self.strict.n() != n {
            return Err(ArmdError::Dimension("mask size differs from plan".into()));
        }
        for r in 0..n {
            for c in 0..n {
                let same = blocks[r] == blocks[c];
                let diff = self.causal.get(r, c) && !self.strict.get(r, c);
                if self.strict.get(r, c) && !self.causal.get(r, c) {
                    return Err(ArmdError::Validation(format!(
                        "strict mask allows ({r},{c}) which the causal mask forbids"
                    )));
                }
                if diff != same {
                    return Err(ArmdError::Validation(format!(
                        "masks disagree with block structure at ({r},{c})"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn build_masks(plan: &BlockPlan) -> MaskPair {
    MaskPair::from_blocks(plan.block_of())
}

/// Masks of the eight-token, two-stream strided plan, kept as a regression fixture.
pub fn strided_mask_figure_check(n: usize, s: usize) -> Result<MaskPair> {
    Ok(build_masks(&strided_permutation(n, s)?))
}
