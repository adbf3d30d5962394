//! The block-weighted cross-entropy objective, plus slow reference evaluations used
//! to certify it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ArmdError, Result};
use crate::masks::MaskPair;
use crate::model::{forward_layout, ModelConfig, Params};
use crate::numkernel::ops::log_softmax_f64;
use crate::numkernel::{Scalar, Tape, Tensor, Var};
use crate::schedule::{sample_masking_order, BlockPlan, SequenceLayout};

/// Largest sequence [`oa_arm_enumeration`] will enumerate every order of.
pub const MAX_ENUMERATION_LEN: usize = 6;

/// Per-block weights `gamma[t - 1]` for blocks `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: Vec<f64>,
}

impl LossWeights {
    /// `1/T` for every block.
    pub fn uniform(t_blocks: usize) -> Self {
        Self {
            gamma: vec![1.0 / t_blocks as f64; t_blocks],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.gamma.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
            return Err(ArmdError::Validation(format!(
                "loss weight {g} is not a finite non-negative number"
            )));
        }
        Ok(())
    }

    /// Weight of every slot, looked up by its block.
    pub fn per_slot(&self, blocks: &[usize]) -> Result<Vec<f64>> {
        blocks
            .iter()
            .map(|&b| {
                self.gamma.get(b.wrapping_sub(1)).copied().ok_or_else(|| {
                    ArmdError::Validation(format!(
                        "block {b} has no weight among {} entries",
                        self.gamma.len()
                    ))
                })
            })
            .collect()
    }
}

fn check_lengths(
    n_logits: usize,
    tokens: &[usize],
    plan: &BlockPlan,
    weights: &LossWeights,
) -> Result<()> {
    if tokens.len() != plan.n() || n_logits != plan.n() {
        return Err(ArmdError::Validation(format!(
            "{n_logits} logit rows and {} tokens for a plan of {}",
            tokens.len(),
            plan.n()
        )));
    }
    if weights.gamma.len() != plan.t_blocks() {
        return Err(ArmdError::Validation(format!(
            "{} loss weights for {} blocks",
            weights.gamma.len(),
            plan.t_blocks()
        )));
    }
    weights.validate()
}

/// Records the weighted loss on `tape`. `tokens` are the targets in processed order.
pub fn diffusion_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    tokens: &[usize],
    plan: &BlockPlan,
    weights: &LossWeights,
) -> Result<Var> {
    let (rows, _) = tape.value(logits).dims2()?;
    check_lengths(rows, tokens, plan, weights)?;
    let w: Vec<T> = weights
        .per_slot(plan.block_of())?
        .into_iter()
        .map(T::of)
        .collect();
    tape.cross_entropy(logits, tokens, &w)
}

/// `sum_t gamma(t) * sum_{n in block t} -log p(x_n | earlier blocks)` from one set of
/// logits.
pub fn diffusion_loss<T: Scalar>(
    logits: &Tensor<T>,
    tokens: &[usize],
    plan: &BlockPlan,
    weights: &LossWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = diffusion_loss_on_tape(&mut tape, l, tokens, plan, weights)?;
    Ok(tape.value(loss).item().as_f64())
}

/// A model evaluated on processed-order tokens laid out by a [`SequenceLayout`].
pub trait LayoutModel {
    fn logits(&mut self, tokens: &[usize], layout: &SequenceLayout) -> Result<Tensor<f64>>;
}

impl<F> LayoutModel for F
where
    F: FnMut(&[usize], &SequenceLayout) -> Result<Tensor<f64>>,
{
    fn logits(&mut self, tokens: &[usize], layout: &SequenceLayout) -> Result<Tensor<f64>> {
        self(tokens, layout)
    }
}

/// Adapts model weights to [`LayoutModel`].
pub struct NetworkModel<'a> {
    pub params: &'a Params<Tensor<f64>>,
    pub cfg: &'a ModelConfig,
}

impl LayoutModel for NetworkModel<'_> {
    fn logits(&mut self, tokens: &[usize], layout: &SequenceLayout) -> Result<Tensor<f64>> {
        forward_layout(
            self.params,
            self.cfg,
            tokens,
            layout,
            &MaskPair::from_blocks(&layout.blocks),
        )
    }
}

/// The same quantity as [`diffusion_loss`], but with one model call per block that
/// sees only the earlier blocks as context plus the block being scored.
pub fn elbo_sequential_oracle<M: LayoutModel>(
    model: &mut M,
    tokens: &[usize],
    plan: &BlockPlan,
    weights: &LossWeights,
) -> Result<f64> {
    check_lengths(plan.n(), tokens, plan, weights)?;
    let layout = plan.layout();
    let groups = plan.groups();
    let mut total = 0.0;
    for (t, target) in groups.iter().enumerate() {
        let context: Vec<usize> = groups[..t].iter().flatten().copied().collect();
        let slots: Vec<usize> = context.iter().chain(target).copied().collect();
        let sub = layout.select(&slots);
        let sub_tokens: Vec<usize> = slots.iter().map(|&s| tokens[s]).collect();
        let logits = model.logits(&sub_tokens, &sub)?;
        let mut term = 0.0;
        for (row, &slot) in slots.iter().enumerate().skip(context.len()) {
            term -= log_softmax_f64(logits.row(row))[tokens[slot]];
        }
        total += weights.gamma[t] * term;
    }
    Ok(total)
}

/// `sum_t -log p(z_order[t] | z_order[<t])` for tokens given in original order.
pub fn order_nll<M: LayoutModel>(model: &mut M, tokens: &[usize], order: &[usize]) -> Result<f64> {
    let plan = BlockPlan::from_order(order)?;
    let processed = plan.to_processed(tokens);
    let logits = model.logits(&processed, &plan.layout())?;
    Ok((0..plan.n())
        .map(|r| -log_softmax_f64(logits.row(r))[processed[r]])
        .sum())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

/// Average order NLL over all `n!` generation orders of `tokens` (original order).
pub fn oa_arm_enumeration<M: LayoutModel>(model: &mut M, tokens: &[usize]) -> Result<f64> {
    let n = tokens.len();
    if n == 0 {
        return Err(ArmdError::EmptyPlan);
    }
    if n > MAX_ENUMERATION_LEN {
        return Err(ArmdError::Refused(format!(
            "enumerating {n}! orders is too expensive; the limit is n = {MAX_ENUMERATION_LEN}"
        )));
    }
    let orders = permutations(n);
    let mut total = 0.0;
    for order in &orders {
        total += order_nll(model, tokens, order)?;
    }
    Ok(total / orders.len() as f64)
}

/// Monte-Carlo estimate of [`oa_arm_enumeration`] with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrderEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

pub fn oa_arm_monte_carlo<M: LayoutModel, R: Rng + ?Sized>(
    model: &mut M,
    tokens: &[usize],
    samples: usize,
    rng: &mut R,
) -> Result<OrderEstimate> {
    if samples < 2 {
        return Err(ArmdError::Validation("need at least two samples".into()));
    }
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let plan = sample_masking_order(tokens.len(), rng)?;
        let v = order_nll(model, tokens, plan.pi())?;
        sum += v;
        sum_sq += v * v;
    }
    let k = samples as f64;
    let mean = sum / k;
    let var = ((sum_sq - k * mean * mean) / (k - 1.0)).max(0.0);
    Ok(OrderEstimate {
        mean,
        std_error: (var / k).sqrt(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QueryMode;
    use crate::schedule::make_plan_from_tau;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab: 7,
            d: 8,
            heads: 2,
            layers: 2,
            two_stream_layers: 1,
            pe_dim: 4,
            ffn_mult: 2,
            dropout: 0.0,
            query_mode: QueryMode::TwoStream,
        }
    }

    fn params(cfg: &ModelConfig, seed: u64) -> Params<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.4).unwrap();
        Params::build(cfg, |_, shape| {
            let n = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| normal.sample(&mut rng)).collect(),
            )
        })
        .unwrap()
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = sample_masking_order(9, &mut rng).unwrap();
        let logits = Tensor::<f64>::zeros(&[9, 13]);
        let tokens: Vec<usize> = (0..9).collect();
        let loss = diffusion_loss(&logits, &tokens, &plan, &LossWeights::uniform(9)).unwrap();
        assert!((loss - 13f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_token() {
        let plan = BlockPlan::identity(1).unwrap();
        let logits = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let loss = diffusion_loss(&logits, &[1], &plan, &LossWeights::uniform(1)).unwrap();
        assert!((loss + log_softmax_f64(&[0.5, -1.0, 2.0])[1]).abs() < 1e-12);
    }

    #[test]
    fn length_mismatches_are_rejected() {
        let plan = BlockPlan::identity(2).unwrap();
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        assert!(diffusion_loss(&logits, &[0], &plan, &LossWeights::uniform(2)).is_err());
        assert!(diffusion_loss(&logits, &[0, 1], &plan, &LossWeights::uniform(3)).is_err());
        let negative = LossWeights {
            gamma: vec![0.5, -0.1],
        };
        assert!(diffusion_loss(&logits, &[0, 1], &plan, &negative).is_err());
    }

    #[test]
    fn matches_direct_summation_and_sequential_oracle() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in 0..10 {
            let p = params(&cfg, 100 + case);
            let n = rng.gen_range(1..=12);
            let t = rng.gen_range(1..=n);
            let tau: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=t)).collect();
            let plan = make_plan_from_tau(&tau, t).unwrap();
            let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.vocab)).collect();
            let w = LossWeights {
                gamma: (0..plan.t_blocks())
                    .map(|_| rng.gen_range(0.1..2.0))
                    .collect(),
            };
            let logits = crate::model::forward(&p, &cfg, &tokens, &plan).unwrap();
            let single = diffusion_loss(&logits, &tokens, &plan, &w).unwrap();
            let mut direct = 0.0;
            for r in 0..n {
                let row = logits.row(r);
                let max = row.iter().cloned().fold(f64::MIN, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                direct += w.gamma[plan.block_of()[r] - 1] * (lse - row[tokens[r]]);
            }
            assert!((single - direct).abs() < 1e-10);
            let mut model = NetworkModel {
                params: &p,
                cfg: &cfg,
            };
            let multi = elbo_sequential_oracle(&mut model, &tokens, &plan, &w).unwrap();
            assert!(
                (single - multi).abs() < 1e-8,
                "case {case}: {single} vs {multi}"
            );
        }
    }

    #[test]
    fn one_block_scores_without_context() {
        let cfg = cfg();
        let p = params(&cfg, 2);
        let plan = make_plan_from_tau(&[1, 1, 1, 1], 1).unwrap();
        let tokens = [1, 4, 2, 6];
        let logits = crate::model::forward(&p, &cfg, &tokens, &plan).unwrap();
        let mut model = NetworkModel {
            params: &p,
            cfg: &cfg,
        };
        let w = LossWeights::uniform(1);
        let single = diffusion_loss(&logits, &tokens, &plan, &w).unwrap();
        let multi = elbo_sequential_oracle(&mut model, &tokens, &plan, &w).unwrap();
        assert!((single - multi).abs() < 1e-10);
    }

    #[test]
    fn identity_plan_is_mean_next_token_nll() {
        let cfg = cfg();
        let p = params(&cfg, 3);
        let tokens = [0, 3, 3, 5, 1, 2];
        let plan = BlockPlan::identity(6).unwrap();
        let mut model = NetworkModel {
            params: &p,
            cfg: &cfg,
        };
        let mut nll = 0.0;
        for k in 0..6 {
            // score token k after its prefix with a fresh, shorter pass
            let prefix = BlockPlan::identity(k + 1).unwrap();
            let logits = model.logits(&tokens[..=k], &prefix.layout()).unwrap();
            nll -= log_softmax_f64(logits.row(k))[tokens[k]];
        }
        let logits = crate::model::forward(&p, &cfg, &tokens, &plan).unwrap();
        let loss = diffusion_loss(&logits, &tokens, &plan, &LossWeights::uniform(6)).unwrap();
        assert!((loss - nll / 6.0).abs() < 1e-10);
    }

    #[test]
    fn within_block_order_does_not_matter() {
        let cfg = cfg();
        let p = params(&cfg, 4);
        let tau = [3, 2, 4, 4, 1, 3, 2];
        let plan = make_plan_from_tau(&tau, 4).unwrap();
        let original = [2usize, 5, 1, 0, 6, 3, 4];
        let tokens = plan.to_processed(&original);
        let w = LossWeights::uniform(4);
        let logits = crate::model::forward(&p, &cfg, &tokens, &plan).unwrap();
        let base = diffusion_loss(&logits, &tokens, &plan, &w).unwrap();
        // swap the two slots of block 3 together with their position tags
        let mut layout = plan.layout();
        layout.positions.swap(4, 5);
        let mut swapped = tokens.clone();
        swapped.swap(4, 5);
        let logits = forward_layout(
            &p,
            &cfg,
            &swapped,
            &layout,
            &MaskPair::from_blocks(&layout.blocks),
        )
        .unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let weights: Vec<f64> = w.per_slot(&layout.blocks).unwrap();
        let loss = tape.cross_entropy(l, &swapped, &weights).unwrap();
        assert!((tape.value(loss).item() - base).abs() < 1e-8);
    }

    #[test]
    fn logit_gradient_is_one_term_per_slot() {
        let plan = make_plan_from_tau(&[2, 1, 2], 2).unwrap();
        let logits = Tensor::new(vec![3, 2], vec![0.1, 0.4, -0.3, 0.2, 1.0, 0.0]).unwrap();
        let tokens = [1, 0, 1];
        let w = LossWeights {
            gamma: vec![0.7, 0.2],
        };
        let mut tape = Tape::new();
        let l = tape.param(logits.clone());
        let loss = diffusion_loss_on_tape(&mut tape, l, &tokens, &plan, &w).unwrap();
        let g = tape.backward(loss).unwrap().get(l);
        for r in 0..3 {
            let gamma = w.gamma[plan.block_of()[r] - 1];
            let lp = log_softmax_f64(logits.row(r));
            for c in 0..2 {
                let expect = gamma * (lp[c].exp() - if c == tokens[r] { 1.0 } else { 0.0 });
                assert!((g.row(r)[c] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn enumeration_base_cases() {
        let cfg = cfg();
        let p = params(&cfg, 5);
        let mut model = NetworkModel {
            params: &p,
            cfg: &cfg,
        };
        let single = oa_arm_enumeration(&mut model, &[4]).unwrap();
        let logits = model
            .logits(&[4], &BlockPlan::identity(1).unwrap().layout())
            .unwrap();
        assert!((single + log_softmax_f64(logits.row(0))[4]).abs() < 1e-12);
        assert!(matches!(
            oa_arm_enumeration(&mut model, &[0; 7]),
            Err(ArmdError::Refused(_))
        ));
        assert_eq!(permutations(3).len(), 6);
    }

    #[test]
    fn context_free_model_is_order_independent() {
        let row = vec![0.3, -0.2, 1.1, 0.0];
        let mut model = |tokens: &[usize], _: &SequenceLayout| {
            Tensor::from_rows(&vec![row.clone(); tokens.len()])
        };
        let tokens = [2, 0, 3];
        let per: Vec<f64> = permutations(3)
            .iter()
            .map(|o| order_nll(&mut model, &tokens, o).unwrap())
            .collect();
        assert!(per.iter().all(|v| (v - per[0]).abs() < 1e-12));
    }

    #[test]
    fn monte_carlo_agrees_with_enumeration() {
        let cfg = cfg();
        let p = params(&cfg, 6);
        let mut model = NetworkModel {
            params: &p,
            cfg: &cfg,
        };
        let tokens = [1, 5, 2];
        let exact = oa_arm_enumeration(&mut model, &tokens).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let est = oa_arm_monte_carlo(&mut model, &tokens, 6_000, &mut rng).unwrap();
        assert!(
            (est.mean - exact).abs() < 3.0 * est.std_error,
            "{est:?} vs {exact}"
        );
        assert!(est.std_error > 0.0);
    }
}
