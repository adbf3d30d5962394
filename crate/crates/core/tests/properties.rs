use armd::corpus::{detokenize, tokenize};
use armd::evalcli::unigram_entropy;
use armd::masks::{build_masks, MaskPair};
use armd::model::{forward, ModelConfig, Params, QueryMode};
use armd::numkernel::ops::{masked_softmax, rope_rotate};
use armd::numkernel::Tensor;
use armd::objective::{diffusion_loss, elbo_sequential_oracle, LossWeights, NetworkModel};
use armd::schedule::{make_plan_from_tau, strided_permutation, BlockPlan};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn tau_strategy(max_n: usize) -> impl Strategy<Value = (Vec<usize>, usize)> {
    (1..=max_n, 1..=max_n).prop_flat_map(|(n, t)| (prop::collection::vec(1..=t, n), Just(t)))
}

fn tiny_model(l2s: usize, seed: u64) -> (ModelConfig, Params<Tensor<f64>>) {
    let cfg = ModelConfig {
        vocab: 6,
        d: 8,
        heads: 2,
        layers: 2,
        two_stream_layers: l2s,
        pe_dim: 4,
        ffn_mult: 2,
        dropout: 0.0,
        query_mode: QueryMode::TwoStream,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.5).unwrap();
    let params = Params::build(&cfg, |_, shape| {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| normal.sample(&mut rng)).collect(),
        )
    })
    .unwrap();
    (cfg, params)
}

proptest! {
    #[test]
    fn plans_are_consistent((tau, t) in tau_strategy(24)) {
        let plan = make_plan_from_tau(&tau, t).unwrap();
        plan.validate().unwrap();
        let n = tau.len();
        prop_assert_eq!(plan.block_sizes().iter().sum::<usize>(), n);
        prop_assert!(plan.block_sizes().iter().all(|&s| s > 0));
        for i in 0..n {
            prop_assert_eq!(plan.pi()[plan.pi_inv()[i]], i);
        }
        // blocks are non-decreasing and earlier blocks hold later timesteps
        for w in 0..n.saturating_sub(1) {
            prop_assert!(plan.block_of()[w] <= plan.block_of()[w + 1]);
            prop_assert!(tau[plan.pi()[w]] >= tau[plan.pi()[w + 1]]);
        }
        let x: Vec<usize> = (0..n).map(|i| i * 7).collect();
        prop_assert_eq!(plan.to_original(&plan.to_processed(&x)), x);
        let reread = BlockPlan::from_text(&plan.to_text()).unwrap();
        prop_assert_eq!(reread.pi(), plan.pi());
        prop_assert_eq!(reread.block_of(), plan.block_of());
    }

    #[test]
    fn strict_mask_is_causal_minus_diagonal_blocks((tau, t) in tau_strategy(20)) {
        let plan = make_plan_from_tau(&tau, t).unwrap();
        let masks = build_masks(&plan);
        masks.validate(plan.block_of()).unwrap();
        prop_assert!(masks.strict.is_subset_of(&masks.causal));
        let same_block: usize = plan.block_sizes().iter().map(|s| s * s).sum();
        prop_assert_eq!(masks.causal.count() - masks.strict.count(), same_block);
    }

    #[test]
    fn identity_plans_give_triangular_masks(n in 1usize..20) {
        let masks = build_masks(&BlockPlan::identity(n).unwrap());
        for r in 0..n {
            for c in 0..n {
                prop_assert_eq!(masks.causal.get(r, c), c <= r);
                prop_assert_eq!(masks.strict.get(r, c), c < r);
            }
        }
    }

    #[test]
    fn strided_plans_have_equal_groups(streams in 1usize..5, groups in 1usize..6) {
        let n = streams * groups;
        let plan = strided_permutation(n, streams).unwrap();
        prop_assert_eq!(plan.t_blocks(), groups + streams - 1);
        prop_assert_eq!(plan.block_sizes().iter().sum::<usize>(), n);
    }

    #[test]
    fn tokenization_round_trips(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        prop_assert_eq!(detokenize(&tokenize(&bytes)).unwrap(), bytes);
    }

    #[test]
    fn entropy_ignores_token_order_and_renaming(
        tokens in prop::collection::vec(0usize..20, 1..100),
        shift in 1usize..50,
    ) {
        let h = unigram_entropy(&tokens).unwrap();
        let mut sorted = tokens.clone();
        sorted.sort_unstable();
        let renamed: Vec<usize> = tokens.iter().map(|t| t + shift).collect();
        prop_assert!((unigram_entropy(&sorted).unwrap() - h).abs() < 1e-12);
        prop_assert!((unigram_entropy(&renamed).unwrap() - h).abs() < 1e-12);
        prop_assert!(h >= 0.0 && h <= (tokens.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn rope_preserves_pair_norms(
        values in prop::collection::vec(-3.0f64..3.0, 16),
        p0 in 0usize..500,
        p1 in 0usize..500,
    ) {
        let x = Tensor::new(vec![2, 8], values).unwrap();
        let y = rope_rotate(&x, &[p0, p1], 4).unwrap();
        for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
            let (na, nb) = (a[0].hypot(a[1]), b[0].hypot(b[1]));
            prop_assert!((na - nb).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_or_zero(
        scores in prop::collection::vec(-20.0f64..20.0, 25),
        allowed in prop::collection::vec(any::<bool>(), 25),
    ) {
        let p = masked_softmax(&Tensor::new(vec![5, 5], scores).unwrap(), &allowed).unwrap();
        for r in 0..5 {
            let row = p.row(r);
            let any = allowed[r * 5..r * 5 + 5].iter().any(|&a| a);
            let total: f64 = row.iter().sum();
            let expect = if any { 1.0 } else { 0.0 };
            prop_assert!((total - expect).abs() < 1e-12);
            for (c, &v) in row.iter().enumerate() {
                if !allowed[r * 5 + c] {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn later_tokens_never_reach_earlier_blocks(
        (tau, t) in tau_strategy(8),
        l2s in 0usize..=2,
        seed in any::<u64>(),
        slot in any::<prop::sample::Index>(),
    ) {
        let (cfg, params) = tiny_model(l2s, seed);
        let plan = make_plan_from_tau(&tau, t).unwrap();
        let n = tau.len();
        let x: Vec<usize> = (0..n).map(|i| (i * 5 + seed as usize) % cfg.vocab).collect();
        let slot = slot.index(n);
        let mut moved = x.clone();
        moved[slot] = (moved[slot] + 1) % cfg.vocab;
        let a = forward(&params, &cfg, &x, &plan).unwrap();
        let b = forward(&params, &cfg, &moved, &plan).unwrap();
        let blocks = plan.block_of();
        for r in (0..n).filter(|&r| blocks[r] <= blocks[slot]) {
            prop_assert_eq!(a.row(r), b.row(r));
        }
    }

    #[test]
    fn one_pass_loss_matches_block_by_block((tau, t) in tau_strategy(8), l2s in 0usize..=2, seed in any::<u64>()) {
        let (cfg, params) = tiny_model(l2s, seed);
        let plan = make_plan_from_tau(&tau, t).unwrap();
        let x: Vec<usize> = (0..tau.len()).map(|i| (i * 3 + 1) % cfg.vocab).collect();
        let weights = LossWeights::uniform(plan.t_blocks());
        let one = diffusion_loss(&forward(&params, &cfg, &x, &plan).unwrap(), &x, &plan, &weights).unwrap();
        let many = elbo_sequential_oracle(&mut NetworkModel { params: &params, cfg: &cfg }, &x, &plan, &weights).unwrap();
        prop_assert!((one - many).abs() < 1e-9, "{} vs {}", one, many);
    }

    #[test]
    fn masks_only_depend_on_blocks((tau, t) in tau_strategy(12)) {
        let plan = make_plan_from_tau(&tau, t).unwrap();
        prop_assert_eq!(build_masks(&plan), MaskPair::from_blocks(&plan.layout().blocks));
    }
}
