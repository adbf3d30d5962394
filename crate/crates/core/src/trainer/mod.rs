//! Training loop: per-sequence masking orders under the shuffle curriculum, a strided
//! fine-tuning phase, AdamW with warmup and clipping, metrics and checkpoints.

mod checkpoint;
mod optim;

use std::fs::{self, File};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_batches, CorpusSplit};
use crate::error::{ArmdError, Result};
use crate::masks::MaskPair;
use crate::model::{forward_on_tape, Dropout, ModelConfig, ModelParams, Params};
use crate::numkernel::{Tape, Var};
use crate::objective::{diffusion_loss_on_tape, LossWeights};
use crate::schedule::{
    apply_partial_shuffle, progressive_perm_count, sample_sbp_stream_count, strided_permutation,
    BlockPlan, CurriculumState,
};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    ManifestEntry, FORMAT_VERSION, MAGIC,
};
pub use optim::{clip_gradients, global_norm, AdamW};

/// Training hyperparameters. The model configuration is flattened in, so a config
/// file is a single flat table of keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub betas: [f64; 2],
    pub epsilon: f64,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Offset between consecutive training windows.
    pub stride: usize,
    pub validation_fraction: f64,
    /// Length of the main phase.
    pub total_steps: usize,
    pub i_ar: usize,
    pub i_perm: usize,
    pub rho: usize,
    /// Length of the strided fine-tuning phase that follows the main phase.
    pub sbp_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: 3e-4,
            betas: [0.9, 0.999],
            epsilon: 1e-8,
            warmup_steps: 2000,
            grad_clip_norm: 1.0,
            weight_decay: 0.03,
            batch_size: 8,
            seq_len: 64,
            stride: 32,
            validation_fraction: 0.1,
            total_steps: 10_000,
            i_ar: 2000,
            i_perm: 8000,
            rho: 8,
            sbp_steps: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ArmdError::Config(m));
        self.model.validate()?;
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
            ("grad_clip_norm", self.grad_clip_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas {:?} must lie in [0, 1)", self.betas));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.stride == 0 {
            return bad("batch_size, seq_len and stride must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps={} exceeds total_steps={}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.i_ar > self.i_perm {
            return bad(format!("i_ar={} exceeds i_perm={}", self.i_ar, self.i_perm));
        }
        if self.rho > self.seq_len {
            return bad(format!("rho={} exceeds seq_len={}", self.rho, self.seq_len));
        }
        if self.sbp_steps > 0 && !self.seq_len.is_multiple_of(4) {
            return bad(format!(
                "strided fine-tuning needs seq_len divisible by 4, got {}",
                self.seq_len
            ));
        }
        Ok(())
    }

    /// Parses a flat TOML table. Unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| ArmdError::Config(format!("{e}")))?;
        let known = toml::Table::try_from(Self::default())
            .map_err(|e| ArmdError::Config(format!("{e}")))?;
        if let Some(key) = table.keys().find(|k| !known.contains_key(*k)) {
            return Err(ArmdError::Config(format!("unknown config key `{key}`")));
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e| ArmdError::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| ArmdError::Config(format!("{e}")))
    }

    pub fn curriculum(&self) -> Result<CurriculumState> {
        CurriculumState::new(self.i_ar, self.i_perm, self.rho)
    }
}

/// Linear warmup from 0 to `learning_rate`, constant afterwards.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 {
        return cfg.learning_rate;
    }
    cfg.learning_rate * (step as f64 / cfg.warmup_steps as f64).min(1.0)
}

/// What one optimizer step reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainMetrics {
    /// 1-based step number.
    pub step: usize,
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Shuffled tokens per sequence; zero in the strided phase.
    pub perm_count: usize,
    pub lr: f64,
    #[serde(skip)]
    pub tokens_per_second: f64,
}

/// Row layout of the metrics CSV.
#[derive(Serialize)]
struct MetricsRow {
    step: usize,
    loss: f64,
    grad_norm: f64,
    perm_count: usize,
    lr: f64,
}

impl From<&TrainMetrics> for MetricsRow {
    fn from(m: &TrainMetrics) -> Self {
        Self {
            step: m.step,
            loss: m.loss,
            grad_norm: m.grad_norm,
            perm_count: m.perm_count,
            lr: m.lr,
        }
    }
}

/// Parameters, optimizer and random state of one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: ModelParams,
    opt: AdamW,
    rng: ChaCha8Rng,
    curriculum: CurriculumState,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = Params::init(&cfg.model, &mut rng)?;
        Self::with_params(cfg, params, rng)
    }

    fn with_params(cfg: TrainConfig, params: ModelParams, rng: ChaCha8Rng) -> Result<Self> {
        params.check_shapes(&cfg.model)?;
        let opt = AdamW::new(&params, cfg.betas, cfg.epsilon, cfg.weight_decay);
        let curriculum = cfg.curriculum()?;
        Ok(Self {
            cfg,
            params,
            opt,
            rng,
            curriculum,
            step: 0,
        })
    }

    /// Starts from given weights with fresh optimizer state.
    pub fn from_params(cfg: TrainConfig, params: ModelParams) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self::with_params(cfg, params, rng)
    }

    /// Completed optimizer steps.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn in_sbp_phase(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    /// Masking order for one sequence at the current step, with its shuffle count.
    pub fn draw_plan(&mut self, n: usize) -> Result<(BlockPlan, usize)> {
        if self.in_sbp_phase() {
            let s = sample_sbp_stream_count(&mut self.rng);
            Ok((strided_permutation(n, s)?, 0))
        } else {
            let k = progressive_perm_count(&self.curriculum.at(self.step)).min(n);
            let plan = apply_partial_shuffle(&BlockPlan::identity(n)?, k, &mut self.rng)?;
            Ok((plan, k))
        }
    }

    /// One optimizer step on a batch of original-order token windows.
    pub fn step(&mut self, batch: &[Vec<usize>]) -> Result<TrainMetrics> {
        let started = Instant::now();
        let step_no = self.step + 1;
        if batch.is_empty() {
            return Err(ArmdError::Validation("empty batch".into()));
        }
        let model = self.cfg.model.clone();
        let mut tape = Tape::<f32>::new();
        let p = self.params.register(&model, &mut tape, true);
        let mut total: Option<Var> = None;
        let mut perm_count = 0;
        let mut tokens = 0;
        for seq in batch {
            if seq.len() != self.cfg.seq_len {
                return Err(ArmdError::Validation(format!(
                    "sequence of {} tokens, expected seq_len {}",
                    seq.len(),
                    self.cfg.seq_len
                )));
            }
            let (plan, k) = self.draw_plan(seq.len())?;
            perm_count = k;
            tokens += seq.len();
            let processed = plan.to_processed(seq);
            let layout = plan.layout();
            let masks = MaskPair::from_blocks(&layout.blocks);
            let mut drop = Some(Dropout {
                rate: model.dropout,
                rng: &mut self.rng,
            });
            let out = forward_on_tape(
                &mut tape, &p, &model, &processed, &layout, &masks, &mut drop,
            )?;
            let weights = LossWeights::uniform(plan.t_blocks());
            let loss = diffusion_loss_on_tape(&mut tape, out.logits, &processed, &plan, &weights)?;
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
                None => loss,
            });
        }
        let total = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f32);
        let loss = tape.value(total).item() as f64;
        if !loss.is_finite() {
            return Err(ArmdError::Diverged {
                step: step_no,
                reason: format!("loss is {loss}"),
            });
        }
        let mut grads = tape.backward(total)?;
        let mut flat: Vec<Vec<f32>> = p
            .slots()
            .into_iter()
            .zip(self.params.slots())
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        let grad_norm = clip_gradients(&mut flat, self.cfg.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(ArmdError::Diverged {
                step: step_no,
                reason: format!("gradient norm is {grad_norm}"),
            });
        }
        let lr = lr_at(step_no, &self.cfg);
        self.opt.step(&mut self.params, &flat, lr);
        self.step = step_no;
        Ok(TrainMetrics {
            step: step_no,
            loss,
            grad_norm,
            perm_count,
            lr,
            tokens_per_second: tokens as f64 / started.elapsed().as_secs_f64().max(1e-9),
        })
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Weights at the end of the main phase, when a strided phase followed.
    pub base_params: Option<ModelParams>,
    pub metrics: Vec<TrainMetrics>,
}

/// Runs the main phase and then the strided phase over `split`.
///
/// With an output directory, writes `metrics.csv` (one row per step), `final.ckpt`,
/// and `base.ckpt` when there is a strided phase.
pub fn train(
    cfg: &TrainConfig,
    split: &CorpusSplit,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&TrainMetrics),
) -> Result<TrainOutcome> {
    if split.seq_len != cfg.seq_len {
        return Err(ArmdError::Config(format!(
            "corpus windows of {} tokens, config seq_len {}",
            split.seq_len, cfg.seq_len
        )));
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut batches = make_batches(split, cfg.batch_size, cfg.seed.wrapping_add(1))?;
    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(csv::Writer::from_writer(File::create(
                dir.join("metrics.csv"),
            )?))
        }
        None => None,
    };
    let mut metrics = Vec::with_capacity(cfg.total_steps + cfg.sbp_steps);
    let mut base_params = None;
    for _ in 0..cfg.total_steps + cfg.sbp_steps {
        let batch = batches.next().expect("endless batches");
        let m = trainer.step(&batch)?;
        if let Some(w) = writer.as_mut() {
            w.serialize(MetricsRow::from(&m)).map_err(csv_error)?;
            w.flush()?;
        }
        on_step(&m);
        metrics.push(m);
        if trainer.steps_done() == cfg.total_steps && cfg.sbp_steps > 0 {
            if let Some(dir) = out_dir {
                save_checkpoint(
                    &dir.join("base.ckpt"),
                    &trainer.params,
                    &cfg.model,
                    Some(cfg),
                    cfg.total_steps as u64,
                )?;
            }
            base_params = Some(trainer.params.clone());
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(
            &dir.join("final.ckpt"),
            &trainer.params,
            &cfg.model,
            Some(cfg),
            trainer.steps_done() as u64,
        )?;
    }
    Ok(TrainOutcome {
        params: trainer.params,
        base_params,
        metrics,
    })
}

fn csv_error(e: csv::Error) -> ArmdError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => ArmdError::Io(io),
        other => ArmdError::Validation(format!("metrics csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, QueryMode};
    use crate::numkernel::Tensor;
    use crate::objective::diffusion_loss;

    fn small() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                vocab: 11,
                d: 8,
                heads: 2,
                layers: 2,
                two_stream_layers: 1,
                pe_dim: 4,
                ffn_mult: 2,
                dropout: 0.0,
                query_mode: QueryMode::TwoStream,
            },
            batch_size: 2,
            seq_len: 8,
            stride: 4,
            total_steps: 20,
            warmup_steps: 4,
            i_ar: 5,
            i_perm: 10,
            rho: 4,
            sbp_steps: 5,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(1000, &cfg) - 1.5e-4).abs() < 1e-18);
        assert_eq!(lr_at(2000, &cfg), 3e-4);
        assert_eq!(lr_at(50_000, &cfg), 3e-4);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = small();
        let text = cfg.to_toml_string().unwrap();
        assert!(text.contains("learning_rate"));
        assert!(
            text.lines().all(|l| !l.starts_with('[')),
            "config should be flat:\n{text}"
        );
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
        let partial =
            TrainConfig::from_toml_str("total_steps = 3000\nd = 32\nwarmup_steps = 100\n").unwrap();
        assert_eq!(partial.model.d, 32);
        assert_eq!(partial.learning_rate, 3e-4);
        assert!(TrainConfig::from_toml_str("lerning_rate = 1.0").is_err());
        assert!(TrainConfig::from_toml_str("warmup_steps = 5\ntotal_steps = 4").is_err());
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![vec![6.0f32, 0.0], vec![8.0]];
        let norm = clip_gradients(&mut g, 1.0);
        assert!((norm - 10.0).abs() < 1e-12);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
        let mut small_g = vec![vec![0.3f32]];
        clip_gradients(&mut small_g, 1.0);
        assert_eq!(small_g[0][0], 0.3);
    }

    #[test]
    fn clipped_update_equals_unit_norm_update() {
        let cfg = small();
        let params = Params::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let grads: Vec<Vec<f32>> = params
            .slots()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                (0..t.numel())
                    .map(|j| ((i * 31 + j) % 7) as f32 - 3.0)
                    .collect()
            })
            .collect();
        let norm = global_norm(&grads);
        let big: Vec<Vec<f32>> = grads
            .iter()
            .map(|g| g.iter().map(|v| v * (10.0 / norm) as f32).collect())
            .collect();
        let unit: Vec<Vec<f32>> = grads
            .iter()
            .map(|g| g.iter().map(|v| v / norm as f32).collect())
            .collect();
        let mut clipped = big.clone();
        assert!((clip_gradients(&mut clipped, 1.0) - 10.0).abs() < 1e-4);
        let (mut a, mut b) = (params.clone(), params.clone());
        let mut oa = AdamW::new(&a, [0.9, 0.999], 1e-8, 0.03);
        let mut ob = AdamW::new(&b, [0.9, 0.999], 1e-8, 0.03);
        oa.step(&mut a, &clipped, 1e-3);
        ob.step(&mut b, &unit, 1e-3);
        for (x, y) in a.slots().iter().zip(b.slots()) {
            assert!(x.max_abs_diff(y) < 1e-6);
        }
    }

    #[test]
    fn decay_is_decoupled_and_matrix_only() {
        let cfg = small();
        let mut params = Params::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = params.clone();
        let zeros: Vec<Vec<f32>> = params
            .slots()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        let mut opt = AdamW::new(&params, [0.9, 0.999], 1e-8, 0.5);
        opt.step(&mut params, &zeros, 0.1);
        for (x, y) in params.slots().iter().zip(before.slots()) {
            let factor = if y.shape().len() == 2 { 0.95 } else { 1.0 };
            for (a, b) in x.data().iter().zip(y.data()) {
                assert!((a - b * factor).abs() <= 1e-7 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn left_to_right_step_is_next_token_training() {
        let mut cfg = small();
        cfg.total_steps = 10;
        cfg.warmup_steps = 0;
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let seq: Vec<usize> = vec![1, 4, 2, 9, 9, 3, 0, 7];
        let before = trainer.params.cast::<f64>(&cfg.model);
        let m = trainer.step(std::slice::from_ref(&seq)).unwrap();
        assert_eq!(m.perm_count, 0);
        let plan = BlockPlan::identity(8).unwrap();
        let logits: Tensor<f64> = forward(&before, &cfg.model, &seq, &plan).unwrap();
        let expect = diffusion_loss(&logits, &seq, &plan, &LossWeights::uniform(8)).unwrap();
        assert!((m.loss - expect).abs() < 1e-5, "{} vs {expect}", m.loss);
    }

    #[test]
    fn runs_are_bit_reproducible_and_follow_the_curriculum() {
        let cfg = small();
        let tokens: Vec<usize> = (0..200).map(|i| (i * 7 + i / 3) % 11).collect();
        let split = CorpusSplit::new(tokens, 0.1, cfg.seq_len, cfg.stride).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = train(&cfg, &split, Some(&dir.path().join("a")), |_| {}).unwrap();
        let b = train(&cfg, &split, Some(&dir.path().join("b")), |_| {}).unwrap();
        let csv_a = fs::read(dir.path().join("a/metrics.csv")).unwrap();
        assert_eq!(csv_a, fs::read(dir.path().join("b/metrics.csv")).unwrap());
        assert_eq!(a.params, b.params);
        let text = String::from_utf8(csv_a).unwrap();
        assert_eq!(
            text.lines().next(),
            Some("step,loss,grad_norm,perm_count,lr")
        );
        assert_eq!(text.lines().count(), 26);
        let counts: Vec<usize> = a.metrics.iter().map(|m| m.perm_count).collect();
        assert_eq!(&counts[..5], &[0; 5]);
        assert_eq!(&counts[10..20], &[4; 10]);
        assert_eq!(&counts[20..], &[0; 5]);
        assert!(a.base_params.is_some());
        let ck = load_checkpoint(&dir.path().join("a/final.ckpt")).unwrap();
        assert_eq!(ck.step, 25);
        assert_eq!(ck.params, a.params);
        assert!(dir.path().join("a/base.ckpt").exists());
    }

    #[test]
    fn strided_phase_uses_strided_plans() {
        let mut cfg = small();
        cfg.total_steps = 0;
        cfg.warmup_steps = 0;
        let mut trainer = Trainer::new(cfg).unwrap();
        for _ in 0..30 {
            let (plan, k) = trainer.draw_plan(8).unwrap();
            assert_eq!(k, 0);
            assert!([8, 5, 4].contains(&plan.t_blocks()), "{}", plan.t_blocks());
        }
    }
}
