//! Decoding: cached sequential generation, strided block-parallel generation, and
//! categorical sampling in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{ArmdError, Result};
use crate::masks::MaskPair;
use crate::model::{
    attend, causal_layer_inputs, ffn_residual, forward_layout, prefix_embedding, project_kv,
    ModelConfig, Params, QueryMode,
};
use crate::numkernel::ops::log_softmax_f64;
use crate::numkernel::{Scalar, Tape, Tensor, Var};
use crate::schedule::{strided_permutation, BlockPlan};

/// Draws one token from `probs` reshaped by `temperature` (`p^(1/T)`, renormalized),
/// by inverting the cumulative distribution with a single uniform draw.
pub fn sample_token<R: Rng + ?Sized>(
    probs: &[f64],
    temperature: f64,
    rng: &mut R,
) -> Result<usize> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(ArmdError::Numeric(
            "probabilities must be finite and non-negative".into(),
        ));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(ArmdError::Numeric(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    let logs: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
    sample_from_logits(&logs, temperature, rng)
}

/// Like [`sample_token`] but from unnormalized log-probabilities.
pub fn sample_from_logits<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    rng: &mut R,
) -> Result<usize> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(ArmdError::Validation(format!(
            "temperature {temperature} must be positive"
        )));
    }
    if logits.is_empty() || logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(ArmdError::Numeric("logits must be finite or -inf".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(ArmdError::Numeric(
            "every outcome has zero probability".into(),
        ));
    }
    let weights: Vec<f64> = scaled.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last)
}

/// Order in which tokens are produced: one model call per group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationPlan {
    /// Original positions produced by each call.
    pub groups: Vec<Vec<usize>>,
    #[serde(skip)]
    pub plan: BlockPlan,
}

impl GenerationPlan {
    pub fn from_plan(plan: BlockPlan) -> Self {
        let groups = plan
            .groups()
            .iter()
            .map(|g| g.iter().map(|&slot| plan.pi()[slot]).collect())
            .collect();
        Self { groups, plan }
    }

    pub fn sequential(n: usize) -> Result<Self> {
        Ok(Self::from_plan(BlockPlan::identity(n)?))
    }

    /// `s` stream heads one at a time, then `s` tokens per call.
    pub fn strided(n: usize, s: usize) -> Result<Self> {
        Ok(Self::from_plan(strided_permutation(n, s)?))
    }

    pub fn model_calls(&self) -> usize {
        self.groups.len()
    }
}

/// Keys and values of every generated slot, plus the prefix-aggregation state.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    /// Causal-stream keys and values per two-stream layer, `[len, d]`.
    pub x_kv: Vec<(Tensor<T>, Tensor<T>)>,
    /// Strict-stream keys and values per causal layer, `[len, d]`.
    pub g_kv: Vec<(Tensor<T>, Tensor<T>)>,
    /// `sum_i pe_i x_i^T` over generated slots, `[pe_dim, d]`.
    pub prefix_state: Tensor<T>,
    /// Embedding of the latest token, for shift queries.
    pub last_embedding: Option<Tensor<T>>,
    pub len: usize,
}

impl<T: Scalar> KvCache<T> {
    fn new(cfg: &ModelConfig) -> Self {
        let empty = || (Tensor::zeros(&[0, cfg.d]), Tensor::zeros(&[0, cfg.d]));
        Self {
            x_kv: (0..cfg.two_stream_layers).map(|_| empty()).collect(),
            g_kv: (0..cfg.causal_layers()).map(|_| empty()).collect(),
            prefix_state: Tensor::zeros(&[cfg.pe_dim, cfg.d]),
            last_embedding: None,
            len: 0,
        }
    }
}

fn append_rows<T: Scalar>(dst: &Tensor<T>, rows: &Tensor<T>) -> Tensor<T> {
    let d = dst.shape()[1];
    let mut data = dst.data().to_vec();
    data.extend_from_slice(rows.data());
    Tensor::new(vec![data.len() / d, d], data).expect("row append")
}

struct Pending<T> {
    positions: Vec<usize>,
    g_kv: Vec<(Tensor<T>, Tensor<T>)>,
}

/// Incremental decoder. Each call to [`Decoder::predict`] scores one group given the
/// committed groups; [`Decoder::commit`] then feeds the chosen tokens back.
pub struct Decoder<'a, T: Scalar> {
    cfg: &'a ModelConfig,
    tape: Tape<T>,
    p: Params<Var>,
    cache: KvCache<T>,
    pending: Option<Pending<T>>,
}

impl<'a, T: Scalar> Decoder<'a, T> {
    pub fn new(params: &Params<Tensor<T>>, cfg: &'a ModelConfig) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes(cfg)?;
        let mut tape = Tape::new();
        let p = params.register(cfg, &mut tape, false);
        Ok(Self {
            cfg,
            tape,
            p,
            cache: KvCache::new(cfg),
            pending: None,
        })
    }

    pub fn cache(&self) -> &KvCache<T> {
        &self.cache
    }

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    /// Logits `[group, vocab]` for the given original positions.
    pub fn predict(&mut self, positions: &[usize]) -> Result<Tensor<T>> {
        if self.pending.is_some() {
            return Err(ArmdError::Validation(
                "commit the previous group before predicting".into(),
            ));
        }
        let cfg = self.cfg;
        let (g_len, m, d) = (positions.len(), self.cache.len, cfg.d);
        let mut g = match cfg.query_mode {
            QueryMode::TwoStream => {
                let prefix = self.p.prefix.clone().expect("prefix weights");
                let pe = prefix_embedding(&mut self.tape, &prefix, positions, cfg.pe_dim)?;
                let state = self.constant(self.cache.prefix_state.clone());
                self.tape.matmul(pe, state)?
            }
            QueryMode::Shift => {
                if g_len != 1 {
                    return Err(ArmdError::Validation(
                        "shift queries decode one token per call".into(),
                    ));
                }
                let row = match &self.cache.last_embedding {
                    Some(e) => e.clone(),
                    None => self
                        .tape
                        .value(self.p.shift_start.expect("start vector"))
                        .clone(),
                };
                self.constant(Tensor::new(vec![1, d], row.into_data())?)
            }
        };
        let everything = vec![true; g_len * m];
        for i in 0..cfg.two_stream_layers {
            let l = self.p.two_stream[i].clone();
            let hg = self.tape.layer_norm(g, l.ln.gain, l.ln.bias)?;
            let a = if m == 0 {
                self.constant(Tensor::zeros(&[g_len, d]))
            } else {
                let (k, v) = self.cache.x_kv[i].clone();
                let (k, v) = (self.constant(k), self.constant(v));
                attend(
                    &mut self.tape,
                    &l.attn,
                    hg,
                    positions,
                    k,
                    v,
                    &everything,
                    cfg,
                    &mut None,
                )?
            };
            g = self.tape.add(g, a)?;
            g = ffn_residual(&mut self.tape, &l.ffn_g, g, &mut None)?;
        }
        let mut g_kv = Vec::with_capacity(cfg.causal_layers());
        let all = vec![true; g_len * (m + g_len)];
        for j in 0..cfg.causal_layers() {
            let l = self.p.causal[j].clone();
            let (h, k_new, v_new) = causal_layer_inputs(&mut self.tape, &l, g, positions, cfg)?;
            let k_new = self.tape.value(k_new).clone();
            let v_new = self.tape.value(v_new).clone();
            let k = append_rows(&self.cache.g_kv[j].0, &k_new);
            let v = append_rows(&self.cache.g_kv[j].1, &v_new);
            let (k, v) = (self.constant(k), self.constant(v));
            let a = attend(
                &mut self.tape,
                &l.attn,
                h,
                positions,
                k,
                v,
                &all,
                cfg,
                &mut None,
            )?;
            g = self.tape.add(g, a)?;
            g = ffn_residual(&mut self.tape, &l.ffn, g, &mut None)?;
            g_kv.push((k_new, v_new));
        }
        let h = self
            .tape
            .layer_norm(g, self.p.final_ln.gain, self.p.final_ln.bias)?;
        let logits = self.tape.matmul(h, self.p.head_w)?;
        let logits = self.tape.add_row(logits, self.p.head_b)?;
        self.pending = Some(Pending {
            positions: positions.to_vec(),
            g_kv,
        });
        Ok(self.tape.value(logits).clone())
    }

    /// Feeds back the tokens chosen for the last predicted group.
    pub fn commit(&mut self, tokens: &[usize]) -> Result<()> {
        let pending = self
            .pending
            .take()
            .ok_or_else(|| ArmdError::Validation("nothing to commit".into()))?;
        if tokens.len() != pending.positions.len() {
            return Err(ArmdError::Validation(format!(
                "{} tokens for a group of {}",
                tokens.len(),
                pending.positions.len()
            )));
        }
        let cfg = self.cfg;
        let positions = &pending.positions;
        for (j, (k, v)) in pending.g_kv.into_iter().enumerate() {
            let (ck, cv) = &self.cache.g_kv[j];
            self.cache.g_kv[j] = (append_rows(ck, &k), append_rows(cv, &v));
        }
        let embedded = self.tape.embedding(self.p.embed, tokens)?;
        let mut x = embedded;
        let count = cfg.two_stream_layers;
        for i in 0..count {
            let l = self.p.two_stream[i].clone();
            let hx = self.tape.layer_norm(x, l.ln.gain, l.ln.bias)?;
            let (k_new, v_new) = project_kv(&mut self.tape, &l.attn, hx, positions, cfg)?;
            let k = append_rows(&self.cache.x_kv[i].0, self.tape.value(k_new));
            let v = append_rows(&self.cache.x_kv[i].1, self.tape.value(v_new));
            self.cache.x_kv[i] = (k.clone(), v.clone());
            if i + 1 < count {
                let all = vec![true; tokens.len() * k.shape()[0]];
                let (k, v) = (self.constant(k), self.constant(v));
                let a = attend(
                    &mut self.tape,
                    &l.attn,
                    hx,
                    positions,
                    k,
                    v,
                    &all,
                    cfg,
                    &mut None,
                )?;
                x = self.tape.add(x, a)?;
                x = ffn_residual(&mut self.tape, &l.ffn_x, x, &mut None)?;
            }
        }
        let e = self.tape.value(embedded).clone();
        match cfg.query_mode {
            QueryMode::TwoStream => {
                let prefix = self.p.prefix.clone().expect("prefix weights");
                let pe = prefix_embedding(&mut self.tape, &prefix, positions, cfg.pe_dim)?;
                let pe = self.tape.value(pe).clone();
                let d = cfg.d;
                let state = self.cache.prefix_state.data_mut();
                for r in 0..tokens.len() {
                    for a in 0..cfg.pe_dim {
                        let w = pe.row(r)[a];
                        for (s, &xv) in state[a * d..(a + 1) * d].iter_mut().zip(e.row(r)) {
                            *s += w * xv;
                        }
                    }
                }
            }
            QueryMode::Shift => {
                let last = tokens.len() - 1;
                self.cache.last_embedding = Some(Tensor::vector(e.row(last).to_vec()));
            }
        }
        self.cache.len += tokens.len();
        Ok(())
    }
}

/// Tokens in original order with their log-probabilities under the model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationOutput {
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub groups: Vec<Vec<usize>>,
    pub model_calls: usize,
    /// Logits of every position at the call that produced it, in original order.
    #[serde(skip)]
    pub logits: Vec<Vec<f64>>,
}

fn sample_group<R: Rng + ?Sized>(
    logits: &Tensor<f64>,
    temperature: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut tokens = Vec::new();
    let mut lps = Vec::new();
    for r in 0..logits.shape()[0] {
        let row = logits.row(r);
        let t = sample_from_logits(row, temperature, rng)?;
        tokens.push(t);
        lps.push(log_softmax_f64(row)[t]);
    }
    Ok((tokens, lps))
}

fn generate_with<F, R>(
    gen: &GenerationPlan,
    temperature: f64,
    rng: &mut R,
    mut step: F,
) -> Result<GenerationOutput>
where
    F: FnMut(usize, &[usize], &[Option<usize>]) -> Result<Tensor<f64>>,
    R: Rng + ?Sized,
{
    let n = gen.plan.n();
    let mut tokens: Vec<Option<usize>> = vec![None; n];
    let mut log_probs = vec![0.0; n];
    let mut logits = vec![Vec::new(); n];
    for (call, group) in gen.groups.iter().enumerate() {
        let group_logits = step(call, group, &tokens)?;
        let (chosen, lps) = sample_group(&group_logits, temperature, rng)?;
        for (r, &pos) in group.iter().enumerate() {
            tokens[pos] = Some(chosen[r]);
            log_probs[pos] = lps[r];
            logits[pos] = group_logits.row(r).to_vec();
        }
    }
    Ok(GenerationOutput {
        tokens: tokens
            .into_iter()
            .map(|t| t.expect("every position generated"))
            .collect(),
        log_probs,
        groups: gen.groups.clone(),
        model_calls: gen.model_calls(),
        logits,
    })
}

/// Generates along `gen` with the cached decoder; one uniform draw per token in
/// processed order.
pub fn generate_with_plan<T: Scalar, R: Rng + ?Sized>(
    params: &Params<Tensor<T>>,
    cfg: &ModelConfig,
    gen: &GenerationPlan,
    temperature: f64,
    rng: &mut R,
) -> Result<GenerationOutput> {
    let mut decoder = Decoder::new(params, cfg)?;
    generate_with(gen, temperature, rng, |call, group, tokens| {
        if call > 0 {
            let prev: Vec<usize> = gen.groups[call - 1]
                .iter()
                .map(|&p| tokens[p].expect("previous group sampled"))
                .collect();
            decoder.commit(&prev)?;
        }
        Ok(decoder.predict(group)?.cast())
    })
}

pub fn generate_sequential<T: Scalar>(
    params: &Params<Tensor<T>>,
    cfg: &ModelConfig,
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<GenerationOutput> {
    let gen = GenerationPlan::sequential(n)?;
    generate_with_plan(
        params,
        cfg,
        &gen,
        temperature,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

pub fn generate_strided<T: Scalar>(
    params: &Params<Tensor<T>>,
    cfg: &ModelConfig,
    n: usize,
    s: usize,
    temperature: f64,
    seed: u64,
) -> Result<GenerationOutput> {
    let gen = GenerationPlan::strided(n, s)?;
    generate_with_plan(
        params,
        cfg,
        &gen,
        temperature,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

/// Reference decoder: every call reruns the full network over the whole plan, with
/// token 0 standing in for positions not generated yet.
pub fn generate_full_recompute<T: Scalar>(
    params: &Params<Tensor<T>>,
    cfg: &ModelConfig,
    gen: &GenerationPlan,
    temperature: f64,
    seed: u64,
) -> Result<GenerationOutput> {
    let plan = &gen.plan;
    let layout = plan.layout();
    let masks = MaskPair::from_blocks(&layout.blocks);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_with(gen, temperature, &mut rng, |_, group, tokens| {
        let original: Vec<usize> = tokens.iter().map(|t| t.unwrap_or(0)).collect();
        let processed = plan.to_processed(&original);
        let all = forward_layout(params, cfg, &processed, &layout, &masks)?;
        let rows: Vec<Vec<f64>> = group
            .iter()
            .map(|&pos| {
                all.row(plan.pi_inv()[pos])
                    .iter()
                    .map(|v| v.as_f64())
                    .collect()
            })
            .collect();
        Tensor::from_rows(&rows)
    })
}
