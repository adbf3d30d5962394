//! The two-stream network: token embedding, prefix aggregation into the strictly
//! causal stream, shared-weight two-stream layers, a causal stack over the strict
//! stream, and the output head. Also the shift-query baseline and a FLOPs model.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ArmdError, Result};
use crate::masks::MaskPair;
use crate::numkernel::{Scalar, Tape, Tensor, Var};
use crate::schedule::{BlockPlan, SequenceLayout};

/// How the strictly causal stream is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Prefix aggregation followed by two-stream layers.
    #[default]
    TwoStream,
    /// The query at slot `n` is the embedding at slot `n-1`, with a learned start
    /// vector at slot 0. Only valid for singleton-block plans.
    Shift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub two_stream_layers: usize,
    pub pe_dim: usize,
    /// Hidden width of each feed-forward block as a multiple of `d`.
    pub ffn_mult: usize,
    pub dropout: f64,
    pub query_mode: QueryMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 257,
            d: 64,
            heads: 4,
            layers: 4,
            two_stream_layers: 2,
            pe_dim: 16,
            ffn_mult: 4,
            dropout: 0.02,
            query_mode: QueryMode::TwoStream,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ArmdError::Config(m));
        if self.vocab == 0 || self.d == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return bad("vocab, d, heads and ffn_mult must be positive".into());
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad(format!(
                "d={} is not divisible by heads={}",
                self.d, self.heads
            ));
        }
        if !(self.d / self.heads).is_multiple_of(2) {
            return bad(format!(
                "head width {} must be even for rotary embeddings",
                self.d / self.heads
            ));
        }
        if self.two_stream_layers > self.layers {
            return bad(format!(
                "two_stream_layers={} exceeds layers={}",
                self.two_stream_layers, self.layers
            ));
        }
        if self.query_mode == QueryMode::TwoStream {
            if self.d < 4 {
                return bad("d must be at least 4 for the prefix projector".into());
            }
            if self.pe_dim == 0 || !self.pe_dim.is_multiple_of(2) {
                return bad(format!("pe_dim={} must be positive and even", self.pe_dim));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout={} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.d * self.ffn_mult
    }

    pub fn causal_layers(&self) -> usize {
        self.layers - self.two_stream_layers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<P> {
    pub gain: P,
    pub bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams<P> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams<P> {
    pub ln: NormParams<P>,
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

/// One layer updating both streams with a single set of attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStreamParams<P> {
    pub ln: NormParams<P>,
    pub attn: AttnParams<P>,
    pub ffn_x: FfnParams<P>,
    pub ffn_g: FfnParams<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalParams<P> {
    pub ln: NormParams<P>,
    pub attn: AttnParams<P>,
    pub ffn: FfnParams<P>,
}

/// Two-layer perceptron mapping sinusoidal position features to the aggregation
/// embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixParams<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

/// All model weights, generic over the leaf type so the same structure holds tensors,
/// tape handles, optimizer moments or names.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<P> {
    pub embed: P,
    pub prefix: Option<PrefixParams<P>>,
    pub shift_start: Option<P>,
    pub two_stream: Vec<TwoStreamParams<P>>,
    pub causal: Vec<CausalParams<P>>,
    pub final_ln: NormParams<P>,
    pub head_w: P,
    pub head_b: P,
}

pub type ModelParams = Params<Tensor<f32>>;

/// Canonical `(name, shape)` list in storage order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, v, h) = (cfg.d, cfg.vocab, cfg.ffn_hidden());
    let mut out = vec![("embed".to_string(), vec![v, d])];
    let push = |out: &mut Vec<(String, Vec<usize>)>, name: String, shape: Vec<usize>| {
        out.push((name, shape))
    };
    match cfg.query_mode {
        QueryMode::TwoStream => {
            let q = cfg.d / 4;
            push(&mut out, "prefix.w1".into(), vec![cfg.pe_dim, q]);
            push(&mut out, "prefix.b1".into(), vec![q]);
            push(&mut out, "prefix.w2".into(), vec![q, cfg.pe_dim]);
            push(&mut out, "prefix.b2".into(), vec![cfg.pe_dim]);
        }
        QueryMode::Shift => push(&mut out, "shift_start".into(), vec![d]),
    }
    let norm = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        out.push((format!("{p}.gain"), vec![d]));
        out.push((format!("{p}.bias"), vec![d]));
    };
    let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{p}.{w}"), vec![d, d]));
        }
    };
    let ffn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        norm(out, &format!("{p}.ln"));
        out.push((format!("{p}.w1"), vec![d, h]));
        out.push((format!("{p}.b1"), vec![h]));
        out.push((format!("{p}.w2"), vec![h, d]));
        out.push((format!("{p}.b2"), vec![d]));
    };
    for i in 0..cfg.two_stream_layers {
        let p = format!("two_stream.{i}");
        norm(&mut out, &format!("{p}.ln"));
        attn(&mut out, &format!("{p}.attn"));
        ffn(&mut out, &format!("{p}.ffn_x"));
        ffn(&mut out, &format!("{p}.ffn_g"));
    }
    for i in 0..cfg.causal_layers() {
        let p = format!("causal.{i}");
        norm(&mut out, &format!("{p}.ln"));
        attn(&mut out, &format!("{p}.attn"));
        ffn(&mut out, &format!("{p}.ffn"));
    }
    norm(&mut out, "final_ln");
    out.push(("head.w".into(), vec![d, v]));
    out.push(("head.b".into(), vec![v]));
    out
}

/// Total number of scalar weights.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    param_shapes(cfg)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

impl<P> Params<P> {
    /// Builds a parameter set by calling `f(name, shape)` for every slot in canonical order.
    pub fn build<F>(cfg: &ModelConfig, mut f: F) -> Result<Self>
    where
        F: FnMut(&str, &[usize]) -> Result<P>,
    {
        let shapes = param_shapes(cfg);
        let mut items = Vec::with_capacity(shapes.len());
        for (name, shape) in &shapes {
            items.push(f(name, shape)?);
        }
        Ok(Self::from_vec(cfg, items))
    }

    fn from_vec(cfg: &ModelConfig, items: Vec<P>) -> Self {
        let mut it = items.into_iter();
        let mut next = || it.next().expect("parameter slot");
        let embed = next();
        let (prefix, shift_start) = match cfg.query_mode {
            QueryMode::TwoStream => (
                Some(PrefixParams {
                    w1: next(),
                    b1: next(),
                    w2: next(),
                    b2: next(),
                }),
                None,
            ),
            QueryMode::Shift => (None, Some(next())),
        };
        fn norm<P>(next: &mut impl FnMut() -> P) -> NormParams<P> {
            NormParams {
                gain: next(),
                bias: next(),
            }
        }
        fn attn<P>(next: &mut impl FnMut() -> P) -> AttnParams<P> {
            AttnParams {
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
            }
        }
        fn ffn<P>(next: &mut impl FnMut() -> P) -> FfnParams<P> {
            FfnParams {
                ln: norm(next),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            }
        }
        let two_stream = (0..cfg.two_stream_layers)
            .map(|_| TwoStreamParams {
                ln: norm(&mut next),
                attn: attn(&mut next),
                ffn_x: ffn(&mut next),
                ffn_g: ffn(&mut next),
            })
            .collect();
        let causal = (0..cfg.causal_layers())
            .map(|_| CausalParams {
                ln: norm(&mut next),
                attn: attn(&mut next),
                ffn: ffn(&mut next),
            })
            .collect();
        let final_ln = norm(&mut next);
        let head_w = next();
        let head_b = next();
        Self {
            embed,
            prefix,
            shift_start,
            two_stream,
            causal,
            final_ln,
            head_w,
            head_b,
        }
    }

    /// References to every slot in canonical order.
    pub fn slots(&self) -> Vec<&P> {
        let mut out = vec![&self.embed];
        if let Some(p) = &self.prefix {
            out.extend([&p.w1, &p.b1, &p.w2, &p.b2]);
        }
        if let Some(s) = &self.shift_start {
            out.push(s);
        }
        fn ffn<'a, P>(out: &mut Vec<&'a P>, f: &'a FfnParams<P>) {
            out.extend([&f.ln.gain, &f.ln.bias, &f.w1, &f.b1, &f.w2, &f.b2]);
        }
        for l in &self.two_stream {
            out.extend([
                &l.ln.gain, &l.ln.bias, &l.attn.wq, &l.attn.wk, &l.attn.wv, &l.attn.wo,
            ]);
            ffn(&mut out, &l.ffn_x);
            ffn(&mut out, &l.ffn_g);
        }
        for l in &self.causal {
            out.extend([
                &l.ln.gain, &l.ln.bias, &l.attn.wq, &l.attn.wk, &l.attn.wv, &l.attn.wo,
            ]);
            ffn(&mut out, &l.ffn);
        }
        out.extend([
            &self.final_ln.gain,
            &self.final_ln.bias,
            &self.head_w,
            &self.head_b,
        ]);
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.embed];
        if let Some(p) = &mut self.prefix {
            out.extend([&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2]);
        }
        if let Some(s) = &mut self.shift_start {
            out.push(s);
        }
        fn ffn<'a, P>(out: &mut Vec<&'a mut P>, f: &'a mut FfnParams<P>) {
            out.extend([
                &mut f.ln.gain,
                &mut f.ln.bias,
                &mut f.w1,
                &mut f.b1,
                &mut f.w2,
                &mut f.b2,
            ]);
        }
        for l in &mut self.two_stream {
            out.extend([
                &mut l.ln.gain,
                &mut l.ln.bias,
                &mut l.attn.wq,
                &mut l.attn.wk,
                &mut l.attn.wv,
                &mut l.attn.wo,
            ]);
            ffn(&mut out, &mut l.ffn_x);
            ffn(&mut out, &mut l.ffn_g);
        }
        for l in &mut self.causal {
            out.extend([
                &mut l.ln.gain,
                &mut l.ln.bias,
                &mut l.attn.wq,
                &mut l.attn.wk,
                &mut l.attn.wv,
                &mut l.attn.wo,
            ]);
            ffn(&mut out, &mut l.ffn);
        }
        out.extend([
            &mut self.final_ln.gain,
            &mut self.final_ln.bias,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    /// Applies `f` to every slot, keeping the structure.
    pub fn map<Q>(&self, cfg: &ModelConfig, mut f: impl FnMut(&P) -> Q) -> Params<Q> {
        Params::from_vec(cfg, self.slots().into_iter().map(&mut f).collect())
    }
}

impl<T: Scalar> Params<Tensor<T>> {
    /// Random initialization: N(0, 0.02) matrices, with residual output projections
    /// scaled down by `sqrt(2 * layers)`; unit gains and zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let std = 0.02;
        let residual_std = std / ((2 * cfg.layers.max(1)) as f64).sqrt();
        Self::build(cfg, |name, shape| {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".gain") {
                vec![T::one(); n]
            } else if shape.len() == 1 && name != "shift_start" {
                vec![T::zero(); n]
            } else {
                let s = if name.ends_with(".wo")
                    || (name.ends_with(".w2") && !name.starts_with("prefix"))
                {
                    residual_std
                } else {
                    std
                };
                let normal = Normal::new(0.0, s).expect("finite std");
                (0..n).map(|_| T::of(normal.sample(rng))).collect()
            };
            Tensor::new(shape.to_vec(), data)
        })
    }

    pub fn cast<U: Scalar>(&self, cfg: &ModelConfig) -> Params<Tensor<U>> {
        self.map(cfg, |t| t.cast())
    }

    pub fn named(&self, cfg: &ModelConfig) -> Vec<(String, &Tensor<T>)> {
        param_shapes(cfg)
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.slots())
            .collect()
    }

    /// Checks that every slot has the shape `cfg` prescribes.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = param_shapes(cfg);
        let got = self.slots();
        if expect.len() != got.len() {
            return Err(ArmdError::Dimension(format!(
                "expected {} parameter tensors, found {}",
                expect.len(),
                got.len()
            )));
        }
        for ((name, shape), t) in expect.iter().zip(got) {
            if t.shape() != &shape[..] {
                return Err(ArmdError::Dimension(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers every tensor on `tape`, as trainable leaves or as constants.
    pub fn register(&self, cfg: &ModelConfig, tape: &mut Tape<T>, trainable: bool) -> Params<Var> {
        self.map(cfg, |t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }
}

/// Causal and strictly causal stream values.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState<T> {
    pub x: Tensor<T>,
    pub g: Tensor<T>,
}

/// Random dropout source for training passes.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

impl Dropout<'_> {
    fn mask<T: Scalar>(&mut self, len: usize) -> Vec<T> {
        let keep = T::of(1.0 / (1.0 - self.rate));
        (0..len)
            .map(|_| {
                if self.rng.gen::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect()
    }
}

fn drop_mask<T: Scalar>(drop: &mut Option<Dropout<'_>>, len: usize) -> Option<Vec<T>> {
    match drop {
        Some(d) if d.rate > 0.0 => Some(d.mask(len)),
        _ => None,
    }
}

/// Sinusoidal features of the given positions: `sin` in even columns and `cos` in odd.
pub fn sinusoidal_table<T: Scalar>(positions: &[usize], dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..dim / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data.push(T::of(angle.sin()));
            data.push(T::of(angle.cos()));
        }
    }
    Tensor::new(vec![positions.len(), dim], data).expect("table shape")
}

fn dropout_apply<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    drop: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    match drop_mask::<T>(drop, tape.value(x).numel()) {
        Some(m) => {
            let m = tape.constant(Tensor::new(shape, m)?);
            tape.mul(x, m)
        }
        None => Ok(x),
    }
}

/// Rotated keys and values of the normalized inputs `h`.
pub fn project_kv<T: Scalar>(
    tape: &mut Tape<T>,
    attn: &AttnParams<Var>,
    h: Var,
    positions: &[usize],
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    let k = tape.matmul(h, attn.wk)?;
    let k = tape.rope(k, positions, cfg.head_dim())?;
    let v = tape.matmul(h, attn.wv)?;
    Ok((k, v))
}

/// Attention of the normalized queries `h` over precomputed keys and values, followed
/// by the output projection.
#[allow(clippy::too_many_arguments)]
pub fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    attn: &AttnParams<Var>,
    h: Var,
    positions: &[usize],
    k: Var,
    v: Var,
    allowed: &[bool],
    cfg: &ModelConfig,
    drop: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let q = tape.matmul(h, attn.wq)?;
    let q = tape.rope(q, positions, cfg.head_dim())?;
    let nq = tape.value(q).shape()[0];
    let nk = tape.value(k).shape()[0];
    let mask = drop_mask::<T>(drop, cfg.heads * nq * nk);
    let a = tape.attention(q, k, v, allowed, cfg.heads, mask)?;
    tape.matmul(a, attn.wo)
}

/// `x + FFN(LN(x))` with GELU and output dropout.
pub fn ffn_residual<T: Scalar>(
    tape: &mut Tape<T>,
    f: &FfnParams<Var>,
    x: Var,
    drop: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let h = tape.layer_norm(x, f.ln.gain, f.ln.bias)?;
    let h = tape.matmul(h, f.w1)?;
    let h = tape.add_row(h, f.b1)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, f.w2)?;
    let h = tape.add_row(h, f.b2)?;
    let h = dropout_apply(tape, h, drop)?;
    tape.add(x, h)
}

/// Learned aggregation embeddings of the given original positions, `[n, pe_dim]`.
pub fn prefix_embedding<T: Scalar>(
    tape: &mut Tape<T>,
    p: &PrefixParams<Var>,
    positions: &[usize],
    pe_dim: usize,
) -> Result<Var> {
    let table = tape.constant(sinusoidal_table(positions, pe_dim));
    let h = tape.matmul(table, p.w1)?;
    let h = tape.add_row(h, p.b1)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, p.w2)?;
    tape.add_row(h, p.b2)
}

/// Linear-attention initialization of the strict stream: row `n` is the sum over
/// earlier-block slots `i` of `<pe_n, pe_i> x_i`.
pub fn prefix_aggregate_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    p: &PrefixParams<Var>,
    x: Var,
    layout: &SequenceLayout,
    masks: &MaskPair,
    pe_dim: usize,
) -> Result<Var> {
    let n = layout.len();
    let pe = prefix_embedding(tape, p, &layout.positions, pe_dim)?;
    let coupling = tape.matmul_nt(pe, pe)?;
    let binary: Vec<T> = masks
        .strict
        .allowed()
        .iter()
        .map(|&a| if a { T::one() } else { T::zero() })
        .collect();
    let binary = tape.constant(Tensor::new(vec![n, n], binary)?);
    let coupling = tape.mul(coupling, binary)?;
    tape.matmul(coupling, x)
}

/// One two-stream layer. Both streams share the pre-norm and attention weights; keys
/// and values come from the causal stream. With `update_x == false` the causal
/// stream is passed through unchanged.
#[allow(clippy::too_many_arguments)]
pub fn two_stream_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    l: &TwoStreamParams<Var>,
    x: Var,
    g: Var,
    layout: &SequenceLayout,
    masks: &MaskPair,
    cfg: &ModelConfig,
    update_x: bool,
    drop: &mut Option<Dropout<'_>>,
) -> Result<(Var, Var)> {
    let pos = &layout.positions;
    let hx = tape.layer_norm(x, l.ln.gain, l.ln.bias)?;
    let hg = tape.layer_norm(g, l.ln.gain, l.ln.bias)?;
    let (k, v) = project_kv(tape, &l.attn, hx, pos, cfg)?;
    let ag = attend(
        tape,
        &l.attn,
        hg,
        pos,
        k,
        v,
        masks.strict.allowed(),
        cfg,
        drop,
    )?;
    let g = tape.add(g, ag)?;
    let g = ffn_residual(tape, &l.ffn_g, g, drop)?;
    let x = if update_x {
        let ax = attend(
            tape,
            &l.attn,
            hx,
            pos,
            k,
            v,
            masks.causal.allowed(),
            cfg,
            drop,
        )?;
        let x = tape.add(x, ax)?;
        ffn_residual(tape, &l.ffn_x, x, drop)?
    } else {
        x
    };
    Ok((x, g))
}

/// Normalized inputs, keys and values of a causal layer.
pub fn causal_layer_inputs<T: Scalar>(
    tape: &mut Tape<T>,
    l: &CausalParams<Var>,
    g: Var,
    positions: &[usize],
    cfg: &ModelConfig,
) -> Result<(Var, Var, Var)> {
    let h = tape.layer_norm(g, l.ln.gain, l.ln.bias)?;
    let (k, v) = project_kv(tape, &l.attn, h, positions, cfg)?;
    Ok((h, k, v))
}

/// Standard pre-norm causal layer over the strict stream.
pub fn causal_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    l: &CausalParams<Var>,
    g: Var,
    layout: &SequenceLayout,
    masks: &MaskPair,
    cfg: &ModelConfig,
    drop: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let pos = &layout.positions;
    let (h, k, v) = causal_layer_inputs(tape, l, g, pos, cfg)?;
    let a = attend(
        tape,
        &l.attn,
        h,
        pos,
        k,
        v,
        masks.causal.allowed(),
        cfg,
        drop,
    )?;
    let g = tape.add(g, a)?;
    ffn_residual(tape, &l.ffn, g, drop)
}

/// Handles to the interesting intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub embedded: Var,
    pub g0: Var,
    /// Causal stream after its last update.
    pub x: Var,
    /// Strict stream before the final norm.
    pub g: Var,
    pub logits: Var,
}

/// Records a full forward pass. `tokens` are in processed order, one per layout slot.
#[allow(clippy::too_many_arguments)]
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Params<Var>,
    cfg: &ModelConfig,
    tokens: &[usize],
    layout: &SequenceLayout,
    masks: &MaskPair,
    drop: &mut Option<Dropout<'_>>,
) -> Result<ForwardVars> {
    let n = layout.len();
    if tokens.len() != n || layout.blocks.len() != n {
        return Err(ArmdError::Validation(format!(
            "{} tokens for a layout of {n} slots",
            tokens.len()
        )));
    }
    if masks.causal.n() != n || masks.strict.n() != n {
        return Err(ArmdError::Dimension(format!(
            "masks of side {} for {n} slots",
            masks.causal.n()
        )));
    }
    let embedded = tape.embedding(params.embed, tokens)?;
    let g0 = match cfg.query_mode {
        QueryMode::TwoStream => {
            let p = params.prefix.as_ref().ok_or_else(|| {
                ArmdError::Config("two-stream mode needs prefix projector weights".into())
            })?;
            prefix_aggregate_on_tape(tape, p, embedded, layout, masks, cfg.pe_dim)?
        }
        QueryMode::Shift => {
            if !layout.is_sequential() {
                return Err(ArmdError::Validation(
                    "shift queries need singleton blocks in processed order".into(),
                ));
            }
            let start = params
                .shift_start
                .ok_or_else(|| ArmdError::Config("shift mode needs a start vector".into()))?;
            tape.shift_rows(embedded, start)?
        }
    };
    let (mut x, mut g) = (embedded, g0);
    let count = params.two_stream.len();
    for (i, l) in params.two_stream.iter().enumerate() {
        (x, g) = two_stream_on_tape(tape, l, x, g, layout, masks, cfg, i + 1 < count, drop)?;
    }
    for l in &params.causal {
        g = causal_on_tape(tape, l, g, layout, masks, cfg, drop)?;
    }
    let h = tape.layer_norm(g, params.final_ln.gain, params.final_ln.bias)?;
    let logits = tape.matmul(h, params.head_w)?;
    let logits = tape.add_row(logits, params.head_b)?;
    Ok(ForwardVars {
        embedded,
        g0,
        x,
        g,
        logits,
    })
}

/// Logits `[n, vocab]` for tokens given in the plan's processed order.
pub fn forward<T: Scalar>(
    params: &Params<Tensor<T>>,
    cfg: &ModelConfig,
    tokens: &[usize],
    plan: &BlockPlan,
) -> Result<Tensor<T>> {
    let layout = plan.layout();
    let masks = MaskPair::from_blocks(&layout.blocks);
    forward_layout(params, cfg, tokens, &layout, &masks)
}

/// Like [`forward`] for an arbitrary layout and explicit masks.
pub fn forward_layout<T: Scalar>(
    params: &Params<Tensor<T>>,
    cfg: &ModelConfig,
    tokens: &[usize],
    layout: &SequenceLayout,
    masks: &MaskPair,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = params.register(cfg, &mut tape, false);
    let out = forward_on_tape(&mut tape, &p, cfg, tokens, layout, masks, &mut None)?;
    Ok(tape.value(out.logits).clone())
}

/// Final stream values alongside the logits.
pub fn forward_streams<T: Scalar>(
    params: &Params<Tensor<T>>,
    cfg: &ModelConfig,
    tokens: &[usize],
    plan: &BlockPlan,
) -> Result<(StreamState<T>, Tensor<T>)> {
    let layout = plan.layout();
    let masks = MaskPair::from_blocks(&layout.blocks);
    let mut tape = Tape::new();
    let p = params.register(cfg, &mut tape, false);
    let out = forward_on_tape(&mut tape, &p, cfg, tokens, &layout, &masks, &mut None)?;
    let state = StreamState {
        x: tape.value(out.x).clone(),
        g: tape.value(out.g).clone(),
    };
    Ok((state, tape.value(out.logits).clone()))
}

fn register_group<T: Scalar, const N: usize>(tape: &mut Tape<T>, ts: [&Tensor<T>; N]) -> [Var; N] {
    ts.map(|t| tape.constant(t.clone()))
}

fn norm_vars<T: Scalar>(tape: &mut Tape<T>, p: &NormParams<Tensor<T>>) -> NormParams<Var> {
    let [gain, bias] = register_group(tape, [&p.gain, &p.bias]);
    NormParams { gain, bias }
}

fn attn_vars<T: Scalar>(tape: &mut Tape<T>, p: &AttnParams<Tensor<T>>) -> AttnParams<Var> {
    let [wq, wk, wv, wo] = register_group(tape, [&p.wq, &p.wk, &p.wv, &p.wo]);
    AttnParams { wq, wk, wv, wo }
}

fn ffn_vars<T: Scalar>(tape: &mut Tape<T>, p: &FfnParams<Tensor<T>>) -> FfnParams<Var> {
    let ln = norm_vars(tape, &p.ln);
    let [w1, b1, w2, b2] = register_group(tape, [&p.w1, &p.b1, &p.w2, &p.b2]);
    FfnParams { ln, w1, b1, w2, b2 }
}

/// Strict-stream initialization from embedded tokens `[n, d]` in processed order.
pub fn prefix_aggregate<T: Scalar>(
    x_embedded: &Tensor<T>,
    layout: &SequenceLayout,
    prefix: &PrefixParams<Tensor<T>>,
    pe_dim: usize,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let [w1, b1, w2, b2] =
        register_group(&mut tape, [&prefix.w1, &prefix.b1, &prefix.w2, &prefix.b2]);
    let p = PrefixParams { w1, b1, w2, b2 };
    let x = tape.constant(x_embedded.clone());
    let masks = MaskPair::from_blocks(&layout.blocks);
    let g = prefix_aggregate_on_tape(&mut tape, &p, x, layout, &masks, pe_dim)?;
    Ok(tape.value(g).clone())
}

fn check_state<T: Scalar>(state: &StreamState<T>, n: usize, d: usize) -> Result<()> {
    for t in [&state.x, &state.g] {
        if t.shape() != [n, d] {
            return Err(ArmdError::Dimension(format!(
                "stream of shape {:?}, expected [{n},{d}]",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// One two-stream layer on concrete tensors, without dropout.
pub fn two_stream_layer<T: Scalar>(
    state: &StreamState<T>,
    layout: &SequenceLayout,
    masks: &MaskPair,
    layer: &TwoStreamParams<Tensor<T>>,
    cfg: &ModelConfig,
) -> Result<StreamState<T>> {
    check_state(state, layout.len(), cfg.d)?;
    let mut tape = Tape::new();
    let l = TwoStreamParams {
        ln: norm_vars(&mut tape, &layer.ln),
        attn: attn_vars(&mut tape, &layer.attn),
        ffn_x: ffn_vars(&mut tape, &layer.ffn_x),
        ffn_g: ffn_vars(&mut tape, &layer.ffn_g),
    };
    let x = tape.constant(state.x.clone());
    let g = tape.constant(state.g.clone());
    let (x, g) = two_stream_on_tape(&mut tape, &l, x, g, layout, masks, cfg, true, &mut None)?;
    Ok(StreamState {
        x: tape.value(x).clone(),
        g: tape.value(g).clone(),
    })
}

/// One causal layer on concrete tensors, without dropout.
pub fn causal_layer<T: Scalar>(
    g: &Tensor<T>,
    layout: &SequenceLayout,
    masks: &MaskPair,
    layer: &CausalParams<Tensor<T>>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    if g.shape() != [layout.len(), cfg.d] {
        return Err(ArmdError::Dimension(format!(
            "stream of shape {:?}, expected [{},{}]",
            g.shape(),
            layout.len(),
            cfg.d
        )));
    }
    let mut tape = Tape::new();
    let l = CausalParams {
        ln: norm_vars(&mut tape, &layer.ln),
        attn: attn_vars(&mut tape, &layer.attn),
        ffn: ffn_vars(&mut tape, &layer.ffn),
    };
    let gv = tape.constant(g.clone());
    let out = causal_on_tape(&mut tape, &l, gv, layout, masks, cfg, &mut None)?;
    Ok(tape.value(out).clone())
}

/// Feed-forward width ratio of a gated three-matrix block, which costs the same as an
/// ungated block of width `4d`.
pub const DEFAULT_FFN_EXPANSION: f64 = 8.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopsEstimate {
    /// Per-layer cost of a standard causal layer.
    pub c_std: f64,
    /// Extra per-layer cost of the strict stream in a two-stream layer.
    pub c_extra: f64,
    pub total: f64,
    /// `total` over the cost of an all-standard stack of the same depth.
    pub ratio: f64,
}

/// Forward FLOPs of the layer stack, counting two FLOPs per multiply-add.
///
/// A standard layer costs `(8 + 6e) n d^2 + 4 n^2 d`: four attention projections, a
/// gated feed-forward of width `e d`, scores and mixing. The strict stream adds its
/// query and output projections, its own feed-forward and a second attention.
pub fn flops_estimate(
    n: usize,
    d: usize,
    l: usize,
    l2s: usize,
    ffn_expansion: f64,
) -> Result<FlopsEstimate> {
    if l == 0 || l2s > l {
        return Err(ArmdError::Validation(format!(
            "need 0 <= l2s <= l and l > 0, got l={l} l2s={l2s}"
        )));
    }
    let (n, d) = (n as f64, d as f64);
    let dense = n * d * d;
    let attn = 4.0 * n * n * d;
    let c_std = (8.0 + 6.0 * ffn_expansion) * dense + attn;
    let c_extra = (4.0 + 6.0 * ffn_expansion) * dense + attn;
    let total = l2s as f64 * (c_std + c_extra) + (l - l2s) as f64 * c_std;
    Ok(FlopsEstimate {
        c_std,
        c_extra,
        total,
        ratio: total / (l as f64 * c_std),
    })
}
