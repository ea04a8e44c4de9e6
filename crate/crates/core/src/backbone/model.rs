//! Forward pass with activation caching and the matching hand-written
//! reverse-mode pass.

use super::ops::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, silu, silu_grad,
    softmax_in_place, LinearGrads,
};
use super::params::{Affine, BlockNorm, BlockOffsets, FinalNorm, Linear, ParameterSet};
use super::{AdaLnMode, Real};
use crate::error::{Error, Result};
use crate::vocab::{Modality, SequenceLayout, TokenSequence};

/// Per-position logits over the extended vocabulary (real tokens + mask).
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput<T> {
    logits: Vec<T>,
    len: usize,
    width: usize,
}

impl<T: Real> DenoiserOutput<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, position: usize) -> &[T] {
        &self.logits[position * self.width..(position + 1) * self.width]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.logits
    }

    pub fn into_vec(self) -> Vec<T> {
        self.logits
    }

    /// Softmax of one row over the full extended vocabulary.
    pub fn probabilities(&self, position: usize) -> Vec<T> {
        let mut p = self.row(position).to_vec();
        softmax_in_place(&mut p);
        p
    }
}

/// Raw sinusoidal timestep features: `t` is scaled by 1000, then
/// `[sin(t f_0) .. sin(t f_{h-1}), cos(t f_0) .. cos(t f_{h-1})]` with
/// `f_i = 10000^(-i/h)`.
pub fn sinusoidal_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let scaled = 1000.0 * t;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = scaled * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Where a normalization is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormSite {
    Attention(usize),
    Mlp(usize),
    Final,
}

/// Normalized, modulated activations plus the residual gate (AdaLN-Zero only).
#[derive(Debug, Clone, PartialEq)]
pub struct Modulated<T> {
    pub z: Vec<T>,
    pub gate: Option<Vec<T>>,
}

struct CondCache<T> {
    feat: Vec<T>,
    u: Vec<T>,
    a: Vec<T>,
    c: Vec<T>,
    /// `silu(c)`: input of every modulation projection.
    sc: Vec<T>,
}

struct Mods<T> {
    mult1: Vec<T>,
    add1: Vec<T>,
    mult2: Vec<T>,
    add2: Vec<T>,
    gate1: Option<Vec<T>>,
    gate2: Option<Vec<T>>,
}

struct BlockCache<T> {
    mods: Mods<T>,
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    z1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    o: Vec<T>,
    attn_out: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    z2: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
    mlp_out: Vec<T>,
}

/// Activations retained by [`forward_cached`] for the backward pass.
pub struct ForwardCache<T> {
    ids: Vec<u32>,
    layout: SequenceLayout,
    cond: CondCache<T>,
    blocks: Vec<BlockCache<T>>,
    fin_mult: Vec<T>,
    fin_xhat: Vec<T>,
    fin_rstd: Vec<T>,
    z_f: Vec<T>,
}

fn lin_fwd<T: Real>(p: &ParameterSet<T>, l: &Linear, x: &[T], n: usize) -> Vec<T> {
    linear(
        x,
        n,
        p.slice(l.w, l.d_in * l.d_out),
        Some(p.slice(l.b, l.d_out)),
        l.d_in,
        l.d_out,
    )
}

fn lin_bwd<T: Real>(
    p: &ParameterSet<T>,
    l: &Linear,
    x: &[T],
    dy: &[T],
    n: usize,
    grad: &mut [T],
    dx: Option<&mut [T]>,
) {
    let (dw, db) = weight_and_bias_grads(grad, l);
    linear_backward(
        x,
        dy,
        n,
        p.slice(l.w, l.d_in * l.d_out),
        l.d_in,
        l.d_out,
        LinearGrads {
            dw,
            db: Some(db),
            dx,
        },
    );
}

/// Splits out the disjoint weight and bias gradient slices of a linear layer.
fn weight_and_bias_grads<'a, T>(grad: &'a mut [T], l: &Linear) -> (&'a mut [T], &'a mut [T]) {
    let nw = l.d_in * l.d_out;
    if l.w < l.b {
        let (lo, hi) = grad.split_at_mut(l.b);
        (&mut lo[l.w..l.w + nw], &mut hi[..l.d_out])
    } else {
        let (lo, hi) = grad.split_at_mut(l.w);
        (&mut hi[..nw], &mut lo[l.b..l.b + l.d_out])
    }
}

fn check_inputs<T: Real>(params: &ParameterSet<T>, x_t: &TokenSequence, t: f64) -> Result<()> {
    let cfg = params.config();
    if x_t.len() > cfg.max_len {
        return Err(Error::LengthMismatch {
            expected: cfg.max_len,
            got: x_t.len(),
        });
    }
    if let Some((p, &id)) = x_t
        .ids()
        .iter()
        .enumerate()
        .find(|(_, &id)| id as usize >= cfg.vocab_out)
    {
        return Err(Error::IdOutOfRange {
            position: p,
            id,
            lo: 0,
            hi: cfg.vocab_out as u32,
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange {
            name: "t",
            value: t,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(())
}

fn cond_forward<T: Real>(params: &ParameterSet<T>, t: f64) -> CondCache<T> {
    let d = params.config().d_model;
    match &params.offsets().time {
        Some((fc1, fc2)) => {
            let feat: Vec<T> = sinusoidal_features(t, fc1.d_in)
                .into_iter()
                .map(T::lit)
                .collect();
            let u = lin_fwd(params, fc1, &feat, 1);
            let a: Vec<T> = u.iter().map(|&x| silu(x)).collect();
            let c = lin_fwd(params, fc2, &a, 1);
            let sc = c.iter().map(|&x| silu(x)).collect();
            CondCache { feat, u, a, c, sc }
        }
        None => CondCache {
            feat: Vec::new(),
            u: Vec::new(),
            a: Vec::new(),
            c: vec![T::zero(); d],
            sc: vec![T::zero(); d],
        },
    }
}

fn embed_with_cond<T: Real>(
    params: &ParameterSet<T>,
    ids: &[u32],
    layout: SequenceLayout,
    c: &[T],
) -> Vec<T> {
    let cfg = params.config();
    let d = cfg.d_model;
    let off = params.offsets();
    let add_cond = cfg.adaln_mode == AdaLnMode::None && cfg.use_timestep;
    let mut h = vec![T::zero(); ids.len() * d];
    for (p, &id) in ids.iter().enumerate() {
        let row = &mut h[p * d..(p + 1) * d];
        let tok = params.slice(off.tok + id as usize * d, d);
        let pos = params.slice(off.pos + p * d, d);
        for ((o, &a), &b) in row.iter_mut().zip(tok).zip(pos) {
            *o = a + b;
        }
        if let Some(m) = off.modality {
            let which = match layout.modality_of(p) {
                Modality::Report => 0,
                Modality::Image => 1,
            };
            for (o, &e) in row.iter_mut().zip(params.slice(m + which * d, d)) {
                *o += e;
            }
        }
        if add_cond {
            for (o, &e) in row.iter_mut().zip(c) {
                *o += e;
            }
        }
    }
    h
}

fn block_mods<T: Real>(params: &ParameterSet<T>, norm: &BlockNorm, sc: &[T]) -> Mods<T> {
    let d = params.config().d_model;
    match norm {
        BlockNorm::Affine { ln1, ln2 } => Mods {
            mult1: params.slice(ln1.gamma, d).to_vec(),
            add1: params.slice(ln1.beta, d).to_vec(),
            mult2: params.slice(ln2.gamma, d).to_vec(),
            add2: params.slice(ln2.beta, d).to_vec(),
            gate1: None,
            gate2: None,
        },
        BlockNorm::Ada { ada, gate } => {
            let out = lin_fwd(params, ada, sc, 1);
            let one_plus = |s: &[T]| s.iter().map(|&v| T::one() + v).collect::<Vec<_>>();
            let (gate1, gate2) = match gate {
                Some(g) => {
                    let gv = lin_fwd(params, g, sc, 1);
                    (Some(gv[..d].to_vec()), Some(gv[d..].to_vec()))
                }
                None => (None, None),
            };
            Mods {
                add1: out[..d].to_vec(),
                mult1: one_plus(&out[d..2 * d]),
                add2: out[2 * d..3 * d].to_vec(),
                mult2: one_plus(&out[3 * d..]),
                gate1,
                gate2,
            }
        }
    }
}

fn modulate<T: Real>(xhat: &[T], mult: &[T], add: &[T]) -> Vec<T> {
    let d = mult.len();
    xhat.iter()
        .enumerate()
        .map(|(k, &x)| x * mult[k % d] + add[k % d])
        .collect()
}

/// Returns `(d_mult, d_add)` and accumulates `d_xhat` into `dxhat`.
fn modulate_backward<T: Real>(
    dz: &[T],
    xhat: &[T],
    mult: &[T],
    dxhat: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let d = mult.len();
    let mut dmult = vec![T::zero(); d];
    let mut dadd = vec![T::zero(); d];
    for (k, (&g, &x)) in dz.iter().zip(xhat).enumerate() {
        let j = k % d;
        dmult[j] += g * x;
        dadd[j] += g;
        dxhat[k] += g * mult[j];
    }
    (dmult, dadd)
}

fn attention_core<T: Real>(
    qkv: &[T],
    n: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let stride = 3 * d;
    let mut probs = vec![T::zero(); heads * n * n];
    let mut o = vec![T::zero(); n * d];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for i in 0..n {
            let end = if causal { i + 1 } else { n };
            let q = &qkv[i * stride + qo..i * stride + qo + dh];
            let row = &mut probs[(h * n + i) * n..(h * n + i) * n + end];
            for (j, s) in row.iter_mut().enumerate() {
                let k = &qkv[j * stride + ko..j * stride + ko + dh];
                *s = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale;
            }
            softmax_in_place(row);
            let out = &mut o[i * d + h * dh..i * d + (h + 1) * dh];
            for (j, &w) in row.iter().enumerate() {
                let v = &qkv[j * stride + vo..j * stride + vo + dh];
                for (acc, &vv) in out.iter_mut().zip(v) {
                    *acc += w * vv;
                }
            }
        }
    }
    (o, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_core_backward<T: Real>(
    qkv: &[T],
    probs: &[T],
    d_o: &[T],
    n: usize,
    d: usize,
    heads: usize,
    causal: bool,
    dqkv: &mut [T],
) {
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let stride = 3 * d;
    let mut dp = vec![T::zero(); n];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for i in 0..n {
            let end = if causal { i + 1 } else { n };
            let p = &probs[(h * n + i) * n..(h * n + i) * n + end];
            let g = &d_o[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..end {
                let v = &qkv[j * stride + vo..j * stride + vo + dh];
                dp[j] = g.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>();
                for (e, &ge) in g.iter().enumerate() {
                    dqkv[j * stride + vo + e] += p[j] * ge;
                }
            }
            let dot = (0..end).map(|j| p[j] * dp[j]).sum::<T>();
            for j in 0..end {
                let ds = p[j] * (dp[j] - dot) * scale;
                for e in 0..dh {
                    let qi = qkv[i * stride + qo + e];
                    let kj = qkv[j * stride + ko + e];
                    dqkv[i * stride + qo + e] += ds * kj;
                    dqkv[j * stride + ko + e] += ds * qi;
                }
            }
        }
    }
}

fn block_forward<T: Real>(
    params: &ParameterSet<T>,
    bo: &BlockOffsets,
    h: &[T],
    sc: &[T],
    causal: bool,
) -> (Vec<T>, BlockCache<T>) {
    let cfg = params.config();
    let d = cfg.d_model;
    let n = h.len() / d;
    let mods = block_mods(params, &bo.norm, sc);

    let (xhat1, rstd1) = layer_norm(h, n, d);
    let z1 = modulate(&xhat1, &mods.mult1, &mods.add1);
    let qkv = lin_fwd(params, &bo.qkv, &z1, n);
    let (o, probs) = attention_core(&qkv, n, d, cfg.n_heads, causal);
    let attn_out = lin_fwd(params, &bo.out, &o, n);
    let mut h_mid = h.to_vec();
    add_gated(&mut h_mid, &attn_out, mods.gate1.as_deref());

    let (xhat2, rstd2) = layer_norm(&h_mid, n, d);
    let z2 = modulate(&xhat2, &mods.mult2, &mods.add2);
    let pre = lin_fwd(params, &bo.fc1, &z2, n);
    let act: Vec<T> = pre.iter().map(|&x| gelu(x)).collect();
    let mlp_out = lin_fwd(params, &bo.fc2, &act, n);
    let mut h_out = h_mid;
    add_gated(&mut h_out, &mlp_out, mods.gate2.as_deref());

    let cache = BlockCache {
        mods,
        xhat1,
        rstd1,
        z1,
        qkv,
        probs,
        o,
        attn_out,
        xhat2,
        rstd2,
        z2,
        pre,
        act,
        mlp_out,
    };
    (h_out, cache)
}

fn add_gated<T: Real>(h: &mut [T], branch: &[T], gate: Option<&[T]>) {
    match gate {
        Some(g) => {
            let d = g.len();
            for (k, (o, &b)) in h.iter_mut().zip(branch).enumerate() {
                *o += g[k % d] * b;
            }
        }
        None => {
            for (o, &b) in h.iter_mut().zip(branch) {
                *o += b;
            }
        }
    }
}

/// Gradient through `h += gate ⊙ branch`: returns `d_branch` and `d_gate`.
fn gated_backward<T: Real>(dh: &[T], branch: &[T], gate: Option<&[T]>) -> (Vec<T>, Option<Vec<T>>) {
    match gate {
        Some(g) => {
            let d = g.len();
            let mut dg = vec![T::zero(); d];
            let db = dh
                .iter()
                .zip(branch)
                .enumerate()
                .map(|(k, (&gh, &b))| {
                    dg[k % d] += gh * b;
                    gh * g[k % d]
                })
                .collect();
            (db, Some(dg))
        }
        None => (dh.to_vec(), None),
    }
}

fn affine_grads<T: Real>(grad: &mut [T], a: &Affine, dmult: &[T], dadd: &[T]) {
    for (k, (&m, &s)) in dmult.iter().zip(dadd).enumerate() {
        grad[a.gamma + k] += m;
        grad[a.beta + k] += s;
    }
}

/// Returns the gradient w.r.t. the block input; accumulates parameter
/// gradients into `grad` and the conditioning gradient into `dsc`.
fn block_backward<T: Real>(
    params: &ParameterSet<T>,
    bo: &BlockOffsets,
    cache: &BlockCache<T>,
    sc: &[T],
    dh_out: &[T],
    causal: bool,
    grad: &mut [T],
    dsc: &mut [T],
) -> Vec<T> {
    let cfg = params.config();
    let d = cfg.d_model;
    let n = dh_out.len() / d;
    let m = &cache.mods;

    // MLP branch.
    let (dmlp, dgate2) = gated_backward(dh_out, &cache.mlp_out, m.gate2.as_deref());
    let mut dact = vec![T::zero(); n * cfg.hidden_dim()];
    lin_bwd(params, &bo.fc2, &cache.act, &dmlp, n, grad, Some(&mut dact));
    let dpre: Vec<T> = dact
        .iter()
        .zip(&cache.pre)
        .map(|(&g, &x)| g * gelu_grad(x))
        .collect();
    let mut dz2 = vec![T::zero(); n * d];
    lin_bwd(params, &bo.fc1, &cache.z2, &dpre, n, grad, Some(&mut dz2));
    let mut dxhat2 = vec![T::zero(); n * d];
    let (dmult2, dadd2) = modulate_backward(&dz2, &cache.xhat2, &m.mult2, &mut dxhat2);
    let mut dh_mid = dh_out.to_vec();
    layer_norm_backward(&dxhat2, &cache.xhat2, &cache.rstd2, n, d, &mut dh_mid);

    // Attention branch.
    let (dattn, dgate1) = gated_backward(&dh_mid, &cache.attn_out, m.gate1.as_deref());
    let mut d_o = vec![T::zero(); n * d];
    lin_bwd(params, &bo.out, &cache.o, &dattn, n, grad, Some(&mut d_o));
    let mut dqkv = vec![T::zero(); n * 3 * d];
    attention_core_backward(
        &cache.qkv,
        &cache.probs,
        &d_o,
        n,
        d,
        cfg.n_heads,
        causal,
        &mut dqkv,
    );
    let mut dz1 = vec![T::zero(); n * d];
    lin_bwd(params, &bo.qkv, &cache.z1, &dqkv, n, grad, Some(&mut dz1));
    let mut dxhat1 = vec![T::zero(); n * d];
    let (dmult1, dadd1) = modulate_backward(&dz1, &cache.xhat1, &m.mult1, &mut dxhat1);
    let mut dh_in = dh_mid;
    layer_norm_backward(&dxhat1, &cache.xhat1, &cache.rstd1, n, d, &mut dh_in);

    match &bo.norm {
        BlockNorm::Affine { ln1, ln2 } => {
            affine_grads(grad, ln1, &dmult1, &dadd1);
            affine_grads(grad, ln2, &dmult2, &dadd2);
        }
        BlockNorm::Ada { ada, gate } => {
            let dada: Vec<T> = [dadd1, dmult1, dadd2, dmult2].concat();
            lin_bwd(params, ada, sc, &dada, 1, grad, Some(dsc));
            if let (Some(g), Some(dg1), Some(dg2)) = (gate, dgate1, dgate2) {
                let dgate = [dg1, dg2].concat();
                lin_bwd(params, g, sc, &dgate, 1, grad, Some(dsc));
            }
        }
    }
    dh_in
}

fn final_mods<T: Real>(params: &ParameterSet<T>, sc: &[T]) -> (Vec<T>, Vec<T>) {
    let d = params.config().d_model;
    match &params.offsets().final_norm {
        FinalNorm::Affine(a) => (
            params.slice(a.gamma, d).to_vec(),
            params.slice(a.beta, d).to_vec(),
        ),
        FinalNorm::Ada(l) => {
            let out = lin_fwd(params, l, sc, 1);
            let mult = out[d..].iter().map(|&v| T::one() + v).collect();
            (mult, out[..d].to_vec())
        }
    }
}

/// Full forward pass retaining activations for [`backward`].
pub(crate) fn forward_cached<T: Real>(
    params: &ParameterSet<T>,
    x_t: &TokenSequence,
    t: f64,
) -> Result<(DenoiserOutput<T>, ForwardCache<T>)> {
    check_inputs(params, x_t, t)?;
    let cfg = params.config();
    let off = params.offsets();
    let n = x_t.len();
    let cond = cond_forward(params, t);
    let mut h = embed_with_cond(params, x_t.ids(), x_t.layout(), &cond.c);
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for bo in &off.blocks {
        let (next, cache) = block_forward(params, bo, &h, &cond.sc, cfg.causal);
        blocks.push(cache);
        h = next;
    }
    let (fin_xhat, fin_rstd) = layer_norm(&h, n, cfg.d_model);
    let (fin_mult, fin_add) = final_mods(params, &cond.sc);
    let z_f = modulate(&fin_xhat, &fin_mult, &fin_add);
    let logits = lin_fwd(params, &off.head, &z_f, n);
    let out = DenoiserOutput {
        logits,
        len: n,
        width: cfg.vocab_out,
    };
    let cache = ForwardCache {
        ids: x_t.ids().to_vec(),
        layout: x_t.layout(),
        cond,
        blocks,
        fin_mult,
        fin_xhat,
        fin_rstd,
        z_f,
    };
    Ok((out, cache))
}

/// Accumulates `d loss / d params` into `grad` given `d loss / d logits`.
pub(crate) fn backward<T: Real>(
    params: &ParameterSet<T>,
    cache: &ForwardCache<T>,
    dlogits: &[T],
    grad: &mut [T],
) {
    let cfg = params.config();
    let off = params.offsets();
    let d = cfg.d_model;
    let n = cache.ids.len();
    let mut dsc = vec![T::zero(); d];

    let mut dz_f = vec![T::zero(); n * d];
    lin_bwd(params, &off.head, &cache.z_f, dlogits, n, grad, Some(&mut dz_f));
    let mut dxhat = vec![T::zero(); n * d];
    let (dmult, dadd) = modulate_backward(&dz_f, &cache.fin_xhat, &cache.fin_mult, &mut dxhat);
    match &off.final_norm {
        FinalNorm::Affine(a) => affine_grads(grad, a, &dmult, &dadd),
        FinalNorm::Ada(l) => {
            let dout = [dadd, dmult].concat();
            lin_bwd(params, l, &cache.cond.sc, &dout, 1, grad, Some(&mut dsc));
        }
    }
    let mut dh = vec![T::zero(); n * d];
    layer_norm_backward(&dxhat, &cache.fin_xhat, &cache.fin_rstd, n, d, &mut dh);

    for (bo, bc) in off.blocks.iter().zip(&cache.blocks).rev() {
        dh = block_backward(params, bo, bc, &cache.cond.sc, &dh, cfg.causal, grad, &mut dsc);
    }

    // Embeddings.
    let mut dc = vec![T::zero(); d];
    let add_cond = cfg.adaln_mode == AdaLnMode::None && cfg.use_timestep;
    for (p, &id) in cache.ids.iter().enumerate() {
        let g = &dh[p * d..(p + 1) * d];
        let tok = off.tok + id as usize * d;
        let pos = off.pos + p * d;
        for (k, &gv) in g.iter().enumerate() {
            grad[tok + k] += gv;
            grad[pos + k] += gv;
        }
        if let Some(m) = off.modality {
            let which = match cache.layout.modality_of(p) {
                Modality::Report => 0,
                Modality::Image => 1,
            };
            for (k, &gv) in g.iter().enumerate() {
                grad[m + which * d + k] += gv;
            }
        }
        if add_cond {
            for (acc, &gv) in dc.iter_mut().zip(g) {
                *acc += gv;
            }
        }
    }

    if let Some((fc1, fc2)) = &off.time {
        let cond = &cache.cond;
        for ((acc, &g), &c) in dc.iter_mut().zip(&dsc).zip(&cond.c) {
            *acc += g * silu_grad(c);
        }
        let mut da = vec![T::zero(); d];
        lin_bwd(params, fc2, &cond.a, &dc, 1, grad, Some(&mut da));
        let du: Vec<T> = da
            .iter()
            .zip(&cond.u)
            .map(|(&g, &u)| g * silu_grad(u))
            .collect();
        lin_bwd(params, fc1, &cond.feat, &du, 1, grad, None);
    }
}

/// Logits `[len x vocab_out]` for a (possibly masked) sequence at time `t`.
pub fn forward<T: Real>(
    params: &ParameterSet<T>,
    x_t: &TokenSequence,
    t: f64,
) -> Result<DenoiserOutput<T>> {
    forward_cached(params, x_t, t).map(|(out, _)| out)
}

/// Timestep conditioning vector: sinusoidal features through a two-layer
/// SiLU MLP. All zeros when the backbone has no timestep embedding.
pub fn timestep_embedding<T: Real>(params: &ParameterSet<T>, t: f64) -> Result<Vec<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange {
            name: "t",
            value: t,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(cond_forward(params, t).c)
}

/// Input embedding stream: token + position (+ modality) embeddings, plus
/// the additive timestep vector when AdaLN is disabled.
pub fn embed<T: Real>(params: &ParameterSet<T>, x_t: &TokenSequence, t: f64) -> Result<Vec<T>> {
    check_inputs(params, x_t, t)?;
    let cond = cond_forward(params, t);
    Ok(embed_with_cond(params, x_t.ids(), x_t.layout(), &cond.c))
}

fn check_activations<T: Real>(params: &ParameterSet<T>, h: &[T], cond: &[T]) -> Result<()> {
    let d = params.config().d_model;
    if !h.len().is_multiple_of(d) || h.len() / d > params.config().max_len {
        return Err(Error::LengthMismatch {
            expected: d * params.config().max_len,
            got: h.len(),
        });
    }
    if cond.len() != d {
        return Err(Error::LengthMismatch {
            expected: d,
            got: cond.len(),
        });
    }
    Ok(())
}

/// One transformer block on activations `h` (`[len x d_model]`) with
/// conditioning vector `cond` (as returned by [`timestep_embedding`]).
pub fn attention_block<T: Real>(
    params: &ParameterSet<T>,
    block: usize,
    h: &[T],
    cond: &[T],
    causal: bool,
) -> Result<Vec<T>> {
    check_activations(params, h, cond)?;
    let bo = params
        .offsets()
        .blocks
        .get(block)
        .ok_or_else(|| Error::Config(format!("no block {block}")))?;
    let sc: Vec<T> = cond.iter().map(|&c| silu(c)).collect();
    Ok(block_forward(params, bo, h, &sc, causal).0)
}

/// Normalizes `h` at `site` and applies the configured modulation.
pub fn adaln_modulate<T: Real>(
    params: &ParameterSet<T>,
    site: NormSite,
    h: &[T],
    cond: &[T],
) -> Result<Modulated<T>> {
    check_activations(params, h, cond)?;
    let d = params.config().d_model;
    let n = h.len() / d;
    let sc: Vec<T> = cond.iter().map(|&c| silu(c)).collect();
    let (xhat, _) = layer_norm(h, n, d);
    let (mult, add, gate) = match site {
        NormSite::Final => {
            let (m, a) = final_mods(params, &sc);
            (m, a, None)
        }
        NormSite::Attention(b) | NormSite::Mlp(b) => {
            let bo = params
                .offsets()
                .blocks
                .get(b)
                .ok_or_else(|| Error::Config(format!("no block {b}")))?;
            let m = block_mods(params, &bo.norm, &sc);
            if matches!(site, NormSite::Attention(_)) {
                (m.mult1, m.add1, m.gate1)
            } else {
                (m.mult2, m.add2, m.gate2)
            }
        }
    };
    Ok(Modulated {
        z: modulate(&xhat, &mult, &add),
        gate,
    })
}
