//! Forward pass, exact backward pass and per-token losses.
//!
//! Each batch row is an independent causal sequence. Position `t` is scored
//! when both `t` and `t + 1` are unmasked; its target is the token at `t + 1`.

use super::params::{LayerIdx, NormIdx, Offsets, ParamLayout, Params};
use super::scalar::{gemm, Scalar, View, ViewMut};
use crate::error::{Error, Result};
use crate::par::ExecPolicy;
use crate::tokenizer::PackedBatch;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Per-position losses for a batch, row-major `[rows, seq_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLosses {
    pub seq_len: usize,
    pub nll: Vec<f64>,
    pub scored: Vec<bool>,
}

impl TokenLosses {
    pub fn count(&self) -> usize {
        self.scored.iter().filter(|&&s| s).count()
    }

    pub fn total(&self) -> f64 {
        self.nll.iter().zip(&self.scored).filter(|(_, &s)| s).map(|(l, _)| l).sum()
    }

    pub fn row_total(&self, r: usize) -> f64 {
        let span = r * self.seq_len..(r + 1) * self.seq_len;
        self.nll[span.clone()].iter().zip(&self.scored[span]).filter(|(_, &s)| s).map(|(l, _)| l).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub mean_nll: f64,
    pub losses: TokenLosses,
}

fn scored_positions(mask: &[u8]) -> Vec<bool> {
    let s = mask.len();
    (0..s).map(|t| t + 1 < s && mask[t] == 1 && mask[t + 1] == 1).collect()
}

fn check_batch<T: Scalar>(params: &Params<T>, batch: &PackedBatch) -> Result<()> {
    let cfg = &params.config;
    if batch.seq_len != cfg.seq_len {
        return Err(Error::invalid(format!(
            "batch seq_len {} does not match model seq_len {}",
            batch.seq_len, cfg.seq_len
        )));
    }
    if let Some(&id) = batch.token_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange { id, vocab_size: cfg.vocab_size });
    }
    Ok(())
}

struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

fn layer_norm<T: Scalar>(x: &[T], w: &[T], idx: NormIdx, d: usize) -> (Vec<T>, NormCache<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let gain = &w[idx.gain..idx.gain + d];
    let bias = &w[idx.bias..idx.bias + d];
    let inv_d = T::of(1.0 / d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mu = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
        let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mu) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = h * gain[i] + bias[i];
        }
    }
    (y, NormCache { xhat, rstd })
}

/// Accumulates parameter grads and returns dx.
fn layer_norm_back<T: Scalar>(
    dy: &[T],
    cache: &NormCache<T>,
    w: &[T],
    g: &mut [T],
    idx: NormIdx,
    d: usize,
) -> Vec<T> {
    let rows = dy.len() / d;
    let mut dx = vec![T::zero(); dy.len()];
    let inv_d = T::of(1.0 / d as f64);
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for i in 0..d {
            g[idx.gain + i] += dyr[i] * xh[i];
            g[idx.bias + i] += dyr[i];
            let dxh = dyr[i] * w[idx.gain + i];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[i];
        }
        mean_dxh = mean_dxh * inv_d;
        mean_dxh_xh = mean_dxh_xh * inv_d;
        let rs = cache.rstd[r];
        for i in 0..d {
            let dxh = dyr[i] * w[idx.gain + i];
            dx[r * d + i] = rs * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
        }
    }
    dx
}

/// `x·W + b` for row-major `x: rows × din`, `W: din × dout`.
fn linear<T: Scalar>(x: &[T], w: &[T], wo: usize, bo: usize, din: usize, dout: usize) -> Vec<T> {
    let rows = x.len() / din;
    let mut y = vec![T::zero(); rows * dout];
    for r in 0..rows {
        y[r * dout..(r + 1) * dout].copy_from_slice(&w[bo..bo + dout]);
    }
    gemm(
        rows,
        din,
        dout,
        T::one(),
        View::rm(x, din),
        View::rm(&w[wo..wo + din * dout], dout),
        T::one(),
        ViewMut::rm(&mut y, dout),
    );
    y
}

/// Backward of [`linear`]: accumulates dW, db and adds `dy·Wᵀ` into `dx`.
#[allow(clippy::too_many_arguments)]
fn linear_back<T: Scalar>(
    x: &[T],
    dy: &[T],
    w: &[T],
    g: &mut [T],
    wo: usize,
    bo: usize,
    din: usize,
    dout: usize,
    dx: &mut [T],
) {
    let rows = x.len() / din;
    gemm(
        din,
        rows,
        dout,
        T::one(),
        View::tr(x, din),
        View::rm(dy, dout),
        T::one(),
        ViewMut::rm(&mut g[wo..wo + din * dout], dout),
    );
    for r in 0..rows {
        for j in 0..dout {
            g[bo + j] += dy[r * dout + j];
        }
    }
    gemm(
        rows,
        dout,
        din,
        T::one(),
        View::rm(dy, dout),
        View::tr(&w[wo..wo + din * dout], dout),
        T::one(),
        ViewMut::rm(dx, din),
    );
}

fn gelu<T: Scalar>(u: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (u + T::of(GELU_A) * u * u * u);
    half * u * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(u: T) -> T {
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let th = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + th) + half * u * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * u * u)
}

struct AttnCache<T> {
    input: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    concat: Vec<T>,
}

struct MlpCache<T> {
    input: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

struct LayerCache<T> {
    ln1: NormCache<T>,
    ln2: Option<NormCache<T>>,
    attn: AttnCache<T>,
    mlp: MlpCache<T>,
}

struct Dims {
    s: usize,
    d: usize,
    f: usize,
    v: usize,
    heads: usize,
    hd: usize,
}

fn attention<T: Scalar>(h: Vec<T>, w: &[T], li: &LayerIdx, dm: &Dims) -> (Vec<T>, AttnCache<T>) {
    let (s, d, hd) = (dm.s, dm.d, dm.hd);
    let q = linear(&h, w, li.wq, li.bq, d, d);
    let k = linear(&h, w, li.wk, li.bk, d, d);
    let v = linear(&h, w, li.wv, li.bv, d, d);
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut probs = vec![T::zero(); dm.heads * s * s];
    let mut concat = vec![T::zero(); s * d];
    for head in 0..dm.heads {
        let off = head * hd;
        let p = &mut probs[head * s * s..(head + 1) * s * s];
        gemm(
            s,
            hd,
            s,
            scale,
            View { data: &q[off..], rs: d, cs: 1 },
            View { data: &k[off..], rs: 1, cs: d },
            T::zero(),
            ViewMut::rm(p, s),
        );
        for i in 0..s {
            let row = &mut p[i * s..(i + 1) * s];
            let max = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row[..=i].iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row[..=i].iter_mut() {
                *x = *x / z;
            }
            row[i + 1..].fill(T::zero());
        }
        gemm(
            s,
            s,
            hd,
            T::one(),
            View::rm(p, s),
            View { data: &v[off..], rs: d, cs: 1 },
            T::zero(),
            ViewMut { data: &mut concat[off..], rs: d, cs: 1 },
        );
    }
    let out = linear(&concat, w, li.wo, li.bo, d, d);
    (out, AttnCache { input: h, q, k, v, probs, concat })
}

/// Returns gradient w.r.t. the attention input.
fn attention_back<T: Scalar>(dout: &[T], c: &AttnCache<T>, w: &[T], g: &mut [T], li: &LayerIdx, dm: &Dims) -> Vec<T> {
    let (s, d, hd) = (dm.s, dm.d, dm.hd);
    let mut dconcat = vec![T::zero(); s * d];
    linear_back(&c.concat, dout, w, g, li.wo, li.bo, d, d, &mut dconcat);
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut dq = vec![T::zero(); s * d];
    let mut dk = vec![T::zero(); s * d];
    let mut dv = vec![T::zero(); s * d];
    let mut dp = vec![T::zero(); s * s];
    for head in 0..dm.heads {
        let off = head * hd;
        let p = &c.probs[head * s * s..(head + 1) * s * s];
        // dP = dO·Vᵀ
        gemm(
            s,
            hd,
            s,
            T::one(),
            View { data: &dconcat[off..], rs: d, cs: 1 },
            View { data: &c.v[off..], rs: 1, cs: d },
            T::zero(),
            ViewMut::rm(&mut dp, s),
        );
        // dV = Pᵀ·dO
        gemm(
            s,
            s,
            hd,
            T::one(),
            View::tr(p, s),
            View { data: &dconcat[off..], rs: d, cs: 1 },
            T::zero(),
            ViewMut { data: &mut dv[off..], rs: d, cs: 1 },
        );
        // softmax backward, reusing dp as dS
        for i in 0..s {
            let pr = &p[i * s..(i + 1) * s];
            let dr = &mut dp[i * s..(i + 1) * s];
            let dot: T = pr[..=i].iter().zip(dr[..=i].iter()).map(|(&a, &b)| a * b).sum();
            for j in 0..=i {
                dr[j] = pr[j] * (dr[j] - dot);
            }
            dr[i + 1..].fill(T::zero());
        }
        gemm(
            s,
            s,
            hd,
            scale,
            View::rm(&dp, s),
            View { data: &c.k[off..], rs: d, cs: 1 },
            T::zero(),
            ViewMut { data: &mut dq[off..], rs: d, cs: 1 },
        );
        gemm(
            s,
            s,
            hd,
            scale,
            View::tr(&dp, s),
            View { data: &c.q[off..], rs: d, cs: 1 },
            T::zero(),
            ViewMut { data: &mut dk[off..], rs: d, cs: 1 },
        );
    }
    let mut dh = vec![T::zero(); s * d];
    linear_back(&c.input, &dq, w, g, li.wq, li.bq, d, d, &mut dh);
    linear_back(&c.input, &dk, w, g, li.wk, li.bk, d, d, &mut dh);
    linear_back(&c.input, &dv, w, g, li.wv, li.bv, d, d, &mut dh);
    dh
}

fn mlp<T: Scalar>(h: Vec<T>, w: &[T], li: &LayerIdx, dm: &Dims) -> (Vec<T>, MlpCache<T>) {
    let pre = linear(&h, w, li.w_in, li.b_in, dm.d, dm.f);
    let act: Vec<T> = pre.iter().map(|&u| gelu(u)).collect();
    let out = linear(&act, w, li.w_out, li.b_out, dm.f, dm.d);
    (out, MlpCache { input: h, pre, act })
}

fn mlp_back<T: Scalar>(dout: &[T], c: &MlpCache<T>, w: &[T], g: &mut [T], li: &LayerIdx, dm: &Dims) -> Vec<T> {
    let mut dact = vec![T::zero(); c.act.len()];
    linear_back(&c.act, dout, w, g, li.w_out, li.b_out, dm.f, dm.d, &mut dact);
    for (da, &u) in dact.iter_mut().zip(&c.pre) {
        *da = *da * gelu_grad(u);
    }
    let mut dh = vec![T::zero(); c.input.len()];
    linear_back(&c.input, &dact, w, g, li.w_in, li.b_in, dm.d, dm.f, &mut dh);
    dh
}

struct RowCache<T> {
    layers: Vec<LayerCache<T>>,
    ln_f: NormCache<T>,
    final_normed: Vec<T>,
    logits: Vec<T>,
}

struct RowOutput<T> {
    nll: Vec<f64>,
    scored: Vec<bool>,
    cache: Option<RowCache<T>>,
}

fn dims(cfg: &super::ModelConfig) -> Dims {
    Dims {
        s: cfg.seq_len,
        d: cfg.d_model,
        f: cfg.d_ff,
        v: cfg.vocab_size,
        heads: cfg.n_heads,
        hd: cfg.head_dim(),
    }
}

fn row_forward<T: Scalar>(
    w: &[T],
    off: &Offsets,
    dm: &Dims,
    ids: &[u32],
    mask: &[u8],
    keep_cache: bool,
) -> RowOutput<T> {
    let (s, d, v) = (dm.s, dm.d, dm.v);
    let mut x = vec![T::zero(); s * d];
    for t in 0..s {
        let e = off.tok_emb + ids[t] as usize * d;
        let p = off.pos_emb + t * d;
        for i in 0..d {
            x[t * d + i] = w[e + i] + w[p + i];
        }
    }
    let mut layers = Vec::with_capacity(off.layers.len());
    for li in &off.layers {
        let (h1, ln1) = layer_norm(&x, w, li.ln1, d);
        match li.ln2 {
            None => {
                let (a, attn) = attention(h1.clone(), w, li, dm);
                let (m, mlp_c) = mlp(h1, w, li, dm);
                for i in 0..x.len() {
                    x[i] = x[i] + a[i] + m[i];
                }
                layers.push(LayerCache { ln1, ln2: None, attn, mlp: mlp_c });
            }
            Some(ln2_idx) => {
                let (a, attn) = attention(h1, w, li, dm);
                for i in 0..x.len() {
                    x[i] = x[i] + a[i];
                }
                let (h2, ln2) = layer_norm(&x, w, ln2_idx, d);
                let (m, mlp_c) = mlp(h2, w, li, dm);
                for i in 0..x.len() {
                    x[i] = x[i] + m[i];
                }
                layers.push(LayerCache { ln1, ln2: Some(ln2), attn, mlp: mlp_c });
            }
        }
    }
    let (xf, ln_f) = layer_norm(&x, w, off.ln_f, d);
    let mut logits = vec![T::zero(); s * v];
    gemm(
        s,
        d,
        v,
        T::one(),
        View::rm(&xf, d),
        View::tr(&w[off.head..off.head + v * d], d),
        T::zero(),
        ViewMut::rm(&mut logits, v),
    );
    let scored = scored_positions(mask);
    let mut nll = vec![0.0; s];
    for t in 0..s {
        if !scored[t] {
            continue;
        }
        let row = &logits[t * v..(t + 1) * v];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&l| (l - max).exp()).sum();
        let lse = max + z.ln();
        nll[t] = (lse - row[ids[t + 1] as usize]).as_f64();
    }
    let cache = keep_cache.then_some(RowCache { layers, ln_f, final_normed: xf, logits });
    RowOutput { nll, scored, cache }
}

/// Gradient of the summed (not averaged) row loss.
fn row_backward<T: Scalar>(
    w: &[T],
    off: &Offsets,
    dm: &Dims,
    ids: &[u32],
    scored: &[bool],
    cache: RowCache<T>,
    g: &mut [T],
) {
    let (s, d, v) = (dm.s, dm.d, dm.v);
    let mut dlogits = cache.logits;
    for t in 0..s {
        let row = &mut dlogits[t * v..(t + 1) * v];
        if !scored[t] {
            row.fill(T::zero());
            continue;
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for l in row.iter_mut() {
            *l = (*l - max).exp();
            z += *l;
        }
        for l in row.iter_mut() {
            *l = *l / z;
        }
        let target = ids[t + 1] as usize;
        row[target] = row[target] - T::one();
    }
    // head weight grad: dlogitsᵀ·xf  (v × d)
    gemm(
        v,
        s,
        d,
        T::one(),
        View::tr(&dlogits, v),
        View::rm(&cache.final_normed, d),
        T::one(),
        ViewMut::rm(&mut g[off.head..off.head + v * d], d),
    );
    let mut dxf = vec![T::zero(); s * d];
    gemm(
        s,
        v,
        d,
        T::one(),
        View::rm(&dlogits, v),
        View::rm(&w[off.head..off.head + v * d], d),
        T::zero(),
        ViewMut::rm(&mut dxf, d),
    );
    let mut dx = layer_norm_back(&dxf, &cache.ln_f, w, g, off.ln_f, d);
    for (li, lc) in off.layers.iter().zip(cache.layers).rev() {
        match (li.ln2, lc.ln2) {
            (Some(ln2_idx), Some(ln2)) => {
                let dh2 = mlp_back(&dx, &lc.mlp, w, g, li, dm);
                let dmid = layer_norm_back(&dh2, &ln2, w, g, ln2_idx, d);
                for i in 0..dx.len() {
                    dx[i] += dmid[i];
                }
                let dh1 = attention_back(&dx, &lc.attn, w, g, li, dm);
                let din = layer_norm_back(&dh1, &lc.ln1, w, g, li.ln1, d);
                for i in 0..dx.len() {
                    dx[i] += din[i];
                }
            }
            _ => {
                let mut dh = attention_back(&dx, &lc.attn, w, g, li, dm);
                let dh_m = mlp_back(&dx, &lc.mlp, w, g, li, dm);
                for i in 0..dh.len() {
                    dh[i] += dh_m[i];
                }
                let din = layer_norm_back(&dh, &lc.ln1, w, g, li.ln1, d);
                for i in 0..dx.len() {
                    dx[i] += din[i];
                }
            }
        }
    }
    for t in 0..s {
        let e = off.tok_emb + ids[t] as usize * d;
        let p = off.pos_emb + t * d;
        for i in 0..d {
            g[e + i] += dx[t * d + i];
            g[p + i] += dx[t * d + i];
        }
    }
}

fn assemble_losses(seq_len: usize, rows: Vec<(Vec<f64>, Vec<bool>)>) -> TokenLosses {
    let mut nll = Vec::with_capacity(rows.len() * seq_len);
    let mut scored = Vec::with_capacity(rows.len() * seq_len);
    for (n, s) in rows {
        nll.extend(n);
        scored.extend(s);
    }
    TokenLosses { seq_len, nll, scored }
}

/// Per-token losses without the zero-count check; used by evaluation.
pub fn token_losses<T: Scalar>(params: &Params<T>, batch: &PackedBatch, policy: ExecPolicy) -> Result<TokenLosses> {
    check_batch(params, batch)?;
    let layout = ParamLayout::new(&params.config);
    let dm = dims(&params.config);
    let rows = policy.map_range(batch.rows(), |r| {
        let (ids, mask) = batch.row(r);
        let out = row_forward::<T>(&params.flat, &layout.offsets, &dm, ids, mask, false);
        (out.nll, out.scored)
    });
    Ok(assemble_losses(batch.seq_len, rows))
}

pub fn forward_nll<T: Scalar>(params: &Params<T>, batch: &PackedBatch) -> Result<ForwardOutput> {
    forward_nll_with(params, batch, ExecPolicy::default())
}

pub fn forward_nll_with<T: Scalar>(params: &Params<T>, batch: &PackedBatch, policy: ExecPolicy) -> Result<ForwardOutput> {
    let losses = token_losses(params, batch, policy)?;
    let count = losses.count();
    if count == 0 {
        return Err(Error::NoLossTokens);
    }
    Ok(ForwardOutput { mean_nll: losses.total() / count as f64, losses })
}

/// Mean loss and its exact gradient.
///
/// Rows are processed independently and their gradients summed in row
/// order, so the result does not depend on `policy`.
pub fn loss_and_grad<T: Scalar>(params: &Params<T>, batch: &PackedBatch, policy: ExecPolicy) -> Result<(f64, Params<T>)> {
    check_batch(params, batch)?;
    let layout = ParamLayout::new(&params.config);
    let dm = dims(&params.config);
    let n = params.flat.len();
    let rows = policy.map_range(batch.rows(), |r| {
        let (ids, mask) = batch.row(r);
        let out = row_forward::<T>(&params.flat, &layout.offsets, &dm, ids, mask, true);
        let count = out.scored.iter().filter(|&&s| s).count();
        let total: f64 = out.nll.iter().zip(&out.scored).filter(|(_, &s)| s).map(|(l, _)| l).sum();
        let mut g = vec![T::zero(); n];
        if count > 0 {
            let cache = out.cache.expect("cache requested");
            row_backward(&params.flat, &layout.offsets, &dm, ids, &out.scored, cache, &mut g);
        }
        (total, count, g)
    });
    let count: usize = rows.iter().map(|r| r.1).sum();
    if count == 0 {
        return Err(Error::NoLossTokens);
    }
    let total: f64 = rows.iter().map(|r| r.0).sum();
    let mut grad = vec![T::zero(); n];
    for (_, _, g) in &rows {
        for (a, &b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let inv = T::of(1.0 / count as f64);
    for x in grad.iter_mut() {
        *x = *x * inv;
    }
    Ok((total / count as f64, Params { config: params.config.clone(), flat: grad }))
}

pub fn backward<T: Scalar>(params: &Params<T>, batch: &PackedBatch) -> Result<Params<T>> {
    loss_and_grad(params, batch, ExecPolicy::default()).map(|(_, g)| g)
}
