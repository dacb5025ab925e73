//! Test-only oracles that share no code with the library's numerics.
#![allow(dead_code)]

use mixsoup::lm::{ModelConfig, Params};
use mixsoup::tokenizer::PackedBatch;

pub fn fd_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 258,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        seq_len: 6,
        init_seed: seed,
        size_tag: "fd".into(),
        parallel_blocks: true,
        tie_embeddings: true,
    }
}

fn t<'a>(p: &'a Params<f64>, name: &str) -> &'a [f64] {
    p.tensor(name).unwrap_or_else(|| panic!("missing tensor {name}"))
}

fn norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
    x.iter().enumerate().map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * gain[i] + bias[i]).collect()
}

/// `y[j] = b[j] + Σ_i x[i] W[i][j]`, W row-major `din × dout`.
fn affine(x: &[f64], w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    (0..dout).map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * dout + j]).sum::<f64>()).collect()
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh())
}

/// Naive per-token NLL for one row; `None` where the position is unscored.
pub fn naive_row_nll(p: &Params<f64>, ids: &[u32], mask: &[u8]) -> Vec<Option<f64>> {
    let c = &p.config;
    let (s, d, v, f) = (c.seq_len, c.d_model, c.vocab_size, c.d_ff);
    let hd = d / c.n_heads;
    let emb = t(p, "tok_emb");
    let pos = t(p, "pos_emb");
    let mut x: Vec<Vec<f64>> = (0..s)
        .map(|ti| (0..d).map(|i| emb[ids[ti] as usize * d + i] + pos[ti * d + i]).collect())
        .collect();
    for l in 0..c.n_layers {
        let pre = format!("layers.{l}");
        let g = |n: &str| t(p, &format!("{pre}.{n}"));
        let attend = |h: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let q: Vec<Vec<f64>> = h.iter().map(|r| affine(r, g("attn.wq"), g("attn.bq"), d)).collect();
            let k: Vec<Vec<f64>> = h.iter().map(|r| affine(r, g("attn.wk"), g("attn.bk"), d)).collect();
            let vv: Vec<Vec<f64>> = h.iter().map(|r| affine(r, g("attn.wv"), g("attn.bv"), d)).collect();
            let mut cat = vec![vec![0.0; d]; s];
            for head in 0..c.n_heads {
                for i in 0..s {
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| (0..hd).map(|e| q[i][head * hd + e] * k[j][head * hd + e]).sum::<f64>() / (hd as f64).sqrt())
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|sc| (sc - m).exp()).sum();
                    for j in 0..=i {
                        let w = (scores[j] - m).exp() / z;
                        for e in 0..hd {
                            cat[i][head * hd + e] += w * vv[j][head * hd + e];
                        }
                    }
                }
            }
            cat.iter().map(|r| affine(r, g("attn.wo"), g("attn.bo"), d)).collect()
        };
        let ff = |h: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            h.iter()
                .map(|r| {
                    let u: Vec<f64> = affine(r, g("mlp.w_in"), g("mlp.b_in"), f).into_iter().map(gelu).collect();
                    affine(&u, g("mlp.w_out"), g("mlp.b_out"), d)
                })
                .collect()
        };
        if c.parallel_blocks {
            let h: Vec<Vec<f64>> = x.iter().map(|r| norm(r, g("ln1.gain"), g("ln1.bias"))).collect();
            let a = attend(&h);
            let m = ff(&h);
            for i in 0..s {
                for e in 0..d {
                    x[i][e] += a[i][e] + m[i][e];
                }
            }
        } else {
            let h: Vec<Vec<f64>> = x.iter().map(|r| norm(r, g("ln1.gain"), g("ln1.bias"))).collect();
            let a = attend(&h);
            for i in 0..s {
                for e in 0..d {
                    x[i][e] += a[i][e];
                }
            }
            let h2: Vec<Vec<f64>> = x.iter().map(|r| norm(r, g("ln2.gain"), g("ln2.bias"))).collect();
            let m = ff(&h2);
            for i in 0..s {
                for e in 0..d {
                    x[i][e] += m[i][e];
                }
            }
        }
    }
    let head = if c.tie_embeddings { emb } else { t(p, "lm_head") };
    (0..s)
        .map(|i| {
            if i + 1 >= s || mask[i] == 0 || mask[i + 1] == 0 {
                return None;
            }
            let h = norm(&x[i], t(p, "ln_f.gain"), t(p, "ln_f.bias"));
            let logits: Vec<f64> = (0..v).map(|tok| (0..d).map(|e| h[e] * head[tok * d + e]).sum()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            Some(lse - logits[ids[i + 1] as usize])
        })
        .collect()
}

pub fn naive_mean_nll(p: &Params<f64>, batch: &PackedBatch) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..batch.rows() {
        let (ids, mask) = batch.row(r);
        for l in naive_row_nll(p, ids, mask).into_iter().flatten() {
            total += l;
            count += 1;
        }
    }
    total / count as f64
}

/// Deterministic pseudo-random batch without touching the library's RNG use.
pub fn fixture_batch(seq_len: usize, rows: usize, seed: u64, with_pad: bool) -> PackedBatch {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) as u32
    };
    let mut b = PackedBatch::new(seq_len);
    for r in 0..rows {
        let ids: Vec<u32> = (0..seq_len).map(|_| next() % 258).collect();
        let mut mask = vec![1u8; seq_len];
        if with_pad && r == rows - 1 {
            mask[seq_len - 2..].fill(0);
        }
        b.push_row(&ids, &mask);
    }
    b
}

/// Perturbs every parameter away from the init so that biases, gains and
/// embeddings all carry non-trivial values.
pub fn jitter(p: &mut Params<f64>, seed: u64, scale: f64) {
    let mut state = seed ^ 0x9E37_79B9_7F4A_7C15;
    for x in p.flat.iter_mut() {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        let u = (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
        *x += scale * u;
    }
}
