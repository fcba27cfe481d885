//! Straight-line loop re-computations, independent of the tape.

#![allow(dead_code)]

use rbwp_core::backbone::{Encoder, EncoderBlock, PrefixPair};
use rbwp_core::evolution::LayerWeights;
use rbwp_core::Array;

pub type M = Vec<Vec<f64>>;

const LN_EPS: f64 = 1e-6;

pub fn rows(a: &Array) -> M {
    let s = a.shape();
    assert_eq!(s.len(), 2, "expected a matrix, got {s:?}");
    (0..s[0]).map(|r| a.data()[r * s[1]..(r + 1) * s[1]].to_vec()).collect()
}

pub fn slices(a: &Array) -> Vec<M> {
    (0..a.shape()[0]).map(|i| rows(&a.index_leading(i))).collect()
}

pub fn matmul(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for x in 0..k {
                s += a[i][x] * b[x][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &x in v {
        if x > max {
            max = x;
        }
    }
    let mut e = Vec::with_capacity(v.len());
    let mut total = 0.0;
    for &x in v {
        let y = (x - max).exp();
        e.push(y);
        total += y;
    }
    e.iter().map(|y| y / total).collect()
}

pub fn layer_norm(row: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = row.len() as f64;
    let mut mean = 0.0;
    for &x in row {
        mean += x;
    }
    mean /= d;
    let mut var = 0.0;
    for &x in row {
        var += (x - mean) * (x - mean);
    }
    var /= d;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    (0..row.len()).map(|j| (row[j] - mean) * inv * gamma[j] + beta[j]).collect()
}

fn ln_rows(m: &M, gamma: &Array, beta: &Array) -> M {
    m.iter().map(|r| layer_norm(r, gamma.data(), beta.data())).collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Task conditioning of one slice: `(weights over rows, conditioned slice)`.
pub fn condition(slice: &M, e: &[f64]) -> (Vec<f64>, M) {
    let d = e.len();
    let logits: Vec<f64> = slice
        .iter()
        .map(|r| r.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
        .collect();
    let w = softmax(&logits);
    let mut mixed = vec![0.0; d];
    for (r, wr) in slice.iter().zip(&w) {
        for j in 0..d {
            mixed[j] += wr * r[j];
        }
    }
    (w, vec![mixed; slice.len()])
}

/// `(G, Ṽ)` for one slice.
pub fn task_level(q: &M, k: &M, v: &M) -> (M, M) {
    let dp = q[0].len() as f64;
    let mut g = Vec::new();
    for qa in q {
        let logits: Vec<f64> = k
            .iter()
            .map(|kb| qa.iter().zip(kb).map(|(x, y)| x * y).sum::<f64>() / dp.sqrt())
            .collect();
        g.push(softmax(&logits));
    }
    let vt = matmul(&g, v);
    (g, vt)
}

/// `(F, V̂)` for one slice; V̂ is `D_p × L_p`.
pub fn feature_level(q: &M, k: &M, v_tilde: &M) -> (M, M) {
    let (lp, dp) = (q.len(), q[0].len());
    let mut f = Vec::new();
    for a in 0..dp {
        let mut logits = vec![0.0; dp];
        for (b, logit) in logits.iter_mut().enumerate() {
            let mut s = 0.0;
            for r in 0..lp {
                s += q[r][a] * k[r][b];
            }
            *logit = s / (dp as f64).sqrt();
        }
        f.push(softmax(&logits));
    }
    let vh = matmul(&f, &transpose(v_tilde));
    (f, vh)
}

pub fn integrate(slice: &M, v_hat: &M, w: &LayerWeights) -> M {
    let r = matmul(&transpose(v_hat), &rows(&w.wo));
    ln_rows(&add(slice, &r), &w.ln1_gamma, &w.ln1_beta)
}

pub fn align(h: &M, w: &LayerWeights) -> M {
    let mut a = matmul(h, &rows(&w.w1));
    for r in &mut a {
        for x in r.iter_mut() {
            *x = x.max(0.0);
        }
    }
    let a = matmul(&a, &rows(&w.w2));
    ln_rows(&add(h, &a), &w.ln2_gamma, &w.ln2_beta)
}

/// Unified prompt of one layer from per-task slices, the newest prompt and `e`.
pub fn evolve_layer(pool: &[M], new_prompt: &M, e: &[f64], w: &LayerWeights) -> M {
    let q = matmul(new_prompt, &rows(&w.wq));
    let mut total: Option<M> = None;
    for slice in pool {
        let (_, c) = condition(slice, e);
        let k = matmul(&c, &rows(&w.wk));
        let v = matmul(&c, &rows(&w.wv));
        let (_, vt) = task_level(&q, &k, &v);
        let (_, vh) = feature_level(&q, &k, &vt);
        let h = integrate(&c, &vh, w);
        let p = align(&h, w);
        total = Some(match total {
            None => p,
            Some(t) => add(&t, &p),
        });
    }
    let t = pool.len() as f64;
    total.unwrap().iter().map(|r| r.iter().map(|x| x / t).collect()).collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn affine(x: &M, w: &Array, b: &Array) -> M {
    let mut out = matmul(x, &rows(w));
    for r in &mut out {
        for (v, bias) in r.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    out
}

/// Multi-head attention of one sample with an optional prefix, before the
/// residual add. Returns the output and the attention weights per head.
pub fn attention(x: &M, blk: &EncoderBlock, heads: usize, prefix: Option<&PrefixPair>) -> (M, Vec<M>) {
    let d = x[0].len();
    let hd = d / heads;
    let q = affine(x, &blk.wq, &blk.bq);
    let mut k = affine(x, &blk.wk, &blk.bk);
    let mut v = affine(x, &blk.wv, &blk.bv);
    if let Some(p) = prefix {
        let mut pk = rows(&p.key);
        pk.extend(k);
        k = pk;
        let mut pv = rows(&p.value);
        pv.extend(v);
        v = pv;
    }
    let mut ctx = vec![vec![0.0; d]; x.len()];
    let mut weights = Vec::new();
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let mut head_w = Vec::new();
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let a = softmax(&logits);
            for c in cols.clone() {
                ctx[i][c] = a.iter().zip(&v).map(|(w, vj)| w * vj[c]).sum();
            }
            head_w.push(a);
        }
        weights.push(head_w);
    }
    (affine(&ctx, &blk.wo, &blk.bo), weights)
}

/// Class-token features of one sample `patches × D`.
pub fn encoder_features(enc: &Encoder, x: &M, prompts: &[Option<PrefixPair>]) -> Vec<f64> {
    let cfg = enc.config();
    let pos = rows(&enc.pos_embed);
    let mut h: M = vec![enc.cls_token.data().to_vec()];
    h.extend(x.iter().cloned());
    h = add(&h, &pos);
    for (blk, prefix) in enc.blocks.iter().zip(prompts) {
        let n = ln_rows(&h, &blk.ln1_gamma, &blk.ln1_beta);
        let (a, _) = attention(&n, blk, cfg.heads, prefix.as_ref());
        h = add(&h, &a);
        let n = ln_rows(&h, &blk.ln2_gamma, &blk.ln2_beta);
        let mut m = affine(&n, &blk.w1, &blk.b1);
        for r in &mut m {
            for v in r.iter_mut() {
                *v = gelu(*v);
            }
        }
        let m = affine(&m, &blk.w2, &blk.b2);
        h = add(&h, &m);
    }
    layer_norm(&h[0], enc.final_gamma.data(), enc.final_beta.data())
}

pub fn max_diff(a: &M, b: &Array) -> f64 {
    let flat: Vec<f64> = a.iter().flatten().copied().collect();
    assert_eq!(flat.len(), b.len());
    flat.iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
