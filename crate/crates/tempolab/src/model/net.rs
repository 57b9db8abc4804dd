//! Pre-norm transformer encoder with hand-derived backward pass.
//!
//! Layout conventions: token activations are row-major [n_tokens, d] slices,
//! a batch is n_seqs rows of equal padded length, and attention runs per
//! sequence with pad positions excluded from both queries and keys. The
//! output projection is tied to the token embedding.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ParameterSet, Real, Vocabulary};

/// Token id matrix with masking bookkeeping. `targets` holds the original
/// token at each masked position; `tokens` holds <mask> there.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n_seqs: usize,
    pub len: usize,
    pub tokens: Vec<u16>,
    pub mask_positions: Vec<bool>,
    pub targets: Vec<u16>,
}

impl Batch {
    /// Pad token rows to equal length. No positions are masked yet.
    pub fn from_token_rows(rows: &[Vec<u16>]) -> Result<Batch> {
        if rows.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let len = rows.iter().map(Vec::len).max().unwrap();
        let n_seqs = rows.len();
        let mut tokens = vec![Vocabulary::PAD; n_seqs * len];
        for (s, row) in rows.iter().enumerate() {
            tokens[s * len..s * len + row.len()].copy_from_slice(row);
        }
        Ok(Batch {
            n_seqs,
            len,
            tokens,
            mask_positions: vec![false; n_seqs * len],
            targets: vec![Vocabulary::PAD; n_seqs * len],
        })
    }

    pub fn n_masked(&self) -> usize {
        self.mask_positions.iter().filter(|&&m| m).count()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &masked) in self.mask_positions.iter().enumerate() {
            if masked {
                if self.tokens[i] != Vocabulary::MASK {
                    return Err(Error::Argument("masked position does not hold <mask>".into()));
                }
                if !Vocabulary::is_maskable(self.targets[i]) {
                    return Err(Error::Argument(
                        "mask target is a special or X token".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One weighted cross-entropy term of a composed loss.
#[derive(Debug)]
pub struct LossTerm<'a> {
    pub weight: f64,
    pub batch: &'a Batch,
}

struct LayerCache<T> {
    x_in: Vec<T>,
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>, // [n_seqs, n_heads, len, len]
    ctx: Vec<T>,
    x_mid: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    h_pre: Vec<T>,
    h_act: Vec<T>,
}

struct Cache<T> {
    layers: Vec<LayerCache<T>>,
    xhat_f: Vec<T>,
    rstd_f: Vec<T>,
    normed: Vec<T>,
}

// a[m,k] @ b[k,n]
fn matmul_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..kk * n + n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    });
    out
}

// a[m,k] @ b[n,k]^T
fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &a[i * k..i * k + k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..j * k + k];
            *o = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    });
    out
}

// a[k,m]^T @ b[k,n]
fn matmul_tn<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for kk in 0..k {
            let aki = a[kk * m + i];
            let brow = &b[kk * n..kk * n + n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aki * bv;
            }
        }
    });
    out
}

fn add_bias<T: Real>(x: &mut [T], bias: &[T]) {
    let n = bias.len();
    x.par_chunks_mut(n).for_each(|row| {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    });
}

/// Returns (y, xhat, rstd).
fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T], d: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let dn = T::from_f64(d as f64);
    let eps = T::from_f64(1e-5);
    y.par_chunks_mut(d)
        .zip(xhat.par_chunks_mut(d))
        .zip(rstd.par_iter_mut())
        .enumerate()
        .for_each(|(i, ((yrow, xhrow), rs))| {
            let xrow = &x[i * d..i * d + d];
            let mean = xrow.iter().copied().sum::<T>() / dn;
            let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = (var + eps).sqrt().recip();
            *rs = r;
            for j in 0..d {
                let xh = (xrow[j] - mean) * r;
                xhrow[j] = xh;
                yrow[j] = xh * gain[j] + bias[j];
            }
        });
    (y, xhat, rstd)
}

/// Backward through layer norm; returns dx and accumulates dgain/dbias.
fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    d: usize,
    dgain: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let rows = dy.len() / d;
    // Parameter grads reduce over rows; keep the reduction sequential so the
    // result does not depend on thread count.
    for i in 0..rows {
        for j in 0..d {
            let g = dy[i * d + j];
            dgain[j] = dgain[j] + g * xhat[i * d + j];
            dbias[j] = dbias[j] + g;
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    let dn = T::from_f64(d as f64);
    dx.par_chunks_mut(d).enumerate().for_each(|(i, dxrow)| {
        let dyrow = &dy[i * d..i * d + d];
        let xhrow = &xhat[i * d..i * d + d];
        let r = rstd[i];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            let dxh = dyrow[j] * gain[j];
            sum_dxhat = sum_dxhat + dxh;
            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhrow[j];
        }
        let m1 = sum_dxhat / dn;
        let m2 = sum_dxhat_xhat / dn;
        for j in 0..d {
            let dxh = dyrow[j] * gain[j];
            dxrow[j] = r * (dxh - m1 - xhrow[j] * m2);
        }
    });
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

fn check_finite<T: Real>(x: &[T], context: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            context: context.to_string(),
            msg: "non-finite activation".into(),
        });
    }
    Ok(())
}

fn valid_positions(batch: &Batch, seq: usize) -> Vec<usize> {
    (0..batch.len)
        .filter(|&i| batch.tokens[seq * batch.len + i] != Vocabulary::PAD)
        .collect()
}

fn forward_full<T: Real>(params: &ParameterSet<T>, batch: &Batch) -> Result<(Vec<T>, Cache<T>)> {
    batch.validate()?;
    let cfg = &params.config;
    let d = cfg.d_model;
    let n = batch.n_seqs * batch.len;
    if batch.len > cfg.max_len {
        return Err(Error::Argument(format!(
            "batch length {} exceeds max_len {}",
            batch.len, cfg.max_len
        )));
    }

    let tok_embed = params.get("tok_embed").unwrap();
    let pos_embed = params.get("pos_embed").unwrap();
    let mut x = vec![T::zero(); n * d];
    for i in 0..n {
        let tok = batch.tokens[i] as usize;
        let pos = i % batch.len;
        let e = tok_embed.row(tok);
        let p = pos_embed.row(pos);
        for j in 0..d {
            x[i * d + j] = e[j] + p[j];
        }
    }

    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let valids: Vec<Vec<usize>> = (0..batch.n_seqs).map(|s| valid_positions(batch, s)).collect();

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        let g1 = params.get(&p("attn_norm.gain")).unwrap();
        let b1 = params.get(&p("attn_norm.bias")).unwrap();
        let (n1, xhat1, rstd1) = layer_norm(&x, &g1.data, &b1.data, d);

        let mut q = matmul_nn(&n1, &params.get(&p("attn.wq")).unwrap().data, n, d, d);
        add_bias(&mut q, &params.get(&p("attn.bq")).unwrap().data);
        let mut k = matmul_nn(&n1, &params.get(&p("attn.wk")).unwrap().data, n, d, d);
        add_bias(&mut k, &params.get(&p("attn.bk")).unwrap().data);
        let mut v = matmul_nn(&n1, &params.get(&p("attn.wv")).unwrap().data, n, d, d);
        add_bias(&mut v, &params.get(&p("attn.bv")).unwrap().data);

        let len = batch.len;
        let mut probs = vec![T::zero(); batch.n_seqs * heads * len * len];
        let mut ctx = vec![T::zero(); n * d];
        ctx.par_chunks_mut(len * d)
            .zip(probs.par_chunks_mut(heads * len * len))
            .enumerate()
            .for_each(|(s, (ctx_s, probs_s))| {
                let valid = &valids[s];
                let base = s * len * d;
                for h in 0..heads {
                    let ho = h * dh;
                    for &i in valid {
                        let qrow = &q[base + i * d + ho..base + i * d + ho + dh];
                        // scores over valid keys
                        let mut maxs = T::neg_infinity();
                        let mut scores: Vec<T> = Vec::with_capacity(valid.len());
                        for &j in valid {
                            let krow = &k[base + j * d + ho..base + j * d + ho + dh];
                            let s_ij = qrow
                                .iter()
                                .zip(krow)
                                .map(|(&a, &b)| a * b)
                                .sum::<T>()
                                * scale;
                            if s_ij > maxs {
                                maxs = s_ij;
                            }
                            scores.push(s_ij);
                        }
                        let mut denom = T::zero();
                        for sc in scores.iter_mut() {
                            *sc = (*sc - maxs).exp();
                            denom = denom + *sc;
                        }
                        let prow = &mut probs_s[h * len * len + i * len..h * len * len + i * len + len];
                        for (jj, &j) in valid.iter().enumerate() {
                            prow[j] = scores[jj] / denom;
                        }
                        let crow = &mut ctx_s[i * d + ho..i * d + ho + dh];
                        for &j in valid {
                            let pij = prow[j];
                            let vrow = &v[base + j * d + ho..base + j * d + ho + dh];
                            for (c, &vv) in crow.iter_mut().zip(vrow) {
                                *c = *c + pij * vv;
                            }
                        }
                    }
                }
            });

        let mut attn_out = matmul_nn(&ctx, &params.get(&p("attn.wo")).unwrap().data, n, d, d);
        add_bias(&mut attn_out, &params.get(&p("attn.bo")).unwrap().data);
        let x_in = x.clone();
        for (xi, ai) in x.iter_mut().zip(&attn_out) {
            *xi = *xi + *ai;
        }
        let x_mid = x.clone();

        let g2 = params.get(&p("ffn_norm.gain")).unwrap();
        let b2 = params.get(&p("ffn_norm.bias")).unwrap();
        let (n2, xhat2, rstd2) = layer_norm(&x, &g2.data, &b2.data, d);
        let mut h_pre = matmul_nn(&n2, &params.get(&p("ffn.w1")).unwrap().data, n, d, cfg.d_ff);
        add_bias(&mut h_pre, &params.get(&p("ffn.b1")).unwrap().data);
        let h_act: Vec<T> = h_pre.par_iter().map(|&z| gelu(z)).collect();
        let mut f = matmul_nn(&h_act, &params.get(&p("ffn.w2")).unwrap().data, n, cfg.d_ff, d);
        add_bias(&mut f, &params.get(&p("ffn.b2")).unwrap().data);
        for (xi, fi) in x.iter_mut().zip(&f) {
            *xi = *xi + *fi;
        }
        check_finite(&x, &format!("layer{l}"))?;

        layers.push(LayerCache {
            x_in,
            xhat1,
            rstd1,
            q,
            k,
            v,
            probs,
            ctx,
            x_mid,
            xhat2,
            rstd2,
            h_pre,
            h_act,
        });
    }

    let gf = params.get("final_norm.gain").unwrap();
    let bf = params.get("final_norm.bias").unwrap();
    let (normed, xhat_f, rstd_f) = layer_norm(&x, &gf.data, &bf.data, d);
    let vsize = Vocabulary::SIZE;
    let mut logits = matmul_nt(&normed, &tok_embed.data, n, d, vsize);
    add_bias(&mut logits, &params.get("out_bias").unwrap().data);
    check_finite(&logits, "output")?;

    Ok((
        logits,
        Cache {
            layers,
            xhat_f,
            rstd_f,
            normed,
        },
    ))
}

/// Logits of shape [n_seqs * len, vocab].
pub fn forward<T: Real>(params: &ParameterSet<T>, batch: &Batch) -> Result<Vec<T>> {
    forward_full(params, batch).map(|(logits, _)| logits)
}

/// Mean cross-entropy over masked positions, plus per-token losses in
/// masked-position scan order.
pub fn masked_ce_loss<T: Real>(logits: &[T], batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let vsize = Vocabulary::SIZE;
    let mut per_token = Vec::new();
    for (i, &masked) in batch.mask_positions.iter().enumerate() {
        if !masked {
            continue;
        }
        let row = &logits[i * vsize..(i + 1) * vsize];
        let maxv = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse = maxv.to_f64()
            + row
                .iter()
                .map(|&z| (z - maxv).to_f64().exp())
                .sum::<f64>()
                .ln();
        per_token.push(lse - row[batch.targets[i] as usize].to_f64());
    }
    if per_token.is_empty() {
        return Err(Error::Argument("batch has no masked positions".into()));
    }
    let mean = per_token.iter().sum::<f64>() / per_token.len() as f64;
    Ok((mean, per_token))
}

/// Exact gradient of a weighted sum of masked-CE terms. Returns the composed
/// scalar loss and a gradient set shaped like the parameters.
pub fn gradient<T: Real>(
    params: &ParameterSet<T>,
    terms: &[LossTerm<'_>],
) -> Result<(f64, ParameterSet<T>)> {
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for term in terms {
        if term.weight == 0.0 {
            continue;
        }
        let loss = backward_term(params, term.batch, term.weight, &mut grads)?;
        total += term.weight * loss;
    }
    if grads.flat_iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            context: "gradient".into(),
            msg: "non-finite gradient".into(),
        });
    }
    Ok((total, grads))
}

fn backward_term<T: Real>(
    params: &ParameterSet<T>,
    batch: &Batch,
    weight: f64,
    grads: &mut ParameterSet<T>,
) -> Result<f64> {
    let (logits, cache) = forward_full(params, batch)?;
    let (loss, _) = masked_ce_loss(&logits, batch)?;

    let cfg = params.config.clone();
    let d = cfg.d_model;
    let n = batch.n_seqs * batch.len;
    let vsize = Vocabulary::SIZE;
    let n_mask = batch.n_masked();
    let coef = T::from_f64(weight / n_mask as f64);

    // dlogits = coef * (softmax - onehot) at masked rows, 0 elsewhere.
    let mut dlogits = vec![T::zero(); n * vsize];
    dlogits
        .par_chunks_mut(vsize)
        .enumerate()
        .for_each(|(i, drow)| {
            if !batch.mask_positions[i] {
                return;
            }
            let row = &logits[i * vsize..(i + 1) * vsize];
            let maxv = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&z| (z - maxv).exp()).sum();
            for (j, dv) in drow.iter_mut().enumerate() {
                let p = (row[j] - maxv).exp() / denom;
                *dv = coef * p;
            }
            let t = batch.targets[i] as usize;
            drow[t] = drow[t] - coef;
        });

    let tok_embed = &params.get("tok_embed").unwrap().data;
    // Tied projection: logits = normed @ E^T + b.
    let dnormed = matmul_nn(&dlogits, tok_embed, n, vsize, d);
    {
        let de = matmul_tn(&dlogits, &cache.normed, n, vsize, d);
        let gte = grads.get_mut("tok_embed").unwrap();
        for (g, v) in gte.data.iter_mut().zip(de) {
            *g = *g + v;
        }
        let gob = grads.get_mut("out_bias").unwrap();
        for j in 0..vsize {
            let mut s = T::zero();
            for i in 0..n {
                s = s + dlogits[i * vsize + j];
            }
            gob.data[j] = gob.data[j] + s;
        }
    }

    let gf = params.get("final_norm.gain").unwrap().data.clone();
    let mut dgain_f = vec![T::zero(); d];
    let mut dbias_f = vec![T::zero(); d];
    let mut dx = layer_norm_backward(
        &dnormed,
        &cache.xhat_f,
        &cache.rstd_f,
        &gf,
        d,
        &mut dgain_f,
        &mut dbias_f,
    );
    accumulate(grads, "final_norm.gain", &dgain_f);
    accumulate(grads, "final_norm.bias", &dbias_f);
    drop(dnormed);

    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let len = batch.len;
    let valids: Vec<Vec<usize>> = (0..batch.n_seqs).map(|s| valid_positions(batch, s)).collect();

    for l in (0..cfg.n_layers).rev() {
        let p = |s: &str| format!("layer{l}.{s}");
        let lc = &cache.layers[l];

        // FFN block: x = x_mid + W2(gelu(W1 * ln2(x_mid) + b1)) + b2
        let df = dx.clone(); // gradient into the ffn branch output
        let w2 = &params.get(&p("ffn.w2")).unwrap().data;
        let dh_act = matmul_nt(&df, w2, n, d, cfg.d_ff);
        let dw2 = matmul_tn(&lc.h_act, &df, n, cfg.d_ff, d);
        add_matrix(grads, &p("ffn.w2"), &dw2);
        add_colsum(grads, &p("ffn.b2"), &df, d);

        let dh_pre: Vec<T> = dh_act
            .par_iter()
            .zip(lc.h_pre.par_iter())
            .map(|(&g, &z)| g * gelu_grad(z))
            .collect();
        let w1 = &params.get(&p("ffn.w1")).unwrap().data;
        let (n2, _, _) = layer_norm(
            &lc.x_mid,
            &params.get(&p("ffn_norm.gain")).unwrap().data,
            &params.get(&p("ffn_norm.bias")).unwrap().data,
            d,
        );
        let dn2 = matmul_nt(&dh_pre, w1, n, cfg.d_ff, d);
        let dw1 = matmul_tn(&n2, &dh_pre, n, d, cfg.d_ff);
        add_matrix(grads, &p("ffn.w1"), &dw1);
        add_colsum(grads, &p("ffn.b1"), &dh_pre, cfg.d_ff);

        let g2 = params.get(&p("ffn_norm.gain")).unwrap().data.clone();
        let mut dg2 = vec![T::zero(); d];
        let mut db2 = vec![T::zero(); d];
        let dx_mid_from_norm =
            layer_norm_backward(&dn2, &lc.xhat2, &lc.rstd2, &g2, d, &mut dg2, &mut db2);
        accumulate(grads, &p("ffn_norm.gain"), &dg2);
        accumulate(grads, &p("ffn_norm.bias"), &db2);
        // residual: dx_mid = dx (straight through) + norm path
        for (a, b) in dx.iter_mut().zip(&dx_mid_from_norm) {
            *a = *a + *b;
        }

        // Attention block: x_mid = x_in + Wo(attn(ln1(x_in))) + bo
        let dattn_out = dx.clone();
        let wo = &params.get(&p("attn.wo")).unwrap().data;
        let dctx = matmul_nt(&dattn_out, wo, n, d, d);
        let dwo = matmul_tn(&lc.ctx, &dattn_out, n, d, d);
        add_matrix(grads, &p("attn.wo"), &dwo);
        add_colsum(grads, &p("attn.bo"), &dattn_out, d);

        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        dq.par_chunks_mut(len * d)
            .zip(dk.par_chunks_mut(len * d))
            .zip(dv.par_chunks_mut(len * d))
            .enumerate()
            .for_each(|(s, ((dq_s, dk_s), dv_s))| {
                let valid = &valids[s];
                let base = s * len * d;
                let probs_s = &lc.probs[s * heads * len * len..(s + 1) * heads * len * len];
                for h in 0..heads {
                    let ho = h * dh;
                    for &i in valid {
                        let prow = &probs_s[h * len * len + i * len..h * len * len + i * len + len];
                        let dctx_row = &dctx[base + i * d + ho..base + i * d + ho + dh];
                        // dp and softmax backward
                        let mut dot_sum = T::zero();
                        let mut dp: Vec<T> = Vec::with_capacity(valid.len());
                        for &j in valid {
                            let vrow = &lc.v[base + j * d + ho..base + j * d + ho + dh];
                            let dpij: T =
                                dctx_row.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                            dot_sum = dot_sum + dpij * prow[j];
                            dp.push(dpij);
                        }
                        for (jj, &j) in valid.iter().enumerate() {
                            let ds = prow[j] * (dp[jj] - dot_sum) * scale;
                            let krow = &lc.k[base + j * d + ho..base + j * d + ho + dh];
                            let qrow = &lc.q[base + i * d + ho..base + i * d + ho + dh];
                            let dqrow = &mut dq_s[i * d + ho..i * d + ho + dh];
                            for (x, &kv) in dqrow.iter_mut().zip(krow) {
                                *x = *x + ds * kv;
                            }
                            let dkrow = &mut dk_s[j * d + ho..j * d + ho + dh];
                            for (x, &qv) in dkrow.iter_mut().zip(qrow) {
                                *x = *x + ds * qv;
                            }
                            let dvrow = &mut dv_s[j * d + ho..j * d + ho + dh];
                            let pij = prow[j];
                            for (x, &g) in dvrow.iter_mut().zip(dctx_row) {
                                *x = *x + pij * g;
                            }
                        }
                    }
                }
            });

        // Back through the Q/K/V projections into ln1 output.
        let (n1, _, _) = layer_norm(
            &lc.x_in,
            &params.get(&p("attn_norm.gain")).unwrap().data,
            &params.get(&p("attn_norm.bias")).unwrap().data,
            d,
        );
        let mut dn1 = matmul_nt(&dq, &params.get(&p("attn.wq")).unwrap().data, n, d, d);
        let dn1_k = matmul_nt(&dk, &params.get(&p("attn.wk")).unwrap().data, n, d, d);
        let dn1_v = matmul_nt(&dv, &params.get(&p("attn.wv")).unwrap().data, n, d, d);
        for i in 0..dn1.len() {
            dn1[i] = dn1[i] + dn1_k[i] + dn1_v[i];
        }
        add_matrix(grads, &p("attn.wq"), &matmul_tn(&n1, &dq, n, d, d));
        add_matrix(grads, &p("attn.wk"), &matmul_tn(&n1, &dk, n, d, d));
        add_matrix(grads, &p("attn.wv"), &matmul_tn(&n1, &dv, n, d, d));
        add_colsum(grads, &p("attn.bq"), &dq, d);
        add_colsum(grads, &p("attn.bk"), &dk, d);
        add_colsum(grads, &p("attn.bv"), &dv, d);

        let g1 = params.get(&p("attn_norm.gain")).unwrap().data.clone();
        let mut dg1 = vec![T::zero(); d];
        let mut db1 = vec![T::zero(); d];
        let dx_in_from_norm =
            layer_norm_backward(&dn1, &lc.xhat1, &lc.rstd1, &g1, d, &mut dg1, &mut db1);
        accumulate(grads, &p("attn_norm.gain"), &dg1);
        accumulate(grads, &p("attn_norm.bias"), &db1);
        for (a, b) in dx.iter_mut().zip(&dx_in_from_norm) {
            *a = *a + *b;
        }
    }

    // Embedding scatter: x0[i] = tok_embed[token] + pos_embed[pos].
    {
        let gte = grads.get_mut("tok_embed").unwrap();
        for i in 0..n {
            let tok = batch.tokens[i] as usize;
            for j in 0..d {
                gte.data[tok * d + j] = gte.data[tok * d + j] + dx[i * d + j];
            }
        }
        let gpe = grads.get_mut("pos_embed").unwrap();
        for i in 0..n {
            let pos = i % batch.len;
            for j in 0..d {
                gpe.data[pos * d + j] = gpe.data[pos * d + j] + dx[i * d + j];
            }
        }
    }

    Ok(loss)
}

fn accumulate<T: Real>(grads: &mut ParameterSet<T>, name: &str, values: &[T]) {
    if values.is_empty() {
        return;
    }
    let g = grads.get_mut(name).unwrap();
    for (x, &v) in g.data.iter_mut().zip(values) {
        *x = *x + v;
    }
}

fn add_matrix<T: Real>(grads: &mut ParameterSet<T>, name: &str, values: &[T]) {
    accumulate(grads, name, values);
}

fn add_colsum<T: Real>(grads: &mut ParameterSet<T>, name: &str, rows: &[T], width: usize) {
    let g = grads.get_mut(name).unwrap();
    for row in rows.chunks(width) {
        for (x, &v) in g.data.iter_mut().zip(row) {
            *x = *x + v;
        }
    }
}

/// Mean of the final-layer hidden states over residue (non-special)
/// positions.
pub fn embed<T: Real>(params: &ParameterSet<T>, seq: &str) -> Result<Vec<T>> {
    let tokens = crate::model::tokenize(seq, &params.config);
    let batch = Batch::from_token_rows(&[tokens.clone()])?;
    let (_, cache) = forward_full(params, &batch)?;
    let d = params.config.d_model;
    let vocab = Vocabulary::get();
    let mut mean = vec![T::zero(); d];
    let mut count = 0usize;
    for (i, &tok) in tokens.iter().enumerate() {
        if vocab.residue_of(tok).is_some() {
            for j in 0..d {
                mean[j] = mean[j] + cache.normed[i * d + j];
            }
            count += 1;
        }
    }
    let c = T::from_f64(count.max(1) as f64);
    for m in &mut mean {
        *m = *m / c;
    }
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{tokenize, ModelConfig};
    use rand::Rng;

    fn mask_at(batch: &mut Batch, idx: usize) {
        assert!(Vocabulary::is_maskable(batch.tokens[idx]));
        batch.targets[idx] = batch.tokens[idx];
        batch.tokens[idx] = Vocabulary::MASK;
        batch.mask_positions[idx] = true;
    }

    fn toy_batch(cfg: &ModelConfig, seqs: &[&str], mask_every: usize) -> Batch {
        let rows: Vec<Vec<u16>> = seqs.iter().map(|s| tokenize(s, cfg)).collect();
        let mut batch = Batch::from_token_rows(&rows).unwrap();
        let mut masked_any = false;
        for i in 0..batch.tokens.len() {
            if Vocabulary::is_maskable(batch.tokens[i]) && i % mask_every == 0 {
                mask_at(&mut batch, i);
                masked_any = true;
            }
        }
        if !masked_any {
            let i = (0..batch.tokens.len())
                .find(|&i| Vocabulary::is_maskable(batch.tokens[i]))
                .unwrap();
            mask_at(&mut batch, i);
        }
        batch
    }

    fn softmax_row(row: &[f32]) -> Vec<f64> {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&z| ((z as f64) - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / s).collect()
    }

    #[test]
    fn uniform_logits_give_ln_vocab_loss() {
        let cfg = ModelConfig::tiny();
        let mut params = ParameterSet::<f32>::init(&cfg, 1).unwrap();
        params.get_mut("tok_embed").unwrap().data.fill(0.0);
        let batch = toy_batch(&cfg, &["ACDEFG"], 2);
        let logits = forward(&params, &batch).unwrap();
        let (loss, _) = masked_ce_loss(&logits, &batch).unwrap();
        assert!((loss - (Vocabulary::SIZE as f64).ln()).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let cfg = ModelConfig::tiny();
        let params = ParameterSet::<f32>::init(&cfg, 2).unwrap();
        // all-mask input
        let mut batch = toy_batch(&cfg, &["ACDEFGHIKL"], 1);
        for i in 0..batch.tokens.len() {
            if Vocabulary::is_maskable(batch.tokens[i]) {
                mask_at(&mut batch, i);
            }
        }
        let logits = forward(&params, &batch).unwrap();
        for row in logits.chunks(Vocabulary::SIZE) {
            let s: f64 = softmax_row(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let cfg = ModelConfig::tiny();
        let params = ParameterSet::<f32>::init(&cfg, 3).unwrap();
        let b1 = toy_batch(&cfg, &["ACDEFGHI", "WWYYWWYY"], 3);
        let b2 = toy_batch(&cfg, &["WWYYWWYY", "ACDEFGHI"], 1_000_000);
        // permuting batch order permutes outputs identically
        let mut b2 = b2;
        b2.mask_positions = vec![false; b2.tokens.len()];
        let mut b1_perm = Batch {
            n_seqs: 2,
            len: b1.len,
            tokens: [&b1.tokens[b1.len..], &b1.tokens[..b1.len]].concat(),
            mask_positions: vec![false; b1.tokens.len()],
            targets: vec![Vocabulary::PAD; b1.tokens.len()],
        };
        // restore the mask layout so forward sees the same token ids
        for i in 0..b1.len {
            b1_perm.tokens[i] = b1.tokens[b1.len + i];
            b1_perm.tokens[b1.len + i] = b1.tokens[i];
        }
        let l1 = forward(&params, &b1).unwrap();
        let l2 = forward(&params, &b1_perm).unwrap();
        let v = Vocabulary::SIZE;
        assert_eq!(&l1[..b1.len * v], &l2[b1.len * v..]);
        assert_eq!(&l1[b1.len * v..], &l2[..b1.len * v]);
        drop(b2);
    }

    #[test]
    fn duplicated_sequences_give_identical_rows() {
        let cfg = ModelConfig::tiny();
        let params = ParameterSet::<f32>::init(&cfg, 4).unwrap();
        let rows = vec![tokenize("ACDEFGHI", &cfg), tokenize("ACDEFGHI", &cfg)];
        let mut batch = Batch::from_token_rows(&rows).unwrap();
        // Mask the same relative position in both rows so the inputs match.
        let len = batch.len;
        mask_at(&mut batch, 2);
        mask_at(&mut batch, len + 2);
        let logits = forward(&params, &batch).unwrap();
        let half = batch.len * Vocabulary::SIZE;
        assert_eq!(&logits[..half], &logits[half..]);
    }

    #[test]
    fn hand_computed_two_token_ce() {
        // Two masked positions; recompute the mean CE from raw logits.
        let cfg = ModelConfig::tiny();
        let params = ParameterSet::<f32>::init(&cfg, 5).unwrap();
        let batch = toy_batch(&cfg, &["ACDEFGHIKLMN"], 5);
        assert!(batch.n_masked() >= 2);
        let logits = forward(&params, &batch).unwrap();
        let (loss, per_token) = masked_ce_loss(&logits, &batch).unwrap();
        let mut manual = Vec::new();
        for (i, &m) in batch.mask_positions.iter().enumerate() {
            if m {
                let row = &logits[i * Vocabulary::SIZE..(i + 1) * Vocabulary::SIZE];
                let p = softmax_row(row);
                manual.push(-p[batch.targets[i] as usize].ln());
            }
        }
        for (a, b) in per_token.iter().zip(&manual) {
            assert!((a - b).abs() < 1e-6);
        }
        let mean = manual.iter().sum::<f64>() / manual.len() as f64;
        assert!((loss - mean).abs() < 1e-9);
    }

    #[test]
    fn zero_masked_positions_is_an_error() {
        let cfg = ModelConfig::tiny();
        let params = ParameterSet::<f32>::init(&cfg, 5).unwrap();
        let rows = vec![tokenize("ACDE", &cfg)];
        let batch = Batch::from_token_rows(&rows).unwrap();
        let logits = forward(&params, &batch).unwrap();
        assert!(masked_ce_loss(&logits, &batch).is_err());
    }

    #[test]
    fn gradient_linearity() {
        let cfg = ModelConfig::tiny();
        let params = ParameterSet::<f32>::init(&cfg, 6).unwrap();
        let batch = toy_batch(&cfg, &["ACDEFGHI"], 3);
        let (_, g_pos) = gradient(&params, &[LossTerm { weight: 1.0, batch: &batch }]).unwrap();
        let (_, g_neg) = gradient(&params, &[LossTerm { weight: -1.0, batch: &batch }]).unwrap();
        for (a, b) in g_pos.flat_iter().zip(g_neg.flat_iter()) {
            assert!((a + b).abs() < 1e-6);
        }
        let (loss, g_zero) = gradient(&params, &[LossTerm { weight: 0.0, batch: &batch }]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g_zero.flat_iter().all(|g| g == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = ModelConfig::tiny();
        let params = ParameterSet::<f64>::init(&cfg, 7).unwrap();
        let batch = toy_batch(&cfg, &["ACDEFGHIKL", "WYWYWY"], 3);
        let term = [LossTerm { weight: 1.0, batch: &batch }];
        let (_, grads) = gradient(&params, &term).unwrap();

        let mut rng = crate::rng::stream(17, "gradcheck", &[]);
        let total = params.total_count();
        let h = 1e-4;
        let mut max_rel: f64 = 0.0;
        for _ in 0..200 {
            let idx = rng.gen_range(0..total);
            let orig = params.flat_get(idx);
            let mut p = params.clone();
            p.flat_set(idx, orig + h);
            let (lp, _) = masked_ce_loss(&forward(&p, &batch).unwrap(), &batch).unwrap();
            p.flat_set(idx, orig - h);
            let (lm, _) = masked_ce_loss(&forward(&p, &batch).unwrap(), &batch).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.flat_get(idx);
            let rel = (an - fd).abs() / (an.abs() + fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn composed_loss_gradient_is_linear_combination() {
        let cfg = ModelConfig::tiny();
        let params = ParameterSet::<f32>::init(&cfg, 8).unwrap();
        let b1 = toy_batch(&cfg, &["ACDEFGHI"], 3);
        let b2 = toy_batch(&cfg, &["WYWYWYWY"], 4);
        let (_, ga) = gradient(&params, &[LossTerm { weight: 1.0, batch: &b1 }]).unwrap();
        let (_, gb) = gradient(&params, &[LossTerm { weight: 1.0, batch: &b2 }]).unwrap();
        let (_, gc) = gradient(
            &params,
            &[
                LossTerm { weight: 0.7, batch: &b1 },
                LossTerm { weight: -0.2, batch: &b2 },
            ],
        )
        .unwrap();
        let combo = ParameterSet::axpy(0.7, &ga, -0.2, &gb).unwrap();
        for (a, b) in gc.flat_iter().zip(combo.flat_iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn embed_properties() {
        let cfg = ModelConfig::tiny();
        let params = ParameterSet::<f32>::init(&cfg, 9).unwrap();
        let a = embed(&params, "ACDEFGHI").unwrap();
        let b = embed(&params, "ACDEFGHI").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), cfg.d_model);
        let dot: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let norm: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((dot / (norm * norm) - 1.0).abs() < 1e-6);
    }
}
