//! Forward step, activation trace and reverse pass of the decoder.
//!
//! Every forward path (sampling, scoring, PRG probes) runs through
//! [`Policy::step`], so incremental and teacher-forced evaluation agree bit
//! for bit.

use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, Scalar};
use crate::vocab::Token;

use super::Policy;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Keys and values of every position fed so far, per layer.
#[derive(Clone, Debug)]
pub struct KvCache<S> {
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    len: usize,
}

impl<S: Scalar> KvCache<S> {
    pub(crate) fn new(n_layers: usize) -> Self {
        Self {
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Forgets every position at or after `len`.
    pub fn truncate(&mut self, len: usize, d_model: usize) {
        if len < self.len {
            for (k, v) in self.keys.iter_mut().zip(&mut self.values) {
                k.truncate(len * d_model);
                v.truncate(len * d_model);
            }
            self.len = len;
        }
    }
}

#[derive(Clone, Debug, Default)]
pub(crate) struct LayerTrace<S> {
    ln1_xhat: Vec<S>,
    ln1_rstd: Vec<S>,
    a: Vec<S>,
    qkv: Vec<S>,
    /// Attention weights, position-major then head, `t + 1` entries each.
    probs: Vec<S>,
    att: Vec<S>,
    ln2_xhat: Vec<S>,
    ln2_rstd: Vec<S>,
    m: Vec<S>,
    h: Vec<S>,
    g: Vec<S>,
}

/// Activations of a sequence fed from position 0, kept for the reverse pass.
#[derive(Clone, Debug, Default)]
pub(crate) struct Trace<S> {
    pub(crate) tokens: Vec<Token>,
    layers: Vec<LayerTrace<S>>,
    lnf_xhat: Vec<S>,
    lnf_rstd: Vec<S>,
    f: Vec<S>,
}

impl<S: Scalar> Trace<S> {
    pub(crate) fn new(n_layers: usize) -> Self {
        Self {
            layers: vec![LayerTrace::default(); n_layers],
            ..Self::default()
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.tokens.len()
    }
}

/// `out = x W + b` with `W` stored row-major as `[x.len() x out.len()]`.
fn linear<S: Scalar>(x: &[S], w: &[S], b: &[S], out: &mut [S]) {
    let n = out.len();
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        axpy(xi, &w[i * n..(i + 1) * n], out);
    }
}

/// Accumulates `dx += dy W^T`, `dW += x^T dy`, `db += dy`.
fn linear_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    dy: &[S],
    dx: &mut [S],
    dw: &mut [S],
    db: &mut [S],
) {
    let n = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        let row = i * n..(i + 1) * n;
        dx[i] += dot(dy, &w[row.clone()]);
        axpy(xi, dy, &mut dw[row]);
    }
    for (b, &g) in db.iter_mut().zip(dy) {
        *b += g;
    }
}

/// Normalizes `x`, returning `(xhat, rstd)`.
fn layer_norm<S: Scalar>(x: &[S]) -> (Vec<S>, S) {
    let n = S::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<S>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    let rstd = S::one() / (var + S::lit(LN_EPS)).sqrt();
    (x.iter().map(|&v| (v - mean) * rstd).collect(), rstd)
}

fn affine<S: Scalar>(xhat: &[S], gamma: &[S], beta: &[S]) -> Vec<S> {
    xhat.iter()
        .zip(gamma)
        .zip(beta)
        .map(|((&x, &g), &b)| x * g + b)
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<S: Scalar>(
    xhat: &[S],
    rstd: S,
    gamma: &[S],
    dy: &[S],
    dx: &mut [S],
    dgamma: &mut [S],
    dbeta: &mut [S],
) {
    let n = S::lit(xhat.len() as f64);
    let mut mean_dxhat = S::zero();
    let mut mean_dxhat_xhat = S::zero();
    for i in 0..xhat.len() {
        let dxh = dy[i] * gamma[i];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[i];
        dgamma[i] += dy[i] * xhat[i];
        dbeta[i] += dy[i];
    }
    mean_dxhat /= n;
    mean_dxhat_xhat /= n;
    for i in 0..xhat.len() {
        let dxh = dy[i] * gamma[i];
        dx[i] += rstd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x)
}

impl<S: Scalar> Policy<S> {
    pub fn new_cache(&self) -> KvCache<S> {
        KvCache::new(self.config.n_layers)
    }

    pub(crate) fn new_trace(&self) -> Trace<S> {
        Trace::new(self.config.n_layers)
    }

    /// Feeds one token at position `cache.len()`. Writes output logits when
    /// `logits` is given; records activations when `trace` is given (the
    /// trace must then cover exactly the positions already in the cache).
    pub(crate) fn step(
        &self,
        token: Token,
        cache: &mut KvCache<S>,
        trace: Option<&mut Trace<S>>,
        logits: Option<&mut Vec<S>>,
    ) -> Result<()> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let pos = cache.len;
        if pos >= cfg.max_context {
            return Err(Error::ContextOverflow {
                needed: pos + 1,
                max: cfg.max_context,
                step: None,
            });
        }
        if token.idx() >= cfg.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "token {} outside vocabulary of {}",
                token.0, cfg.vocab_size
            )));
        }
        let p = &self.params;
        let lay = &self.layout;
        let n_heads = cfg.n_heads;
        let hd = d / n_heads;
        let scale = S::one() / S::lit(hd as f64).sqrt();

        let te = &p[lay.tok_emb + token.idx() * d..][..d];
        let pe = &p[lay.pos_emb + pos * d..][..d];
        let mut x: Vec<S> = te.iter().zip(pe).map(|(&a, &b)| a + b).collect();

        let mut trace = trace;
        let mut probs = Vec::with_capacity(pos + 1);
        for (l, ll) in lay.layers.iter().enumerate() {
            let (xhat1, rstd1) = layer_norm(&x);
            let a = affine(&xhat1, &p[ll.ln1_g..][..d], &p[ll.ln1_b..][..d]);
            let mut qkv = vec![S::zero(); 3 * d];
            linear(&a, &p[ll.w_qkv..][..3 * d * d], &p[ll.b_qkv..][..3 * d], &mut qkv);
            cache.keys[l].extend_from_slice(&qkv[d..2 * d]);
            cache.values[l].extend_from_slice(&qkv[2 * d..]);
            let keys = &cache.keys[l];
            let values = &cache.values[l];

            let mut att = vec![S::zero(); d];
            let mut head_probs = Vec::with_capacity(n_heads * (pos + 1));
            for h in 0..n_heads {
                let q = &qkv[h * hd..(h + 1) * hd];
                probs.clear();
                let mut max = S::neg_infinity();
                for u in 0..=pos {
                    let s = dot(q, &keys[u * d + h * hd..][..hd]) * scale;
                    max = max.max(s);
                    probs.push(s);
                }
                let mut total = S::zero();
                for s in probs.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let out = &mut att[h * hd..(h + 1) * hd];
                for (u, pr) in probs.iter_mut().enumerate() {
                    *pr /= total;
                    axpy(*pr, &values[u * d + h * hd..][..hd], out);
                }
                head_probs.extend_from_slice(&probs);
            }

            let mut y = vec![S::zero(); d];
            linear(&att, &p[ll.w_o..][..d * d], &p[ll.b_o..][..d], &mut y);
            for (xi, yi) in x.iter_mut().zip(&y) {
                *xi += *yi;
            }

            let (xhat2, rstd2) = layer_norm(&x);
            let m = affine(&xhat2, &p[ll.ln2_g..][..d], &p[ll.ln2_b..][..d]);
            let ff = cfg.d_ff;
            let mut hpre = vec![S::zero(); ff];
            linear(&m, &p[ll.w_fc..][..d * ff], &p[ll.b_fc..][..ff], &mut hpre);
            let g: Vec<S> = hpre.iter().map(|&v| gelu(v)).collect();
            let mut z = vec![S::zero(); d];
            linear(&g, &p[ll.w_proj..][..ff * d], &p[ll.b_proj..][..d], &mut z);
            for (xi, zi) in x.iter_mut().zip(&z) {
                *xi += *zi;
            }

            if let Some(tr) = trace.as_deref_mut() {
                let lt = &mut tr.layers[l];
                lt.ln1_xhat.extend_from_slice(&xhat1);
                lt.ln1_rstd.push(rstd1);
                lt.a.extend_from_slice(&a);
                lt.qkv.extend_from_slice(&qkv);
                lt.probs.extend_from_slice(&head_probs);
                lt.att.extend_from_slice(&att);
                lt.ln2_xhat.extend_from_slice(&xhat2);
                lt.ln2_rstd.push(rstd2);
                lt.m.extend_from_slice(&m);
                lt.h.extend_from_slice(&hpre);
                lt.g.extend_from_slice(&g);
            }
        }

        let (xhatf, rstdf) = layer_norm(&x);
        let f = affine(&xhatf, &p[lay.lnf_g..][..d], &p[lay.lnf_b..][..d]);
        if let Some(out) = logits {
            let v = cfg.vocab_size;
            out.resize(v, S::zero());
            linear(&f, &p[lay.head_w..][..d * v], &p[lay.head_b..][..v], out);
        }
        if let Some(tr) = trace {
            tr.tokens.push(token);
            tr.lnf_xhat.extend_from_slice(&xhatf);
            tr.lnf_rstd.push(rstdf);
            tr.f.extend_from_slice(&f);
        }
        cache.len += 1;
        Ok(())
    }

    /// Reverse pass: `dlogits` holds one `vocab_size` row per traced
    /// position (zero rows contribute nothing). Accumulates into `grad`.
    pub(crate) fn backward(&self, trace: &Trace<S>, dlogits: &[S], grad: &mut [S]) {
        let cfg = &self.config;
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let n_heads = cfg.n_heads;
        let hd = d / n_heads;
        let scale = S::one() / S::lit(hd as f64).sqrt();
        let p = &self.params;
        let lay = &self.layout;
        let t_len = trace.len();
        debug_assert_eq!(dlogits.len(), t_len * v);
        debug_assert_eq!(grad.len(), p.len());

        let mut dx = vec![S::zero(); t_len * d];
        let mut df = vec![S::zero(); d];
        for t in 0..t_len {
            let dl = &dlogits[t * v..(t + 1) * v];
            if dl.iter().all(|g| *g == S::zero()) {
                continue;
            }
            df.iter_mut().for_each(|x| *x = S::zero());
            {
                let (dw, db) = split_pair(grad, lay.head_w, d * v, lay.head_b, v);
                linear_backward(&trace.f[t * d..][..d], &p[lay.head_w..][..d * v], dl, &mut df, dw, db);
            }
            let (dg, db) = split_pair(grad, lay.lnf_g, d, lay.lnf_b, d);
            layer_norm_backward(
                &trace.lnf_xhat[t * d..][..d],
                trace.lnf_rstd[t],
                &p[lay.lnf_g..][..d],
                &df,
                &mut dx[t * d..][..d],
                dg,
                db,
            );
        }

        let mut dm = vec![S::zero(); d];
        let mut dg = vec![S::zero(); ff];
        let mut da = vec![S::zero(); d];
        for (l, ll) in lay.layers.iter().enumerate().rev() {
            let lt = &trace.layers[l];

            // MLP branch; the residual passes dx through unchanged.
            let mut dx_mid = dx.clone();
            for t in 0..t_len {
                let dz = &dx[t * d..][..d];
                dg.iter_mut().for_each(|x| *x = S::zero());
                {
                    let (dw, db) = split_pair(grad, ll.w_proj, ff * d, ll.b_proj, d);
                    linear_backward(&lt.g[t * ff..][..ff], &p[ll.w_proj..][..ff * d], dz, &mut dg, dw, db);
                }
                for (gi, &hi) in dg.iter_mut().zip(&lt.h[t * ff..][..ff]) {
                    *gi *= gelu_grad(hi);
                }
                dm.iter_mut().for_each(|x| *x = S::zero());
                {
                    let (dw, db) = split_pair(grad, ll.w_fc, d * ff, ll.b_fc, ff);
                    linear_backward(&lt.m[t * d..][..d], &p[ll.w_fc..][..d * ff], &dg, &mut dm, dw, db);
                }
                let (dgam, dbet) = split_pair(grad, ll.ln2_g, d, ll.ln2_b, d);
                layer_norm_backward(
                    &lt.ln2_xhat[t * d..][..d],
                    lt.ln2_rstd[t],
                    &p[ll.ln2_g..][..d],
                    &dm,
                    &mut dx_mid[t * d..][..d],
                    dgam,
                    dbet,
                );
            }

            // Attention branch.
            let mut dx_in = dx_mid.clone();
            let mut datt = vec![S::zero(); t_len * d];
            for t in 0..t_len {
                let (dw, db) = split_pair(grad, ll.w_o, d * d, ll.b_o, d);
                linear_backward(
                    &lt.att[t * d..][..d],
                    &p[ll.w_o..][..d * d],
                    &dx_mid[t * d..][..d],
                    &mut datt[t * d..][..d],
                    dw,
                    db,
                );
            }
            let mut dqkv = vec![S::zero(); t_len * 3 * d];
            let mut dprob = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let base = n_heads * t * (t + 1) / 2;
                for h in 0..n_heads {
                    let pr = &lt.probs[base + h * (t + 1)..][..t + 1];
                    let dout = &datt[t * d + h * hd..][..hd];
                    dprob.clear();
                    let mut weighted = S::zero();
                    for (u, &pu) in pr.iter().enumerate() {
                        let vu = &lt.qkv[u * 3 * d + 2 * d + h * hd..][..hd];
                        let dpu = dot(dout, vu);
                        weighted += pu * dpu;
                        dprob.push(dpu);
                        axpy(pu, dout, &mut dqkv[u * 3 * d + 2 * d + h * hd..][..hd]);
                    }
                    for (u, &pu) in pr.iter().enumerate() {
                        let ds = pu * (dprob[u] - weighted) * scale;
                        if ds == S::zero() {
                            continue;
                        }
                        let ku_off = u * 3 * d + d + h * hd;
                        let qt_off = t * 3 * d + h * hd;
                        for i in 0..hd {
                            let ku = lt.qkv[ku_off + i];
                            let qt = lt.qkv[qt_off + i];
                            dqkv[qt_off + i] += ds * ku;
                            dqkv[ku_off + i] += ds * qt;
                        }
                    }
                }
            }
            for t in 0..t_len {
                da.iter_mut().for_each(|x| *x = S::zero());
                {
                    let (dw, db) = split_pair(grad, ll.w_qkv, d * 3 * d, ll.b_qkv, 3 * d);
                    linear_backward(
                        &lt.a[t * d..][..d],
                        &p[ll.w_qkv..][..3 * d * d],
                        &dqkv[t * 3 * d..][..3 * d],
                        &mut da,
                        dw,
                        db,
                    );
                }
                let (dgam, dbet) = split_pair(grad, ll.ln1_g, d, ll.ln1_b, d);
                layer_norm_backward(
                    &lt.ln1_xhat[t * d..][..d],
                    lt.ln1_rstd[t],
                    &p[ll.ln1_g..][..d],
                    &da,
                    &mut dx_in[t * d..][..d],
                    dgam,
                    dbet,
                );
            }
            dx = dx_in;
        }

        for (t, tok) in trace.tokens.iter().enumerate() {
            let g = &dx[t * d..][..d];
            axpy(S::one(), g, &mut grad[lay.tok_emb + tok.idx() * d..][..d]);
            axpy(S::one(), g, &mut grad[lay.pos_emb + t * d..][..d]);
        }
    }
}

/// Two disjoint mutable windows into the gradient; `a` precedes `b`.
fn split_pair<S>(buf: &mut [S], a: usize, a_len: usize, b: usize, b_len: usize) -> (&mut [S], &mut [S]) {
    debug_assert!(a + a_len <= b);
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + a_len], &mut hi[..b_len])
}
