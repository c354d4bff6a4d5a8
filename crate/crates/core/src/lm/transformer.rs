//! Pre-norm transformer encoder with learned positions, tied (or untied)
//! output projection, and a hand-written backward pass.

use super::batch::{AttentionMode, Batch};
use super::linalg::{matmul, View};
use super::params::{LayerOffsets, ModelParams};
use super::real::{cast, Real};
use crate::error::Result;

const LN_EPS: f64 = 1e-5;

struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
    out: Vec<T>,
}

struct LayerCache<T> {
    ln1: NormCache<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    ln2: NormCache<T>,
    ff_pre: Vec<T>,
    ff_act: Vec<T>,
}

/// Activations kept from the forward pass.
pub struct Trace<T> {
    /// Residual stream after each layer; index 0 is the embedding output.
    pub hidden: Vec<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    lnf: NormCache<T>,
}

impl<T> Trace<T> {
    pub fn final_norm(&self) -> &[T] {
        &self.lnf.out
    }
}

/// Hidden states for the requested layers and logits at target rows.
pub struct ForwardOutput<T> {
    pub hidden: Vec<(usize, Vec<T>)>,
    /// `targets x |output range|`, row-major.
    pub logits: Vec<T>,
    pub vocab_width: usize,
}

fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T], d: usize) -> NormCache<T> {
    let rows = x.len() / d;
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = cast::<T>(1.0 / d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let s = (var + cast(LN_EPS)).sqrt().recip();
        rstd[r] = s;
        for i in 0..d {
            let h = (row[i] - mean) * s;
            xhat[r * d + i] = h;
            out[r * d + i] = h * gain[i] + bias[i];
        }
    }
    NormCache { xhat, rstd, out }
}

/// Accumulates gain/bias gradients and adds the input gradient into `dx`.
fn layer_norm_backward<T: Real>(
    dy: &[T],
    cache: &NormCache<T>,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
    d: usize,
) {
    let rows = dy.len() / d;
    let inv_d = cast::<T>(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for i in 0..d {
            dgain[i] += dyr[i] * xh[i];
            dbias[i] += dyr[i];
            dxhat[i] = dyr[i] * gain[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let s = cache.rstd[r];
        for i in 0..d {
            dx[r * d + i] += s * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(u: T) -> T {
    let c: T = cast(GELU_C);
    let a: T = cast(GELU_A);
    let half: T = cast(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

fn gelu_grad<T: Real>(u: T) -> T {
    let c: T = cast(GELU_C);
    let a: T = cast(GELU_A);
    let half: T = cast(0.5);
    let three: T = cast(3.0);
    let th = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + th) + half * u * (T::one() - th * th) * c * (T::one() + three * a * u * u)
}

fn add_bias<T: Real>(x: &mut [T], bias: &[T]) {
    let n = bias.len();
    for row in x.chunks_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn col_sum_into<T: Real>(x: &[T], out: &mut [T]) {
    let n = out.len();
    for row in x.chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

fn key_allowed(mode: AttentionMode, len: usize, i: usize, j: usize) -> bool {
    j < len && (mode == AttentionMode::Bidirectional || j <= i)
}

impl<T: Real> ModelParams<T> {
    fn slice(&self, at: usize, n: usize) -> &[T] {
        &self.data[at..at + n]
    }

    /// Forward pass keeping every activation needed by [`backward`].
    pub fn trace(&self, batch: &Batch) -> Result<Trace<T>> {
        let c = &self.config;
        batch.validate(c.vocab_size, c.max_seq)?;
        let (d, ff, heads) = (c.hidden, c.ff_dim, c.heads);
        let dh = c.head_dim();
        let (bsz, tlen) = (batch.batch_size(), batch.seq_len);
        let n = batch.rows();
        let scale: T = cast(1.0 / (dh as f64).sqrt());
        let lo = &self.layout;

        let mut x = vec![T::zero(); n * d];
        for r in 0..n {
            let tok = batch.tokens[r] as usize;
            let pos = r % tlen;
            let e = self.slice(lo.tok_emb + tok * d, d);
            let p = self.slice(lo.pos_emb + pos * d, d);
            for i in 0..d {
                x[r * d + i] = e[i] + p[i];
            }
        }
        let mut hidden = vec![x];
        let mut layers = Vec::with_capacity(c.layers);

        for off in &lo.layers {
            let x = hidden.last().expect("embedding layer");
            let ln1 = layer_norm(x, self.slice(off.ln1_g, d), self.slice(off.ln1_b, d), d);
            let mut qkv = vec![T::zero(); n * 3 * d];
            matmul(View::new(&ln1.out, n, d), View::new(self.slice(off.w_qkv, 3 * d * d), d, 3 * d), &mut qkv, false);
            add_bias(&mut qkv, self.slice(off.b_qkv, 3 * d));

            let mut probs = vec![T::zero(); bsz * heads * tlen * tlen];
            let mut ctx = vec![T::zero(); n * d];
            for b in 0..bsz {
                let len = batch.lengths[b];
                for h in 0..heads {
                    let pbase = (b * heads + h) * tlen * tlen;
                    for i in 0..tlen {
                        let qi = (b * tlen + i) * 3 * d + h * dh;
                        let prow = &mut probs[pbase + i * tlen..pbase + (i + 1) * tlen];
                        let mut max = T::neg_infinity();
                        for j in 0..tlen {
                            if key_allowed(batch.attention, len, i, j) {
                                let kj = (b * tlen + j) * 3 * d + d + h * dh;
                                let mut s = T::zero();
                                for t in 0..dh {
                                    s += qkv[qi + t] * qkv[kj + t];
                                }
                                prow[j] = s * scale;
                                max = max.max(prow[j]);
                            }
                        }
                        if max == T::neg_infinity() {
                            // empty sequence: nothing to attend to
                            prow.fill(T::zero());
                            continue;
                        }
                        let mut z = T::zero();
                        for j in 0..tlen {
                            if key_allowed(batch.attention, len, i, j) {
                                prow[j] = (prow[j] - max).exp();
                                z += prow[j];
                            } else {
                                prow[j] = T::zero();
                            }
                        }
                        let out = (b * tlen + i) * d + h * dh;
                        for j in 0..tlen {
                            prow[j] /= z;
                            let p = prow[j];
                            if p != T::zero() {
                                let vj = (b * tlen + j) * 3 * d + 2 * d + h * dh;
                                for t in 0..dh {
                                    ctx[out + t] += p * qkv[vj + t];
                                }
                            }
                        }
                    }
                }
            }

            let mut mid = x.clone();
            matmul(View::new(&ctx, n, d), View::new(self.slice(off.w_o, d * d), d, d), &mut mid, true);
            add_bias(&mut mid, self.slice(off.b_o, d));

            let ln2 = layer_norm(&mid, self.slice(off.ln2_g, d), self.slice(off.ln2_b, d), d);
            let mut ff_pre = vec![T::zero(); n * ff];
            matmul(View::new(&ln2.out, n, d), View::new(self.slice(off.w_1, d * ff), d, ff), &mut ff_pre, false);
            add_bias(&mut ff_pre, self.slice(off.b_1, ff));
            let ff_act: Vec<T> = ff_pre.iter().map(|&u| gelu(u)).collect();
            let mut next = mid;
            matmul(View::new(&ff_act, n, ff), View::new(self.slice(off.w_2, ff * d), ff, d), &mut next, true);
            add_bias(&mut next, self.slice(off.b_2, d));

            layers.push(LayerCache {
                ln1,
                qkv,
                probs,
                ctx,
                ln2,
                ff_pre,
                ff_act,
            });
            hidden.push(next);
        }

        let lnf = layer_norm(
            hidden.last().expect("at least one layer"),
            self.slice(lo.lnf_g, d),
            self.slice(lo.lnf_b, d),
            d,
        );
        Ok(Trace { hidden, layers, lnf })
    }

    fn output_rows(&self, batch: &Batch) -> (usize, usize) {
        let range = batch.output_range.clone().unwrap_or(0..self.config.vocab_size);
        (self.layout.output() + range.start * self.config.hidden, range.len())
    }

    /// Logits at the batch's target rows over its output range.
    pub fn target_logits(&self, batch: &Batch, trace: &Trace<T>) -> (Vec<T>, usize) {
        let d = self.config.hidden;
        let nt = batch.targets.len();
        let mut y = vec![T::zero(); nt * d];
        for (k, t) in batch.targets.iter().enumerate() {
            y[k * d..(k + 1) * d].copy_from_slice(&trace.lnf.out[t.row * d..(t.row + 1) * d]);
        }
        let (start, width) = self.output_rows(batch);
        let mut logits = vec![T::zero(); nt * width];
        matmul(View::new(&y, nt, d), View::new(self.slice(start, width * d), width, d).t(), &mut logits, false);
        (logits, width)
    }

    pub fn forward(&self, batch: &Batch) -> Result<ForwardOutput<T>> {
        let trace = self.trace(batch)?;
        let (logits, vocab_width) = self.target_logits(batch, &trace);
        let hidden = self
            .config
            .eval_layers
            .iter()
            .map(|&l| (l, trace.hidden[l].clone()))
            .collect();
        Ok(ForwardOutput {
            hidden,
            logits,
            vocab_width,
        })
    }

    /// Gradient of a loss w.r.t. every parameter given `dlogits` at the
    /// target rows.
    pub fn backward(&self, batch: &Batch, trace: &Trace<T>, dlogits: &[T]) -> Vec<T> {
        let c = &self.config;
        let (d, ff, heads) = (c.hidden, c.ff_dim, c.heads);
        let dh = c.head_dim();
        let (bsz, tlen) = (batch.batch_size(), batch.seq_len);
        let n = batch.rows();
        let nt = batch.targets.len();
        let scale: T = cast(1.0 / (dh as f64).sqrt());
        let lo = &self.layout;
        let mut grad = vec![T::zero(); self.data.len()];

        // output projection
        let mut y = vec![T::zero(); nt * d];
        for (k, t) in batch.targets.iter().enumerate() {
            y[k * d..(k + 1) * d].copy_from_slice(&trace.lnf.out[t.row * d..(t.row + 1) * d]);
        }
        let (start, width) = self.output_rows(batch);
        matmul(
            View::new(dlogits, nt, width).t(),
            View::new(&y, nt, d),
            &mut grad[start..start + width * d],
            true,
        );
        let mut dy_t = vec![T::zero(); nt * d];
        matmul(View::new(dlogits, nt, width), View::new(self.slice(start, width * d), width, d), &mut dy_t, false);
        let mut dy = vec![T::zero(); n * d];
        for (k, t) in batch.targets.iter().enumerate() {
            for i in 0..d {
                dy[t.row * d + i] += dy_t[k * d + i];
            }
        }

        let mut dx = vec![T::zero(); n * d];
        {
            let (gpre, gpost) = grad.split_at_mut(lo.lnf_b);
            layer_norm_backward(
                &dy,
                &trace.lnf,
                self.slice(lo.lnf_g, d),
                &mut gpre[lo.lnf_g..lo.lnf_g + d],
                &mut gpost[..d],
                &mut dx,
                d,
            );
        }

        for (l, off) in lo.layers.iter().enumerate().rev() {
            let cache = &trace.layers[l];
            let LayerOffsets {
                ln1_g,
                ln1_b,
                w_qkv,
                b_qkv,
                w_o,
                b_o,
                ln2_g,
                ln2_b,
                w_1,
                b_1,
                w_2,
                b_2,
            } = *off;

            // feed-forward
            let mut dact = vec![T::zero(); n * ff];
            matmul(View::new(&dx, n, d), View::new(self.slice(w_2, ff * d), ff, d).t(), &mut dact, false);
            matmul(View::new(&cache.ff_act, n, ff).t(), View::new(&dx, n, d), &mut grad[w_2..w_2 + ff * d], true);
            col_sum_into(&dx, &mut grad[b_2..b_2 + d]);
            for (g, &u) in dact.iter_mut().zip(&cache.ff_pre) {
                *g *= gelu_grad(u);
            }
            matmul(View::new(&cache.ln2.out, n, d).t(), View::new(&dact, n, ff), &mut grad[w_1..w_1 + d * ff], true);
            col_sum_into(&dact, &mut grad[b_1..b_1 + ff]);
            let mut dln2 = vec![T::zero(); n * d];
            matmul(View::new(&dact, n, ff), View::new(self.slice(w_1, d * ff), d, ff).t(), &mut dln2, false);
            let mut dmid = dx;
            {
                let (a, b) = grad.split_at_mut(ln2_b);
                layer_norm_backward(&dln2, &cache.ln2, self.slice(ln2_g, d), &mut a[ln2_g..ln2_g + d], &mut b[..d], &mut dmid, d);
            }

            // attention output projection
            let mut dctx = vec![T::zero(); n * d];
            matmul(View::new(&dmid, n, d), View::new(self.slice(w_o, d * d), d, d).t(), &mut dctx, false);
            matmul(View::new(&cache.ctx, n, d).t(), View::new(&dmid, n, d), &mut grad[w_o..w_o + d * d], true);
            col_sum_into(&dmid, &mut grad[b_o..b_o + d]);

            // scaled dot-product attention
            let qkv = &cache.qkv;
            let mut dqkv = vec![T::zero(); n * 3 * d];
            let mut dp = vec![T::zero(); tlen];
            for b in 0..bsz {
                let len = batch.lengths[b];
                for h in 0..heads {
                    let pbase = (b * heads + h) * tlen * tlen;
                    for i in 0..tlen {
                        let prow = &cache.probs[pbase + i * tlen..pbase + (i + 1) * tlen];
                        let go = (b * tlen + i) * d + h * dh;
                        let mut weighted = T::zero();
                        for j in 0..tlen {
                            dp[j] = T::zero();
                            if prow[j] != T::zero() {
                                let vj = (b * tlen + j) * 3 * d + 2 * d + h * dh;
                                let mut s = T::zero();
                                for t in 0..dh {
                                    s += dctx[go + t] * qkv[vj + t];
                                    dqkv[vj + t] += prow[j] * dctx[go + t];
                                }
                                dp[j] = s;
                                weighted += s * prow[j];
                            }
                        }
                        let qi = (b * tlen + i) * 3 * d + h * dh;
                        for j in 0..tlen {
                            if !key_allowed(batch.attention, len, i, j) || prow[j] == T::zero() {
                                continue;
                            }
                            let ds = prow[j] * (dp[j] - weighted) * scale;
                            let kj = (b * tlen + j) * 3 * d + d + h * dh;
                            for t in 0..dh {
                                dqkv[qi + t] += ds * qkv[kj + t];
                                dqkv[kj + t] += ds * qkv[qi + t];
                            }
                        }
                    }
                }
            }

            matmul(View::new(&cache.ln1.out, n, d).t(), View::new(&dqkv, n, 3 * d), &mut grad[w_qkv..w_qkv + 3 * d * d], true);
            col_sum_into(&dqkv, &mut grad[b_qkv..b_qkv + 3 * d]);
            let mut dln1 = vec![T::zero(); n * d];
            matmul(View::new(&dqkv, n, 3 * d), View::new(self.slice(w_qkv, 3 * d * d), d, 3 * d).t(), &mut dln1, false);
            {
                let (a, b) = grad.split_at_mut(ln1_b);
                layer_norm_backward(&dln1, &cache.ln1, self.slice(ln1_g, d), &mut a[ln1_g..ln1_g + d], &mut b[..d], &mut dmid, d);
            }
            dx = dmid;
        }

        for r in 0..n {
            if batch.is_pad_row(r) {
                continue;
            }
            let tok = batch.tokens[r] as usize;
            let pos = r % tlen;
            for i in 0..d {
                grad[lo.tok_emb + tok * d + i] += dx[r * d + i];
                grad[lo.pos_emb + pos * d + i] += dx[r * d + i];
            }
        }
        grad
    }
}
