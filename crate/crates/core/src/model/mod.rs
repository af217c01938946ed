//! Decoder-only transformer (pre-norm GPT-2 blocks, tied LM head) with a
//! hand-derived backward pass. Attention probabilities are kept so that
//! auxiliary objectives on them can be differentiated through the softmax.

mod attention;
mod config;
mod params;

pub use attention::AttentionTensor;
pub use config::ModelConfig;
pub use params::{InitKind, ModelParams, ParamEntry, ParamLayout};

use params::BlockOffsets;

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar, View};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// A differentiable loss term over attention probabilities.
///
/// `att` and `d_att` hold all heads of one layer for one batch row,
/// laid out `heads × len × len`.
pub trait AttentionObjective<T> {
    fn layer_value(&self, layer: usize, row: usize, att: &[T]) -> T;
    fn add_layer_grad(&self, layer: usize, row: usize, att: &[T], d_att: &mut [T]);
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    x_in: Vec<T>,
    ln1: Vec<T>,
    ln1_mean: Vec<T>,
    ln1_rstd: Vec<T>,
    qkv: Vec<T>,
    att: Vec<T>,
    atty: Vec<T>,
    x_mid: Vec<T>,
    ln2: Vec<T>,
    ln2_mean: Vec<T>,
    ln2_rstd: Vec<T>,
    fc: Vec<T>,
    gelu: Vec<T>,
}

/// Activations of one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    batch: usize,
    seq: usize,
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache<T>>,
    residual: Vec<T>,
    lnf: Vec<T>,
    lnf_mean: Vec<T>,
    lnf_rstd: Vec<T>,
    logits: Vec<T>,
    retained: bool,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    /// Logits, `(batch·seq) × vocab`.
    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn attention_retained(&self) -> bool {
        self.retained
    }

    /// Attention of one layer and batch row, `heads × seq × seq`.
    pub fn attention(&self, layer: usize, row: usize) -> &[T] {
        assert!(self.retained, "attention was not retained");
        let size = self.layers[layer].att.len() / self.batch;
        &self.layers[layer].att[row * size..(row + 1) * size]
    }

    /// Attention of one batch row as a validated tensor.
    pub fn attention_tensor(&self, row: usize) -> AttentionTensor {
        let heads = self.layers[0].att.len() / (self.batch * self.seq * self.seq);
        let weights = (0..self.layers.len())
            .flat_map(|l| self.attention(l, row).iter().map(|x| x.f64()))
            .collect();
        AttentionTensor::new(self.layers.len(), heads, self.seq, weights)
            .expect("attention buffer shape is consistent")
    }

    /// Residual stream entering `layer` (or the final residual when
    /// `layer == num_layers`), `(batch·seq) × model_dim`.
    pub fn residual_at(&self, layer: usize) -> &[T] {
        if layer < self.layers.len() {
            &self.layers[layer].x_in
        } else {
            &self.residual
        }
    }
}

/// Summary of one loss-and-gradient evaluation.
#[derive(Debug, Clone)]
pub struct LossAndGrad<T> {
    pub lm_loss: T,
    pub aux_loss: T,
    pub grads: Vec<T>,
    pub pass: ForwardPass<T>,
}

/// Single-window forward output.
#[derive(Debug, Clone)]
pub struct WindowOutput<T> {
    /// `len × vocab`, row-major.
    pub logits: Vec<T>,
    pub attention: AttentionTensor,
}

fn layernorm<T: Scalar>(x: &[T], g: &[T], b: &[T], d: usize, out: &mut [T], mean: &mut [T], rstd: &mut [T]) {
    let inv_d = T::of(1.0 / d as f64);
    let eps = T::of(LN_EPS);
    for (r, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let m = xr.iter().copied().sum::<T>() * inv_d;
        let v = xr.iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv_d;
        let s = T::one() / (v + eps).sqrt();
        for c in 0..d {
            or[c] = (xr[c] - m) * s * g[c] + b[c];
        }
        mean[r] = m;
        rstd[r] = s;
    }
}

#[allow(clippy::too_many_arguments)]
fn layernorm_backward<T: Scalar>(
    dout: &[T],
    x: &[T],
    g: &[T],
    mean: &[T],
    rstd: &[T],
    d: usize,
    dx: &mut [T],
    dg: &mut [T],
    db: &mut [T],
) {
    let inv_d = T::of(1.0 / d as f64);
    let mut norm = vec![T::zero(); d];
    let mut dnorm = vec![T::zero(); d];
    for r in 0..mean.len() {
        let xr = &x[r * d..(r + 1) * d];
        let dr = &dout[r * d..(r + 1) * d];
        let (m, s) = (mean[r], rstd[r]);
        let mut mean_dn = T::zero();
        let mut mean_dn_n = T::zero();
        for c in 0..d {
            norm[c] = (xr[c] - m) * s;
            dnorm[c] = dr[c] * g[c];
            mean_dn += dnorm[c];
            mean_dn_n += dnorm[c] * norm[c];
            dg[c] += dr[c] * norm[c];
            db[c] += dr[c];
        }
        mean_dn *= inv_d;
        mean_dn_n *= inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for c in 0..d {
            dxr[c] += s * (dnorm[c] - mean_dn - norm[c] * mean_dn_n);
        }
    }
}

/// `out = x·w + b` with `x: rows × k`, `w: k × m`.
fn linear<T: Scalar>(x: &[T], w: &[T], b: &[T], rows: usize, k: usize, m: usize, out: &mut [T]) {
    for r in out.chunks_exact_mut(m) {
        r.copy_from_slice(b);
    }
    gemm(rows, k, m, T::one(), x, View::rows(0, k), w, View::rows(0, m), T::one(), out, View::rows(0, m));
}

/// Accumulates `dx += dy·wᵀ`, `dw += xᵀ·dy`, `db += Σ dy`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    w: &[T],
    rows: usize,
    k: usize,
    m: usize,
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
) {
    gemm(rows, m, k, T::one(), dy, View::rows(0, m), w, View::transposed(0, m), T::one(), dx, View::rows(0, k));
    gemm(k, rows, m, T::one(), x, View::transposed(0, k), dy, View::rows(0, m), T::one(), dw, View::rows(0, m));
    for r in dy.chunks_exact(m) {
        for (acc, &v) in db.iter_mut().zip(r) {
            *acc += v;
        }
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Masked softmax over keys `0..=i` of each row, in place.
fn causal_softmax<T: Scalar>(scores: &mut [T], n: usize) {
    for (i, row) in scores.chunks_exact_mut(n).enumerate() {
        let max = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in &mut row[..=i] {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row[..=i].iter_mut().for_each(|v| *v *= inv);
        row[i + 1..].fill(T::zero());
    }
}

impl<T: Scalar> ModelParams<T> {
    fn block(&self, l: usize) -> BlockOffsets {
        self.layout().offsets.blocks[l]
    }

    fn slice(&self, offset: usize, len: usize) -> &[T] {
        &self.data()[offset..offset + len]
    }

    fn check_tokens(&self, tokens: &[TokenId], seq: usize) -> Result<()> {
        let cfg = self.config();
        if seq == 0 {
            return Err(Error::ShapeMismatch("empty window".into()));
        }
        if seq > cfg.context_length {
            return Err(Error::WindowTooLong {
                len: seq,
                max: cfg.context_length,
            });
        }
        if !tokens.len().is_multiple_of(seq) {
            return Err(Error::ShapeMismatch(format!(
                "{} tokens do not form rows of {seq}",
                tokens.len()
            )));
        }
        if let Some((pos, &id)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= cfg.vocab_size) {
            return Err(Error::InvalidToken {
                id,
                pos,
                vocab: cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Forward pass over `tokens.len() / seq` rows of length `seq`.
    pub fn forward_batch(&self, tokens: &[TokenId], seq: usize, retain_attention: bool) -> Result<ForwardPass<T>> {
        self.check_tokens(tokens, seq)?;
        let cfg = self.config();
        let (d, h, f, v) = (cfg.model_dim, cfg.num_heads, cfg.mlp_dim, cfg.vocab_size);
        let hd = cfg.head_dim();
        let batch = tokens.len() / seq;
        let rows = batch * seq;
        let offs = &self.layout().offsets;
        let scale = T::of(1.0 / (hd as f64).sqrt());

        let mut x = vec![T::zero(); rows * d];
        let wte = self.slice(offs.wte, v * d);
        let wpe = self.slice(offs.wpe, cfg.context_length * d);
        for (r, xr) in x.chunks_exact_mut(d).enumerate() {
            let (tok, pos) = (tokens[r] as usize, r % seq);
            for c in 0..d {
                xr[c] = wte[tok * d + c] + wpe[pos * d + c];
            }
        }

        let mut layers = Vec::with_capacity(cfg.num_layers);
        let mut scratch = vec![T::zero(); if retain_attention { 0 } else { seq * seq }];
        for l in 0..cfg.num_layers {
            let o = self.block(l);
            let mut c = LayerCache {
                x_in: x,
                ln1: vec![T::zero(); rows * d],
                ln1_mean: vec![T::zero(); rows],
                ln1_rstd: vec![T::zero(); rows],
                qkv: vec![T::zero(); rows * 3 * d],
                att: vec![T::zero(); if retain_attention { batch * h * seq * seq } else { 0 }],
                atty: vec![T::zero(); rows * d],
                x_mid: vec![T::zero(); rows * d],
                ln2: vec![T::zero(); rows * d],
                ln2_mean: vec![T::zero(); rows],
                ln2_rstd: vec![T::zero(); rows],
                fc: vec![T::zero(); rows * f],
                gelu: vec![T::zero(); rows * f],
            };
            layernorm(&c.x_in, self.slice(o.ln1_g, d), self.slice(o.ln1_b, d), d, &mut c.ln1, &mut c.ln1_mean, &mut c.ln1_rstd);
            linear(&c.ln1, self.slice(o.qkv_w, d * 3 * d), self.slice(o.qkv_b, 3 * d), rows, d, 3 * d, &mut c.qkv);

            for b in 0..batch {
                for head in 0..h {
                    let (buf, base) = if retain_attention {
                        (&mut c.att, ((b * h) + head) * seq * seq)
                    } else {
                        (&mut scratch, 0)
                    };
                    let q = b * seq * 3 * d + head * hd;
                    gemm(seq, hd, seq, scale, &c.qkv, View::rows(q, 3 * d), &c.qkv, View::transposed(q + d, 3 * d), T::zero(), buf, View::rows(base, seq));
                    causal_softmax(&mut buf[base..base + seq * seq], seq);
                    gemm(seq, seq, hd, T::one(), buf, View::rows(base, seq), &c.qkv, View::rows(q + 2 * d, 3 * d), T::zero(), &mut c.atty, View::rows(b * seq * d + head * hd, d));
                }
            }

            linear(&c.atty, self.slice(o.proj_w, d * d), self.slice(o.proj_b, d), rows, d, d, &mut c.x_mid);
            for (m, &xi) in c.x_mid.iter_mut().zip(&c.x_in) {
                *m += xi;
            }
            layernorm(&c.x_mid, self.slice(o.ln2_g, d), self.slice(o.ln2_b, d), d, &mut c.ln2, &mut c.ln2_mean, &mut c.ln2_rstd);
            linear(&c.ln2, self.slice(o.fc_w, d * f), self.slice(o.fc_b, f), rows, d, f, &mut c.fc);
            for (g, &z) in c.gelu.iter_mut().zip(&c.fc) {
                *g = gelu(z);
            }
            let mut out = vec![T::zero(); rows * d];
            linear(&c.gelu, self.slice(o.out_w, f * d), self.slice(o.out_b, d), rows, f, d, &mut out);
            for (y, &m) in out.iter_mut().zip(&c.x_mid) {
                *y += m;
            }
            x = out;
            layers.push(c);
        }

        let mut lnf = vec![T::zero(); rows * d];
        let mut lnf_mean = vec![T::zero(); rows];
        let mut lnf_rstd = vec![T::zero(); rows];
        layernorm(&x, self.slice(offs.lnf_g, d), self.slice(offs.lnf_b, d), d, &mut lnf, &mut lnf_mean, &mut lnf_rstd);
        let mut logits = vec![T::zero(); rows * v];
        gemm(rows, d, v, T::one(), &lnf, View::rows(0, d), wte, View::transposed(0, d), T::zero(), &mut logits, View::rows(0, v));

        Ok(ForwardPass {
            batch,
            seq,
            tokens: tokens.to_vec(),
            layers,
            residual: x,
            lnf,
            lnf_mean,
            lnf_rstd,
            logits,
            retained: retain_attention,
        })
    }

    /// Forward pass of one window, returning logits and attention.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<WindowOutput<T>> {
        let pass = self.forward_batch(tokens, tokens.len(), true)?;
        Ok(WindowOutput {
            attention: pass.attention_tensor(0),
            logits: pass.logits,
        })
    }

    /// Per-position hidden states entering `layer`, as f64 vectors.
    pub fn hidden_states(&self, tokens: &[TokenId], layer: usize) -> Result<Vec<Vec<f64>>> {
        if layer > self.config().num_layers {
            return Err(Error::InvalidConfig(format!("no layer {layer}")));
        }
        let pass = self.forward_batch(tokens, tokens.len(), false)?;
        let d = self.config().model_dim;
        Ok(pass
            .residual_at(layer)
            .chunks_exact(d)
            .map(|r| r.iter().map(|x| x.f64()).collect())
            .collect())
    }

    /// Mean next-token cross-entropy and its gradient, plus an optional
    /// attention objective whose gradient flows back through the softmax.
    pub fn loss_and_grad(
        &self,
        inputs: &[TokenId],
        targets: &[TokenId],
        seq: usize,
        objective: Option<&dyn AttentionObjective<T>>,
    ) -> Result<LossAndGrad<T>> {
        if inputs.len() != targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs vs {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        self.check_tokens(targets, seq)?;
        let pass = self.forward_batch(inputs, seq, true)?;
        let cfg = self.config();
        let v = cfg.vocab_size;
        let (lm_loss, dlogits) = cross_entropy_with_grad(&pass.logits, targets, v);
        let aux_loss = match objective {
            Some(obj) => (0..cfg.num_layers)
                .flat_map(|l| (0..pass.batch).map(move |b| (l, b)))
                .map(|(l, b)| obj.layer_value(l, b, pass.attention(l, b)))
                .sum(),
            None => T::zero(),
        };
        let grads = self.backward(&pass, &dlogits, objective);
        Ok(LossAndGrad {
            lm_loss,
            aux_loss,
            grads,
            pass,
        })
    }

    fn backward(&self, pass: &ForwardPass<T>, dlogits: &[T], objective: Option<&dyn AttentionObjective<T>>) -> Vec<T> {
        let cfg = self.config();
        let (d, h, f, v) = (cfg.model_dim, cfg.num_heads, cfg.mlp_dim, cfg.vocab_size);
        let hd = cfg.head_dim();
        let (batch, seq) = (pass.batch, pass.seq);
        let rows = batch * seq;
        let offs = &self.layout().offsets;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut grads = vec![T::zero(); self.num_params()];

        // tied LM head
        let wte = self.slice(offs.wte, v * d);
        let mut dlnf = vec![T::zero(); rows * d];
        gemm(rows, v, d, T::one(), dlogits, View::rows(0, v), wte, View::rows(0, d), T::zero(), &mut dlnf, View::rows(0, d));
        gemm(v, rows, d, T::one(), dlogits, View::transposed(0, v), &pass.lnf, View::rows(0, d), T::one(), &mut grads[offs.wte..offs.wte + v * d], View::rows(0, d));

        let mut dres = vec![T::zero(); rows * d];
        {
            let (dg, db) = two_slices(&mut grads, offs.lnf_g, offs.lnf_b, d);
            layernorm_backward(&dlnf, &pass.residual, self.slice(offs.lnf_g, d), &pass.lnf_mean, &pass.lnf_rstd, d, &mut dres, dg, db);
        }

        let mut d_att_row = vec![T::zero(); h * seq * seq];
        for l in (0..cfg.num_layers).rev() {
            let o = self.block(l);
            let c = &pass.layers[l];

            // MLP sublayer
            let mut dx_mid = dres.clone();
            let mut dgelu = vec![T::zero(); rows * f];
            {
                let (dw, db) = two_slices(&mut grads, o.out_w, o.out_b, 0);
                let dw = &mut dw[..f * d];
                let db = &mut db[..d];
                linear_backward(&dres, &c.gelu, self.slice(o.out_w, f * d), rows, f, d, &mut dgelu, dw, db);
            }
            for (g, &z) in dgelu.iter_mut().zip(&c.fc) {
                *g *= gelu_grad(z);
            }
            let mut dln2 = vec![T::zero(); rows * d];
            {
                let (dw, db) = two_slices(&mut grads, o.fc_w, o.fc_b, 0);
                linear_backward(&dgelu, &c.ln2, self.slice(o.fc_w, d * f), rows, d, f, &mut dln2, &mut dw[..d * f], &mut db[..f]);
            }
            {
                let (dg, db) = two_slices(&mut grads, o.ln2_g, o.ln2_b, d);
                layernorm_backward(&dln2, &c.x_mid, self.slice(o.ln2_g, d), &c.ln2_mean, &c.ln2_rstd, d, &mut dx_mid, dg, db);
            }

            // attention sublayer
            let mut dx_in = dx_mid.clone();
            let mut datty = vec![T::zero(); rows * d];
            {
                let (dw, db) = two_slices(&mut grads, o.proj_w, o.proj_b, 0);
                linear_backward(&dx_mid, &c.atty, self.slice(o.proj_w, d * d), rows, d, d, &mut datty, &mut dw[..d * d], &mut db[..d]);
            }
            let mut dqkv = vec![T::zero(); rows * 3 * d];
            for b in 0..batch {
                let att_row = &c.att[b * h * seq * seq..(b + 1) * h * seq * seq];
                for head in 0..h {
                    let q = b * seq * 3 * d + head * hd;
                    let base = head * seq * seq;
                    // dA = datty_h · Vᵀ ; dV = Aᵀ · datty_h
                    gemm(seq, hd, seq, T::one(), &datty, View::rows(b * seq * d + head * hd, d), &c.qkv, View::transposed(q + 2 * d, 3 * d), T::zero(), &mut d_att_row, View::rows(base, seq));
                    gemm(seq, seq, hd, T::one(), att_row, View::transposed(base, seq), &datty, View::rows(b * seq * d + head * hd, d), T::zero(), &mut dqkv, View::rows(q + 2 * d, 3 * d));
                }
                if let Some(obj) = objective {
                    obj.add_layer_grad(l, b, att_row, &mut d_att_row);
                }
                // softmax backward, in place: dS = A ⊙ (dA − Σ_k A·dA)
                for (a_r, da_r) in att_row.chunks_exact(seq).zip(d_att_row.chunks_exact_mut(seq)) {
                    let dot: T = a_r.iter().zip(da_r.iter()).map(|(&a, &g)| a * g).sum();
                    for (g, &a) in da_r.iter_mut().zip(a_r) {
                        *g = a * (*g - dot);
                    }
                }
                for head in 0..h {
                    let q = b * seq * 3 * d + head * hd;
                    let base = head * seq * seq;
                    // dQ = dS·K·scale ; dK = dSᵀ·Q·scale
                    gemm(seq, seq, hd, scale, &d_att_row, View::rows(base, seq), &c.qkv, View::rows(q + d, 3 * d), T::zero(), &mut dqkv, View::rows(q, 3 * d));
                    gemm(seq, seq, hd, scale, &d_att_row, View::transposed(base, seq), &c.qkv, View::rows(q, 3 * d), T::zero(), &mut dqkv, View::rows(q + d, 3 * d));
                }
            }
            let mut dln1 = vec![T::zero(); rows * d];
            {
                let (dw, db) = two_slices(&mut grads, o.qkv_w, o.qkv_b, 0);
                linear_backward(&dqkv, &c.ln1, self.slice(o.qkv_w, d * 3 * d), rows, d, 3 * d, &mut dln1, &mut dw[..d * 3 * d], &mut db[..3 * d]);
            }
            {
                let (dg, db) = two_slices(&mut grads, o.ln1_g, o.ln1_b, d);
                layernorm_backward(&dln1, &c.x_in, self.slice(o.ln1_g, d), &c.ln1_mean, &c.ln1_rstd, d, &mut dx_in, dg, db);
            }
            dres = dx_in;
        }

        for (r, dr) in dres.chunks_exact(d).enumerate() {
            let (tok, pos) = (pass.tokens[r] as usize, r % seq);
            for c in 0..d {
                grads[offs.wte + tok * d + c] += dr[c];
                grads[offs.wpe + pos * d + c] += dr[c];
            }
        }
        grads
    }
}

/// Splits out two disjoint tensors `[a, a+len)` and `[b, ...)` with `a < b`.
/// With `len == 0` the first slice runs up to `b`.
fn two_slices<T>(buf: &mut [T], a: usize, b: usize, len: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a < b);
    let (lo, hi) = buf.split_at_mut(b);
    let first = if len == 0 { &mut lo[a..] } else { &mut lo[a..a + len] };
    let second = if len == 0 { hi } else { &mut hi[..len] };
    (first, second)
}

/// Mean cross-entropy and `∂loss/∂logits`.
fn cross_entropy_with_grad<T: Scalar>(logits: &[T], targets: &[TokenId], v: usize) -> (T, Vec<T>) {
    let rows = targets.len();
    let inv_rows = T::of(1.0 / rows as f64);
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = T::zero();
    for (r, (lr, gr)) in logits.chunks_exact(v).zip(grad.chunks_exact_mut(v)).enumerate() {
        let max = lr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (g, &z) in gr.iter_mut().zip(lr) {
            *g = (z - max).exp();
            sum += *g;
        }
        let t = targets[r] as usize;
        loss += sum.ln() + max - lr[t];
        let inv = T::one() / sum;
        for g in gr.iter_mut() {
            *g = *g * inv * inv_rows;
        }
        gr[t] -= inv_rows;
    }
    (loss * inv_rows, grad)
}

/// Mean over positions of `−log softmax(logits_i)[target_i]`.
pub fn lm_loss<T: Scalar>(logits: &[T], targets: &[TokenId], vocab_size: usize) -> Result<T> {
    if targets.is_empty() || logits.len() != targets.len() * vocab_size {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for {} targets over vocab {vocab_size}",
            logits.len(),
            targets.len()
        )));
    }
    if let Some((pos, &id)) = targets.iter().enumerate().find(|(_, &t)| t as usize >= vocab_size) {
        return Err(Error::InvalidToken {
            id,
            pos,
            vocab: vocab_size,
        });
    }
    let mut loss = T::zero();
    for (lr, &t) in logits.chunks_exact(vocab_size).zip(targets) {
        let max = lr.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = lr.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
        loss += lse - lr[t as usize];
    }
    Ok(loss / T::of(targets.len() as f64))
}
