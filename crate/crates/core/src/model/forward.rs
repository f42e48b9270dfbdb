//! Exact forward and backward passes.

use super::{Block, GradientSet, ModelParams};
use crate::error::{DeptError, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_a_bt, matmul_at_b_acc, Tensor};

const LN_EPS: f64 = 1e-5;

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct BlockCache<T> {
    x_in: Vec<T>,
    ln1: LnCache<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    /// Causal attention probabilities, `[batch][head][query][key]`.
    att: Vec<T>,
    attn_out: Vec<T>,
    x_mid: Vec<T>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    fc_pre: Vec<T>,
    fc_act: Vec<T>,
}

/// Activations cached by [`forward`] for one call to [`backward`].
pub struct ForwardTrace<T> {
    batch: usize,
    seq: usize,
    vocab: usize,
    tokens: Vec<u32>,
    blocks: Vec<BlockCache<T>>,
    lnf: LnCache<T>,
    h_final: Vec<T>,
    probs: Vec<T>,
    layer_norms: Vec<f64>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// L2 norm of each block's output activations over the whole batch.
    pub fn layer_activation_norms(&self) -> &[f64] {
        &self.layer_norms
    }

    /// Mean over layers of the per-layer activation norms.
    pub fn activation_l2_norm(&self) -> f64 {
        if self.layer_norms.is_empty() {
            return 0.0;
        }
        self.layer_norms.iter().sum::<f64>() / self.layer_norms.len() as f64
    }

    pub fn predicted_positions(&self) -> usize {
        self.batch * (self.seq - 1)
    }
}

pub struct ForwardOutput<T> {
    /// `(batch·seq) × vocab`, row-major by sequence then position.
    pub logits: Tensor<T>,
    /// Mean next-token cross-entropy over all predicted positions.
    pub loss: T,
    pub trace: ForwardTrace<T>,
}

fn layer_norm<T: Scalar>(x: &[T], g: &[T], b: &[T], d: usize) -> (Vec<T>, LnCache<T>) {
    let n = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n];
    let inv_d = T::one() / T::of(d as f64);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = xh * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns dx and accumulates dg, db.
fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LnCache<T>,
    g: &[T],
    d: usize,
    dg: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let n = dy.len() / d;
    let mut dx = vec![T::zero(); dy.len()];
    let inv_d = T::one() / T::of(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..n {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::of((2.0 / std::f64::consts::PI).sqrt()), T::of(0.044715))
}

fn gelu<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

fn add_bias<T: Scalar>(x: &mut [T], b: &[T]) {
    let d = b.len();
    for row in x.chunks_exact_mut(d) {
        row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
    }
}

fn bias_grad<T: Scalar>(dy: &[T], db: &mut [T]) {
    let d = db.len();
    for row in dy.chunks_exact(d) {
        db.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
    }
}

fn validate_batch(batch: &[Vec<u32>], vocab: usize, max_len: usize) -> Result<usize> {
    let first = batch.first().ok_or_else(|| DeptError::InvalidArgument("empty batch".into()))?;
    let seq = first.len();
    if seq < 2 || seq > max_len {
        return Err(DeptError::InvalidArgument(format!(
            "sequence length {seq} outside [2, {max_len}]"
        )));
    }
    for s in batch {
        if s.len() != seq {
            return Err(DeptError::ShapeMismatch("ragged batch".into()));
        }
        if let Some(&id) = s.iter().find(|&&id| id as usize >= vocab) {
            return Err(DeptError::TokenOutOfRange { id, size: vocab });
        }
    }
    Ok(seq)
}

fn attention_forward<T: Scalar>(
    qkv: &[T],
    batch: usize,
    seq: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let hd = d / heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut att = vec![T::zero(); batch * heads * seq * seq];
    let mut out = vec![T::zero(); batch * seq * d];
    for b in 0..batch {
        for h in 0..heads {
            let base = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let qi = &qkv[(b * seq + i) * 3 * d + h * hd..][..hd];
                let row = &mut att[base + i * seq..base + (i + 1) * seq];
                let mut max = T::neg_infinity();
                for j in 0..=i {
                    let kj = &qkv[(b * seq + j) * 3 * d + d + h * hd..][..hd];
                    let s = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum::<T>() * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut denom = T::zero();
                for v in row[..=i].iter_mut() {
                    *v = (*v - max).exp();
                    denom += *v;
                }
                for v in row[..=i].iter_mut() {
                    *v /= denom;
                }
                let oi = &mut out[(b * seq + i) * d + h * hd..][..hd];
                for j in 0..=i {
                    let p = row[j];
                    let vj = &qkv[(b * seq + j) * 3 * d + 2 * d + h * hd..][..hd];
                    oi.iter_mut().zip(vj).for_each(|(o, &v)| *o += p * v);
                }
            }
        }
    }
    (att, out)
}

fn attention_backward<T: Scalar>(
    d_out: &[T],
    qkv: &[T],
    att: &[T],
    batch: usize,
    seq: usize,
    d: usize,
    heads: usize,
) -> Vec<T> {
    let hd = d / heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut dqkv = vec![T::zero(); qkv.len()];
    let mut dp = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let base = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let doi = &d_out[(b * seq + i) * d + h * hd..][..hd];
                let prow = &att[base + i * seq..base + (i + 1) * seq];
                let mut dot = T::zero();
                for j in 0..=i {
                    let vrow = (b * seq + j) * 3 * d + 2 * d + h * hd;
                    let vj = &qkv[vrow..vrow + hd];
                    dp[j] = doi.iter().zip(vj).map(|(&a, &c)| a * c).sum();
                    dot += prow[j] * dp[j];
                    let dvj = &mut dqkv[vrow..vrow + hd];
                    dvj.iter_mut().zip(doi).for_each(|(g, &o)| *g += prow[j] * o);
                }
                let qrow = (b * seq + i) * 3 * d + h * hd;
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = (b * seq + j) * 3 * d + d + h * hd;
                    for t in 0..hd {
                        let kv = qkv[krow + t];
                        let qv = qkv[qrow + t];
                        dqkv[qrow + t] += ds * kv;
                        dqkv[krow + t] += ds * qv;
                    }
                }
            }
        }
    }
    dqkv
}

fn block_forward<T: Scalar>(
    blk: &Block<T>,
    x_in: Vec<T>,
    batch: usize,
    seq: usize,
    d: usize,
    heads: usize,
    f: usize,
) -> (Vec<T>, BlockCache<T>) {
    let n = batch * seq;
    let (h1, ln1) = layer_norm(&x_in, blk.ln1_g.data(), blk.ln1_b.data(), d);
    let mut qkv = vec![T::zero(); n * 3 * d];
    matmul(&h1, blk.w_qkv.data(), n, d, 3 * d, &mut qkv);
    add_bias(&mut qkv, blk.b_qkv.data());
    let (att, attn_out) = attention_forward(&qkv, batch, seq, d, heads);
    let mut proj = vec![T::zero(); n * d];
    matmul(&attn_out, blk.w_o.data(), n, d, d, &mut proj);
    add_bias(&mut proj, blk.b_o.data());
    let x_mid: Vec<T> = x_in.iter().zip(&proj).map(|(&a, &b)| a + b).collect();

    let (h2, ln2) = layer_norm(&x_mid, blk.ln2_g.data(), blk.ln2_b.data(), d);
    let mut fc_pre = vec![T::zero(); n * f];
    matmul(&h2, blk.w_fc.data(), n, d, f, &mut fc_pre);
    add_bias(&mut fc_pre, blk.b_fc.data());
    let fc_act: Vec<T> = fc_pre.iter().map(|&v| gelu(v)).collect();
    let mut mlp = vec![T::zero(); n * d];
    matmul(&fc_act, blk.w_proj.data(), n, f, d, &mut mlp);
    add_bias(&mut mlp, blk.b_proj.data());
    let x_out: Vec<T> = x_mid.iter().zip(&mlp).map(|(&a, &b)| a + b).collect();

    let cache = BlockCache { x_in, ln1, h1, qkv, att, attn_out, x_mid, ln2, h2, fc_pre, fc_act };
    (x_out, cache)
}

/// Runs the model on a batch of equal-length id sequences (`2 ≤ len ≤ seq_len`).
pub fn forward<T: Scalar>(params: &ModelParams<T>, batch: &[Vec<u32>]) -> Result<ForwardOutput<T>> {
    let arch = &params.arch;
    let vocab = params.vocab_size();
    let seq = validate_batch(batch, vocab, arch.seq_len)?;
    let (bsz, d, heads, f) = (batch.len(), arch.d_model, arch.num_heads, arch.ffn_dim());
    let n = bsz * seq;

    let tokens: Vec<u32> = batch.iter().flatten().copied().collect();
    let mut x = vec![T::zero(); n * d];
    for (r, &tok) in tokens.iter().enumerate() {
        let pos = r % seq;
        let row = &mut x[r * d..(r + 1) * d];
        let te = params.tok_emb.row(tok as usize);
        let pe = params.pos_emb.row(pos);
        for j in 0..d {
            row[j] = te[j] + pe[j];
        }
    }

    let mut blocks = Vec::with_capacity(params.body.blocks.len());
    let mut layer_norms = Vec::with_capacity(params.body.blocks.len());
    for blk in &params.body.blocks {
        let (x_out, cache) = block_forward(blk, x, bsz, seq, d, heads, f);
        layer_norms.push(x_out.iter().map(|&v| (v * v).as_f64()).sum::<f64>().sqrt());
        blocks.push(cache);
        x = x_out;
    }

    let (h_final, lnf) = layer_norm(&x, params.body.lnf_g.data(), params.body.lnf_b.data(), d);
    let mut logits = vec![T::zero(); n * vocab];
    matmul_a_bt(&h_final, params.tok_emb.data(), n, d, vocab, &mut logits);

    let mut probs = vec![T::zero(); n * vocab];
    let mut total = T::zero();
    for r in 0..n {
        let lrow = &logits[r * vocab..(r + 1) * vocab];
        let max = lrow.iter().copied().fold(T::neg_infinity(), T::max);
        let prow = &mut probs[r * vocab..(r + 1) * vocab];
        let mut denom = T::zero();
        for (p, &l) in prow.iter_mut().zip(lrow) {
            *p = (l - max).exp();
            denom += *p;
        }
        prow.iter_mut().for_each(|p| *p /= denom);
        if r % seq != seq - 1 {
            let target = tokens[r + 1] as usize;
            total += denom.ln() - (lrow[target] - max);
        }
    }
    let count = T::of((bsz * (seq - 1)) as f64);
    let loss = total / count;

    let trace = ForwardTrace { batch: bsz, seq, vocab, tokens, blocks, lnf, h_final, probs, layer_norms };
    Ok(ForwardOutput { logits: Tensor::from_vec(&[n, vocab], logits)?, loss, trace })
}

/// Exact gradients of `loss_scale · loss` with respect to every parameter.
/// Consumes the trace, so a trace backs exactly one backward pass.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    trace: ForwardTrace<T>,
    loss_scale: T,
) -> Result<GradientSet<T>> {
    let arch = &params.arch;
    if trace.vocab != params.vocab_size() || trace.blocks.len() != params.body.blocks.len() {
        return Err(DeptError::ShapeMismatch("trace does not match parameters".into()));
    }
    let (bsz, seq, vocab) = (trace.batch, trace.seq, trace.vocab);
    let (d, heads, f) = (arch.d_model, arch.num_heads, arch.ffn_dim());
    let n = bsz * seq;
    let mut grads = params.zeros_like();

    // dL/dlogits = (softmax - onehot) / count on predicted positions
    let inv = loss_scale / T::of(trace.predicted_positions() as f64);
    let mut dlogits = trace.probs;
    for r in 0..n {
        let row = &mut dlogits[r * vocab..(r + 1) * vocab];
        if r % seq == seq - 1 {
            row.iter_mut().for_each(|v| *v = T::zero());
        } else {
            row[trace.tokens[r + 1] as usize] -= T::one();
            row.iter_mut().for_each(|v| *v *= inv);
        }
    }
    // tied head: logits = h φᵀ
    let mut dh = vec![T::zero(); n * d];
    matmul(&dlogits, params.tok_emb.data(), n, vocab, d, &mut dh);
    matmul_at_b_acc(&dlogits, &trace.h_final, n, vocab, d, grads.tok_emb.data_mut());

    let mut dx = layer_norm_backward(
        &dh,
        &trace.lnf,
        params.body.lnf_g.data(),
        d,
        grads.body.lnf_g.data_mut(),
        grads.body.lnf_b.data_mut(),
    );

    for (bi, cache) in trace.blocks.into_iter().enumerate().rev() {
        let blk = &params.body.blocks[bi];
        let g = &mut grads.body.blocks[bi];

        // MLP
        bias_grad(&dx, g.b_proj.data_mut());
        matmul_at_b_acc(&cache.fc_act, &dx, n, f, d, g.w_proj.data_mut());
        let mut dact = vec![T::zero(); n * f];
        matmul_a_bt(&dx, blk.w_proj.data(), n, d, f, &mut dact);
        for (da, &pre) in dact.iter_mut().zip(&cache.fc_pre) {
            *da *= gelu_grad(pre);
        }
        bias_grad(&dact, g.b_fc.data_mut());
        matmul_at_b_acc(&cache.h2, &dact, n, d, f, g.w_fc.data_mut());
        let mut dh2 = vec![T::zero(); n * d];
        matmul_a_bt(&dact, blk.w_fc.data(), n, f, d, &mut dh2);
        let dmid_ln =
            layer_norm_backward(&dh2, &cache.ln2, blk.ln2_g.data(), d, g.ln2_g.data_mut(), g.ln2_b.data_mut());
        let dmid: Vec<T> = dx.iter().zip(&dmid_ln).map(|(&a, &b)| a + b).collect();
        drop(cache.x_mid);

        // attention
        bias_grad(&dmid, g.b_o.data_mut());
        matmul_at_b_acc(&cache.attn_out, &dmid, n, d, d, g.w_o.data_mut());
        let mut dattn = vec![T::zero(); n * d];
        matmul_a_bt(&dmid, blk.w_o.data(), n, d, d, &mut dattn);
        let dqkv = attention_backward(&dattn, &cache.qkv, &cache.att, bsz, seq, d, heads);
        bias_grad(&dqkv, g.b_qkv.data_mut());
        matmul_at_b_acc(&cache.h1, &dqkv, n, d, 3 * d, g.w_qkv.data_mut());
        let mut dh1 = vec![T::zero(); n * d];
        matmul_a_bt(&dqkv, blk.w_qkv.data(), n, 3 * d, d, &mut dh1);
        let din_ln =
            layer_norm_backward(&dh1, &cache.ln1, blk.ln1_g.data(), d, g.ln1_g.data_mut(), g.ln1_b.data_mut());
        drop(cache.x_in);
        dx = dmid.iter().zip(&din_ln).map(|(&a, &b)| a + b).collect();
    }

    for (r, &tok) in trace.tokens.iter().enumerate() {
        let src = &dx[r * d..(r + 1) * d];
        grads.tok_emb.row_mut(tok as usize).iter_mut().zip(src).for_each(|(g, &v)| *g += v);
        grads.pos_emb.row_mut(r % seq).iter_mut().zip(src).for_each(|(g, &v)| *g += v);
    }
    Ok(grads)
}

/// Mean next-token loss without keeping the trace around.
pub fn loss<T: Scalar>(params: &ModelParams<T>, batch: &[Vec<u32>]) -> Result<T> {
    forward(params, batch).map(|o| o.loss)
}
