//! Forward pass, reverse-mode backward pass, and the per-step trace the
//! explainers read.
//!
//! Architecture: pre-layernorm residual blocks with learned positional
//! embeddings and an untied unembedding. The gen position is the last input
//! position.

use super::mat::{dot, Mat};
use super::params::{HeadParams, Norm, Params};
use crate::domain::TokenId;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Everything one decoding step exposes at the gen position.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub logits: Vec<f64>,
    /// `[layer][head]` gen-position attention row over all input positions.
    pub attn_rows: Vec<Vec<Vec<f64>>>,
    /// `[layer][head]` residual-stream write of the head at gen (`d`).
    pub head_outputs: Vec<Vec<Vec<f64>>>,
    /// Summed token+positional embedding at gen.
    pub embedding_gen: Vec<f64>,
    /// Residual stream after the last block at gen, before the final norm.
    pub final_hidden: Vec<f64>,
    /// `1/σ` of the final layernorm at gen, when layernorm is on.
    pub final_inv_std: Option<f64>,
}

impl ForwardTrace {
    pub fn answer_logit(&self, token: TokenId) -> Result<f64> {
        self.logits
            .get(token as usize)
            .copied()
            .ok_or_else(|| Error::Model(format!("token id {token} outside vocabulary")))
    }

    pub fn greedy_token(&self) -> TokenId {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best as TokenId
    }

    pub fn n_layers(&self) -> usize {
        self.attn_rows.len()
    }

    pub fn n_heads(&self) -> usize {
        self.attn_rows.first().map_or(0, |l| l.len())
    }

    pub fn log_prob(&self, token: TokenId) -> Result<f64> {
        let l = self.answer_logit(token)?;
        Ok(l - log_sum_exp(&self.logits))
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

struct NormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

struct HeadCache {
    q: Mat,
    k: Mat,
    v: Mat,
    /// `n × n`, lower triangular.
    attn: Mat,
    z: Mat,
}

struct LayerCache {
    attn_in: Mat,
    ln_attn: Option<NormCache>,
    heads: Vec<HeadCache>,
    mlp_in: Option<Mat>,
    ln_mlp: Option<NormCache>,
    h_pre: Option<Mat>,
    h_act: Option<Mat>,
}

pub(crate) struct Cache {
    n: usize,
    layers: Vec<LayerCache>,
    ln_final: Option<(Vec<f64>, f64)>,
    normed_gen: Vec<f64>,
}

fn norm_forward(x: &Mat, norm: &Norm) -> (Mat, NormCache) {
    let d = x.cols;
    let mut y = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for c in 0..d {
            let h = (row[c] - mu) * inv;
            xhat.set(r, c, h);
            y.set(r, c, norm.gain[c] * h + norm.bias[c]);
        }
    }
    (y, NormCache { xhat, inv_std })
}

fn norm_vec(x: &[f64], norm: &Norm) -> (Vec<f64>, Vec<f64>, f64) {
    let d = x.len();
    let mu = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mu) * inv).collect();
    let y = xhat
        .iter()
        .zip(&norm.gain)
        .zip(&norm.bias)
        .map(|((h, g), b)| g * h + b)
        .collect();
    (y, xhat, inv)
}

/// Gradient of layernorm w.r.t. its input for one row; accumulates the
/// gain/bias gradients.
fn norm_backward_row(
    dy: &[f64],
    xhat: &[f64],
    inv_std: f64,
    norm: &Norm,
    grad: Option<&mut Norm>,
) -> Vec<f64> {
    let d = dy.len() as f64;
    let dxhat: Vec<f64> = dy.iter().zip(&norm.gain).map(|(a, g)| a * g).collect();
    if let Some(g) = grad {
        for c in 0..dy.len() {
            g.gain[c] += dy[c] * xhat[c];
            g.bias[c] += dy[c];
        }
    }
    let mean_dxhat = dxhat.iter().sum::<f64>() / d;
    let mean_dxhat_xhat = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d;
    dxhat
        .iter()
        .zip(xhat)
        .map(|(dh, h)| inv_std * (dh - mean_dxhat - h * mean_dxhat_xhat))
        .collect()
}

fn norm_backward(dy: &Mat, cache: &NormCache, norm: &Norm, mut grad: Option<&mut Norm>) -> Mat {
    let mut dx = Mat::zeros(dy.rows, dy.cols);
    for r in 0..dy.rows {
        let row = norm_backward_row(
            dy.row(r),
            cache.xhat.row(r),
            cache.inv_std[r],
            norm,
            grad.as_deref_mut(),
        );
        dx.row_mut(r).copy_from_slice(&row);
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn check_ids(params: &Params, ids: &[TokenId]) -> Result<()> {
    let cfg = &params.config;
    if ids.is_empty() {
        return Err(Error::Model("empty input".into()));
    }
    if ids.len() > cfg.max_positions {
        return Err(Error::Model(format!(
            "sequence of {} tokens exceeds max positions {}",
            ids.len(),
            cfg.max_positions
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Model(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Summed token and positional embeddings, one row per position.
pub fn input_embeddings(params: &Params, ids: &[TokenId]) -> Result<Mat> {
    check_ids(params, ids)?;
    let d = params.config.d_model;
    let mut x = Mat::zeros(ids.len(), d);
    for (i, &t) in ids.iter().enumerate() {
        let e = params.tok_emb.row(t as usize);
        let p = params.pos_emb.row(i);
        for (c, o) in x.row_mut(i).iter_mut().enumerate() {
            *o = e[c] + p[c];
        }
    }
    Ok(x)
}

/// Per-position convex combination `baseline + α (input − baseline)`, the
/// baseline being the pad token at every position.
pub fn embed_interpolate(
    params: &Params,
    ids: &[TokenId],
    baseline_id: TokenId,
    alpha: f64,
) -> Result<Mat> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("interpolation α={alpha} outside [0,1]")));
    }
    let x = input_embeddings(params, ids)?;
    let base = input_embeddings(params, &vec![baseline_id; ids.len()])?;
    let data = base
        .data
        .iter()
        .zip(&x.data)
        .map(|(b, v)| (1.0 - alpha) * b + alpha * v)
        .collect();
    Ok(Mat::from_vec(x.rows, x.cols, data))
}

pub fn forward(params: &Params, ids: &[TokenId]) -> Result<ForwardTrace> {
    let x = input_embeddings(params, ids)?;
    forward_embeddings(params, &x)
}

/// Forward pass over a raw embedding sequence (`n × d`).
pub fn forward_embeddings(params: &Params, emb: &Mat) -> Result<ForwardTrace> {
    let (trace, _) = run(params, emb)?;
    Ok(trace)
}

pub(crate) fn run(params: &Params, emb: &Mat) -> Result<(ForwardTrace, Cache)> {
    let cfg = &params.config;
    let n = emb.rows;
    if n == 0 || n > cfg.max_positions {
        return Err(Error::Model(format!("invalid sequence length {n}")));
    }
    if emb.cols != cfg.d_model {
        return Err(Error::Model(format!(
            "embedding width {} does not match d_model {}",
            emb.cols, cfg.d_model
        )));
    }
    let gen = n - 1;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = emb.clone();
    let mut layer_caches = Vec::with_capacity(params.layers.len());
    let mut attn_rows = Vec::with_capacity(params.layers.len());
    let mut head_outputs = Vec::with_capacity(params.layers.len());

    for layer in &params.layers {
        let (attn_in, ln_attn) = match &layer.ln_attn {
            Some(norm) => {
                let (y, c) = norm_forward(&x, norm);
                (y, Some(c))
            }
            None => (x.clone(), None),
        };
        let mut heads = Vec::with_capacity(layer.heads.len());
        let mut rows = Vec::with_capacity(layer.heads.len());
        let mut outs = Vec::with_capacity(layer.heads.len());
        let mut delta = Mat::zeros(n, cfg.d_model);
        for head in &layer.heads {
            let hc = head_forward(head, &attn_in, scale);
            let o = hc.z.matmul(&head.w_o);
            delta.add_assign(&o);
            rows.push(hc.attn.row(gen).to_vec());
            outs.push(o.row(gen).to_vec());
            heads.push(hc);
        }
        x.add_assign(&delta);

        let (mlp_in, ln_mlp, h_pre, h_act) = match &layer.mlp {
            Some(mlp) => {
                let (m_in, lnc) = match &layer.ln_mlp {
                    Some(norm) => {
                        let (y, c) = norm_forward(&x, norm);
                        (y, Some(c))
                    }
                    None => (x.clone(), None),
                };
                let mut pre = m_in.matmul(&mlp.w_in);
                for r in 0..n {
                    for (v, b) in pre.row_mut(r).iter_mut().zip(&mlp.b_in) {
                        *v += b;
                    }
                }
                let act = Mat::from_vec(pre.rows, pre.cols, pre.data.iter().map(|&v| gelu(v)).collect());
                let mut out = act.matmul(&mlp.w_out);
                for r in 0..n {
                    for (v, b) in out.row_mut(r).iter_mut().zip(&mlp.b_out) {
                        *v += b;
                    }
                }
                x.add_assign(&out);
                (Some(m_in), lnc, Some(pre), Some(act))
            }
            None => (None, None, None, None),
        };

        layer_caches.push(LayerCache {
            attn_in,
            ln_attn,
            heads,
            mlp_in,
            ln_mlp,
            h_pre,
            h_act,
        });
        attn_rows.push(rows);
        head_outputs.push(outs);
    }

    let final_gen = x.row(gen).to_vec();
    let (normed_gen, ln_final) = match &params.ln_final {
        Some(norm) => {
            let (y, xhat, inv) = norm_vec(&final_gen, norm);
            (y, Some((xhat, inv)))
        }
        None => (final_gen.clone(), None),
    };
    let logits = params.unembed.mul_vec(&normed_gen);
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Model("non-finite logits".into()));
    }
    let trace = ForwardTrace {
        logits,
        attn_rows,
        head_outputs,
        embedding_gen: emb.row(gen).to_vec(),
        final_hidden: final_gen,
        final_inv_std: ln_final.as_ref().map(|(_, inv)| *inv),
    };
    let cache = Cache {
        n,
        layers: layer_caches,
        ln_final,
        normed_gen,
    };
    Ok((trace, cache))
}

fn head_forward(head: &HeadParams, input: &Mat, scale: f64) -> HeadCache {
    let n = input.rows;
    let q = input.matmul(&head.w_q);
    let k = input.matmul(&head.w_k);
    let v = input.matmul(&head.w_v);
    let mut attn = Mat::zeros(n, n);
    for i in 0..n {
        let qi = q.row(i);
        let mut m = f64::NEG_INFINITY;
        let mut s = vec![0.0; i + 1];
        for (j, sj) in s.iter_mut().enumerate() {
            *sj = dot(qi, k.row(j)) * scale;
            m = m.max(*sj);
        }
        let mut total = 0.0;
        for sj in s.iter_mut() {
            *sj = (*sj - m).exp();
            total += *sj;
        }
        let row = attn.row_mut(i);
        for (j, sj) in s.iter().enumerate() {
            row[j] = sj / total;
        }
    }
    let z = attn.matmul(&v);
    HeadCache { q, k, v, attn, z }
}

/// Backpropagates `dlogits` (gradient at the gen-position logits) through
/// the cached forward pass. Parameter gradients are accumulated into
/// `grads` when given; returns the gradient w.r.t. the input embeddings.
pub(crate) fn backward(
    params: &Params,
    cache: &Cache,
    dlogits: &[f64],
    mut grads: Option<&mut Params>,
) -> Mat {
    let cfg = &params.config;
    let n = cache.n;
    let gen = n - 1;
    let d = cfg.d_model;
    let scale = 1.0 / (cfg.d_head() as f64).sqrt();

    if let Some(g) = grads.as_deref_mut() {
        for (a, &dl) in dlogits.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            for (gv, &h) in g.unembed.row_mut(a).iter_mut().zip(&cache.normed_gen) {
                *gv += dl * h;
            }
        }
    }
    let dnormed = params.unembed.vec_mul(dlogits);
    let dfinal = match (&params.ln_final, &cache.ln_final) {
        (Some(norm), Some((xhat, inv))) => {
            let g = grads.as_deref_mut().and_then(|g| g.ln_final.as_mut());
            norm_backward_row(&dnormed, xhat, *inv, norm, g)
        }
        _ => dnormed,
    };
    let mut dx = Mat::zeros(n, d);
    dx.row_mut(gen).copy_from_slice(&dfinal);

    for (li, (layer, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        if let (Some(mlp), Some(m_in), Some(pre), Some(act)) =
            (&layer.mlp, &lc.mlp_in, &lc.h_pre, &lc.h_act)
        {
            let dout = &dx;
            if let Some(g) = grads.as_deref_mut() {
                let gm = g.layers[li].mlp.as_mut().expect("mlp grads");
                act.t_matmul_acc(dout, &mut gm.w_out);
                for r in 0..n {
                    for (b, v) in gm.b_out.iter_mut().zip(dout.row(r)) {
                        *b += v;
                    }
                }
            }
            let dact = dout.matmul_t(&mlp.w_out);
            let mut dpre = dact;
            for (dv, &p) in dpre.data.iter_mut().zip(&pre.data) {
                *dv *= gelu_grad(p);
            }
            if let Some(g) = grads.as_deref_mut() {
                let gm = g.layers[li].mlp.as_mut().expect("mlp grads");
                m_in.t_matmul_acc(&dpre, &mut gm.w_in);
                for r in 0..n {
                    for (b, v) in gm.b_in.iter_mut().zip(dpre.row(r)) {
                        *b += v;
                    }
                }
            }
            let dm_in = dpre.matmul_t(&mlp.w_in);
            let dm = match (&layer.ln_mlp, &lc.ln_mlp) {
                (Some(norm), Some(nc)) => {
                    let g = grads.as_deref_mut().and_then(|g| g.layers[li].ln_mlp.as_mut());
                    norm_backward(&dm_in, nc, norm, g)
                }
                _ => dm_in,
            };
            dx.add_assign(&dm);
        }

        let mut dattn_in = Mat::zeros(n, d);
        for (hi, (head, hc)) in layer.heads.iter().zip(&lc.heads).enumerate() {
            let dout = &dx;
            if let Some(g) = grads.as_deref_mut() {
                hc.z.t_matmul_acc(dout, &mut g.layers[li].heads[hi].w_o);
            }
            let dz = dout.matmul_t(&head.w_o);
            // dA = dz vᵀ ; dv = Aᵀ dz
            let da = dz.matmul_t(&hc.v);
            let mut dv = Mat::zeros(n, hc.v.cols);
            hc.attn.t_matmul_acc(&dz, &mut dv);
            let mut ds = Mat::zeros(n, n);
            for i in 0..n {
                let a = hc.attn.row(i);
                let dar = da.row(i);
                let inner: f64 = (0..=i).map(|j| a[j] * dar[j]).sum();
                let row = ds.row_mut(i);
                for j in 0..=i {
                    row[j] = a[j] * (dar[j] - inner) * scale;
                }
            }
            let dq = ds.matmul(&hc.k);
            let mut dk = Mat::zeros(n, hc.k.cols);
            ds.t_matmul_acc(&hc.q, &mut dk);
            if let Some(g) = grads.as_deref_mut() {
                let gh = &mut g.layers[li].heads[hi];
                lc.attn_in.t_matmul_acc(&dq, &mut gh.w_q);
                lc.attn_in.t_matmul_acc(&dk, &mut gh.w_k);
                lc.attn_in.t_matmul_acc(&dv, &mut gh.w_v);
            }
            dattn_in.add_assign(&dq.matmul_t(&head.w_q));
            dattn_in.add_assign(&dk.matmul_t(&head.w_k));
            dattn_in.add_assign(&dv.matmul_t(&head.w_v));
        }
        let da_in = match (&layer.ln_attn, &lc.ln_attn) {
            (Some(norm), Some(nc)) => {
                let g = grads.as_deref_mut().and_then(|g| g.layers[li].ln_attn.as_mut());
                norm_backward(&dattn_in, nc, norm, g)
            }
            _ => dattn_in,
        };
        dx.add_assign(&da_in);
    }
    dx
}

/// Exact gradient of `logits[target]` w.r.t. the summed input embedding at
/// every position.
pub fn grad_wrt_embeddings(params: &Params, ids: &[TokenId], target: TokenId) -> Result<Mat> {
    let emb = input_embeddings(params, ids)?;
    Ok(grad_wrt_embedding_seq(params, &emb, target)?.1)
}

/// Returns `(logits[target], ∂logits[target]/∂emb)` for a raw embedding
/// sequence.
pub fn grad_wrt_embedding_seq(params: &Params, emb: &Mat, target: TokenId) -> Result<(f64, Mat)> {
    let (trace, cache) = run(params, emb)?;
    let logit = trace.answer_logit(target)?;
    let mut dlogits = vec![0.0; params.config.vocab_size];
    dlogits[target as usize] = 1.0;
    Ok((logit, backward(params, &cache, &dlogits, None)))
}

/// `⟨W_a, r^{(l,h)}⟩`: logit contribution of head `(layer, head)` to `token`.
pub fn head_logit_contribution(
    params: &Params,
    trace: &ForwardTrace,
    layer: usize,
    head: usize,
    token: TokenId,
) -> Result<f64> {
    let out = trace
        .head_outputs
        .get(layer)
        .and_then(|l| l.get(head))
        .ok_or_else(|| Error::Model(format!("no head ({layer},{head})")))?;
    let row = unembed_row(params, token)?;
    Ok(dot(row, out))
}

/// `⟨W_a, e_gen⟩`: direct path of the gen-position input embedding.
pub fn embedding_logit_term(params: &Params, trace: &ForwardTrace, token: TokenId) -> Result<f64> {
    Ok(dot(unembed_row(params, token)?, &trace.embedding_gen))
}

pub(crate) fn unembed_row(params: &Params, token: TokenId) -> Result<&[f64]> {
    if token as usize >= params.config.vocab_size {
        return Err(Error::Model(format!("token id {token} outside vocabulary")));
    }
    Ok(params.unembed.row(token as usize))
}

/// Greedy continuation of up to `max_new` tokens.
pub fn generate(params: &Params, ids: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
    let mut seq = ids.to_vec();
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        if seq.len() > params.config.max_positions {
            break;
        }
        let t = forward(params, &seq)?.greedy_token();
        out.push(t);
        seq.push(t);
        if seq.len() >= params.config.max_positions {
            break;
        }
    }
    Ok(out)
}
