// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer forward pass and embedding-level gradients.
//!
//! ```text
//! x = E_i[ids]                      (occluded rows set to zero)
//! for each block:
//!     x += concat_h(softmax_causal(q_h k_hᵀ / ε) v_h) W_o   with q,k,v from norm1(x)
//!     x += act(norm2(x) W_uᵀ) W_p
//! p = softmax(final_norm(x) E_oᵀ)
//! ```
//!
//! Weights are stored as `f32`; activations and every reduction run in
//! `f64`, summing over the inner index in ascending order. The pass is a
//! pure function of the bundle and input, so repeated calls are bit-identical.

use crate::checkpoint::{Activation, LayerWeights, ModelBundle, NormKind, NormWeights, TokenId};
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Matrix};

/// Which input row, if any, is zeroed before the first block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Occlusion {
    None,
    Position(usize),
}

/// Quantity differentiated by [`embedding_gradient`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientTarget {
    /// Post-softmax probability of the target token.
    #[default]
    Probability,
    /// Pre-softmax logit of the target token.
    Logit,
}

/// Output of [`forward`]: next-token distributions at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub context_ids: Vec<TokenId>,
    vocab: usize,
    probs: Vec<f64>,
}

impl ForwardTrace {
    pub fn positions(&self) -> usize {
        self.context_ids.len()
    }

    pub fn probability(&self, position: usize, token: TokenId) -> f64 {
        self.probs[position * self.vocab + token]
    }

    pub fn row(&self, position: usize) -> &[f64] {
        &self.probs[position * self.vocab..(position + 1) * self.vocab]
    }

    /// Probabilities as an `f32` matrix (positions x vocab).
    pub fn probabilities(&self) -> Matrix {
        Matrix::from_f64(self.positions(), self.vocab, &self.probs).expect("probabilities are finite")
    }
}

/// Gradient of the target quantity with respect to each input-embedding row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGradient {
    pub rows: usize,
    pub cols: usize,
    pub grads: Vec<f64>,
}

impl EmbeddingGradient {
    pub fn row(&self, n: usize) -> &[f64] {
        &self.grads[n * self.cols..(n + 1) * self.cols]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_f64(self.rows, self.cols, &self.grads).expect("gradients are finite")
    }
}

fn validate_ids(bundle: &ModelBundle, ids: &[TokenId]) -> Result<()> {
    let cfg = bundle.config();
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty context".into()));
    }
    if ids.len() > cfg.max_context {
        return Err(Error::InvalidArgument(format!(
            "context of {} tokens exceeds the maximum {}",
            ids.len(),
            cfg.max_context
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::OutOfRange(format!("token id {bad} >= vocab size {}", cfg.vocab_size)));
    }
    Ok(())
}

fn check_target(bundle: &ModelBundle, target: TokenId) -> Result<()> {
    if target >= bundle.config().vocab_size {
        return Err(Error::OutOfRange(format!(
            "target id {target} >= vocab size {}",
            bundle.config().vocab_size
        )));
    }
    Ok(())
}

/// Input-embedding rows for `ids` as `f64`, with an optional zeroed row.
pub fn embed(bundle: &ModelBundle, ids: &[TokenId], occlusion: Occlusion) -> Result<Vec<f64>> {
    validate_ids(bundle, ids)?;
    let d = bundle.config().d_model;
    if let Occlusion::Position(n) = occlusion {
        if n >= ids.len() {
            return Err(Error::OutOfRange(format!(
                "occluded position {n} outside context of {}",
                ids.len()
            )));
        }
    }
    let mut x = Vec::with_capacity(ids.len() * d);
    for (pos, &id) in ids.iter().enumerate() {
        if occlusion == Occlusion::Position(pos) {
            x.extend(std::iter::repeat_n(0.0, d));
        } else {
            x.extend(bundle.input_embeddings().row(id).iter().map(|&v| f64::from(v)));
        }
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Primitive kernels
// ---------------------------------------------------------------------------

/// `y[j] = Σ_i x[i] * w[i][j]` for row-major `w` of shape `x.len() x cols`.
fn vec_mat(x: &[f64], w: &[f32], cols: usize, y: &mut [f64]) {
    for (j, slot) in y.iter_mut().enumerate().take(cols) {
        let mut acc = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            acc += xi * f64::from(w[i * cols + j]);
        }
        *slot = acc;
    }
}

/// `y[r] = Σ_j w[r][j] * x[j]` for row-major `w` with `x.len()` columns.
fn mat_vec(w: &[f32], x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    for (r, slot) in y.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (j, &xj) in x.iter().enumerate() {
            acc += f64::from(row[j]) * xj;
        }
        *slot = acc;
    }
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Per-row statistics kept for the norm backward pass.
#[derive(Debug, Clone, Copy)]
struct NormStats {
    mean: f64,
    inv: f64,
}

fn norm_forward(kind: NormKind, eps: f64, w: &NormWeights, x: &[f64], y: &mut [f64]) -> NormStats {
    let d = x.len() as f64;
    let mean = match kind {
        NormKind::Rmsnorm => 0.0,
        NormKind::Layernorm => x.iter().sum::<f64>() / d,
    };
    let mut sq = 0.0;
    for &v in x {
        let c = v - mean;
        sq += c * c;
    }
    let denom = (sq / d + eps).sqrt();
    for (i, slot) in y.iter_mut().enumerate() {
        let mut v = (x[i] - mean) / denom * f64::from(w.weight[i]);
        if let Some(b) = &w.bias {
            v += f64::from(b[i]);
        }
        *slot = v;
    }
    NormStats { mean, inv: 1.0 / denom }
}

fn norm_backward(kind: NormKind, w: &NormWeights, x: &[f64], stats: NormStats, dy: &[f64], dx: &mut [f64]) {
    let d = x.len() as f64;
    let xhat: Vec<f64> = x.iter().map(|&v| (v - stats.mean) * stats.inv).collect();
    let g: Vec<f64> = dy.iter().zip(&w.weight).map(|(&a, &b)| a * f64::from(b)).collect();
    let g_mean = match kind {
        NormKind::Rmsnorm => 0.0,
        NormKind::Layernorm => g.iter().sum::<f64>() / d,
    };
    let gx_mean = dot64(&g, &xhat) / d;
    for i in 0..x.len() {
        dx[i] += (g[i] - g_mean - xhat[i] * gx_mean) * stats.inv;
    }
}

fn activate(kind: Activation, u: f64) -> f64 {
    match kind {
        Activation::Relu => u.max(0.0),
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * u * (1.0 + (c * (u + 0.044715 * u * u * u)).tanh())
        }
        Activation::Silu => u / (1.0 + (-u).exp()),
    }
}

fn activate_grad(kind: Activation, u: f64) -> f64 {
    match kind {
        Activation::Relu => {
            if u > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            let t = (c * (u + 0.044715 * u * u * u)).tanh();
            0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * u * u)
        }
        Activation::Silu => {
            let s = 1.0 / (1.0 + (-u).exp());
            s * (1.0 + u * (1.0 - s))
        }
    }
}

// ---------------------------------------------------------------------------
// Forward with activation cache
// ---------------------------------------------------------------------------

struct LayerCache {
    x_in: Vec<f64>,
    stats1: Vec<NormStats>,
    /// `[head][pos * d_head + j]`
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// `[head][i * n + j]`, zero above the diagonal
    attn: Vec<Vec<f64>>,
    x_mid: Vec<f64>,
    stats2: Vec<NormStats>,
    u: Vec<f64>,
}

struct Cache {
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    hf: Vec<f64>,
    stats_f: Vec<NormStats>,
}

fn layer_forward(bundle: &ModelBundle, layer: &LayerWeights, x: Vec<f64>, n: usize) -> (Vec<f64>, LayerCache) {
    let cfg = bundle.config();
    let (d, dh, heads, dff) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_ffn);
    let scale = cfg.attn_scale();

    let mut h1 = vec![0.0; n * d];
    let stats1: Vec<NormStats> = (0..n)
        .map(|i| norm_forward(cfg.norm_kind, cfg.norm_eps, &layer.norm1, &x[i * d..(i + 1) * d], &mut h1[i * d..(i + 1) * d]))
        .collect();

    let project = |w: &Matrix| -> Vec<f64> {
        let mut out = vec![0.0; n * dh];
        for i in 0..n {
            vec_mat(&h1[i * d..(i + 1) * d], w.data(), dh, &mut out[i * dh..(i + 1) * dh]);
        }
        out
    };
    let q: Vec<Vec<f64>> = layer.wq.iter().map(project).collect();
    let k: Vec<Vec<f64>> = layer.wk.iter().map(project).collect();
    let v: Vec<Vec<f64>> = layer.wv.iter().map(project).collect();

    let mut attn = vec![vec![0.0; n * n]; heads];
    let mut concat = vec![0.0; n * heads * dh];
    for h in 0..heads {
        let (qh, kh, vh) = (&q[h], &k[h], &v[h]);
        for i in 0..n {
            let row = &mut attn[h][i * n..i * n + i + 1];
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = dot64(&qh[i * dh..(i + 1) * dh], &kh[j * dh..(j + 1) * dh]) / scale;
            }
            softmax_in_place(row);
            let out = &mut concat[i * heads * dh + h * dh..i * heads * dh + (h + 1) * dh];
            for (c, slot) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, &a) in row.iter().enumerate() {
                    acc += a * vh[j * dh + c];
                }
                *slot = acc;
            }
        }
    }

    let mut x_mid = vec![0.0; n * d];
    let mut tmp = vec![0.0; d];
    for i in 0..n {
        vec_mat(&concat[i * heads * dh..(i + 1) * heads * dh], layer.wo.data(), d, &mut tmp);
        for c in 0..d {
            x_mid[i * d + c] = x[i * d + c] + tmp[c];
        }
    }

    let mut h2 = vec![0.0; n * d];
    let stats2: Vec<NormStats> = (0..n)
        .map(|i| norm_forward(cfg.norm_kind, cfg.norm_eps, &layer.norm2, &x_mid[i * d..(i + 1) * d], &mut h2[i * d..(i + 1) * d]))
        .collect();

    let mut u = vec![0.0; n * dff];
    let mut x_out = vec![0.0; n * d];
    let mut act = vec![0.0; dff];
    for i in 0..n {
        mat_vec(layer.wu.data(), &h2[i * d..(i + 1) * d], &mut u[i * dff..(i + 1) * dff]);
        for f in 0..dff {
            act[f] = activate(cfg.activation, u[i * dff + f]);
        }
        vec_mat(&act, layer.wp.data(), d, &mut tmp);
        for c in 0..d {
            x_out[i * d + c] = x_mid[i * d + c] + tmp[c];
        }
    }

    let cache = LayerCache {
        x_in: x,
        stats1,
        q,
        k,
        v,
        attn,
        x_mid,
        stats2,
        u,
    };
    (x_out, cache)
}

fn run(bundle: &ModelBundle, x: Vec<f64>, n: usize) -> Cache {
    let cfg = bundle.config();
    let d = cfg.d_model;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut x = x;
    for layer in bundle.layers() {
        let (next, cache) = layer_forward(bundle, layer, x, n);
        layers.push(cache);
        x = next;
    }
    let mut hf = vec![0.0; n * d];
    let stats_f = (0..n)
        .map(|i| norm_forward(cfg.norm_kind, cfg.norm_eps, bundle.final_norm(), &x[i * d..(i + 1) * d], &mut hf[i * d..(i + 1) * d]))
        .collect();
    Cache {
        layers,
        x_final: x,
        hf,
        stats_f,
    }
}

fn logits_at(bundle: &ModelBundle, cache: &Cache, pos: usize) -> Vec<f64> {
    let d = bundle.config().d_model;
    let mut z = vec![0.0; bundle.config().vocab_size];
    mat_vec(bundle.output_embeddings().data(), &cache.hf[pos * d..(pos + 1) * d], &mut z);
    z
}

fn probs_at(bundle: &ModelBundle, cache: &Cache, pos: usize) -> Vec<f64> {
    let mut z = logits_at(bundle, cache, pos);
    softmax_in_place(&mut z);
    z
}

/// Runs the model over `ids`, returning the next-token distribution at every position.
pub fn forward(bundle: &ModelBundle, ids: &[TokenId]) -> Result<ForwardTrace> {
    let x = embed(bundle, ids, Occlusion::None)?;
    let n = ids.len();
    let cache = run(bundle, x, n);
    let vocab = bundle.config().vocab_size;
    let mut probs = Vec::with_capacity(n * vocab);
    for pos in 0..n {
        probs.extend(probs_at(bundle, &cache, pos));
    }
    Ok(ForwardTrace {
        context_ids: ids.to_vec(),
        vocab,
        probs,
    })
}

fn run_embeddings(bundle: &ModelBundle, x: &[f64]) -> Result<(Cache, usize)> {
    let d = bundle.config().d_model;
    if x.is_empty() || x.len() % d != 0 {
        return Err(Error::Dimension(format!(
            "input of {} values is not a nonempty multiple of d_model {d}",
            x.len()
        )));
    }
    let n = x.len() / d;
    Ok((run(bundle, x.to_vec(), n), n))
}

/// Last-position distribution for explicit `f64` input embeddings (`n x d_model`).
pub fn last_distribution_from_embeddings(bundle: &ModelBundle, x: &[f64]) -> Result<Vec<f64>> {
    let (cache, n) = run_embeddings(bundle, x)?;
    Ok(probs_at(bundle, &cache, n - 1))
}

/// Last-position logits for explicit `f64` input embeddings.
pub fn last_logits_from_embeddings(bundle: &ModelBundle, x: &[f64]) -> Result<Vec<f64>> {
    let (cache, n) = run_embeddings(bundle, x)?;
    Ok(logits_at(bundle, &cache, n - 1))
}

/// `p(target | context)` at the last position.
pub fn next_token_prob(bundle: &ModelBundle, context: &[TokenId], target: TokenId) -> Result<f64> {
    occluded_prob(bundle, context, Occlusion::None, target)
}

/// Like [`next_token_prob`] with one input-embedding row replaced by zeros.
pub fn occluded_prob(
    bundle: &ModelBundle,
    context: &[TokenId],
    occlusion: Occlusion,
    target: TokenId,
) -> Result<f64> {
    check_target(bundle, target)?;
    let x = embed(bundle, context, occlusion)?;
    let n = context.len();
    let cache = run(bundle, x, n);
    Ok(probs_at(bundle, &cache, n - 1)[target])
}

/// Reverse-mode gradient of the target's probability (or logit) at the last
/// position with respect to every input-embedding row.
pub fn embedding_gradient(
    bundle: &ModelBundle,
    context: &[TokenId],
    target: TokenId,
    mode: GradientTarget,
) -> Result<EmbeddingGradient> {
    check_target(bundle, target)?;
    let x = embed(bundle, context, Occlusion::None)?;
    gradient_from_embeddings(bundle, &x, target, mode)
}

/// Gradient for explicit `f64` input embeddings (`n x d_model`).
pub fn gradient_from_embeddings(
    bundle: &ModelBundle,
    x: &[f64],
    target: TokenId,
    mode: GradientTarget,
) -> Result<EmbeddingGradient> {
    check_target(bundle, target)?;
    let cfg = bundle.config();
    let (d, dh, heads, dff) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_ffn);
    if x.is_empty() || x.len() % d != 0 {
        return Err(Error::Dimension(format!(
            "input of {} values is not a nonempty multiple of d_model {d}",
            x.len()
        )));
    }
    let n = x.len() / d;
    let scale = cfg.attn_scale();
    let cache = run(bundle, x.to_vec(), n);
    let last = n - 1;

    // d(target)/d(logits)
    let dz: Vec<f64> = match mode {
        GradientTarget::Logit => (0..cfg.vocab_size).map(|v| if v == target { 1.0 } else { 0.0 }).collect(),
        GradientTarget::Probability => {
            let p = probs_at(bundle, &cache, last);
            let pt = p[target];
            p.iter()
                .enumerate()
                .map(|(v, &pv)| if v == target { pt * (1.0 - pt) } else { -pt * pv })
                .collect()
        }
    };
    // logits = E_o hf  =>  dhf = E_oᵀ dz
    let mut dhf = vec![0.0; d];
    vec_mat(&dz, bundle.output_embeddings().data(), d, &mut dhf);
    let mut dx = vec![0.0; n * d];
    norm_backward(
        cfg.norm_kind,
        bundle.final_norm(),
        &cache.x_final[last * d..(last + 1) * d],
        cache.stats_f[last],
        &dhf,
        &mut dx[last * d..(last + 1) * d],
    );

    for (layer, lc) in bundle.layers().iter().zip(&cache.layers).rev() {
        // FFN: x_out = x_mid + act(h2 W_uᵀ) W_p
        let mut dx_mid = dx.clone();
        let mut dh2 = vec![0.0; n * d];
        let mut da = vec![0.0; dff];
        for i in 0..n {
            let dxo = &dx[i * d..(i + 1) * d];
            if dxo.iter().all(|&g| g == 0.0) {
                continue;
            }
            mat_vec(layer.wp.data(), dxo, &mut da);
            for f in 0..dff {
                da[f] *= activate_grad(cfg.activation, lc.u[i * dff + f]);
            }
            vec_mat(&da, layer.wu.data(), d, &mut dh2[i * d..(i + 1) * d]);
        }
        for i in 0..n {
            norm_backward(
                cfg.norm_kind,
                &layer.norm2,
                &lc.x_mid[i * d..(i + 1) * d],
                lc.stats2[i],
                &dh2[i * d..(i + 1) * d],
                &mut dx_mid[i * d..(i + 1) * d],
            );
        }

        // attention: x_mid = x_in + concat W_o
        let hd = heads * dh;
        let mut dconcat = vec![0.0; n * hd];
        for i in 0..n {
            mat_vec(layer.wo.data(), &dx_mid[i * d..(i + 1) * d], &mut dconcat[i * hd..(i + 1) * hd]);
        }
        let mut dh1 = vec![0.0; n * d];
        for h in 0..heads {
            let (qh, kh, vh, ah) = (&lc.q[h], &lc.k[h], &lc.v[h], &lc.attn[h]);
            let mut dq = vec![0.0; n * dh];
            let mut dk = vec![0.0; n * dh];
            let mut dv = vec![0.0; n * dh];
            for i in 0..n {
                let dout = &dconcat[i * hd + h * dh..i * hd + (h + 1) * dh];
                let arow = &ah[i * n..i * n + i + 1];
                let da_row: Vec<f64> = (0..=i).map(|j| dot64(dout, &vh[j * dh..(j + 1) * dh])).collect();
                for (j, &a) in arow.iter().enumerate() {
                    for c in 0..dh {
                        dv[j * dh + c] += a * dout[c];
                    }
                }
                let inner = dot64(arow, &da_row);
                for j in 0..=i {
                    let ds = arow[j] * (da_row[j] - inner) / scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        dq[i * dh + c] += ds * kh[j * dh + c];
                        dk[j * dh + c] += ds * qh[i * dh + c];
                    }
                }
            }
            let mut tmp = vec![0.0; d];
            for (w, g) in [(&layer.wq[h], &dq), (&layer.wk[h], &dk), (&layer.wv[h], &dv)] {
                for i in 0..n {
                    mat_vec(w.data(), &g[i * dh..(i + 1) * dh], &mut tmp);
                    for c in 0..d {
                        dh1[i * d + c] += tmp[c];
                    }
                }
            }
        }
        let mut dx_in = dx_mid.clone();
        for i in 0..n {
            norm_backward(
                cfg.norm_kind,
                &layer.norm1,
                &lc.x_in[i * d..(i + 1) * d],
                lc.stats1[i],
                &dh1[i * d..(i + 1) * d],
                &mut dx_in[i * d..(i + 1) * d],
            );
        }
        dx = dx_in;
    }

    if dx.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding gradient".into()));
    }
    Ok(EmbeddingGradient {
        rows: n,
        cols: d,
        grads: dx,
    })
}

/// Greedy continuation of `ids` by up to `max_new` tokens.
pub fn greedy_generate(bundle: &ModelBundle, ids: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
    let mut ctx = ids.to_vec();
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        if ctx.len() >= bundle.config().max_context {
            break;
        }
        let x = embed(bundle, &ctx, Occlusion::None)?;
        let n = ctx.len();
        let cache = run(bundle, x, n);
        let p = probs_at(bundle, &cache, n - 1);
        let next = crate::tensor::top_k(&p, 1)?[0];
        out.push(next);
        ctx.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::BundleParts;
    use crate::fixture::{random_bundle, FixtureSpec};

    fn bundle() -> ModelBundle {
        random_bundle(&FixtureSpec::default(), 42)
    }

    #[test]
    fn single_token_context() {
        let b = bundle();
        let t = forward(&b, &[5]).unwrap();
        assert_eq!(t.positions(), 1);
        assert!((t.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let b = bundle();
        assert!(forward(&b, &[]).is_err());
        assert!(matches!(forward(&b, &[b.config().vocab_size]), Err(Error::OutOfRange(_))));
        assert!(next_token_prob(&b, &[3], b.config().vocab_size).is_err());
        assert!(matches!(
            occluded_prob(&b, &[3, 4], Occlusion::Position(2), 0),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn probabilities_sum_to_one_and_repeat_exactly() {
        let b = bundle();
        let ctx = [4, 9, 2, 7];
        let total: f64 = (0..b.config().vocab_size)
            .map(|v| next_token_prob(&b, &ctx, v).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
        let a = next_token_prob(&b, &ctx, 3).unwrap();
        assert_eq!(a.to_bits(), next_token_prob(&b, &ctx, 3).unwrap().to_bits());
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn position_sensitive() {
        let b = bundle();
        let p = next_token_prob(&b, &[4, 9, 2], 3).unwrap();
        let q = next_token_prob(&b, &[9, 4, 2], 3).unwrap();
        assert_ne!(p, q);
    }

    #[test]
    fn causal() {
        let b = bundle();
        let short = forward(&b, &[4, 9, 2]).unwrap();
        let long = forward(&b, &[4, 9, 2, 11, 3]).unwrap();
        for pos in 0..3 {
            for (x, y) in short.row(pos).iter().zip(long.row(pos)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_weights_give_uniform() {
        let b = bundle();
        let mut parts: BundleParts = b.into_parts();
        let zero = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        parts.input_embeddings = zero(&parts.input_embeddings);
        parts.output_embeddings = zero(&parts.output_embeddings);
        for l in &mut parts.layers {
            for m in l.wq.iter_mut().chain(l.wk.iter_mut()).chain(l.wv.iter_mut()) {
                *m = zero(m);
            }
            l.wo = zero(&l.wo);
            l.wu = zero(&l.wu);
            l.wp = zero(&l.wp);
            for norm in [&mut l.norm1, &mut l.norm2] {
                norm.weight.iter_mut().for_each(|w| *w = 0.0);
                norm.bias = None;
            }
        }
        parts.final_norm.weight.iter_mut().for_each(|w| *w = 0.0);
        parts.final_norm.bias = None;
        let b = ModelBundle::from_parts(parts).unwrap();
        let v = b.config().vocab_size as f64;
        for &p in forward(&b, &[3, 4, 5]).unwrap().row(2) {
            assert!((p - 1.0 / v).abs() < 1e-15);
        }
    }

    #[test]
    fn occlusion_sentinel_and_zero_row() {
        let b = bundle();
        let ctx = [4, 9, 2];
        let base = next_token_prob(&b, &ctx, 5).unwrap();
        assert_eq!(base.to_bits(), occluded_prob(&b, &ctx, Occlusion::None, 5).unwrap().to_bits());
        // single-token context fully occluded is still a distribution
        let p = occluded_prob(&b, &[4], Occlusion::Position(0), 5).unwrap();
        assert!(p > 0.0 && p < 1.0);

        let mut parts = b.clone().into_parts();
        parts.input_embeddings.row_mut(9).iter_mut().for_each(|v| *v = 0.0);
        let z = ModelBundle::from_parts(parts).unwrap();
        assert_eq!(
            next_token_prob(&z, &ctx, 5).unwrap().to_bits(),
            occluded_prob(&z, &ctx, Occlusion::Position(1), 5).unwrap().to_bits()
        );
    }

    #[test]
    fn gradient_shape_and_conservation() {
        let b = bundle();
        let ctx = [4, 9, 2, 7];
        let g = embedding_gradient(&b, &ctx, 3, GradientTarget::Probability).unwrap();
        assert_eq!((g.rows, g.cols), (ctx.len(), b.config().d_model));
        let mut total = vec![0.0; g.grads.len()];
        for v in 0..b.config().vocab_size {
            let gv = embedding_gradient(&b, &ctx, v, GradientTarget::Probability).unwrap();
            for (t, x) in total.iter_mut().zip(&gv.grads) {
                *t += x;
            }
        }
        assert!(total.iter().all(|t| t.abs() < 1e-5));
    }

    fn finite_difference_check(b: &ModelBundle, ctx: &[TokenId], target: TokenId, mode: GradientTarget) {
        let x = embed(b, ctx, Occlusion::None).unwrap();
        let g = gradient_from_embeddings(b, &x, target, mode).unwrap();
        let f = |x: &[f64]| -> f64 {
            let p = last_distribution_from_embeddings(b, x).unwrap();
            match mode {
                GradientTarget::Probability => p[target],
                GradientTarget::Logit => p[target].ln(),
            }
        };
        let h = 1e-3;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[idx] += h;
            xm[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            if mode == GradientTarget::Logit {
                // log p differs from the logit by a target-independent term; compare via conservation below instead
                continue;
            }
            let tol = f64::max(1e-6, 1e-4 * fd.abs());
            assert!((g.grads[idx] - fd).abs() <= tol, "entry {idx}: {} vs {fd}", g.grads[idx]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, activation, norm) in [
            (1, Activation::Silu, NormKind::Rmsnorm),
            (2, Activation::Gelu, NormKind::Layernorm),
            (3, Activation::Relu, NormKind::Layernorm),
        ] {
            let spec = FixtureSpec {
                activation,
                norm_kind: norm,
                ..FixtureSpec::default()
            };
            let b = random_bundle(&spec, seed);
            finite_difference_check(&b, &[4, 9, 2, 7, 12], 3, GradientTarget::Probability);
        }
    }

    #[test]
    fn logit_gradient_relates_to_probability_gradient() {
        // dp_t = p_t (dz_t - Σ_v p_v dz_v)
        let b = bundle();
        let ctx = [4, 9, 2];
        let t = 6;
        let p = forward(&b, &ctx).unwrap();
        let p_last = p.row(2).to_vec();
        let gp = embedding_gradient(&b, &ctx, t, GradientTarget::Probability).unwrap();
        let gz: Vec<EmbeddingGradient> = (0..b.config().vocab_size)
            .map(|v| embedding_gradient(&b, &ctx, v, GradientTarget::Logit).unwrap())
            .collect();
        for idx in 0..gp.grads.len() {
            let mixed: f64 = (0..p_last.len()).map(|v| p_last[v] * gz[v].grads[idx]).sum();
            let want = p_last[t] * (gz[t].grads[idx] - mixed);
            assert!((gp.grads[idx] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let b = bundle();
        let a = greedy_generate(&b, &[4, 9], 5).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, greedy_generate(&b, &[4, 9], 5).unwrap());
    }
}
