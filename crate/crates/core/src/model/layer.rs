//! Per-layer kernels: pre-norm, attention, FFN and the hidden-to-KV projection.

use super::rope::apply_rope;
use super::tensor::{dot, flops, linear, FlopCounter, Matrix};
use super::weights::LayerWeights;
use super::{LayerKv, ModelConfig, ModelError};

const LN_EPS: f64 = 1e-5;

pub fn layer_norm(x: &Matrix, scale: &[f32], bias: &[f32], enabled: bool) -> Matrix {
    if !enabled {
        return x.clone();
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let n = x.cols() as f64;
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for ((o, &v), (&g, &b)) in out.row_mut(i).iter_mut().zip(row).zip(scale.iter().zip(bias)) {
            *o = (((v as f64 - mean) * inv) as f32) * g + b;
        }
    }
    out
}

/// tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn check_width(x: &Matrix, cfg: &ModelConfig, what: &str) -> Result<(), ModelError> {
    if x.cols() != cfg.d_hidden {
        return Err(ModelError::ShapeMismatch(format!(
            "{what}: width {} but d_hidden is {}",
            x.cols(),
            cfg.d_hidden
        )));
    }
    Ok(())
}

/// FFN contribution `FC2(gelu(FC1·x + b1)) + b2`. The caller adds the residual.
pub fn ffn_forward(
    x: &Matrix,
    w: &LayerWeights,
    cfg: &ModelConfig,
    counter: &FlopCounter,
) -> Result<Matrix, ModelError> {
    check_width(x, cfg, "ffn")?;
    let mut h = linear(x, &w.fc1, Some(&w.fc1_bias))?;
    for v in h.data_mut() {
        *v = gelu(*v);
    }
    let out = linear(&h, &w.fc2, Some(&w.fc2_bias))?;
    let n = x.rows() as u64;
    counter.add(flops::linear(n, cfg.d_hidden as u64, cfg.d_ffn as u64) * 2);
    Ok(out)
}

/// K and V for already-normalized layer inputs. K is rotated at `positions`.
pub(crate) fn kv_from_normed(
    normed: &Matrix,
    positions: &[usize],
    w: &LayerWeights,
    cfg: &ModelConfig,
    counter: &FlopCounter,
) -> Result<(Matrix, Matrix), ModelError> {
    check_width(normed, cfg, "kv projection")?;
    if positions.len() != normed.rows() {
        return Err(ModelError::ShapeMismatch(format!(
            "kv projection: {} rows but {} positions",
            normed.rows(),
            positions.len()
        )));
    }
    let mut k = linear(normed, &w.wk, None)?;
    let v = linear(normed, &w.wv, None)?;
    if cfg.rope {
        apply_rope(&mut k, positions, cfg.n_heads, cfg.rope_base)?;
    }
    counter.add(flops::projection(normed.rows() as u64, cfg));
    Ok((k, v))
}

/// Restore one layer's K and V from its input hidden states.
///
/// Runs exactly the norm → projection → rotary path that the forward pass uses
/// to fill the cache, so the result is bit-identical to what prefill cached for
/// the same tokens.
pub fn project_hidden_to_kv(
    hidden: &Matrix,
    positions: &[usize],
    w: &LayerWeights,
    cfg: &ModelConfig,
    counter: &FlopCounter,
) -> Result<(Matrix, Matrix), ModelError> {
    check_width(hidden, cfg, "project_hidden_to_kv")?;
    let normed = layer_norm(hidden, &w.ln1_scale, &w.ln1_bias, cfg.layer_norm);
    kv_from_normed(&normed, positions, w, cfg, counter)
}

/// Causal multi-head attention of `normed` query rows against `kv`.
///
/// Query row `r` at position `p` attends to cached rows `0..=p`, so the cache
/// must already hold every position up to the largest query position.
/// Returns `Wo · concat_heads(softmax(QKᵀ/√d_head)·V)`.
pub fn attention_forward(
    normed: &Matrix,
    positions: &[usize],
    kv: &LayerKv,
    w: &LayerWeights,
    cfg: &ModelConfig,
    counter: &FlopCounter,
) -> Result<Matrix, ModelError> {
    let ctx = attend(normed, positions, kv, w, cfg, counter, None)?;
    let out = linear(&ctx, &w.wo, None)?;
    counter.add(flops::linear(normed.rows() as u64, cfg.d_hidden as u64, cfg.d_hidden as u64));
    Ok(out)
}

/// Softmax attention weights, indexed `[row][head][key]`. Test and inspection helper.
pub fn attention_weights(
    normed: &Matrix,
    positions: &[usize],
    kv: &LayerKv,
    w: &LayerWeights,
    cfg: &ModelConfig,
) -> Result<Vec<Vec<Vec<f32>>>, ModelError> {
    let mut probs = Vec::new();
    attend(normed, positions, kv, w, cfg, &FlopCounter::default(), Some(&mut probs))?;
    let n_heads = cfg.n_heads;
    let mut out = Vec::new();
    let mut it = probs.into_iter();
    for _ in 0..normed.rows() {
        out.push((0..n_heads).map(|_| it.next().unwrap()).collect());
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn attend(
    normed: &Matrix,
    positions: &[usize],
    kv: &LayerKv,
    w: &LayerWeights,
    cfg: &ModelConfig,
    counter: &FlopCounter,
    mut probs_out: Option<&mut Vec<Vec<f32>>>,
) -> Result<Matrix, ModelError> {
    check_width(normed, cfg, "attention")?;
    if positions.len() != normed.rows() {
        return Err(ModelError::ShapeMismatch(format!(
            "attention: {} rows but {} positions",
            normed.rows(),
            positions.len()
        )));
    }
    let d = cfg.d_hidden;
    if kv.k.len() != kv.len * d || kv.v.len() != kv.len * d {
        return Err(ModelError::ShapeMismatch("attention: KV buffers do not match width".into()));
    }
    let max_pos = positions.iter().copied().max().unwrap_or(0);
    if !positions.is_empty() && max_pos >= kv.len {
        return Err(ModelError::ShapeMismatch(format!(
            "attention: query position {max_pos} but only {} cached keys",
            kv.len
        )));
    }
    let mut q = linear(normed, &w.wq, None)?;
    if cfg.rope {
        apply_rope(&mut q, positions, cfg.n_heads, cfg.rope_base)?;
    }
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f32).sqrt();
    let mut ctx = Matrix::zeros(normed.rows(), d);
    let mut scores = Vec::with_capacity(kv.len);
    for (r, &pos) in positions.iter().enumerate() {
        for h in 0..cfg.n_heads {
            let qh = &q.row(r)[h * dh..(h + 1) * dh];
            scores.clear();
            for j in 0..=pos {
                let kj = &kv.k[j * d + h * dh..j * d + (h + 1) * dh];
                scores.push(dot(qh, kj) * scale);
            }
            let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in scores.iter_mut() {
                *s /= sum;
            }
            let out = &mut ctx.row_mut(r)[h * dh..(h + 1) * dh];
            for (j, &p) in scores.iter().enumerate() {
                let vj = &kv.v[j * d + h * dh..j * d + (h + 1) * dh];
                for (o, &v) in out.iter_mut().zip(vj) {
                    *o += p * v;
                }
            }
            if let Some(sink) = probs_out.as_deref_mut() {
                sink.push(scores.clone());
            }
        }
    }
    let n_ctx = if positions.is_empty() { 0 } else { max_pos as u64 + 1 };
    counter.add(
        flops::linear(normed.rows() as u64, d as u64, d as u64)
            + flops::attention_core(normed.rows() as u64, n_ctx, d as u64),
    );
    Ok(ctx)
}
