//! Behavior encoders: masked target attention, masked sum pooling, and a
//! single self-attention block for the transformer-flavored baseline.
//!
//! Attention logits are plain dot products (no sqrt(d) scaling) unless the
//! `scaled` flag asks for it. Masking is additive: a masked position gets a
//! -1e30 logit offset, which underflows to an exactly-zero weight after the
//! max-subtracted softmax.

use super::Result;
use crate::tensor::{Tape, Tensor};

const MASK_OFFSET: f64 = -1e30;

/// Pooled behavior vector plus the attention weights that produced it.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// v-hat: the attention-weighted behavior summary, `[d]`.
    pub pooled: Tensor,
    /// Masked, normalized weights, `[L]` (all zero when the history is
    /// empty).
    pub weights: Tensor,
    pub empty_history: bool,
}

fn offsets_from_mask(mask: &[f64]) -> Vec<f64> {
    mask.iter().map(|&m| if m == 0.0 { MASK_OFFSET } else { 0.0 }).collect()
}

/// Attend over `keys`/`values` with query `q`: weights are a softmax of
/// `q . k_l` over unmasked positions. A fully-masked (empty) history yields
/// a zero vector and `empty_history = true` instead of an error — the
/// decoder still runs and other features carry the signal.
pub fn target_attention(
    tape: &Tape,
    q: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask: &[f64],
    scaled: bool,
) -> Result<AttentionOutput> {
    let l = keys.shape()[0];
    let d = q.shape()[0];
    debug_assert_eq!(keys.shape(), values.shape());
    debug_assert_eq!(mask.len(), l);
    if l == 0 || mask.iter().all(|&m| m == 0.0) {
        return Ok(AttentionOutput {
            pooled: Tensor::zeros(vec![d]),
            weights: Tensor::zeros(vec![l]),
            empty_history: true,
        });
    }
    let q_col = tape.reshape(q, vec![d, 1])?;
    let mut scores = tape.reshape(&tape.matmul(keys, &q_col)?, vec![l])?;
    if scaled {
        scores = tape.scale(&scores, 1.0 / (d as f64).sqrt())?;
    }
    let offsets = Tensor::new(vec![l], offsets_from_mask(mask))?;
    let masked = tape.add(&scores, &offsets)?;
    let weights = tape.softmax(&masked, 0)?;
    let w_row = tape.reshape(&weights, vec![1, l])?;
    let pooled = tape.reshape(&tape.matmul(&w_row, values)?, vec![d])?;
    Ok(AttentionOutput { pooled, weights, empty_history: false })
}

/// Masked sum of the rows of `values`; the order-free baseline encoder.
pub fn sum_pool(tape: &Tape, values: &Tensor, mask: &[f64]) -> Result<Tensor> {
    let l = values.shape()[0];
    let d = values.shape()[1];
    debug_assert_eq!(mask.len(), l);
    if l == 0 {
        return Ok(Tensor::zeros(vec![d]));
    }
    let m_row = Tensor::new(vec![1, l], mask.to_vec())?;
    Ok(tape.reshape(&tape.matmul(&m_row, values)?, vec![d])?)
}

/// One pre-norm-free self-attention block with residual connection:
/// `E + softmax(mask(QK^T)) V` where Q/K/V are learned projections of `E`.
/// Masked positions are excluded as keys; their own output rows are garbage
/// by design and must be masked downstream.
pub fn self_attention_block(
    tape: &Tape,
    e: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    mask: &[f64],
    scaled: bool,
) -> Result<Tensor> {
    let l = e.shape()[0];
    let d = e.shape()[1];
    if l == 0 || mask.iter().all(|&m| m == 0.0) {
        return Ok(e.clone());
    }
    let q = tape.matmul(e, wq)?;
    let k = tape.matmul(e, wk)?;
    let v = tape.matmul(e, wv)?;
    let mut scores = tape.matmul(&q, &tape.transpose(&k)?)?;
    if scaled {
        scores = tape.scale(&scores, 1.0 / (d as f64).sqrt())?;
    }
    // Key-axis mask, tiled over query rows via suffix broadcast.
    let offsets = Tensor::new(vec![l], offsets_from_mask(mask))?;
    let masked = tape.add(&scores, &offsets)?;
    let alpha = tape.softmax(&masked, 1)?;
    let ctx = tape.matmul(&alpha, &v)?;
    Ok(tape.add(e, &ctx)?)
}

/// Batched target attention over the flat padded layout `[B*L, d]` that
/// minibatches provide. Returns pooled `[B, d]`, weights `[B, L]`, and the
/// per-row empty-history flags; empty rows pool to exact zeros.
#[allow(clippy::too_many_arguments)]
pub fn target_attention_flat(
    tape: &Tape,
    q: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask: &[f64],
    b: usize,
    l: usize,
    scaled: bool,
) -> Result<(Tensor, Tensor, Vec<bool>)> {
    let d = q.shape()[1];
    let empty: Vec<bool> = (0..b)
        .map(|r| l == 0 || mask[r * l..(r + 1) * l].iter().all(|&m| m == 0.0))
        .collect();
    if l == 0 {
        return Ok((Tensor::zeros(vec![b, d]), Tensor::zeros(vec![b, l]), empty));
    }
    // Repeat each query row L times to line up with the flat key layout.
    let row_rep: Vec<usize> = (0..b).flat_map(|r| std::iter::repeat_n(r, l)).collect();
    let q_rep = tape.index_select(q, 0, &row_rep)?;
    let mut scores = tape.sum(&tape.mul(keys, &q_rep)?, Some(1))?;
    if scaled {
        scores = tape.scale(&scores, 1.0 / (d as f64).sqrt())?;
    }
    let scores = tape.reshape(&scores, vec![b, l])?;
    let offsets = Tensor::new(vec![b, l], offsets_from_mask(mask))?;
    let weights = tape.softmax(&tape.add(&scores, &offsets)?, 1)?;
    // Spread each weight across the d columns of its value row.
    let flat_rep: Vec<usize> = (0..b * l).flat_map(|i| std::iter::repeat_n(i, d)).collect();
    let w_flat = tape.reshape(&weights, vec![b * l])?;
    let w_exp = tape.reshape(&tape.index_select(&w_flat, 0, &flat_rep)?, vec![b * l, d])?;
    let weighted = tape.mul(values, &w_exp)?;
    let pooled = tape.sum(&tape.reshape(&weighted, vec![b, l, d])?, Some(1))?;
    // Null out rows with no history (their uniform weights are meaningless).
    let keep: Vec<f64> = empty
        .iter()
        .flat_map(|&e| std::iter::repeat_n(if e { 0.0 } else { 1.0 }, d))
        .collect();
    let keep = Tensor::new(vec![b, d], keep)?;
    let pooled = tape.mul(&pooled, &keep)?;
    Ok((pooled, weights, empty))
}

/// Batched masked sum pooling on the flat layout; see
/// [`target_attention_flat`].
pub fn sum_pool_flat(
    tape: &Tape,
    values: &Tensor,
    mask: &[f64],
    b: usize,
    l: usize,
) -> Result<Tensor> {
    let d = values.shape()[1];
    if l == 0 {
        return Ok(Tensor::zeros(vec![b, d]));
    }
    let mask_exp: Vec<f64> = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(m, d))
        .collect();
    let mask_exp = Tensor::new(vec![b * l, d], mask_exp)?;
    let kept = tape.mul(values, &mask_exp)?;
    Ok(tape.sum(&tape.reshape(&kept, vec![b, l, d])?, Some(1))?)
}
