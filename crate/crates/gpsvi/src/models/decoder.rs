//! CTR head: one-hidden-layer MLP from the concatenated feature row to a
//! logit.

use super::Result;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};
use rand_chacha::ChaCha8Rng;

/// Maps `concat(latent, item-emb, context-emb, group-emb)` — a `[B, 4d]`
/// row — through relu(x W1 + b1) W2 + b2 to a `[B]` logit vector.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub d: usize,
}

impl Decoder {
    pub fn new(d: usize) -> Decoder {
        Decoder { d }
    }

    fn hidden(&self) -> usize {
        2 * self.d
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let (fan_in, h) = (4 * self.d, self.hidden());
        let std1 = (2.0 / (fan_in + h) as f64).sqrt();
        store.register_normal("dec.w1", vec![fan_in, h], std1, rng)?;
        store.register_zeros("dec.b1", vec![h])?;
        let std2 = (2.0 / (h + 1) as f64).sqrt();
        store.register_normal("dec.w2", vec![h, 1], std2, rng)?;
        store.register_zeros("dec.b2", vec![1])?;
        Ok(())
    }

    /// `features` is `[B, 4d]`; returns logits `[B]`.
    pub fn logits(&self, store: &ParamStore, tape: &Tape, features: &Tensor) -> Result<Tensor> {
        let b = features.shape()[0];
        let pre = tape.add(
            &tape.matmul(features, &store.leaf("dec.w1")?)?,
            &store.leaf("dec.b1")?,
        )?;
        let hidden = tape.relu(&pre)?;
        let out = tape.add(
            &tape.matmul(&hidden, &store.leaf("dec.w2")?)?,
            &store.leaf("dec.b2")?,
        )?;
        Ok(tape.reshape(&out, vec![b])?)
    }

    /// Concatenate per-slot `[B, d]` feature blocks into the decoder row.
    pub fn assemble(&self, tape: &Tape, parts: &[Tensor]) -> Result<Tensor> {
        debug_assert_eq!(parts.len(), 4);
        Ok(tape.concat(parts, 1)?)
    }
}
