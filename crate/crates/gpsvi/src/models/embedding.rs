//! Id → R^d lookup tables backed by the parameter store.

use super::{ModelError, Result};
use crate::data::Vocab;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};
use rand_chacha::ChaCha8Rng;

const EMB_INIT_STD: f64 = 0.1;

/// Field tables (group profile ids, items, contexts) sharing one width `d`.
/// Lookups are pure reads; an out-of-vocab id is an error, never a silent
/// zero vector.
#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    pub d: usize,
    pub vocab: Vocab,
}

impl EmbeddingTables {
    pub fn new(d: usize, vocab: Vocab) -> EmbeddingTables {
        EmbeddingTables { d, vocab }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        store.register_normal(
            "emb.item",
            vec![self.vocab.n_items as usize, self.d],
            EMB_INIT_STD,
            rng,
        )?;
        store.register_normal(
            "emb.group",
            vec![self.vocab.n_groups as usize, self.d],
            EMB_INIT_STD,
            rng,
        )?;
        store.register_normal(
            "emb.ctx",
            vec![self.vocab.n_contexts as usize, self.d],
            EMB_INIT_STD,
            rng,
        )?;
        Ok(())
    }

    fn check(&self, field: &'static str, ids: &[u32], size: u32) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&id| {
                if id >= size {
                    Err(ModelError::UnknownId { field, id, size })
                } else {
                    Ok(id as usize)
                }
            })
            .collect()
    }

    /// `[len(ids), d]` rows of the item table.
    pub fn items(&self, store: &ParamStore, tape: &Tape, ids: &[u32]) -> Result<Tensor> {
        let idx = self.check("item", ids, self.vocab.n_items)?;
        let table = store.leaf("emb.item")?;
        Ok(tape.index_select(&table, 0, &idx)?)
    }

    pub fn contexts(&self, store: &ParamStore, tape: &Tape, ids: &[u32]) -> Result<Tensor> {
        let idx = self.check("context", ids, self.vocab.n_contexts)?;
        let table = store.leaf("emb.ctx")?;
        Ok(tape.index_select(&table, 0, &idx)?)
    }

    /// Mean of a record's group-feature embeddings: `[len(lists), d]`, one
    /// pooled row per record. Pooling runs as one matmul against a constant
    /// averaging matrix.
    pub fn groups_pooled(
        &self,
        store: &ParamStore,
        tape: &Tape,
        lists: &[Vec<u32>],
    ) -> Result<Tensor> {
        let mut flat = Vec::new();
        for list in lists {
            assert!(!list.is_empty(), "records carry at least one group id");
            flat.extend_from_slice(list);
        }
        let idx = self.check("group", &flat, self.vocab.n_groups)?;
        let table = store.leaf("emb.group")?;
        let rows = tape.index_select(&table, 0, &idx)?;
        let mut avg = vec![0.0; lists.len() * flat.len()];
        let mut col = 0;
        for (r, list) in lists.iter().enumerate() {
            for _ in list {
                avg[r * flat.len() + col] = 1.0 / list.len() as f64;
                col += 1;
            }
        }
        let avg = Tensor::new(vec![lists.len(), flat.len()], avg)?;
        Ok(tape.matmul(&avg, &rows)?)
    }
}
