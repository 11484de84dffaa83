//! Embedding tables, behavior encoders (target attention, sum pooling, a
//! light self-attention block), the CTR decoder, and the assembled model
//! variants.

mod attention;
mod ctr;
mod decoder;
mod embedding;

pub use attention::{
    self_attention_block, sum_pool, sum_pool_flat, target_attention, target_attention_flat,
    AttentionOutput,
};
pub use ctr::{CtrModel, ForwardMode, ForwardOutput};
pub use decoder::Decoder;
pub use embedding::EmbeddingTables;

use crate::params::ParamError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unknown {field} id {id} (vocab size {size})")]
    UnknownId { field: &'static str, id: u32, size: u32 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Variational(#[from] crate::variational::VarError),
    #[error(transparent)]
    Flow(#[from] crate::flow::FlowError),
}

pub type Result<T> = std::result::Result<T, ModelError>;
