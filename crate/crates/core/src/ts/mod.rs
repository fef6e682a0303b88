//! Prompt rendering, teacher embeddings and the twin VAEs whose student
//! latents feed the policy.

mod cache;
mod embed;
mod prompt;
mod vae;

pub use cache::{EmbeddingCache, EmbeddingVec};
pub use embed::{
    cosine, hash_embed, hash_embed_dim, parse_embed, parse_info, EmbedRequest, EmbedResponse, EmbeddingProvider,
    HashProvider, HttpProvider, InfoResponse, HASH_EMBED_DIM,
};
pub use prompt::{hex, render_prompt, topology_block, PromptDoc};
pub use vae::{
    gaussian_kl, kl_graph, kl_std_normal_graph, LatentGaussian, LatentVars, TeacherStudent, TsDims, TsLossVars,
    TsWeights, Vae, Variant,
};

use thiserror::Error;

use crate::numerics::NumError;

#[derive(Debug, Error)]
pub enum TsError {
    #[error("embedding protocol error: {0}")]
    Protocol(String),
    #[error("embedding transport error: {0}")]
    Transport(String),
    #[error("variant {0} needs an embedding provider")]
    MissingProvider(&'static str),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
