use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use lats_core::ts::HASH_EMBED_DIM;
use lats_core::{EmbeddingProvider, HashProvider, HttpProvider};

/// Parsed `--provider` value.
#[derive(Debug, Clone, PartialEq)]
pub enum ProviderSpec {
    Hash { seed: u64, dim: usize },
    Http(String),
}

impl ProviderSpec {
    /// Accepts `hash`, `hash:<seed>`, `hash:<seed>:<dim>` and `http:<url>`,
    /// where the url may be written with or without its own scheme.
    pub fn parse(s: &str) -> anyhow::Result<Self> {
        let s = s.trim();
        if s == "hash" {
            return Ok(ProviderSpec::Hash { seed: 0, dim: HASH_EMBED_DIM });
        }
        if let Some(rest) = s.strip_prefix("hash:") {
            let mut it = rest.split(':');
            let seed = it.next().unwrap_or("").parse().context("hash provider seed")?;
            let dim = match it.next() {
                Some(d) => d.parse().context("hash provider dim")?,
                None => HASH_EMBED_DIM,
            };
            if dim == 0 || it.next().is_some() {
                bail!("expected hash:<seed>[:<dim>], got `{s}`");
            }
            return Ok(ProviderSpec::Hash { seed, dim });
        }
        if let Some(rest) = s.strip_prefix("http:") {
            let url = if rest.starts_with("//") { format!("http:{rest}") } else { rest.to_string() };
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                bail!("expected http:<url>, got `{s}`");
            }
            return Ok(ProviderSpec::Http(url));
        }
        Err(anyhow!("unknown provider `{s}` (hash, hash:<seed>[:<dim>], http:<url>)"))
    }

    pub fn connect(&self) -> anyhow::Result<Arc<dyn EmbeddingProvider>> {
        Ok(match self {
            ProviderSpec::Hash { seed, dim } => Arc::new(HashProvider { seed: *seed, dim: *dim }),
            ProviderSpec::Http(url) => {
                Arc::new(HttpProvider::connect_reported(url).with_context(|| format!("embedding service at {url}"))?)
            }
        })
    }
}
