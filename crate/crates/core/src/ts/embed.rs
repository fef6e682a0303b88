use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::TsError;

pub const HASH_EMBED_DIM: usize = 512;

/// Source of teacher embeddings. Implementations must be pure: the same
/// text always maps to the same vector.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn tag(&self) -> String;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, TsError>;
}

/// Deterministic stand-in: signed feature hashing of word 1-3-grams,
/// L2-normalized.
#[derive(Debug, Clone)]
pub struct HashProvider {
    pub seed: u64,
    pub dim: usize,
}

impl HashProvider {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            dim: HASH_EMBED_DIM,
        }
    }
}

impl EmbeddingProvider for HashProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn tag(&self) -> String {
        format!("hash:{}:{}", self.seed, self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, TsError> {
        Ok(texts.iter().map(|t| hash_embed_dim(t, self.seed, self.dim)).collect())
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub fn hash_embed(text: &str, seed: u64) -> Vec<f64> {
    hash_embed_dim(text, seed, HASH_EMBED_DIM)
}

pub fn hash_embed_dim(text: &str, seed: u64, dim: usize) -> Vec<f64> {
    let lower = text.to_lowercase();
    let tokens: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric() && c != '_')
        .filter(|t| !t.is_empty())
        .collect();
    let key = FNV_OFFSET ^ mix(seed);
    let mut v = vec![0.0; dim];
    for i in 0..tokens.len() {
        let mut h = key;
        for (n, tok) in tokens[i..].iter().take(3).enumerate() {
            h = fnv(h, tok.as_bytes());
            h = fnv(h, &[0xff]);
            let f = mix(h ^ n as u64);
            let idx = (f % dim as u64) as usize;
            v[idx] += if f >> 63 == 0 { 1.0 } else { -1.0 };
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(f64::MIN_POSITIVE)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfoResponse {
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct EmbedRequest<'a> {
    pub model: &'a str,
    pub texts: &'a [String],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedResponse {
    pub dim: usize,
    pub embeddings: Vec<Vec<f64>>,
}

/// Parses and validates a `/info` body.
pub fn parse_info(body: &str) -> Result<InfoResponse, TsError> {
    let info: InfoResponse = serde_json::from_str(body).map_err(|e| TsError::Protocol(format!("/info: {e}")))?;
    if info.dim == 0 {
        return Err(TsError::Protocol("/info: dim must be positive".into()));
    }
    Ok(info)
}

/// Parses and validates an `/embed` body against the declared dimension
/// and the number of texts sent.
pub fn parse_embed(body: &str, expected_dim: usize, n_texts: usize) -> Result<Vec<Vec<f64>>, TsError> {
    let r: EmbedResponse = serde_json::from_str(body).map_err(|e| TsError::Protocol(format!("/embed: {e}")))?;
    if r.dim != expected_dim {
        return Err(TsError::Protocol(format!("/embed: dim {} but handshake declared {expected_dim}", r.dim)));
    }
    if r.embeddings.len() != n_texts {
        return Err(TsError::Protocol(format!(
            "/embed: {} vectors for {n_texts} texts",
            r.embeddings.len()
        )));
    }
    for e in &r.embeddings {
        if e.len() != expected_dim || e.iter().any(|x| !x.is_finite()) {
            return Err(TsError::Protocol("/embed: malformed vector".into()));
        }
    }
    Ok(r.embeddings)
}

/// Client for the embedding wire protocol (`GET /info`, `POST /embed`).
pub struct HttpProvider {
    base: String,
    model: String,
    dim: usize,
    agent: ureq::Agent,
    batch: usize,
}

impl HttpProvider {
    /// Connects and performs the `/info` handshake.
    pub fn connect(base_url: &str, model: &str) -> Result<Self, TsError> {
        Self::handshake(base_url, Some(model))
    }

    /// Like [`HttpProvider::connect`] but requests whichever model the
    /// service reports.
    pub fn connect_reported(base_url: &str) -> Result<Self, TsError> {
        Self::handshake(base_url, None)
    }

    fn handshake(base_url: &str, model: Option<&str>) -> Result<Self, TsError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        let base = base_url.trim_end_matches('/').to_string();
        let mut resp = agent
            .get(format!("{base}/info"))
            .call()
            .map_err(|e| TsError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TsError::Transport(e.to_string()))?;
        if status != 200 {
            return Err(TsError::Protocol(format!("/info returned HTTP {status}: {body}")));
        }
        let info = parse_info(&body)?;
        let model = match model {
            Some(m) => m.to_string(),
            None => info.model.unwrap_or_else(|| "default".into()),
        };
        Ok(Self {
            base,
            model,
            dim: info.dim,
            agent,
            batch: 32,
        })
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch.max(1);
        self
    }
}

impl EmbeddingProvider for HttpProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn tag(&self) -> String {
        format!("http:{}:{}", self.base, self.model)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, TsError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch) {
            let req = EmbedRequest {
                model: &self.model,
                texts: chunk,
            };
            let mut resp = self
                .agent
                .post(format!("{}/embed", self.base))
                .send_json(&req)
                .map_err(|e| TsError::Transport(e.to_string()))?;
            let status = resp.status().as_u16();
            let body = resp
                .body_mut()
                .read_to_string()
                .map_err(|e| TsError::Transport(e.to_string()))?;
            if status != 200 {
                return Err(TsError::Protocol(format!("/embed returned HTTP {status}: {body}")));
            }
            out.extend(parse_embed(&body, self.dim, chunk.len())?);
        }
        Ok(out)
    }
}
