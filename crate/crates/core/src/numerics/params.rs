use std::collections::HashMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Mat, NumError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    Zeros,
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = rows.
    UniformFanIn,
    /// Per `cols/rows`-wide square block, an orthogonal matrix.
    Orthogonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitRecord {
    pub name: String,
    pub scheme: InitScheme,
    pub rows: usize,
    pub cols: usize,
}

/// Named parameter tensors plus the record of how they were initialized.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    frozen: Vec<bool>,
    index: HashMap<String, ParamId>,
    records: Vec<InitRecord>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            frozen: Vec::new(),
            index: HashMap::new(),
            records: Vec::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, scheme: InitScheme) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter `{name}`");
        let m = match scheme {
            InitScheme::Zeros => Mat::zeros(rows, cols),
            InitScheme::UniformFanIn => {
                let a = 1.0 / (rows.max(1) as f64).sqrt();
                let data = (0..rows * cols).map(|_| self.rng.random_range(-a..a)).collect();
                Mat::from_vec(rows, cols, data)
            }
            InitScheme::Orthogonal => orthogonal_blocks(rows, cols, &mut self.rng),
        };
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(m);
        self.frozen.push(false);
        self.index.insert(name.to_string(), id);
        self.records.push(InitRecord {
            name: name.to_string(),
            scheme,
            rows,
            cols,
        });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    /// Frozen parameters enter graphs as constants.
    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        !self.frozen[id.0]
    }

    pub fn init_records(&self) -> &[InitRecord] {
        &self.records
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Overwrites values from a checkpoint; names and shapes must match.
    pub fn load_from(&mut self, ck: &Checkpoint) -> Result<(), NumError> {
        if ck.tensors.len() != self.values.len() {
            return Err(NumError::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                ck.tensors.len(),
                self.values.len()
            )));
        }
        for (name, m) in &ck.tensors {
            let id = self
                .id(name)
                .ok_or_else(|| NumError::Checkpoint(format!("unknown tensor `{name}`")))?;
            if self.values[id.0].shape() != m.shape() {
                return Err(NumError::Checkpoint(format!("shape mismatch for `{name}`")));
            }
            self.values[id.0] = m.clone();
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        Checkpoint {
            metadata,
            tensors: self.names.iter().cloned().zip(self.values.iter().cloned()).collect(),
        }
    }
}

fn orthogonal_blocks(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    // Gram-Schmidt on Gaussian columns, one square block per `rows` columns
    let mut m = Mat::zeros(rows, cols);
    let mut start = 0;
    while start < cols {
        let w = rows.min(cols - start);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(w);
        while basis.len() < w {
            let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-8 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        for (j, b) in basis.iter().enumerate() {
            for (r, &x) in b.iter().enumerate() {
                m.data[r * cols + start + j] = x;
            }
        }
        start += w;
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |s: &ParamStore| s.values.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
        Self {
            config,
            m: zeros(store),
            v: zeros(store),
            t: 0,
        }
    }

    /// One step over the given gradients. Parameters absent from `grads`
    /// keep their moments untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Mat)]) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (id, g) in grads {
            if !store.trainable(*id) {
                continue;
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = &mut store.values[id.0];
            for k in 0..g.len() {
                let gk = g.data[k];
                m.data[k] = c.beta1 * m.data[k] + (1.0 - c.beta1) * gk;
                v.data[k] = c.beta2 * v.data[k] + (1.0 - c.beta2) * gk * gk;
                let mh = m.data[k] / bc1;
                let vh = v.data[k] / bc2;
                p.data[k] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Mat)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for x in &mut g.data {
                *x *= s;
            }
        }
    }
    norm
}

const MAGIC: &[u8; 8] = b"LATSCKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Mat)>,
}

fn put_u32(w: &mut impl Write, x: u32) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, n: usize) -> std::io::Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Layout: magic, version, metadata JSON, tensor count, then per tensor
/// name, rows, cols and raw little-endian f64 data.
pub fn save_checkpoint(ck: &Checkpoint, w: &mut impl Write) -> Result<(), NumError> {
    w.write_all(MAGIC)?;
    put_u32(w, CKPT_VERSION)?;
    let meta = serde_json::to_vec(&ck.metadata).map_err(|e| NumError::Checkpoint(e.to_string()))?;
    put_u32(w, meta.len() as u32)?;
    w.write_all(&meta)?;
    put_u32(w, ck.tensors.len() as u32)?;
    for (name, m) in &ck.tensors {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, m.rows as u32)?;
        put_u32(w, m.cols as u32)?;
        for x in &m.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(r: &mut impl Read) -> Result<Checkpoint, NumError> {
    let bad = |m: &str| NumError::Checkpoint(m.to_string());
    let magic = get_bytes(r, 8)?;
    if magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = get_u32(r)?;
    if version != CKPT_VERSION {
        return Err(NumError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = get_u32(r)? as usize;
    let metadata = serde_json::from_slice(&get_bytes(r, meta_len)?).map_err(|e| bad(&e.to_string()))?;
    let n = get_u32(r)? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let len = get_u32(r)? as usize;
        let name = String::from_utf8(get_bytes(r, len)?).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rows = get_u32(r)? as usize;
        let cols = get_u32(r)? as usize;
        let raw = get_bytes(r, rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((name, Mat::from_vec(rows, cols, data)));
    }
    Ok(Checkpoint { metadata, tensors })
}
