use std::collections::hash_map::Entry;
use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::Arc;

use super::embed::EmbeddingProvider;
use super::prompt::PromptDoc;
use super::TsError;

pub type EmbeddingVec = Arc<Vec<f64>>;

/// Append-only file of `(sha256, dim, f64 LE × dim)` records.
struct DiskCache {
    file: File,
    index: HashMap<[u8; 32], (u64, usize)>,
}

impl DiskCache {
    fn open(path: &Path) -> Result<Self, TsError> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let len = file.metadata()?.len();
        let mut index = HashMap::new();
        let mut reader = BufReader::new(&mut file);
        let mut pos = 0u64;
        loop {
            let mut head = [0u8; 36];
            if pos + 36 > len || reader.read_exact(&mut head).is_err() {
                break;
            }
            let dim = u32::from_le_bytes(head[32..36].try_into().expect("4 bytes")) as usize;
            let body = (dim * 8) as u64;
            if pos + 36 + body > len {
                // torn tail from an interrupted write
                break;
            }
            let hash: [u8; 32] = head[..32].try_into().expect("32 bytes");
            index.insert(hash, (pos + 36, dim));
            reader.seek_relative(body as i64)?;
            pos += 36 + body;
        }
        drop(reader);
        if pos < len {
            file.set_len(pos)?;
        }
        Ok(Self { file, index })
    }

    fn get(&mut self, hash: &[u8; 32]) -> Result<Option<Vec<f64>>, TsError> {
        let Some(&(off, dim)) = self.index.get(hash) else { return Ok(None) };
        let mut buf = vec![0u8; dim * 8];
        self.file.seek(SeekFrom::Start(off))?;
        self.file.read_exact(&mut buf)?;
        Ok(Some(
            buf.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ))
    }

    fn put(&mut self, hash: [u8; 32], v: &[f64]) -> Result<(), TsError> {
        if self.index.contains_key(&hash) {
            return Ok(());
        }
        let mut rec = Vec::with_capacity(36 + v.len() * 8);
        rec.extend_from_slice(&hash);
        rec.extend_from_slice(&(v.len() as u32).to_le_bytes());
        for x in v {
            rec.extend_from_slice(&x.to_le_bytes());
        }
        let off = self.file.seek(SeekFrom::End(0))?;
        self.file.write_all(&rec)?;
        self.file.flush()?;
        self.index.insert(hash, (off + 36, v.len()));
        Ok(())
    }
}

/// Prompt-hash keyed embedding store: a bounded in-memory FIFO in front of
/// an optional unbounded disk file.
pub struct EmbeddingCache {
    mem: HashMap<[u8; 32], EmbeddingVec>,
    order: VecDeque<[u8; 32]>,
    capacity: usize,
    disk: Option<DiskCache>,
    /// number of texts sent to the provider
    pub provider_texts: usize,
    pub provider_calls: usize,
    pub hits: usize,
}

impl EmbeddingCache {
    pub fn in_memory(capacity: usize) -> Self {
        Self {
            mem: HashMap::new(),
            order: VecDeque::new(),
            capacity: capacity.max(1),
            disk: None,
            provider_texts: 0,
            provider_calls: 0,
            hits: 0,
        }
    }

    pub fn with_disk(capacity: usize, path: &Path) -> Result<Self, TsError> {
        let mut c = Self::in_memory(capacity);
        c.disk = Some(DiskCache::open(path)?);
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.mem.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mem.is_empty()
    }

    pub fn disk_entries(&self) -> usize {
        self.disk.as_ref().map_or(0, |d| d.index.len())
    }

    fn remember(&mut self, hash: [u8; 32], v: EmbeddingVec) {
        if self.mem.insert(hash, v).is_none() {
            self.order.push_back(hash);
            while self.order.len() > self.capacity {
                let old = self.order.pop_front().expect("non-empty");
                self.mem.remove(&old);
            }
        }
    }

    fn lookup(&mut self, hash: &[u8; 32]) -> Result<Option<EmbeddingVec>, TsError> {
        if let Some(v) = self.mem.get(hash) {
            return Ok(Some(v.clone()));
        }
        if let Some(disk) = &mut self.disk {
            if let Some(v) = disk.get(hash)? {
                let v = Arc::new(v);
                self.remember(*hash, v.clone());
                return Ok(Some(v));
            }
        }
        Ok(None)
    }

    /// Embeddings for `docs` in order; all misses go to the provider in one
    /// call, each distinct text once.
    pub fn get_many(&mut self, docs: &[PromptDoc], provider: &dyn EmbeddingProvider) -> Result<Vec<EmbeddingVec>, TsError> {
        let mut out: Vec<Option<EmbeddingVec>> = Vec::with_capacity(docs.len());
        let mut misses: Vec<usize> = Vec::new();
        let mut seen: HashMap<[u8; 32], usize> = HashMap::new();
        for (i, d) in docs.iter().enumerate() {
            match self.lookup(&d.text_hash)? {
                Some(v) => {
                    self.hits += 1;
                    out.push(Some(v));
                }
                None => {
                    out.push(None);
                    if let Entry::Vacant(e) = seen.entry(d.text_hash) {
                        e.insert(misses.len());
                        misses.push(i);
                    }
                }
            }
        }
        if !misses.is_empty() {
            let texts: Vec<String> = misses.iter().map(|&i| docs[i].text.clone()).collect();
            let vecs = provider.embed(&texts)?;
            if vecs.len() != texts.len() {
                return Err(TsError::Protocol("provider returned a different number of vectors".into()));
            }
            self.provider_calls += 1;
            self.provider_texts += texts.len();
            let fresh: Vec<EmbeddingVec> = vecs.into_iter().map(Arc::new).collect();
            for (&i, v) in misses.iter().zip(&fresh) {
                if let Some(disk) = &mut self.disk {
                    disk.put(docs[i].text_hash, v)?;
                }
                self.remember(docs[i].text_hash, v.clone());
            }
            for (i, d) in docs.iter().enumerate() {
                if out[i].is_none() {
                    out[i] = Some(fresh[seen[&d.text_hash]].clone());
                }
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }
}
