//! Utterance embeddings: a deterministic character n-gram hash featurizer, a client for
//! an OpenAI-style remote embedding service, a persistent content-addressed cache and
//! the binary matrix file format.

use crate::io::{f32_from_le_bytes, f32_to_le_bytes, meta_path, sha256_hex, write_atomic};
use crate::traj::TrajectorySet;
use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("invalid embedder config: {0}")]
    Config(String),
    #[error("nothing to embed")]
    EmptyInput,
    #[error("remote embedding failed after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: String },
    #[error("remote service returned dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("remote service returned {got} vectors for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("non-finite value in embedding for input {0}")]
    NonFinite(usize),
    #[error("matrix file {path}: data holds {got} bytes, header implies {expected}")]
    LengthMismatch { path: String, expected: usize, got: usize },
    #[error("checksum mismatch in {0}")]
    Checksum(String),
    #[error("matrix metadata: {0}")]
    Metadata(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmbedError + '_ {
    move |source| EmbedError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    HashFeaturizer,
    RemoteService,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token; unset means no auth header.
    pub api_key_env: String,
    pub batch_size: usize,
    pub attempts: u32,
    pub initial_backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: "text-embedding-3-small".into(),
            api_key_env: "EMBEDDING_API_KEY".into(),
            batch_size: 256,
            attempts: 3,
            initial_backoff_ms: 250,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub d: usize,
    pub normalize: bool,
    pub ngram_range: (usize, usize),
    pub seed: u64,
    pub remote: Option<RemoteConfig>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { kind: EmbedderKind::HashFeaturizer, d: 64, normalize: true, ngram_range: (2, 4), seed: 0, remote: None }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.d < 2 {
            return Err(EmbedError::Config(format!("dimension must be at least 2, got {}", self.d)));
        }
        let (lo, hi) = self.ngram_range;
        if lo == 0 || lo > hi {
            return Err(EmbedError::Config(format!("bad n-gram range {lo}..{hi}")));
        }
        match (self.kind, &self.remote) {
            (EmbedderKind::RemoteService, None) => {
                Err(EmbedError::Config("remote embedder requires an endpoint section".into()))
            }
            (EmbedderKind::RemoteService, Some(r)) if r.endpoint.is_empty() => {
                Err(EmbedError::Config("remote endpoint is empty".into()))
            }
            (EmbedderKind::RemoteService, Some(r)) if r.attempts == 0 || r.batch_size == 0 => {
                Err(EmbedError::Config("remote attempts and batch size must be positive".into()))
            }
            (EmbedderKind::HashFeaturizer, Some(_)) => {
                Err(EmbedError::Config("endpoint given for the hash featurizer".into()))
            }
            _ => Ok(()),
        }
    }

    /// Stable identity of everything that affects the produced vectors.
    pub fn fingerprint(&self) -> String {
        match self.kind {
            EmbedderKind::HashFeaturizer => format!(
                "hash:d={};norm={};ngram={}-{};seed={}",
                self.d, self.normalize, self.ngram_range.0, self.ngram_range.1, self.seed
            ),
            EmbedderKind::RemoteService => {
                let r = self.remote.as_ref().map(|r| (r.endpoint.as_str(), r.model.as_str())).unwrap_or(("", ""));
                format!("remote:{}:{};d={};norm={}", r.0, r.1, self.d, self.normalize)
            }
        }
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>, EmbedError> {
        self.validate()?;
        Ok(match self.kind {
            EmbedderKind::HashFeaturizer => Box::new(HashEmbedder::new(self.clone())),
            EmbedderKind::RemoteService => Box::new(RemoteEmbedder::new(self.clone())?),
        })
    }
}

pub trait Embedder: Send + Sync {
    fn fingerprint(&self) -> String;
    fn dim(&self) -> usize;
    /// One vector per input, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

pub fn embed_texts(cfg: &EmbedderConfig, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
    if texts.is_empty() {
        return Err(EmbedError::EmptyInput);
    }
    cfg.build()?.embed(texts)
}

fn l2_normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

/// Signed character n-gram hashing.
pub struct HashEmbedder {
    cfg: EmbedderConfig,
}

impl HashEmbedder {
    pub fn new(cfg: EmbedderConfig) -> Self {
        Self { cfg }
    }

    pub fn featurize(&self, text: &str) -> Vec<f32> {
        let d = self.cfg.d;
        let mut v = vec![0f32; d];
        let chars: Vec<char> = format!(" {} ", text.trim().to_lowercase()).chars().collect();
        let seed = self.cfg.seed.to_le_bytes();
        let mut buf = [0u8; 4];
        let (lo, hi) = self.cfg.ngram_range;
        for n in lo..=hi {
            if n > chars.len() {
                break;
            }
            for w in chars.windows(n) {
                let mut h = FnvHasher::default();
                h.write(&seed);
                for c in w {
                    h.write(c.encode_utf8(&mut buf).as_bytes());
                }
                let h = h.finish();
                let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
                v[(h % d as u64) as usize] += sign;
            }
        }
        if self.cfg.normalize {
            l2_normalize(&mut v);
        }
        v
    }
}

impl Embedder for HashEmbedder {
    fn fingerprint(&self) -> String {
        self.cfg.fingerprint()
    }

    fn dim(&self) -> usize {
        self.cfg.d
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(texts.iter().map(|t| self.featurize(t)).collect())
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f32>,
}

/// Client for `POST {model, input}` → `{data: [{index, embedding}]}` services.
pub struct RemoteEmbedder {
    cfg: EmbedderConfig,
    remote: RemoteConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl RemoteEmbedder {
    pub fn new(cfg: EmbedderConfig) -> Result<Self, EmbedError> {
        cfg.validate()?;
        let remote = cfg.remote.clone().ok_or_else(|| EmbedError::Config("missing remote section".into()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_millis(remote.timeout_ms)))
            .build()
            .into();
        let api_key = std::env::var(&remote.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self { cfg, remote, agent, api_key })
    }

    fn request_once(&self, batch: &[String]) -> Result<Vec<Vec<f32>>, String> {
        let mut req = self.agent.post(&self.remote.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(EmbeddingRequest { model: &self.remote.model, input: batch })
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {}", status.as_u16()));
        }
        let mut parsed: EmbeddingResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        parsed.data.sort_by_key(|d| d.index);
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }

    fn request_batch(&self, batch: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let mut backoff = Duration::from_millis(self.remote.initial_backoff_ms);
        let mut last = String::new();
        for attempt in 0..self.remote.attempts {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            match self.request_once(batch) {
                Ok(vs) => return Ok(vs),
                Err(e) => last = e,
            }
        }
        Err(EmbedError::Transport { attempts: self.remote.attempts, last })
    }
}

impl Embedder for RemoteEmbedder {
    fn fingerprint(&self) -> String {
        self.cfg.fingerprint()
    }

    fn dim(&self) -> usize {
        self.cfg.d
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.remote.batch_size) {
            let vs = self.request_batch(batch)?;
            if vs.len() != batch.len() {
                return Err(EmbedError::CountMismatch { expected: batch.len(), got: vs.len() });
            }
            for mut v in vs {
                if v.len() != self.cfg.d {
                    return Err(EmbedError::DimensionMismatch { expected: self.cfg.d, got: v.len() });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(EmbedError::NonFinite(out.len()));
                }
                if self.cfg.normalize {
                    l2_normalize(&mut v);
                }
                out.push(v);
            }
        }
        Ok(out)
    }
}

/// Row-major n×d matrix of utterance embeddings; row i holds corpus uid `uids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    d: usize,
    data: Vec<f32>,
    uids: Vec<u32>,
    uid_index: HashMap<u32, usize>,
}

impl EmbeddingMatrix {
    pub fn new(d: usize, data: Vec<f32>, uids: Vec<u32>) -> Result<Self, EmbedError> {
        if d == 0 || data.len() != d * uids.len() {
            return Err(EmbedError::Metadata(format!(
                "{} values cannot form {} rows of dimension {}",
                data.len(),
                uids.len(),
                d
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(EmbedError::NonFinite(i / d));
        }
        let mut uid_index = HashMap::with_capacity(uids.len());
        for (row, &uid) in uids.iter().enumerate() {
            if uid_index.insert(uid, row).is_some() {
                return Err(EmbedError::Metadata(format!("uid {uid} appears twice")));
            }
        }
        Ok(Self { d, data, uids, uid_index })
    }

    /// Rows are numbered by their uids 0..n.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, EmbedError> {
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(EmbedError::Metadata("ragged rows".into()));
        }
        Self::new(d, rows.concat(), (0..rows.len() as u32).collect())
    }

    pub fn n(&self) -> usize {
        self.uids.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn uids(&self) -> &[u32] {
        &self.uids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn row_of(&self, uid: u32) -> Option<usize> {
        self.uid_index.get(&uid).copied()
    }

    pub fn vector(&self, uid: u32) -> Option<&[f32]> {
        self.row_of(uid).map(|r| self.row(r))
    }

    pub fn checksum(&self) -> String {
        sha256_hex(&f32_to_le_bytes(&self.data))
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixMeta {
    n: usize,
    d: usize,
    uids: Vec<u32>,
    checksum: String,
}

/// Writes raw little-endian f32 rows to `path` and `{n, d, uids, checksum}` to the sidecar.
pub fn save_matrix(m: &EmbeddingMatrix, path: &Path) -> Result<(), EmbedError> {
    let bytes = f32_to_le_bytes(&m.data);
    let meta = MatrixMeta { n: m.n(), d: m.d, uids: m.uids.clone(), checksum: sha256_hex(&bytes) };
    write_atomic(path, &bytes).map_err(io_err(path))?;
    let mp = meta_path(path);
    let json = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
    write_atomic(&mp, &json).map_err(io_err(&mp))
}

pub fn load_matrix(path: &Path) -> Result<EmbeddingMatrix, EmbedError> {
    let mp = meta_path(path);
    let meta: MatrixMeta = serde_json::from_slice(&fs::read(&mp).map_err(io_err(&mp))?)
        .map_err(|e| EmbedError::Metadata(format!("{}: {e}", mp.display())))?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    let expected = meta.n * meta.d * 4;
    if bytes.len() != expected || meta.uids.len() != meta.n {
        return Err(EmbedError::LengthMismatch { path: path.display().to_string(), expected, got: bytes.len() });
    }
    if sha256_hex(&bytes) != meta.checksum {
        return Err(EmbedError::Checksum(path.display().to_string()));
    }
    EmbeddingMatrix::new(meta.d, f32_from_le_bytes(&bytes), meta.uids)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    /// Cache file existed but failed its checksum and was rebuilt.
    pub rebuilt: bool,
}

#[derive(Serialize, Deserialize, Default)]
struct CacheFile {
    entries: BTreeMap<String, String>,
    checksum: String,
}

fn entries_checksum(entries: &BTreeMap<String, String>) -> String {
    sha256_hex(&serde_json::to_vec(entries).expect("cache entries serialize"))
}

fn cache_key(fingerprint: &str, text: &str) -> String {
    let mut buf = Vec::with_capacity(fingerprint.len() + text.len() + 1);
    buf.extend_from_slice(fingerprint.as_bytes());
    buf.push(0);
    buf.extend_from_slice(text.as_bytes());
    sha256_hex(&buf)
}

/// Exclusive lock held while a writer merges new entries into the cache file.
struct CacheLock {
    path: PathBuf,
}

impl CacheLock {
    fn acquire(cache: &Path) -> Result<Self, EmbedError> {
        let mut name = cache.file_name().map(|s| s.to_os_string()).unwrap_or_default();
        name.push(".lock");
        let path = cache.with_file_name(name);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let start = Instant::now();
        loop {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(_) => return Ok(Self { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if start.elapsed() > Duration::from_secs(30) {
                        return Err(EmbedError::Io { path: path.display().to_string(), source: e });
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(EmbedError::Io { path: path.display().to_string(), source: e }),
            }
        }
    }
}

impl Drop for CacheLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Reads the cache; a missing file is empty, a corrupt one is reported as `Err(())`.
fn read_cache(path: &Path) -> Result<BTreeMap<String, String>, ()> {
    let Ok(bytes) = fs::read(path) else { return Ok(BTreeMap::new()) };
    let file: CacheFile = serde_json::from_slice(&bytes).map_err(|_| ())?;
    if entries_checksum(&file.entries) != file.checksum {
        return Err(());
    }
    Ok(file.entries)
}

fn decode_vector(hex_str: &str, d: usize) -> Option<Vec<f32>> {
    let bytes = hex::decode(hex_str).ok()?;
    (bytes.len() == d * 4).then(|| f32_from_le_bytes(&bytes))
}

/// Embeds every distinct corpus utterance once, consulting and extending the cache.
pub fn embed_corpus_with(
    embedder: &dyn Embedder,
    set: &TrajectorySet,
    cache_path: Option<&Path>,
) -> Result<(EmbeddingMatrix, CacheStats), EmbedError> {
    let corpus = set.corpus();
    if corpus.is_empty() {
        return Err(EmbedError::EmptyInput);
    }
    let fp = embedder.fingerprint();
    let d = embedder.dim();
    let mut stats = CacheStats::default();
    let cached = match cache_path {
        Some(p) => read_cache(p).unwrap_or_else(|()| {
            stats.rebuilt = true;
            BTreeMap::new()
        }),
        None => BTreeMap::new(),
    };

    let keys: Vec<String> = corpus.iter().map(|u| cache_key(&fp, &u.text)).collect();
    let mut rows: Vec<Option<Vec<f32>>> = keys.iter().map(|k| cached.get(k).and_then(|h| decode_vector(h, d))).collect();

    // Distinct texts still missing (the same text may appear once per speaker).
    let mut pending: Vec<String> = Vec::new();
    let mut pending_index: HashMap<&str, usize> = HashMap::new();
    for (u, row) in corpus.iter().zip(&rows) {
        if row.is_none() && !pending_index.contains_key(u.text.as_str()) {
            pending_index.insert(u.text.as_str(), pending.len());
            pending.push(u.text.clone());
        }
    }
    stats.misses = pending.len();
    stats.hits = rows.iter().filter(|r| r.is_some()).count();

    let mut fresh = BTreeMap::new();
    if !pending.is_empty() {
        let vs = embedder.embed(&pending)?;
        if vs.len() != pending.len() {
            return Err(EmbedError::CountMismatch { expected: pending.len(), got: vs.len() });
        }
        for (i, (u, row)) in corpus.iter().zip(rows.iter_mut()).enumerate() {
            if row.is_none() {
                let v = vs[pending_index[u.text.as_str()]].clone();
                if v.len() != d {
                    return Err(EmbedError::DimensionMismatch { expected: d, got: v.len() });
                }
                fresh.insert(keys[i].clone(), hex::encode(f32_to_le_bytes(&v)));
                *row = Some(v);
            }
        }
    }

    if let Some(p) = cache_path {
        if !fresh.is_empty() || stats.rebuilt {
            let _lock = CacheLock::acquire(p)?;
            let mut entries = read_cache(p).unwrap_or_default();
            entries.extend(fresh);
            let file = CacheFile { checksum: entries_checksum(&entries), entries };
            write_atomic(p, &serde_json::to_vec(&file).expect("cache serializes")).map_err(io_err(p))?;
        }
    }

    let data: Vec<f32> = rows.into_iter().flat_map(|r| r.expect("every row filled")).collect();
    let m = EmbeddingMatrix::new(d, data, corpus.iter().map(|u| u.uid).collect())?;
    Ok((m, stats))
}

pub fn embed_corpus(cfg: &EmbedderConfig, set: &TrajectorySet, cache_path: &Path) -> Result<EmbeddingMatrix, EmbedError> {
    let embedder = cfg.build()?;
    embed_corpus_with(embedder.as_ref(), set, Some(cache_path)).map(|(m, _)| m)
}
