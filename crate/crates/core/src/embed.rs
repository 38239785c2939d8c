//! Token embeddings: the `REFREVE1` store format, a hashed fallback embedder,
//! cosine helpers, greedy token alignment and an exact nearest-neighbor
//! sentence index.

use std::collections::{BTreeMap, HashSet};
use std::io::{ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{sentence_key, Example};
use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 8] = b"REFREVE1";

/// Row-major `rows × dim` matrix of f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Matrix {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_vec(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::LengthMismatch {
                left: data.len(),
                right: rows * dim,
            });
        }
        Ok(Matrix { rows, dim, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
        }
    }

    /// Vertical concatenation. All parts must share `dim`.
    pub fn concat<'a>(dim: usize, parts: impl IntoIterator<Item = &'a Matrix>) -> Result<Matrix> {
        let mut out = Matrix::zeros(0, dim);
        for p in parts {
            if p.dim != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: p.dim,
                });
            }
            out.data.extend_from_slice(&p.data);
            out.rows += p.rows;
        }
        Ok(out)
    }
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    cosine_with_norms(a, l2_norm(a), b, l2_norm(b))
}

pub(crate) fn cosine_with_norms(a: &[f32], na: f64, b: &[f32], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

/// Deterministic bag-of-character-trigram embedding. Each token is padded
/// with `#`, its trigrams hashed with FNV-1a into `dim` signed buckets, and
/// the row L2-normalized (zero rows stay zero).
pub fn hashed_embed(tokens: &[String], dim: usize) -> Matrix {
    let mut out = Matrix::zeros(tokens.len(), dim);
    for (i, tok) in tokens.iter().enumerate() {
        let padded: Vec<char> = std::iter::once('#')
            .chain(tok.chars())
            .chain(std::iter::once('#'))
            .collect();
        let mut acc = vec![0f64; dim];
        let mut buf = String::new();
        for w in padded.windows(3) {
            buf.clear();
            buf.extend(w);
            let h = fnv1a64(buf.as_bytes());
            let bucket = (h % dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            acc[bucket] += sign;
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (dst, v) in out.row_mut(i).iter_mut().zip(&acc) {
                *dst = (v / norm) as f32;
            }
        }
    }
    out
}

/// For each reference row, the best cosine against any source row.
pub fn greedy_align_scores(reference: &Matrix, source: &Matrix) -> Result<Vec<f64>> {
    if reference.dim() != source.dim() {
        return Err(Error::DimMismatch {
            expected: reference.dim(),
            found: source.dim(),
        });
    }
    if source.is_empty() {
        return Err(Error::invalid("source matrix has no rows"));
    }
    let src_norms: Vec<f64> = source.iter_rows().map(l2_norm).collect();
    Ok(reference
        .iter_rows()
        .map(|r| {
            let nr = l2_norm(r);
            source
                .iter_rows()
                .zip(&src_norms)
                .map(|(s, &ns)| cosine_with_norms(r, nr, s, ns))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Mean of rows, L2-normalized. A zero mean stays zero.
pub fn pool_sentence(matrix: &Matrix) -> Result<Vec<f32>> {
    if matrix.is_empty() {
        return Err(Error::invalid("cannot pool an empty matrix"));
    }
    let mean = mean_rows(matrix);
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(mean
        .iter()
        .map(|&v| if norm > 0.0 { (v / norm) as f32 } else { 0.0 })
        .collect())
}

pub(crate) fn mean_rows(matrix: &Matrix) -> Vec<f64> {
    let mut acc = vec![0f64; matrix.dim()];
    for r in matrix.iter_rows() {
        for (a, &x) in acc.iter_mut().zip(r) {
            *a += f64::from(x);
        }
    }
    let n = matrix.rows().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Where a token's vector comes from: row `row` of the stored sentence `key`.
/// Corrupted sentences splice rows from their anchor and from distractors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenOrigin {
    pub key: String,
    pub row: usize,
}

/// Source of per-token vectors for sentences addressed by store key.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Matrix for the sentence stored under `key`, one row per token.
    fn embed(&self, key: &str, tokens: &[String]) -> Result<Matrix>;

    /// Matrix assembled token by token from the given origins.
    fn gather(&self, origins: &[TokenOrigin], tokens: &[String]) -> Result<Matrix>;
}

/// Context-free fallback embedder backed by [`hashed_embed`].
#[derive(Debug, Clone, Copy)]
pub struct HashedEmbedder {
    dim: usize,
}

impl HashedEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 8 {
            return Err(Error::invalid(format!("hashed embedding dim {dim} < 8")));
        }
        Ok(HashedEmbedder { dim })
    }
}

impl Embedder for HashedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, _key: &str, tokens: &[String]) -> Result<Matrix> {
        Ok(hashed_embed(tokens, self.dim))
    }

    fn gather(&self, _origins: &[TokenOrigin], tokens: &[String]) -> Result<Matrix> {
        Ok(hashed_embed(tokens, self.dim))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    records: BTreeMap<String, Matrix>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            records: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&Matrix> {
        self.records.get(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, matrix: Matrix) -> Result<()> {
        if matrix.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: matrix.dim(),
            });
        }
        self.records.insert(key.into(), matrix);
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    /// Checks that every record naming a corpus sentence has one row per token.
    pub fn validate_against(&self, corpus: &[Example]) -> Result<()> {
        for ex in corpus {
            for s in ex.source_sentences().chain(ex.reference.iter()) {
                let key = sentence_key(&ex.example_id, &s.sent_id);
                if let Some(m) = self.records.get(&key) {
                    if m.rows() != s.tokens.len() {
                        return Err(Error::Embedding {
                            key,
                            message: format!(
                                "sent_id {} has {} tokens but {} embedding rows",
                                s.sent_id,
                                s.tokens.len(),
                                m.rows()
                            ),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

impl Embedder for EmbeddingStore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, key: &str, tokens: &[String]) -> Result<Matrix> {
        let m = self.records.get(key).ok_or_else(|| Error::Embedding {
            key: key.to_string(),
            message: "no record in store".into(),
        })?;
        if m.rows() != tokens.len() {
            return Err(Error::Embedding {
                key: key.to_string(),
                message: format!("{} rows for {} tokens", m.rows(), tokens.len()),
            });
        }
        Ok(m.clone())
    }

    fn gather(&self, origins: &[TokenOrigin], tokens: &[String]) -> Result<Matrix> {
        if origins.len() != tokens.len() {
            return Err(Error::LengthMismatch {
                left: origins.len(),
                right: tokens.len(),
            });
        }
        let mut out = Matrix::zeros(origins.len(), self.dim);
        for (i, o) in origins.iter().enumerate() {
            let m = self.records.get(&o.key).ok_or_else(|| Error::Embedding {
                key: o.key.clone(),
                message: "no record in store".into(),
            })?;
            if o.row >= m.rows() {
                return Err(Error::Embedding {
                    key: o.key.clone(),
                    message: format!("row {} out of range ({} rows)", o.row, m.rows()),
                });
            }
            out.row_mut(i).copy_from_slice(m.row(o.row));
        }
        Ok(out)
    }
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    /// Fills `buf`; `Ok(false)` on a clean EOF before the first byte.
    fn read_exact_or_eof(&mut self, buf: &mut [u8]) -> Result<bool> {
        let start = self.offset;
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) if filled == 0 => return Ok(false),
                Ok(0) => {
                    return Err(Error::Format {
                        offset: start,
                        message: format!("truncated: needed {} bytes, got {}", buf.len(), filled),
                    })
                }
                Ok(n) => {
                    filled += n;
                    self.offset += n as u64;
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(true)
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        let at = self.offset;
        if self.read_exact_or_eof(buf)? || buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Format {
                offset: at,
                message: "truncated record".into(),
            })
        }
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

/// Reads a `REFREVE1` stream: magic, u32 dim, then records of
/// (u32 key length, key, u32 token count, token_count × dim f32) until EOF.
pub fn load_store<R: Read>(reader: R) -> Result<EmbeddingStore> {
    let mut r = CountingReader {
        inner: reader,
        offset: 0,
    };
    let mut magic = [0u8; 8];
    if !r.read_exact_or_eof(&mut magic)? || &magic != STORE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let dim = r.read_u32()? as usize;
    if dim == 0 {
        return Err(Error::Format {
            offset: 8,
            message: "dim must be positive".into(),
        });
    }
    let mut store = EmbeddingStore::new(dim);
    loop {
        let record_offset = r.offset;
        let mut len_buf = [0u8; 4];
        if !r.read_exact_or_eof(&mut len_buf)? {
            break;
        }
        let key_len = u32::from_le_bytes(len_buf) as usize;
        let mut key = vec![0u8; key_len];
        r.read_exact(&mut key)?;
        let key = String::from_utf8(key).map_err(|_| Error::Format {
            offset: record_offset + 4,
            message: "key is not UTF-8".into(),
        })?;
        let rows = r.read_u32()? as usize;
        let mut bytes = vec![0u8; rows * dim * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if store.records.contains_key(&key) {
            return Err(Error::Format {
                offset: record_offset,
                message: format!("duplicate record {key}"),
            });
        }
        store.records.insert(key, Matrix { rows, dim, data });
    }
    Ok(store)
}

pub fn write_store<W: Write>(mut writer: W, store: &EmbeddingStore) -> Result<()> {
    writer.write_all(STORE_MAGIC)?;
    writer.write_all(&(store.dim as u32).to_le_bytes())?;
    for (key, m) in &store.records {
        writer.write_all(&(key.len() as u32).to_le_bytes())?;
        writer.write_all(key.as_bytes())?;
        writer.write_all(&(m.rows() as u32).to_le_bytes())?;
        for v in m.as_slice() {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Pooled, L2-normalized sentence vectors searched by exact linear scan.
#[derive(Debug, Clone)]
pub struct SentenceIndex {
    keys: Vec<String>,
    vectors: Matrix,
}

impl SentenceIndex {
    pub fn new(dim: usize) -> Self {
        SentenceIndex {
            keys: Vec::new(),
            vectors: Matrix::zeros(0, dim),
        }
    }

    /// Adds a pooled vector; it is normalized on insertion.
    pub fn push(&mut self, key: impl Into<String>, vector: &[f32]) -> Result<()> {
        if vector.len() != self.vectors.dim() {
            return Err(Error::DimMismatch {
                expected: self.vectors.dim(),
                found: vector.len(),
            });
        }
        let n = l2_norm(vector);
        self.vectors.data.extend(
            vector
                .iter()
                .map(|&v| if n > 0.0 { (f64::from(v) / n) as f32 } else { 0.0 }),
        );
        self.vectors.rows += 1;
        self.keys.push(key.into());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        self.vectors.row(i)
    }

    /// Top `k` by cosine, ties broken by ascending key, skipping `exclude`.
    pub fn knn(&self, query: &[f32], k: usize, exclude: &HashSet<String>) -> Result<Vec<(String, f64)>> {
        if query.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                found: query.len(),
            });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let qn = l2_norm(query);
        let mut scored: Vec<(usize, f64)> = self
            .keys
            .iter()
            .enumerate()
            .filter(|(_, key)| !exclude.contains(*key))
            .map(|(i, _)| {
                let v = self.vectors.row(i);
                (i, cosine_with_norms(query, qn, v, l2_norm(v)))
            })
            .collect();
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.keys[a.0].cmp(&self.keys[b.0]))
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(i, s)| (self.keys[i].clone(), s))
            .collect())
    }
}
