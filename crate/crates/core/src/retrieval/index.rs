//! Page index: the searchable collection of per-page embeddings, with
//! top-k retrieval and binary persistence.
//!
//! On-disk layout (all integers little-endian):
//!
//! ```text
//! magic "LIDX" | version u16 | dim u16 | entry count u32
//! per entry:
//!   doc_id    u16 length + UTF-8 bytes
//!   page_no   u32
//!   image_ref u16 length + UTF-8 bytes
//!   token_count u32
//!   token_count * dim f32 values
//! ```
//!
//! Embeddings are stored as f32 and widened to f64 on load; `build_index`
//! rounds incoming embeddings to f32 precision so that a save/load round
//! trip reproduces the in-memory index exactly.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use super::{late_interaction_score, MultiVectorEmbedding, RetrievalError, RetrievalHit};

const MAGIC: [u8; 4] = *b"LIDX";
const FORMAT_VERSION: u16 = 1;

/// One indexed page: identity, the path of its rendered image, and its
/// multi-vector embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PageRecord {
    pub doc_id: String,
    pub page_no: u32,
    pub image_ref: String,
    pub embedding: MultiVectorEmbedding,
}

/// Immutable collection of page records, ordered by (doc_id, page_no).
/// Safe to share across threads once built.
#[derive(Debug, Clone, PartialEq)]
pub struct PageIndex {
    dim: usize,
    entries: Vec<PageRecord>,
}

impl PageIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PageRecord] {
        &self.entries
    }

    pub fn get(&self, doc_id: &str, page_no: u32) -> Option<&PageRecord> {
        self.entries
            .binary_search_by(|e| {
                (e.doc_id.as_str(), e.page_no).cmp(&(doc_id, page_no))
            })
            .ok()
            .map(|i| &self.entries[i])
    }

    /// The subset of entries belonging to one document, as a standalone
    /// index. `None` when the document has no pages here.
    pub fn doc_subset(&self, doc_id: &str) -> Option<PageIndex> {
        let entries: Vec<PageRecord> = self
            .entries
            .iter()
            .filter(|e| e.doc_id == doc_id)
            .cloned()
            .collect();
        if entries.is_empty() {
            None
        } else {
            Some(PageIndex {
                dim: self.dim,
                entries,
            })
        }
    }

    pub fn doc_ids(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.doc_id.as_str()).collect()
    }
}

/// Build an index from page records: validates non-emptiness, a single
/// shared dimension, and unique (doc_id, page_no) keys, then sorts by key
/// and rounds embeddings to f32 storage precision.
pub fn build_index(records: Vec<PageRecord>) -> Result<PageIndex, RetrievalError> {
    if records.is_empty() {
        return Err(RetrievalError::InvalidInput(
            "cannot build an index from zero records".into(),
        ));
    }
    let dim = records[0].embedding.dim();
    if dim > u16::MAX as usize {
        return Err(RetrievalError::InvalidInput(format!(
            "dim {dim} exceeds the index format limit {}",
            u16::MAX
        )));
    }
    let mut seen = BTreeSet::new();
    for r in &records {
        if r.embedding.dim() != dim {
            return Err(RetrievalError::InvalidInput(format!(
                "page ({}, {}) has dim {} but the index dim is {dim}",
                r.doc_id,
                r.page_no,
                r.embedding.dim()
            )));
        }
        if !seen.insert((r.doc_id.clone(), r.page_no)) {
            return Err(RetrievalError::DuplicateKey {
                doc_id: r.doc_id.clone(),
                page_no: r.page_no,
            });
        }
    }
    let mut entries: Vec<PageRecord> = records
        .into_iter()
        .map(|mut r| {
            r.embedding = r.embedding.quantize_f32();
            r
        })
        .collect();
    entries.sort_by(|a, b| (a.doc_id.as_str(), a.page_no).cmp(&(b.doc_id.as_str(), b.page_no)));
    Ok(PageIndex { dim, entries })
}

/// Score every page against the query and return the `min(k, |index|)`
/// best hits, sorted by score descending with ties broken by
/// (doc_id, page_no) ascending. Ranks are consecutive from 1.
///
/// Scoring runs in parallel; each entry's score is computed independently
/// so the final ranking is identical to the sequential result.
pub fn retrieve_topk(
    index: &PageIndex,
    query: &MultiVectorEmbedding,
    k: usize,
) -> Result<Vec<RetrievalHit>, RetrievalError> {
    if query.dim() != index.dim {
        return Err(RetrievalError::DimensionMismatch {
            query: query.dim(),
            doc: index.dim,
        });
    }
    if k == 0 {
        return Err(RetrievalError::InvalidInput("k must be >= 1".into()));
    }
    let mut scored: Vec<(f64, &PageRecord)> = index
        .entries
        .par_iter()
        .map(|rec| Ok((late_interaction_score(query, &rec.embedding)?, rec)))
        .collect::<Result<_, RetrievalError>>()?;
    scored.sort_by(|(sa, a), (sb, b)| {
        sb.total_cmp(sa)
            .then_with(|| (a.doc_id.as_str(), a.page_no).cmp(&(b.doc_id.as_str(), b.page_no)))
    });
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (score, rec))| RetrievalHit {
            doc_id: rec.doc_id.clone(),
            page_no: rec.page_no,
            score,
            rank: (i + 1) as u32,
        })
        .collect())
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str16(&mut self, s: &str) -> Result<(), RetrievalError> {
        let bytes = s.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(RetrievalError::InvalidInput(format!(
                "string field of {} bytes exceeds the u16 length prefix",
                bytes.len()
            )));
        }
        self.u16(bytes.len() as u16);
        self.buf.extend_from_slice(bytes);
        Ok(())
    }
}

/// Serialize an index to its binary file format.
pub fn save_index(index: &PageIndex, path: &Path) -> Result<(), RetrievalError> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&MAGIC);
    w.u16(FORMAT_VERSION);
    w.u16(index.dim as u16);
    if index.entries.len() > u32::MAX as usize {
        return Err(RetrievalError::InvalidInput("too many entries".into()));
    }
    w.u32(index.entries.len() as u32);
    for rec in &index.entries {
        w.str16(&rec.doc_id)?;
        w.u32(rec.page_no);
        w.str16(&rec.image_ref)?;
        w.u32(rec.embedding.token_count() as u32);
        for &v in rec.embedding.data() {
            w.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&w.buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T, RetrievalError> {
        Err(RetrievalError::Format {
            offset: self.offset as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], RetrievalError> {
        if self.offset + n > self.bytes.len() {
            return self.fail(format!(
                "truncated: need {n} bytes for {what}, {} remain",
                self.bytes.len() - self.offset
            ));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16, RetrievalError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, RetrievalError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn str16(&mut self, what: &str) -> Result<String, RetrievalError> {
        let len = self.u16(what)? as usize;
        let start = self.offset;
        let bytes = self.take(len, what)?;
        match std::str::from_utf8(bytes) {
            Ok(s) => Ok(s.to_string()),
            Err(_) => Err(RetrievalError::Format {
                offset: start as u64,
                message: format!("{what} is not valid UTF-8"),
            }),
        }
    }
}

/// Load an index from its binary file format, widening stored f32 values
/// to f64. Format violations report the byte offset of the problem.
pub fn load_index(path: &Path) -> Result<PageIndex, RetrievalError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
    };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(RetrievalError::Format {
            offset: 0,
            message: format!("bad magic {magic:02x?}, expected {MAGIC:02x?}"),
        });
    }
    let version = r.u16("format version")?;
    if version != FORMAT_VERSION {
        return Err(RetrievalError::Format {
            offset: 4,
            message: format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        });
    }
    let dim = r.u16("dim")? as usize;
    if dim == 0 {
        return r.fail("dim must be >= 1");
    }
    let count = r.u32("entry count")? as usize;
    if count == 0 {
        return r.fail("entry count must be >= 1");
    }

    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let doc_id = r.str16("doc_id")?;
        let page_no = r.u32("page_no")?;
        let image_ref = r.str16("image_ref")?;
        let token_count = r.u32("token_count")? as usize;
        if token_count == 0 {
            return r.fail(format!("entry {i}: token_count must be >= 1"));
        }
        let raw = r.take(token_count * dim * 4, "embedding values")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let embedding = MultiVectorEmbedding::new(token_count, dim, data, false).map_err(|e| {
            RetrievalError::Format {
                offset: r.offset as u64,
                message: format!("entry {i}: {e}"),
            }
        })?;
        // The file carries no normalization flag; recompute it.
        let normalized = embedding.rows_are_unit();
        let embedding = if normalized {
            MultiVectorEmbedding::new(token_count, dim, embedding.data().to_vec(), true)
                .expect("rows just verified unit")
        } else {
            embedding
        };
        entries.push(PageRecord {
            doc_id,
            page_no,
            image_ref,
            embedding,
        });
    }
    if r.offset != bytes.len() {
        return r.fail(format!(
            "{} trailing bytes after the last entry",
            bytes.len() - r.offset
        ));
    }

    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert((e.doc_id.clone(), e.page_no)) {
            return Err(RetrievalError::DuplicateKey {
                doc_id: e.doc_id.clone(),
                page_no: e.page_no,
            });
        }
    }
    let sorted = entries
        .windows(2)
        .all(|w| (w[0].doc_id.as_str(), w[0].page_no) <= (w[1].doc_id.as_str(), w[1].page_no));
    if !sorted {
        return r.fail("entries are not sorted by (doc_id, page_no)");
    }

    Ok(PageIndex { dim, entries })
}
