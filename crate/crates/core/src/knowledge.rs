//! Failure knowledge: fine-grained (agent-level) and coarse-grained
//! (trace-level) failure embeddings with exact cosine top-k retrieval.
//!
//! Every knowledge base is tied to the model version that produced its
//! embeddings. Adds and queries carrying a different version are rejected so
//! embedding spaces never mix.
//!
//! Binary container (little-endian):
//!
//! ```text
//! magic "EAKB" | format u32 | model_version u64 | embed_dim u32
//! fine_count u64   | fine entries
//! coarse_count u64 | coarse entries
//! ```
//!
//! Strings are `u32` byte length + UTF-8, embeddings are `embed_dim` f64s,
//! provenance is a tag byte (0 unverified, 1 ground truth, 2 expert + reviewer
//! string).

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::representation::{
    Embedding, RepresentationError, RepresentationModel, UNIT_NORM_TOLERANCE,
};
use crate::trace::{segment_by_agent, FailureType, ReasoningTrace, TraceError};

pub const KB_MAGIC: &[u8; 4] = b"EAKB";
pub const KB_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("embedding norm {0} is not 1")]
    NotUnitNorm(f64),
    #[error("knowledge base built with model version {kb}, caller uses {caller}")]
    VersionMismatch { kb: u64, caller: u64 },
    #[error("embedding dimension {found}, knowledge base uses {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("k must be >= 1")]
    InvalidK,
    #[error("labeled fine-grained entry ({0}) requires verified provenance")]
    UnverifiedLabel(FailureType),
    #[error("not a knowledge file (bad magic)")]
    BadMagic,
    #[error("unsupported knowledge format version {0}")]
    FormatVersion(u32),
    #[error("knowledge file truncated at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("corrupt knowledge file at byte offset {offset}: {message}")]
    Corrupt { offset: u64, message: String },
    #[error("malformed knowledge export at line {line}: {message}")]
    MalformedExport { line: usize, message: String },
    #[error("source trace {0:?} not available for re-embedding")]
    MissingSource(String),
    #[error(transparent)]
    Representation(#[from] RepresentationError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Who vouched for an entry's label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Unverified,
    /// Label known by construction (synthetic corpora, replayed benchmarks).
    GroundTruth,
    Expert {
        reviewer: String,
    },
}

impl Provenance {
    pub fn is_verified(&self) -> bool {
        !matches!(self, Provenance::Unverified)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineGrainedEntry {
    pub entry_id: u64,
    pub agent_role: String,
    pub embedding: Embedding,
    pub failure_type: FailureType,
    pub source_trace_id: String,
    pub segment_ordinal: u32,
    pub note: String,
    pub created_at_ms: i64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseGrainedEntry {
    pub entry_id: u64,
    pub embedding: Embedding,
    pub failure_type: FailureType,
    pub source_trace_id: String,
    pub note: String,
    pub created_at_ms: i64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub entry_id: u64,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Fine,
    Coarse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    model_version: u64,
    embed_dim: usize,
    fine: Vec<FineGrainedEntry>,
    coarse: Vec<CoarseGrainedEntry>,
}

/// Descending similarity, then ascending entry id. Adding 0.0 folds -0.0
/// into 0.0 so signed zeros tie.
fn rank_order(a: &Match, b: &Match) -> Ordering {
    (b.similarity + 0.0)
        .total_cmp(&(a.similarity + 0.0))
        .then(a.entry_id.cmp(&b.entry_id))
}

fn top_k(mut all: Vec<Match>, k: usize) -> Vec<Match> {
    if all.len() > k {
        all.select_nth_unstable_by(k - 1, rank_order);
        all.truncate(k);
    }
    all.sort_unstable_by(rank_order);
    all
}

impl KnowledgeBase {
    pub fn new(model_version: u64, embed_dim: usize) -> Self {
        Self {
            model_version,
            embed_dim,
            fine: Vec::new(),
            coarse: Vec::new(),
        }
    }

    pub fn for_model(model: &RepresentationModel) -> Self {
        Self::new(model.version, model.embed_dim())
    }

    pub fn model_version(&self) -> u64 {
        self.model_version
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn fine(&self) -> &[FineGrainedEntry] {
        &self.fine
    }

    pub fn coarse(&self) -> &[CoarseGrainedEntry] {
        &self.coarse
    }

    pub fn fine_entry(&self, id: u64) -> Option<&FineGrainedEntry> {
        self.fine.iter().find(|e| e.entry_id == id)
    }

    pub fn coarse_entry(&self, id: u64) -> Option<&CoarseGrainedEntry> {
        self.coarse.iter().find(|e| e.entry_id == id)
    }

    pub fn len(&self, tier: Tier) -> usize {
        match tier {
            Tier::Fine => self.fine.len(),
            Tier::Coarse => self.coarse.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.fine.is_empty() && self.coarse.is_empty()
    }

    pub fn check_version(&self, caller: u64) -> Result<(), KnowledgeError> {
        if caller != self.model_version {
            return Err(KnowledgeError::VersionMismatch {
                kb: self.model_version,
                caller,
            });
        }
        Ok(())
    }

    fn check_embedding(&self, e: &Embedding) -> Result<(), KnowledgeError> {
        if e.dim() != self.embed_dim {
            return Err(KnowledgeError::DimensionMismatch {
                expected: self.embed_dim,
                found: e.dim(),
            });
        }
        let n = e.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(KnowledgeError::NotUnitNorm(n));
        }
        Ok(())
    }

    /// Appends a fine-grained entry; its `entry_id` is assigned here.
    pub fn add_fine(
        &mut self,
        mut entry: FineGrainedEntry,
        model_version: u64,
    ) -> Result<u64, KnowledgeError> {
        self.check_version(model_version)?;
        self.check_embedding(&entry.embedding)?;
        if entry.failure_type != FailureType::Unknown && !entry.provenance.is_verified() {
            return Err(KnowledgeError::UnverifiedLabel(entry.failure_type));
        }
        entry.entry_id = self.fine.iter().map(|e| e.entry_id).max().unwrap_or(0) + 1;
        let id = entry.entry_id;
        self.fine.push(entry);
        Ok(id)
    }

    pub fn add_coarse(
        &mut self,
        mut entry: CoarseGrainedEntry,
        model_version: u64,
    ) -> Result<u64, KnowledgeError> {
        self.check_version(model_version)?;
        self.check_embedding(&entry.embedding)?;
        entry.entry_id = self.coarse.iter().map(|e| e.entry_id).max().unwrap_or(0) + 1;
        let id = entry.entry_id;
        self.coarse.push(entry);
        Ok(id)
    }

    /// Exact top-k over fine-grained entries of `agent_role`.
    pub fn query_fine(
        &self,
        embedding: &Embedding,
        agent_role: &str,
        k: usize,
        model_version: u64,
    ) -> Result<Vec<Match>, KnowledgeError> {
        self.check_query(embedding, k, model_version)?;
        let all = self
            .fine
            .iter()
            .filter(|e| e.agent_role == agent_role)
            .map(|e| Match {
                entry_id: e.entry_id,
                similarity: embedding.similarity(&e.embedding),
            })
            .collect();
        Ok(top_k(all, k))
    }

    /// Exact top-k over coarse-grained entries.
    pub fn query_coarse(
        &self,
        embedding: &Embedding,
        k: usize,
        model_version: u64,
    ) -> Result<Vec<Match>, KnowledgeError> {
        self.check_query(embedding, k, model_version)?;
        let all = self
            .coarse
            .iter()
            .map(|e| Match {
                entry_id: e.entry_id,
                similarity: embedding.similarity(&e.embedding),
            })
            .collect();
        Ok(top_k(all, k))
    }

    fn check_query(
        &self,
        embedding: &Embedding,
        k: usize,
        model_version: u64,
    ) -> Result<(), KnowledgeError> {
        if k == 0 {
            return Err(KnowledgeError::InvalidK);
        }
        self.check_version(model_version)?;
        if embedding.dim() != self.embed_dim {
            return Err(KnowledgeError::DimensionMismatch {
                expected: self.embed_dim,
                found: embedding.dim(),
            });
        }
        Ok(())
    }

    pub fn failure_type_of(&self, tier: Tier, id: u64) -> Option<FailureType> {
        match tier {
            Tier::Fine => self.fine_entry(id).map(|e| e.failure_type),
            Tier::Coarse => self.coarse_entry(id).map(|e| e.failure_type),
        }
    }

    pub fn note_of(&self, tier: Tier, id: u64) -> Option<&str> {
        match tier {
            Tier::Fine => self.fine_entry(id).map(|e| e.note.as_str()),
            Tier::Coarse => self.coarse_entry(id).map(|e| e.note.as_str()),
        }
    }

    /// Re-embeds every entry with `model` from its source trace, keeping ids,
    /// labels and order. Used after a model version bump.
    pub fn rebuild_embeddings(
        &self,
        model: &RepresentationModel,
        traces: &HashMap<String, ReasoningTrace>,
    ) -> Result<KnowledgeBase, KnowledgeError> {
        let source = |id: &str| {
            traces
                .get(id)
                .ok_or_else(|| KnowledgeError::MissingSource(id.to_string()))
        };
        let mut out = KnowledgeBase::for_model(model);
        for e in &self.fine {
            let segments = segment_by_agent(source(&e.source_trace_id)?)?;
            let seg = segments.get(e.segment_ordinal as usize).ok_or_else(|| {
                KnowledgeError::MissingSource(format!(
                    "{}#{}",
                    e.source_trace_id, e.segment_ordinal
                ))
            })?;
            out.fine.push(FineGrainedEntry {
                embedding: model.encode_segment(seg)?,
                ..e.clone()
            });
        }
        for e in &self.coarse {
            let segments = segment_by_agent(source(&e.source_trace_id)?)?;
            let zs = segments
                .iter()
                .map(|s| model.encode_segment(s))
                .collect::<Result<Vec<_>, _>>()?;
            out.coarse.push(CoarseGrainedEntry {
                embedding: model.encode_trace(&zs)?,
                ..e.clone()
            });
        }
        Ok(out)
    }

    // ------------------------------------------------------------ binary io

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(KB_MAGIC)?;
        out.write_u32::<LittleEndian>(KB_FORMAT_VERSION)?;
        out.write_u64::<LittleEndian>(self.model_version)?;
        out.write_u32::<LittleEndian>(self.embed_dim as u32)?;
        out.write_u64::<LittleEndian>(self.fine.len() as u64)?;
        for e in &self.fine {
            out.write_u64::<LittleEndian>(e.entry_id)?;
            write_str(out, &e.agent_role)?;
            write_embedding(out, &e.embedding)?;
            out.write_u8(e.failure_type.code())?;
            write_str(out, &e.source_trace_id)?;
            out.write_u32::<LittleEndian>(e.segment_ordinal)?;
            write_str(out, &e.note)?;
            out.write_i64::<LittleEndian>(e.created_at_ms)?;
            write_provenance(out, &e.provenance)?;
        }
        out.write_u64::<LittleEndian>(self.coarse.len() as u64)?;
        for e in &self.coarse {
            out.write_u64::<LittleEndian>(e.entry_id)?;
            write_embedding(out, &e.embedding)?;
            out.write_u8(e.failure_type.code())?;
            write_str(out, &e.source_trace_id)?;
            write_str(out, &e.note)?;
            out.write_i64::<LittleEndian>(e.created_at_ms)?;
            write_provenance(out, &e.provenance)?;
        }
        Ok(())
    }

    pub fn read_from(input: impl Read) -> Result<Self, KnowledgeError> {
        let mut r = KbReader {
            inner: input,
            offset: 0,
        };
        let mut magic = [0u8; 4];
        r.exact(&mut magic)?;
        if &magic != KB_MAGIC {
            return Err(KnowledgeError::BadMagic);
        }
        let format = r.u32()?;
        if format != KB_FORMAT_VERSION {
            return Err(KnowledgeError::FormatVersion(format));
        }
        let model_version = r.u64()?;
        let embed_dim = r.u32()? as usize;
        let mut kb = KnowledgeBase::new(model_version, embed_dim);
        let n_fine = r.u64()?;
        for _ in 0..n_fine {
            let entry_id = r.u64()?;
            let agent_role = r.string()?;
            let embedding = r.embedding(embed_dim)?;
            let failure_type = r.failure_type()?;
            kb.fine.push(FineGrainedEntry {
                entry_id,
                agent_role,
                embedding,
                failure_type,
                source_trace_id: r.string()?,
                segment_ordinal: r.u32()?,
                note: r.string()?,
                created_at_ms: r.i64()?,
                provenance: r.provenance()?,
            });
        }
        let n_coarse = r.u64()?;
        for _ in 0..n_coarse {
            let entry_id = r.u64()?;
            let embedding = r.embedding(embed_dim)?;
            let failure_type = r.failure_type()?;
            kb.coarse.push(CoarseGrainedEntry {
                entry_id,
                embedding,
                failure_type,
                source_trace_id: r.string()?,
                note: r.string()?,
                created_at_ms: r.i64()?,
                provenance: r.provenance()?,
            });
        }
        Ok(kb)
    }

    // ------------------------------------------------------------ text export

    /// Line-oriented JSON: a header record, then one record per entry.
    pub fn export_text(&self, out: &mut impl Write) -> std::io::Result<()> {
        let header = ExportRecord::Header {
            model_version: self.model_version,
            embed_dim: self.embed_dim,
        };
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n")?;
        for e in &self.fine {
            serde_json::to_writer(&mut *out, &ExportRecord::Fine(e.clone()))?;
            out.write_all(b"\n")?;
        }
        for e in &self.coarse {
            serde_json::to_writer(&mut *out, &ExportRecord::Coarse(e.clone()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn import_text(input: impl BufRead) -> Result<Self, KnowledgeError> {
        let mut kb: Option<KnowledgeBase> = None;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| KnowledgeError::MalformedExport {
                line: i + 1,
                message,
            };
            let record: ExportRecord =
                serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            match (record, kb.as_mut()) {
                (
                    ExportRecord::Header {
                        model_version,
                        embed_dim,
                    },
                    None,
                ) => {
                    kb = Some(KnowledgeBase::new(model_version, embed_dim));
                }
                (ExportRecord::Header { .. }, Some(_)) => return Err(bad("second header".into())),
                (_, None) => return Err(bad("entry before header".into())),
                (ExportRecord::Fine(e), Some(kb)) => {
                    kb.check_embedding(&e.embedding)
                        .map_err(|err| bad(err.to_string()))?;
                    if kb.fine.iter().any(|x| x.entry_id == e.entry_id) {
                        return Err(bad(format!("duplicate fine entry id {}", e.entry_id)));
                    }
                    kb.fine.push(e);
                }
                (ExportRecord::Coarse(e), Some(kb)) => {
                    kb.check_embedding(&e.embedding)
                        .map_err(|err| bad(err.to_string()))?;
                    if kb.coarse.iter().any(|x| x.entry_id == e.entry_id) {
                        return Err(bad(format!("duplicate coarse entry id {}", e.entry_id)));
                    }
                    kb.coarse.push(e);
                }
            }
        }
        kb.ok_or(KnowledgeError::MalformedExport {
            line: 0,
            message: "missing header".into(),
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "tier", rename_all = "snake_case")]
enum ExportRecord {
    Header {
        model_version: u64,
        embed_dim: usize,
    },
    Fine(FineGrainedEntry),
    Coarse(CoarseGrainedEntry),
}

fn write_str(out: &mut impl Write, s: &str) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(s.len() as u32)?;
    out.write_all(s.as_bytes())
}

fn write_embedding(out: &mut impl Write, e: &Embedding) -> std::io::Result<()> {
    e.values()
        .iter()
        .try_for_each(|&x| out.write_f64::<LittleEndian>(x))
}

fn write_provenance(out: &mut impl Write, p: &Provenance) -> std::io::Result<()> {
    match p {
        Provenance::Unverified => out.write_u8(0),
        Provenance::GroundTruth => out.write_u8(1),
        Provenance::Expert { reviewer } => {
            out.write_u8(2)?;
            write_str(out, reviewer)
        }
    }
}

struct KbReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> KbReader<R> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<(), KnowledgeError> {
        let start = self.offset;
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => return Err(KnowledgeError::Truncated { offset: start }),
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self) -> Result<u32, KnowledgeError> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64, KnowledgeError> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn i64(&mut self) -> Result<i64, KnowledgeError> {
        Ok(self.u64()? as i64)
    }

    fn f64(&mut self) -> Result<f64, KnowledgeError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn string(&mut self) -> Result<String, KnowledgeError> {
        let at = self.offset;
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len.min(1 << 20)];
        if len > buf.len() {
            return Err(KnowledgeError::Corrupt {
                offset: at,
                message: format!("string length {len} too large"),
            });
        }
        self.exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| KnowledgeError::Corrupt {
            offset: at,
            message: e.to_string(),
        })
    }

    fn embedding(&mut self, dim: usize) -> Result<Embedding, KnowledgeError> {
        let at = self.offset;
        let values = (0..dim)
            .map(|_| self.f64())
            .collect::<Result<Vec<_>, _>>()?;
        Embedding::from_unit(values).map_err(|e| KnowledgeError::Corrupt {
            offset: at,
            message: e.to_string(),
        })
    }

    fn failure_type(&mut self) -> Result<FailureType, KnowledgeError> {
        let at = self.offset;
        let mut b = [0u8; 1];
        self.exact(&mut b)?;
        FailureType::from_code(b[0]).ok_or_else(|| KnowledgeError::Corrupt {
            offset: at,
            message: format!("unknown failure type code {}", b[0]),
        })
    }

    fn provenance(&mut self) -> Result<Provenance, KnowledgeError> {
        let at = self.offset;
        let mut b = [0u8; 1];
        self.exact(&mut b)?;
        match b[0] {
            0 => Ok(Provenance::Unverified),
            1 => Ok(Provenance::GroundTruth),
            2 => Ok(Provenance::Expert {
                reviewer: self.string()?,
            }),
            t => Err(KnowledgeError::Corrupt {
                offset: at,
                message: format!("unknown provenance tag {t}"),
            }),
        }
    }
}

/// Atomic save: write a temporary sibling, fsync, rename over `path`.
pub fn save_kb(kb: &KnowledgeBase, path: impl AsRef<Path>) -> Result<(), KnowledgeError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        kb.write_to(&mut out)?;
        out.flush()?;
        out.get_ref().sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_kb(path: impl AsRef<Path>) -> Result<KnowledgeBase, KnowledgeError> {
    KnowledgeBase::read_from(BufReader::new(File::open(path)?))
}
