//! Index snapshot persistence.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"RAGIDX\x00\x01"           8 bytes, includes format version
//! kind    u8                          0 = exact, 1 = hnsw
//! version u64                         index generation
//! dim     u64
//! n_rows  u64
//! hash    u64 length + utf-8 bytes    params hash of the producing encoder
//! rows    n_rows * dim * f64          embedding matrix, row-major
//! hnsw only:
//!   m, ef_construction, ef_search, seed   u64 each
//!   entry     u32
//!   max_level u64
//!   per node: n_levels u32, then per level: n_links u32 + u32 ids
//! ```
//!
//! Writing is deterministic: the same snapshot always produces the same
//! bytes.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::encoder::EmbeddingMatrix;
use crate::error::{Error, Result};

use super::{ExactIndex, HnswConfig, HnswIndex, IndexSnapshot, IndexStructure};

const MAGIC: &[u8; 8] = b"RAGIDX\x00\x01";

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::CheckpointFormat(format!("{}: {}", path.display(), msg.into()))
}

pub fn save_snapshot(path: &Path, snap: &IndexSnapshot) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let go = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        let kind: u8 = match snap.structure {
            IndexStructure::Exact(_) => 0,
            IndexStructure::Hnsw(_) => 1,
        };
        w.write_all(&[kind])?;
        let emb = &snap.embeddings;
        w.write_all(&emb.version.to_le_bytes())?;
        w.write_all(&(emb.dim as u64).to_le_bytes())?;
        w.write_all(&(emb.n_rows() as u64).to_le_bytes())?;
        let hash = emb.params_hash.as_bytes();
        w.write_all(&(hash.len() as u64).to_le_bytes())?;
        w.write_all(hash)?;
        for v in emb.raw_data() {
            w.write_all(&v.to_le_bytes())?;
        }
        if let IndexStructure::Hnsw(graph) = &snap.structure {
            let cfg = graph.config;
            for v in [cfg.m as u64, cfg.ef_construction as u64, cfg.ef_search as u64, cfg.seed] {
                w.write_all(&v.to_le_bytes())?;
            }
            let (links, entry, max_level) = graph.raw_parts();
            w.write_all(&entry.to_le_bytes())?;
            w.write_all(&(max_level as u64).to_le_bytes())?;
            for node in links {
                w.write_all(&(node.len() as u32).to_le_bytes())?;
                for level in node {
                    w.write_all(&(level.len() as u32).to_le_bytes())?;
                    for nb in level {
                        w.write_all(&nb.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()
    };
    go(&mut w).map_err(|e| io_err(path, e))
}

struct Reader<'a> {
    r: BufReader<fs::File>,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.r.read_exact(&mut buf).map_err(|e| io_err(self.path, e))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

pub fn load_snapshot(path: &Path) -> Result<IndexSnapshot> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader {
        r: BufReader::new(file),
        path,
    };
    let magic = r.bytes::<8>()?;
    if &magic != MAGIC {
        return Err(format_err(path, "bad magic or unsupported format version"));
    }
    let kind = r.u8()?;
    let version = r.u64()?;
    let dim = r.u64()? as usize;
    let n_rows = r.u64()? as usize;
    let hash_len = r.u64()? as usize;
    if hash_len > 1 << 16 {
        return Err(format_err(path, "implausible hash length"));
    }
    let mut hash_bytes = vec![0u8; hash_len];
    r.r.read_exact(&mut hash_bytes).map_err(|e| io_err(path, e))?;
    let params_hash =
        String::from_utf8(hash_bytes).map_err(|_| format_err(path, "hash is not utf-8"))?;
    let mut data = Vec::with_capacity(n_rows * dim);
    for _ in 0..n_rows * dim {
        data.push(r.f64()?);
    }
    let embeddings = EmbeddingMatrix::from_rows(version, dim, params_hash, data)?;

    let structure = match kind {
        0 => IndexStructure::Exact(ExactIndex),
        1 => {
            let config = HnswConfig {
                m: r.u64()? as usize,
                ef_construction: r.u64()? as usize,
                ef_search: r.u64()? as usize,
                seed: r.u64()?,
            };
            let entry = r.u32()?;
            let max_level = r.u64()? as usize;
            let mut links = Vec::with_capacity(n_rows);
            for _ in 0..n_rows {
                let n_levels = r.u32()? as usize;
                let mut node = Vec::with_capacity(n_levels);
                for _ in 0..n_levels {
                    let n_links = r.u32()? as usize;
                    let mut level = Vec::with_capacity(n_links);
                    for _ in 0..n_links {
                        level.push(r.u32()?);
                    }
                    node.push(level);
                }
                links.push(node);
            }
            IndexStructure::Hnsw(HnswIndex::from_raw_parts(config, links, entry, max_level))
        }
        other => return Err(format_err(path, format!("unknown index kind {other}"))),
    };
    let mut trailing = [0u8; 1];
    match r.r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(format_err(path, "trailing bytes after snapshot")),
        Err(e) => return Err(io_err(path, e)),
    }
    Ok(IndexSnapshot {
        embeddings,
        structure,
    })
}
