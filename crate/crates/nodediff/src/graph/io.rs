//! Corpus file format: a magic header and version byte followed by
//! length-prefixed per-graph blocks (node count, node type indices,
//! upper-triangle edge channel indices), all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{DatasetSpec, GraphSample};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GRCP";
const VERSION: u8 = 1;

pub fn serialize_corpus(corpus: &[GraphSample], path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(corpus.len() as u32).to_le_bytes());
    for g in corpus {
        let n = g.num_nodes();
        let mut block: Vec<u8> = Vec::new();
        block.extend_from_slice(&(n as u32).to_le_bytes());
        block.extend_from_slice(&(g.k_v() as u16).to_le_bytes());
        block.extend_from_slice(&(g.k_e() as u16).to_le_bytes());
        for i in 0..n {
            block.extend_from_slice(&(g.node_type(i) as u16).to_le_bytes());
        }
        for i in 0..n {
            for j in (i + 1)..n {
                block.extend_from_slice(&(g.edge_channel(i, j) as u16).to_le_bytes());
            }
        }
        buf.extend_from_slice(&(block.len() as u32).to_le_bytes());
        buf.extend_from_slice(&block);
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn deserialize_corpus(path: &Path) -> Result<Vec<GraphSample>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };

    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(r.err_at(0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(r.err_at(4, format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut corpus = Vec::with_capacity(count);
    for k in 0..count {
        let block_start = r.pos;
        let block_len = r.u32()? as usize;
        let block_end = r.pos + block_len;
        if block_end > bytes.len() {
            return Err(r.err_at(
                block_start as u64,
                format!("graph {k}: block length {block_len} overruns file"),
            ));
        }
        let n = r.u32()? as usize;
        let k_v = r.u16()? as usize;
        let k_e = r.u16()? as usize;
        if n == 0 || k_v == 0 {
            return Err(r.err_at(block_start as u64, format!("graph {k}: empty dimensions")));
        }
        let mut node_types = Vec::with_capacity(n);
        for _ in 0..n {
            node_types.push(r.u16()? as usize);
        }
        let mut channels = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let c = r.u16()? as usize;
                channels[(i, j)] = c;
            }
        }
        if r.pos != block_end {
            return Err(r.err_at(
                block_start as u64,
                format!("graph {k}: block length mismatch ({} != {block_end})", r.pos),
            ));
        }
        let g = GraphSample::from_indices(&node_types, k_v, &channels, k_e).map_err(|e| {
            Error::Parse {
                path: path.to_path_buf(),
                offset: block_start as u64,
                message: format!("graph {k}: {e}"),
            }
        })?;
        corpus.push(g);
    }
    if r.pos != bytes.len() {
        return Err(r.err_at(r.pos as u64, "trailing bytes after final graph".into()));
    }
    Ok(corpus)
}

/// JSON sidecar describing how a corpus file was produced.
pub fn write_manifest(spec: &DatasetSpec, corpus_path: &Path) -> Result<std::path::PathBuf> {
    let manifest_path = corpus_path.with_extension("manifest.json");
    let json = serde_json::to_string_pretty(spec).expect("spec serializes");
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err_at(&self, offset: u64, message: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset,
            message,
        }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(self.err_at(self.pos as u64, "unexpected end of file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_corpus, DatasetKind, DatasetSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let spec = DatasetSpec {
            count: 25,
            ..DatasetKind::CommunitySmall.default_spec(1)
        };
        let corpus = generate_corpus(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.bin");
        serialize_corpus(&corpus, &path).unwrap();
        let loaded = deserialize_corpus(&path).unwrap();
        assert_eq!(corpus, loaded);

        // byte-identical on rewrite
        let path2 = dir.path().join("again.bin");
        serialize_corpus(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn empty_corpus_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        serialize_corpus(&[], &path).unwrap();
        assert!(deserialize_corpus(&path).unwrap().is_empty());
    }

    #[test]
    fn corrupted_header_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00").unwrap();
        match deserialize_corpus(&path) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_block_reports_offset() {
        let spec = DatasetSpec {
            count: 2,
            ..DatasetKind::EgoSmall.default_spec(3)
        };
        let corpus = generate_corpus(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.bin");
        serialize_corpus(&corpus, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(deserialize_corpus(&path), Err(Error::Parse { .. })));
    }
}
