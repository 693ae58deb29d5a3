//! Embedding files.
//!
//! Text: a header line `mts-embed v1 <s> <d>`, then one line per sequence,
//! `subject,sequence,` followed by `s*d` comma-separated values.
//!
//! Binary, little-endian: `"MTSE"`, u16 version (1), u32 s, u32 d, u32 count,
//! then per record u32-length-prefixed subject and sequence strings and
//! `s*d` f32 values.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::checkpoint::Reader;
use crate::error::{Error, Result};
use crate::retrieval::{EmbeddingSet, SeqId};

pub const MAGIC: &[u8; 4] = b"MTSE";
pub const VERSION: u16 = 1;
const TEXT_TAG: &str = "mts-embed v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedFormat {
    Text,
    Binary,
}

impl EmbedFormat {
    /// Binary for `.bin` / `.mtse` extensions, text otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin" | "mtse") => EmbedFormat::Binary,
            _ => EmbedFormat::Text,
        }
    }
}

fn check_id(id: &SeqId) -> Result<()> {
    for s in [&id.subject, &id.sequence] {
        if s.contains([',', '\n', '\r']) {
            return Err(Error::Config(format!("id {s:?} cannot be written to a text embedding file")));
        }
    }
    Ok(())
}

pub fn encode_text(set: &EmbeddingSet) -> Result<String> {
    let mut out = format!("{TEXT_TAG} {} {}\n", set.strips, set.dim);
    for (i, id) in set.ids.iter().enumerate() {
        check_id(id)?;
        out.push_str(&id.subject);
        out.push(',');
        out.push_str(&id.sequence);
        for v in set.row(i) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_text(text: &str, path: &Path) -> Result<EmbeddingSet> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let dims: Vec<&str> = header
        .strip_prefix(TEXT_TAG)
        .map(|r| r.split_whitespace().collect())
        .unwrap_or_default();
    let parse = |s: &str| s.parse::<usize>().ok().filter(|&v| v > 0);
    let (Some(strips), Some(dim)) = (
        dims.first().and_then(|s| parse(s)),
        dims.get(1).and_then(|s| parse(s)),
    ) else {
        return Err(Error::format(path, format!("bad header {header:?}, expected `{TEXT_TAG} <s> <d>`")));
    };
    if dims.len() != 2 {
        return Err(Error::format(path, format!("bad header {header:?}")));
    }
    let mut set = EmbeddingSet::new(strips, dim);
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (Some(sub), Some(seq)) = (fields.next(), fields.next()) else {
            return Err(Error::format(path, format!("line {}: missing ids", ln + 2)));
        };
        let row: Vec<f32> = fields
            .map(|f| f.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", ln + 2)))?;
        if row.len() != strips * dim {
            return Err(Error::format(
                path,
                format!("line {}: {} values, header says {}", ln + 2, row.len(), strips * dim),
            ));
        }
        set.push(SeqId::new(sub, seq), &row)?;
    }
    Ok(set)
}

pub fn encode_binary(set: &EmbeddingSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [set.strips, set.dim, set.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for (i, id) in set.ids.iter().enumerate() {
        for s in [&id.subject, &id.sequence] {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        for v in set.row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_binary(bytes: &[u8], path: &Path) -> Result<EmbeddingSet> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "bad magic at byte 0"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported embedding version {version}")));
    }
    let (strips, dim, count) = (r.u32("strips")?, r.u32("dim")?, r.u32("count")?);
    if strips == 0 || dim == 0 {
        return Err(Error::format(path, "zero embedding dimensions"));
    }
    let mut set = EmbeddingSet::new(strips, dim);
    for _ in 0..count {
        let mut names = [String::new(), String::new()];
        for (slot, what) in names.iter_mut().zip(["subject", "sequence"]) {
            let len = r.u32(what)?;
            *slot = String::from_utf8(r.take(len, what)?.to_vec())
                .map_err(|_| Error::format(path, format!("{what} is not UTF-8 near byte {}", r.pos)))?;
        }
        let row = r.f32s(strips * dim, "values")?;
        let [sub, seq] = names;
        set.push(SeqId::new(sub, seq), &row)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("trailing bytes after byte {}", r.pos)));
    }
    Ok(set)
}

pub fn write_embeddings(path: &Path, set: &EmbeddingSet, format: EmbedFormat) -> Result<()> {
    let bytes = match format {
        EmbedFormat::Text => encode_text(set)?.into_bytes(),
        EmbedFormat::Binary => encode_binary(set),
    };
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads either format, detected from the leading bytes.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        decode_binary(&bytes, path)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::format(path, "neither MTSE binary nor UTF-8 text"))?;
        decode_text(text, path)
    }
}
