//! Manifest + blob checkpoint files.
//!
//! Layout: a text manifest terminated by a line `end`, then the raw blob.
//!
//! ```text
//! stprompt-checkpoint v1
//! records 2 blob_bytes 40
//! embed.w	4x2	1	0
//! embed.b	2	1	32
//! end
//! <40 bytes of little-endian f32>
//! ```

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "stprompt-checkpoint v1";

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "scalar" {
        return Ok(vec![]);
    }
    s.split('x')
        .map(|d| d.parse::<usize>().map_err(|_| Error::Checkpoint(format!("bad shape {s}"))))
        .collect()
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let blob = store.blob();
    let mut manifest = format!("{MAGIC}\nrecords {} blob_bytes {}\n", store.len(), blob.len());
    let mut offset = 0usize;
    for e in store.entries() {
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.name,
            shape_str(e.value.shape()),
            u8::from(e.frozen),
            offset
        ));
        offset += e.value.numel() * 4;
    }
    manifest.push_str("end\n");
    let mut out = manifest.into_bytes();
    out.extend_from_slice(&blob);
    out
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut lines = Vec::new();
    let mut pos = 0;
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("manifest not terminated"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("manifest is not utf-8"))?;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        lines.push(line.to_string());
    }
    if lines.first().map(String::as_str) != Some(MAGIC) {
        return Err(bad("missing header"));
    }
    let counts: Vec<&str> = lines
        .get(1)
        .ok_or_else(|| bad("missing counts line"))?
        .split_whitespace()
        .collect();
    let (n_records, blob_bytes) = match counts.as_slice() {
        ["records", n, "blob_bytes", b] => (
            n.parse::<usize>().map_err(|_| bad("bad record count"))?,
            b.parse::<usize>().map_err(|_| bad("bad blob size"))?,
        ),
        _ => return Err(bad("malformed counts line")),
    };
    if lines.len() - 2 != n_records {
        return Err(bad("record count mismatch"));
    }
    let blob = &bytes[pos..];
    if blob.len() != blob_bytes {
        return Err(Error::Checkpoint(format!(
            "blob length {} does not match manifest {}",
            blob.len(),
            blob_bytes
        )));
    }
    let mut store = ParamStore::new(0);
    let mut expected_offset = 0usize;
    for line in &lines[2..] {
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, shape, frozen, offset] = fields.as_slice() else {
            return Err(bad("malformed record"));
        };
        let shape = parse_shape(shape)?;
        let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
        if offset != expected_offset {
            return Err(bad("offsets are not contiguous"));
        }
        let n: usize = shape.iter().product();
        let end = offset + n * 4;
        if end > blob.len() {
            return Err(bad("record runs past blob end"));
        }
        let data = blob[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.insert(name, Tensor::new(&shape, data)?)?;
        match *frozen {
            "1" => store.set_frozen(name, true)?,
            "0" => {}
            _ => return Err(bad("bad frozen flag")),
        }
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(bad("trailing bytes after last record"));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
