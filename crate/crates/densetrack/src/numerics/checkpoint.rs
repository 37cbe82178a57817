//! Versioned checkpoint container.
//!
//! Layout:
//!   bytes 0..7   magic "ATKPT1\n"
//!   bytes 7..11  u32 LE header length N
//!   bytes 11..11+N  UTF-8 JSON header: {"params":[{name,dtype,shape,offset},..]}
//!   remainder    raw little-endian fp32 payloads, at the stated offsets
//!                (relative to the start of the payload section)
//!
//! Entries are written sorted by name, so save → load → save is
//! byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::element::Element;
use crate::numerics::params::ParamSet;

pub const MAGIC: &[u8; 7] = b"ATKPT1\n";

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    params: Vec<HeaderEntry>,
}

/// Write named fp32 buffers. Values are stored as fp32 regardless of the
/// model's compute dtype.
pub fn save_raw(path: &Path, entries: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
    let mut sorted: Vec<&(String, Vec<usize>, Vec<f32>)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));

    let mut header = Header { params: Vec::new() };
    let mut offset = 0u64;
    for (name, shape, values) in &sorted {
        header.params.push(HeaderEntry {
            name: name.clone(),
            dtype: "fp32".to_string(),
            shape: shape.clone(),
            offset,
        });
        offset += (values.len() * 4) as u64;
    }
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, _, values) in &sorted {
        for v in values.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read back every (name, shape, values) triple.
pub fn load_raw(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut out = Vec::with_capacity(header.params.len());
    for e in header.params {
        if e.dtype != "fp32" {
            return Err(Error::format(format!("unsupported dtype {}", e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(Error::format(format!(
                "checkpoint truncated: {} needs bytes {start}..{end}, payload is {}",
                e.name,
                payload.len()
            )));
        }
        let mut values = Vec::with_capacity(n);
        for c in payload[start..end].chunks_exact(4) {
            values.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
        out.push((e.name, e.shape, values));
    }
    Ok(out)
}

pub fn save_params<E: Element>(path: &Path, params: &ParamSet<E>) -> Result<()> {
    let entries: Vec<(String, Vec<usize>, Vec<f32>)> = params
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                p.tensor.shape().to_vec(),
                p.tensor.data().iter().map(|v| v.as_f64() as f32).collect(),
            )
        })
        .collect();
    save_raw(path, &entries)
}

pub fn load_params<E: Element>(path: &Path, params: &ParamSet<E>) -> Result<()> {
    let entries = load_raw(path)?;
    params.load_values_from(&entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.atkpt");
        let p2 = dir.path().join("b.atkpt");
        let entries = vec![
            ("z.weight".to_string(), vec![2, 3], vec![1.5f32, -0.25, 3.75, 0.1, -2.0, 0.0]),
            ("a.bias".to_string(), vec![2], vec![0.5f32, f32::MIN_POSITIVE]),
        ];
        save_raw(&p1, &entries).unwrap();
        let loaded = load_raw(&p1).unwrap();
        save_raw(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // sorted by name
        assert_eq!(loaded[0].0, "a.bias");
        assert_eq!(loaded[1].2, entries[0].2);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.atkpt");
        std::fs::write(&p, b"NOTAKPT\x00\x00\x00\x00").unwrap();
        assert!(matches!(load_raw(&p), Err(Error::Format(_))));
    }
}
