//! Checkpoint files: a versioned plain-text manifest followed by raw
//! little-endian `f64` data.
//!
//! ```text
//! SOFTMESH-CHECKPOINT 1
//! <name>\t<dims, comma separated or "-" for scalars>\tf64\t<byte offset>
//! ...
//! END
//! <binary payload>
//! ```
//!
//! Offsets are relative to the first byte after the `END` line.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::array::Array;
use crate::error::{Result, TensorError};

pub const MAGIC: &str = "SOFTMESH-CHECKPOINT";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn encode(entries: &[(&str, &Array)]) -> Result<Vec<u8>> {
    let mut header = format!("{MAGIC} {VERSION}\n");
    let mut offset = 0usize;
    for (name, a) in entries {
        if name.is_empty() || name.contains(['\t', '\n']) {
            return Err(bad(format!("invalid entry name {name:?}")));
        }
        let dims = if a.shape().is_empty() {
            "-".to_string()
        } else {
            a.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
        };
        header.push_str(&format!("{name}\t{dims}\tf64\t{offset}\n"));
        offset += a.len() * 8;
    }
    header.push_str("END\n");
    let mut out = header.into_bytes();
    out.reserve(offset);
    for (_, a) in entries {
        for v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Array)>> {
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nEND\n")
        .ok_or_else(|| bad("missing END line"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not UTF-8"))?;
    let payload = &bytes[end + 5..];
    let mut lines = header.lines();
    let first = lines.next().ok_or_else(|| bad("empty manifest"))?;
    let version = first
        .strip_prefix(MAGIC)
        .and_then(|r| r.trim().parse::<u32>().ok())
        .ok_or_else(|| bad(format!("bad header line {first:?}")))?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad(format!("malformed manifest line {line:?}")));
        }
        let shape: Vec<usize> = if fields[1] == "-" {
            Vec::new()
        } else {
            fields[1]
                .split(',')
                .map(|d| d.parse().map_err(|_| bad(format!("bad dims {:?}", fields[1]))))
                .collect::<Result<_>>()?
        };
        if fields[2] != "f64" {
            return Err(bad(format!("unsupported dtype {:?}", fields[2])));
        }
        let offset: usize = fields[3].parse().map_err(|_| bad("bad offset"))?;
        let n: usize = shape.iter().product();
        let slice = payload
            .get(offset..offset + n * 8)
            .ok_or_else(|| bad(format!("entry {:?} runs past end of file", fields[0])))?;
        let data = slice
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((fields[0].to_string(), Array::new(shape, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &[(&str, &Array)]) -> Result<()> {
    let bytes = encode(entries)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Array)>> {
    decode(&fs::read(path)?)
}
