//! Checkpoint persistence: a self-describing text header (metadata lines,
//! section names with shapes and byte offsets, blob length) followed by one
//! little-endian f32 blob of all parameters concatenated in name order.
//!
//! Values are stored at f32 precision; loading widens back to f64, so a
//! save -> load -> save cycle is byte-identical.

use crate::mlp::{ParamSet, Section};
use crate::{Error, Result};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

const MAGIC: &str = "dmtk-ckpt v1";

/// Writes `params` plus free-form metadata pairs. Metadata keys must be
/// single tokens; values may contain spaces but no newlines.
pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: &[(String, String)]) -> Result<()> {
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || k.is_empty() {
            return Err(Error::InvalidArgument(format!("bad metadata key {k:?}")));
        }
        if v.contains('\n') {
            return Err(Error::InvalidArgument(format!("metadata value for {k} contains newline")));
        }
    }
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    for (k, v) in meta {
        header.push_str(&format!("meta {k} {v}\n"));
    }
    let mut offset = 0usize;
    for s in params.sections() {
        header.push_str(&format!("section {} {} {} {}\n", s.name, s.rows, s.cols, offset));
        offset += s.values.len() * 4;
    }
    header.push_str(&format!("blob {offset}\n"));

    let mut file = std::fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    let mut blob = Vec::with_capacity(offset);
    for s in params.sections() {
        for &v in &s.values {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    file.write_all(&blob)?;
    Ok(())
}

/// Reads a checkpoint back as (params, metadata). Any structural problem is
/// reported as a format error carrying the byte offset of the offending
/// header line or blob position.
pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, Vec<(String, String)>)> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut pos: u64 = 0;

    let mut line = String::new();
    let mut read_line = |reader: &mut BufReader<std::fs::File>, pos: &mut u64| -> Result<String> {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            return Err(Error::Format { offset: *pos, what: "unexpected end of header".into() });
        }
        let at = *pos;
        *pos += n as u64;
        let trimmed = line.trim_end_matches('\n').to_string();
        if trimmed.is_empty() {
            return Err(Error::Format { offset: at, what: "empty header line".into() });
        }
        Ok(trimmed)
    };

    let first = read_line(&mut reader, &mut pos)?;
    if first != MAGIC {
        return Err(Error::Format { offset: 0, what: format!("bad magic line {first:?}") });
    }

    let mut meta = Vec::new();
    let mut sections: Vec<(String, usize, usize, usize)> = Vec::new();
    let blob_len;
    loop {
        let at = pos;
        let l = read_line(&mut reader, &mut pos)?;
        let mut parts = l.splitn(2, ' ');
        let tag = parts.next().unwrap_or_default();
        let rest = parts.next().unwrap_or_default();
        match tag {
            "meta" => {
                let mut kv = rest.splitn(2, ' ');
                let k = kv.next().unwrap_or_default();
                if k.is_empty() {
                    return Err(Error::Format { offset: at, what: "meta line without key".into() });
                }
                meta.push((k.to_string(), kv.next().unwrap_or_default().to_string()));
            }
            "section" => {
                let fields: Vec<&str> = rest.split(' ').collect();
                if fields.len() != 4 {
                    return Err(Error::Format {
                        offset: at,
                        what: format!("section line needs 4 fields, got {}", fields.len()),
                    });
                }
                let parse = |s: &str| -> Result<usize> {
                    s.parse().map_err(|_| Error::Format {
                        offset: at,
                        what: format!("bad integer {s:?} in section line"),
                    })
                };
                sections.push((
                    fields[0].to_string(),
                    parse(fields[1])?,
                    parse(fields[2])?,
                    parse(fields[3])?,
                ));
            }
            "blob" => {
                blob_len = rest.parse::<usize>().map_err(|_| Error::Format {
                    offset: at,
                    what: format!("bad blob length {rest:?}"),
                })?;
                break;
            }
            other => {
                return Err(Error::Format {
                    offset: at,
                    what: format!("unknown header tag {other:?}"),
                });
            }
        }
    }

    let mut expected_offset = 0usize;
    for (name, rows, cols, offset) in &sections {
        if *offset != expected_offset {
            return Err(Error::Format {
                offset: pos,
                what: format!(
                    "section {name} declares blob offset {offset}, expected {expected_offset}"
                ),
            });
        }
        expected_offset += rows * cols * 4;
    }
    if expected_offset != blob_len {
        return Err(Error::Format {
            offset: pos,
            what: format!("blob length {blob_len} does not match sections total {expected_offset}"),
        });
    }

    let mut blob = vec![0u8; blob_len];
    let blob_start = pos;
    let mut filled = 0usize;
    while filled < blob_len {
        let n = reader.read(&mut blob[filled..])?;
        if n == 0 {
            return Err(Error::Format {
                offset: blob_start + filled as u64,
                what: format!("blob truncated: expected {blob_len} bytes, got {filled}"),
            });
        }
        filled += n;
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::Format {
            offset: blob_start + blob_len as u64,
            what: "trailing bytes after blob".into(),
        });
    }

    let mut out = Vec::with_capacity(sections.len());
    for (name, rows, cols, offset) in sections {
        let n = rows * cols;
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let at = offset + i * 4;
            let raw: [u8; 4] = blob[at..at + 4].try_into().expect("validated blob bounds");
            values.push(f32::from_le_bytes(raw) as f64);
        }
        out.push(Section { name, rows, cols, values });
    }
    let params = ParamSet::from_sections(out)?;
    Ok((params, meta))
}
