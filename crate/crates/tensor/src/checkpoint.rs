//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"QFMCKPT1"                 8 bytes
//! header_len: u32             4 bytes
//! header: UTF-8 text          header_len bytes
//! payload: f32 values         concatenated, in header order
//! ```
//!
//! The header is line oriented:
//!
//! ```text
//! qfm-checkpoint v1
//! meta <key> <value>
//! param <name> <d0>x<d1>... <byte offset into payload>
//! ```
//!
//! Keys and names contain no whitespace; meta values run to end of line.
//! Parameters must be contiguous and in offset order, and the payload must
//! end exactly at the last parameter.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"QFMCKPT1";
const HEADER_TITLE: &str = "qfm-checkpoint v1";

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("header is not valid UTF-8")]
    HeaderEncoding,
    #[error("header line {line}: {msg}")]
    Header { line: usize, msg: String },
    #[error("payload: {0}")]
    Payload(String),
    #[error("cannot encode: {0}")]
    Encode(String),
}

/// Decoded checkpoint: parameters plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub meta: BTreeMap<String, String>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

pub fn encode(params: &ParamSet, meta: &BTreeMap<String, String>) -> Result<Vec<u8>, CheckpointError> {
    let mut header = String::from(HEADER_TITLE);
    header.push('\n');
    for (k, v) in meta {
        if !valid_token(k) || v.contains('\n') || v.contains('\r') {
            return Err(CheckpointError::Encode(format!("bad meta entry {k:?}")));
        }
        header.push_str(&format!("meta {k} {v}\n"));
    }
    let mut offset = 0usize;
    for (name, t) in params.iter() {
        if !valid_token(name) {
            return Err(CheckpointError::Encode(format!("bad parameter name {name:?}")));
        }
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("param {name} {} {offset}\n", dims.join("x")));
        offset += t.numel() * 4;
    }
    let header_len = u32::try_from(header.len())
        .map_err(|_| CheckpointError::Encode("header too large".into()))?;
    let mut out = Vec::with_capacity(12 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated("magic"));
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len_bytes: [u8; 4] = bytes
        .get(8..12)
        .ok_or(CheckpointError::Truncated("header length"))?
        .try_into()
        .expect("slice of length 4");
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or(CheckpointError::Truncated("header"))?;
    let header =
        std::str::from_utf8(&bytes[12..header_end]).map_err(|_| CheckpointError::HeaderEncoding)?;
    let payload = &bytes[header_end..];

    let mut lines = header.lines().enumerate();
    match lines.next() {
        Some((_, HEADER_TITLE)) => {}
        _ => {
            return Err(CheckpointError::Header {
                line: 1,
                msg: format!("expected {HEADER_TITLE:?}"),
            })
        }
    }
    let mut meta = BTreeMap::new();
    let mut entries: Vec<Entry> = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let err = |msg: String| CheckpointError::Header { line: lineno, msg };
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            if !valid_token(k) {
                return Err(err(format!("bad meta key {k:?}")));
            }
            if meta.insert(k.to_string(), v.to_string()).is_some() {
                return Err(err(format!("duplicate meta key {k}")));
            }
        } else if let Some(rest) = line.strip_prefix("param ") {
            let fields: Vec<&str> = rest.split(' ').collect();
            let [name, dims, offset] = fields[..] else {
                return Err(err("expected: param <name> <shape> <offset>".into()));
            };
            if !valid_token(name) {
                return Err(err(format!("bad parameter name {name:?}")));
            }
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| err(format!("bad shape {dims:?}")))?;
            let offset: usize = offset
                .parse()
                .map_err(|_| err(format!("bad offset {offset:?}")))?;
            entries.push(Entry {
                name: name.to_string(),
                shape,
                offset,
            });
        } else if !line.is_empty() {
            return Err(err(format!("unrecognized line {line:?}")));
        }
    }

    let mut params = ParamSet::new();
    let mut expected = 0usize;
    for e in entries {
        if e.offset != expected {
            return Err(CheckpointError::Payload(format!(
                "parameter {} at offset {} but expected {expected}",
                e.name, e.offset
            )));
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Payload(format!("shape overflow for {}", e.name)))?;
        let nbytes = numel
            .checked_mul(4)
            .ok_or_else(|| CheckpointError::Payload(format!("size overflow for {}", e.name)))?;
        let end = expected
            .checked_add(nbytes)
            .filter(|&end| end <= payload.len())
            .ok_or(CheckpointError::Truncated("payload"))?;
        let data: Vec<f32> = payload[expected..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        let t = Tensor::new(e.shape, data)
            .map_err(|err| CheckpointError::Payload(format!("{}: {err}", e.name)))?;
        params
            .insert(e.name.clone(), t)
            .map_err(|err| CheckpointError::Payload(err.to_string()))?;
        expected = end;
    }
    if expected != payload.len() {
        return Err(CheckpointError::Payload(format!(
            "{} trailing bytes",
            payload.len() - expected
        )));
    }
    Ok(Checkpoint { params, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (ParamSet, BTreeMap<String, String>) {
        let mut ps = ParamSet::new();
        ps.insert(
            "encoder/block0/attn/wq",
            Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-30, -0.0]).unwrap(),
        )
        .unwrap();
        ps.insert("decoder/head/b", Tensor::scalar(0.25)).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("embed_dim".to_string(), "64".to_string());
        meta.insert("note".to_string(), "two words".to_string());
        (ps, meta)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (ps, meta) = sample();
        let bytes = encode(&ps, &meta).unwrap();
        assert_eq!(&bytes[..8], b"QFMCKPT1");
        let ck = decode(&bytes).unwrap();
        assert!(ck.params.bit_eq(&ps));
        assert_eq!(ck.meta, meta);
        assert_eq!(encode(&ck.params, &ck.meta).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let (ps, meta) = sample();
        let bytes = encode(&ps, &meta).unwrap();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + hlen]).unwrap();
        assert_eq!(
            header,
            "qfm-checkpoint v1\nmeta embed_dim 64\nmeta note two words\n\
             param encoder/block0/attn/wq 2x3 0\nparam decoder/head/b 1 24\n"
        );
        assert_eq!(bytes.len(), 12 + hlen + 7 * 4);
    }

    #[test]
    fn rejects_unknown_magic() {
        let (ps, meta) = sample();
        let mut bytes = encode(&ps, &meta).unwrap();
        bytes[7] = b'2';
        assert_eq!(decode(&bytes), Err(CheckpointError::BadMagic));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let (ps, meta) = sample();
        let bytes = encode(&ps, &meta).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&bytes[..10]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn rejects_non_finite_payload() {
        let (ps, meta) = sample();
        let mut bytes = encode(&ps, &meta).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(CheckpointError::Payload(_))));
    }

    #[test]
    fn rejects_out_of_order_offsets() {
        let header = "qfm-checkpoint v1\nparam a 1 4\n";
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&[0; 8]);
        assert!(matches!(decode(&bytes), Err(CheckpointError::Payload(_))));
    }
}
