//! Versioned binary container shared by every on-disk artifact: a 4-byte
//! magic, a format version, a JSON metadata header, and named f64 blobs.
//! Loaders refuse mismatched magics and versions.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub(crate) fn write_container<M: Serialize>(
    path: impl AsRef<Path>,
    magic: &[u8; 4],
    version: u32,
    meta: &M,
    blobs: &[(&str, &[f64])],
) -> Result<()> {
    let path = path.as_ref();
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| bad(path, format!("metadata serialization failed: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, data) in blobs {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_container<M: DeserializeOwned>(
    path: impl AsRef<Path>,
    magic: &[u8; 4],
    expected_version: u32,
) -> Result<(M, BTreeMap<String, Vec<f64>>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(bad(path, "file too short"));
    }
    if &bytes[0..4] != magic {
        return Err(bad(
            path,
            format!(
                "wrong magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[0..4]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != expected_version {
        return Err(bad(
            path,
            format!("format version {version}, this build reads version {expected_version}"),
        ));
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut off = 12;
    if off + meta_len > bytes.len() {
        return Err(bad(path, "truncated metadata"));
    }
    let meta: M = serde_json::from_slice(&bytes[off..off + meta_len])
        .map_err(|e| bad(path, format!("metadata parse failed: {e}")))?;
    off += meta_len;

    let take_u32 = |off: &mut usize| -> Result<u32> {
        if *off + 4 > bytes.len() {
            return Err(bad(path, "truncated header field"));
        }
        let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
        *off += 4;
        Ok(v)
    };

    let n_blobs = take_u32(&mut off)?;
    let mut blobs = BTreeMap::new();
    for _ in 0..n_blobs {
        let name_len = take_u32(&mut off)? as usize;
        if off + name_len > bytes.len() {
            return Err(bad(path, "truncated blob name"));
        }
        let name = String::from_utf8(bytes[off..off + name_len].to_vec())
            .map_err(|_| bad(path, "blob name is not UTF-8"))?;
        off += name_len;
        if off + 8 > bytes.len() {
            return Err(bad(path, "truncated blob length"));
        }
        let len = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
        off += 8;
        if off + len * 8 > bytes.len() {
            return Err(bad(path, format!("truncated blob {name:?}")));
        }
        let mut data = Vec::with_capacity(len);
        for i in 0..len {
            data.push(f64::from_le_bytes(
                bytes[off + i * 8..off + i * 8 + 8].try_into().unwrap(),
            ));
        }
        off += len * 8;
        blobs.insert(name, data);
    }
    Ok((meta, blobs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Meta {
        label: String,
        n: usize,
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let meta = Meta {
            label: "x".into(),
            n: 3,
        };
        let data = vec![1.5, -2.25, std::f64::consts::PI];
        write_container(&p, b"TEST", 2, &meta, &[("w", &data)]).unwrap();
        let (m, blobs): (Meta, _) = read_container(&p, b"TEST", 2).unwrap();
        assert_eq!(m, meta);
        assert_eq!(blobs["w"], data);
    }

    #[test]
    fn version_mismatch_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let meta = Meta {
            label: "x".into(),
            n: 0,
        };
        write_container(&p, b"TEST", 1, &meta, &[]).unwrap();
        assert!(read_container::<Meta>(&p, b"TEST", 2).is_err());
        assert!(read_container::<Meta>(&p, b"NOPE", 1).is_err());
    }
}
