//! File helpers: atomic writes, JSON documents and raw little-endian `f64` arrays.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}-{}", std::process::id(), COUNTER.fetch_add(1, Ordering::Relaxed)));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}

pub fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f64s(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    )
}

pub fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    write_atomic(path, &f64s_to_bytes(values))
}

/// Reads a raw array, checking the element count when `expected` is given.
pub fn read_f64s(path: &Path, expected: Option<usize>) -> Result<Vec<f64>> {
    let bytes = read_bytes(path)?;
    let values = bytes_to_f64s(&bytes)
        .ok_or_else(|| Error::Data(format!("{}: length {} is not a multiple of 8", path.display(), bytes.len())))?;
    if let Some(n) = expected {
        if values.len() != n {
            return Err(Error::Data(format!(
                "{}: expected {n} values, found {}",
                path.display(),
                values.len()
            )));
        }
    }
    Ok(values)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b/x.f64");
        let v = vec![1.5, -0.0, f64::MAX, 1e-300];
        write_f64s(&p, &v).unwrap();
        assert_eq!(read_f64s(&p, Some(4)).unwrap(), v);
        assert!(matches!(read_f64s(&p, Some(5)), Err(Error::Data(_))));
        assert_eq!(fs::metadata(&p).unwrap().len(), 32);
    }

    #[test]
    fn missing_file_is_io_error() {
        let e = read_json::<serde_json::Value>(Path::new("/nonexistent/x.json")).unwrap_err();
        assert_eq!(e.exit_code(), 4);
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
