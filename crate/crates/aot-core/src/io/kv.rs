//! Flat key=value files: manifests, metrics, training reports.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Write pairs in the given order, one `key=value` per line.
pub fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut buf = String::new();
    for (k, v) in pairs {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Parse(format!("kv entry not flat: {k}")));
        }
        buf.push_str(k);
        buf.push('=');
        buf.push_str(v);
        buf.push('\n');
    }
    fs::File::create(path)?.write_all(buf.as_bytes())?;
    Ok(())
}

/// Read a key=value file; blank lines and `#` comments are ignored.
pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Parse(format!(
                "{}:{}: expected key=value, got {line:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Fetch a required key, with the file named in the error.
pub fn require<'a>(
    map: &'a BTreeMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<&'a str> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::Parse(format!("{}: missing key {key}", path.display())))
}

pub fn parse_usize(map: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<usize> {
    require(map, key, path)?
        .parse()
        .map_err(|_| Error::Parse(format!("{}: key {key} is not an integer", path.display())))
}

pub fn parse_u64(map: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<u64> {
    require(map, key, path)?
        .parse()
        .map_err(|_| Error::Parse(format!("{}: key {key} is not an integer", path.display())))
}

pub fn parse_bool(map: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<bool> {
    match require(map, key, path)? {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::Parse(format!(
            "{}: key {key} is not a bool: {other}",
            path.display()
        ))),
    }
}
