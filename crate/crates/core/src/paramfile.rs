//! Parameter files: a `MAGIC vN` line, one header line, then a binary tensor block.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use fundus_nn::Tensor;

use crate::error::{Error, Result};

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes).map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write<'a>(
    path: &Path,
    magic: &str,
    version: u32,
    header: &str,
    tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>,
) -> Result<()> {
    debug_assert!(!header.contains('\n'));
    let mut buf = format!("{magic} v{version}\n{header}\n").into_bytes();
    fundus_nn::io::write_tensors(&mut buf, tensors)?;
    write_atomic(path, &buf)
}

pub struct Blob {
    pub version: u32,
    pub header: String,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn read(path: &Path, what: &'static str, magic: &str) -> Result<Blob> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let version = line
        .trim_end()
        .strip_prefix(magic)
        .and_then(|rest| rest.strip_prefix(" v"))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::format(what, format!("expected a `{magic}` header")))?;
    let mut header = String::new();
    r.read_line(&mut header).map_err(|e| Error::io(path, e))?;
    let tensors = fundus_nn::io::read_tensors(&mut r)
        .map_err(|e| Error::format(what, format!("tensor block: {e}")))?;
    Ok(Blob {
        version,
        header: header.trim_end().to_string(),
        tensors,
    })
}

/// Parses `key=value` pairs separated by whitespace.
pub fn parse_kv(what: &'static str, header: &str) -> Result<HashMap<String, String>> {
    header
        .split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::format(what, format!("bad header field `{kv}`")))
        })
        .collect()
}

pub fn field<T: std::str::FromStr>(
    what: &'static str,
    kv: &HashMap<String, String>,
    key: &str,
) -> Result<T> {
    kv.get(key)
        .ok_or_else(|| Error::format(what, format!("header lacks `{key}`")))?
        .parse()
        .map_err(|_| Error::format(what, format!("bad value for `{key}`")))
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Fingerprint of tensor names and shapes.
pub fn layout_hash<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> u64 {
    let mut desc = String::new();
    for (name, t) in tensors {
        desc.push_str(&format!("{name}:{:?};", t.shape()));
    }
    fnv1a(desc.as_bytes())
}
