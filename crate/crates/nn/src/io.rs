//! Binary encoding of named tensor collections.
//!
//! Layout (little-endian): magic `NTEN`, `u32` count, then per tensor:
//! `u32` name length, UTF-8 name, `u32` rank, `u64` dims, `f64` data.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::tensor::Tensor;
use crate::NnError;

const MAGIC: &[u8; 4] = b"NTEN";

pub fn write_tensors<'a, W: Write>(
    w: &mut W,
    tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>,
) -> Result<(), NnError> {
    let items: Vec<_> = tensors.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&(items.len() as u32).to_le_bytes())?;
    for (name, t) in items {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<BTreeMap<String, Tensor>, NnError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Format("bad tensor block magic".into()));
    }
    let count = read_u32(r)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(NnError::Format(format!(
                "tensor name length {len} is implausible"
            )));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| NnError::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(NnError::Format(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.insert(name, Tensor::from_vec(&shape, data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic() {
        let mut r: &[u8] = b"XXXX\0\0\0\0";
        assert!(matches!(read_tensors(&mut r), Err(NnError::Format(_))));
    }

    #[test]
    fn truncated_input_is_an_io_error() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), Tensor::full(&[3], 1.5));
        let mut buf = Vec::new();
        write_tensors(&mut buf, &m).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_tensors(&mut buf.as_slice()),
            Err(NnError::Io(_))
        ));
    }
}
