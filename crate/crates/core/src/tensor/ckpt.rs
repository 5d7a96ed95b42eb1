//! Binary checkpoint files.
//!
//! Layout: 8-byte magic `LDTL0001`, then one record per tensor until EOF:
//!   name length (u64 LE), name bytes (UTF-8),
//!   rank (u64 LE), dims (rank x u64 LE),
//!   values (product(dims) x f64 LE).
//! Records preserve insertion order, so save/load round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"LDTL0001";

pub fn save_checkpoint<P: AsRef<Path>>(
    path: P,
    tensors: &[(&str, &Tensor)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(CKPT_MAGIC)?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<IndexMap<String, Tensor>> {
    let display = path.as_ref().display().to_string();
    let bad = |detail: String| Error::Artifact(format!("{display}: {detail}"));
    let mut r = BufReader::new(
        File::open(path.as_ref())
            .map_err(|e| Error::Artifact(format!("cannot open checkpoint {display}: {e}")))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad("file shorter than magic".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(bad(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(CKPT_MAGIC)
        )));
    }
    let mut out = IndexMap::new();
    loop {
        let mut b8 = [0u8; 8];
        match r.read_exact(&mut b8) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u64::from_le_bytes(b8) as usize;
        if name_len > 4096 {
            return Err(bad(format!("implausible name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| bad("truncated record name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| bad("record name is not UTF-8".into()))?;
        r.read_exact(&mut b8)
            .map_err(|_| bad(format!("truncated rank for {name:?}")))?;
        let rank = u64::from_le_bytes(b8) as usize;
        if rank > 2 {
            return Err(bad(format!("rank {rank} > 2 for {name:?}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut b8)
                .map_err(|_| bad(format!("truncated dims for {name:?}")))?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)
                .map_err(|_| bad(format!("truncated values for {name:?}")))?;
            data.push(f64::from_le_bytes(b8));
        }
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

/// Fetch a required record from a loaded checkpoint.
pub fn require<'a>(
    map: &'a IndexMap<String, Tensor>,
    name: &str,
    path: &str,
) -> Result<&'a Tensor> {
    map.get(name)
        .ok_or_else(|| Error::Artifact(format!("{path}: missing record {name:?}")))
}
