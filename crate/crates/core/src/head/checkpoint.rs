//! Binary parameter checkpoints.
//!
//! Layout, all integers `u32` little-endian, all values `f64` little-endian:
//!
//! ```text
//! magic      8 bytes  "RPNHEAD\0"
//! version    u32      1
//! sets       u32      number of parameter sets
//! bindings   u32      number of dilation bindings
//! per binding:        dilation u32, parameter-set index u32
//! per set:            in_channels u32, mid_channels u32, kernel_h u32, kernel_w u32,
//!                     then hidden.weight, hidden.bias, cls.weight, cls.bias,
//!                     reg.weight, reg.bias as f64 values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{HeadBinding, HeadError, HeadSet, RpnHeadParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RPNHEAD\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), HeadError> {
    let v = u32::try_from(v).map_err(|_| HeadError::Checkpoint(format!("{v} does not fit u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, heads: &HeadSet) -> Result<(), HeadError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, heads.params.len())?;
    put_u32(&mut buf, heads.bindings.len())?;
    for b in &heads.bindings {
        put_u32(&mut buf, b.dilation)?;
        put_u32(&mut buf, b.params)?;
    }
    for p in &heads.params {
        let (kh, kw) = p.kernel();
        for dim in [p.in_channels(), p.mid_channels(), kh, kw] {
            put_u32(&mut buf, dim)?;
        }
        for t in p.tensors() {
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HeadError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                HeadError::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, HeadError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, dst: &mut [f64]) -> Result<(), HeadError> {
        let b = self.take(8 * dst.len())?;
        for (v, chunk) in dst.iter_mut().zip(b.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        }
        Ok(())
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<HeadSet, HeadError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(HeadError::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(HeadError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let sets = cur.u32()?;
    let nb = cur.u32()?;
    let mut bindings = Vec::with_capacity(nb);
    for _ in 0..nb {
        let dilation = cur.u32()?;
        let params = cur.u32()?;
        if params >= sets {
            return Err(HeadError::Checkpoint(format!(
                "binding refers to parameter set {params} of {sets}"
            )));
        }
        bindings.push(HeadBinding { dilation, params });
    }
    let mut params = Vec::with_capacity(sets);
    for _ in 0..sets {
        let (c_in, c_mid, kh, kw) = (cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?);
        let mut p = RpnHeadParams::zeros(c_in, c_mid, kh, kw);
        for t in p.tensors_mut() {
            cur.f64s(t)?;
        }
        params.push(p);
    }
    if cur.pos != bytes.len() {
        return Err(HeadError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(HeadSet { params, bindings })
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(path: &Path, heads: &HeadSet) -> Result<(), HeadError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, heads)?;
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<HeadSet, HeadError> {
    read_checkpoint(fs::File::open(path)?)
}
