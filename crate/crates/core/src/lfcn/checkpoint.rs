//! Binary checkpoint: `LFCN` magic, u32 version, length-prefixed JSON config,
//! then one record per parameter (length-prefixed name, u8 rank, u32 dims,
//! f32 payload). All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::network::{Network, NetworkConfig, Param};
use super::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LFCN";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint<T: Scalar>(net: &Network<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(net.config())?;
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(&config);
    for p in net.params() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        let rank = u8::try_from(p.value.shape().len()).map_err(|_| Error::Checkpoint("rank too large".into()))?;
        out.push(rank);
        for &d in p.value.shape() {
            put_u32(&mut out, d)?;
        }
        for v in p.value.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Network<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::Checkpoint("missing magic".into()))? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an LFCN checkpoint".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let len = r.u32()?;
    let config: NetworkConfig =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("bad config blob: {e}")))?;
    let mut params = Vec::new();
    while !r.done() {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        params.push(Param {
            name,
            value: Tensor::from_vec(&shape, data)?,
        });
    }
    Network::from_parts(config, params).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(net)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Network<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
