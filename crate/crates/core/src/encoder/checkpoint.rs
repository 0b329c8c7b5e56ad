//! Binary checkpoint files.
//!
//! ```text
//! "VCLP" | version u32 | count u32 | tensor*      parameters
//! count u32 | tensor*                              optimizer state
//! count u32 | tensor*                              rng / loop state
//! tensor := name_len u16 | name utf-8 | rank u8 | dims u32* | f32*
//! ```
//!
//! All integers and floats are little-endian. Integer state (step counters,
//! seeds) is stored as `[4]` tensors of 16-bit chunks, which f32 holds exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"VCLP";
pub const CKPT_VERSION: u32 = 1;

pub type NamedTensor = (String, Tensor<f32>);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<NamedTensor>,
    pub optimizer: Vec<NamedTensor>,
    pub rng: Vec<NamedTensor>,
}

pub fn encode_u64(x: u64) -> Tensor<f32> {
    let data = (0..4).map(|i| ((x >> (16 * i)) & 0xffff) as f32).collect();
    Tensor::new(vec![4], data).expect("four chunks")
}

pub fn decode_u64(t: &Tensor<f32>) -> Result<u64> {
    if t.dims() != [4] {
        return Err(Error::input(format!("integer tensor must be [4], got {:?}", t.dims())));
    }
    let mut x = 0u64;
    for (i, &c) in t.data().iter().enumerate() {
        if !(0.0..=65535.0).contains(&c) || c.fract() != 0.0 {
            return Err(Error::input(format!("bad integer chunk {c}")));
        }
        x |= (c as u64) << (16 * i);
    }
    Ok(x)
}

fn put_block(out: &mut Vec<u8>, block: &[NamedTensor]) -> Result<()> {
    out.extend_from_slice(&(block.len() as u32).to_le_bytes());
    for (name, t) in block {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| Error::input(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.dims().len()).map_err(|_| Error::input("tensor rank above 255"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(rank);
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| Error::input("tensor dim above u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, self.pos as u64, msg)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn block(&mut self) -> Result<Vec<NamedTensor>> {
        let count = self.u32("tensor count")?;
        let mut out = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(self.take(2, "name length")?.try_into().expect("2 bytes"));
            let at = self.pos;
            let name = std::str::from_utf8(self.take(len as usize, "tensor name")?)
                .map_err(|_| Error::format(self.path, at as u64, "tensor name is not utf-8"))?
                .to_string();
            let rank = self.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let at = self.pos;
                let d = self.u32("dims")? as usize;
                if d == 0 {
                    return Err(Error::format(self.path, at as u64, format!("zero dim in {name}")));
                }
                dims.push(d);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= self.bytes.len()))
                .ok_or_else(|| self.err(format!("implausible dims {dims:?} for {name}")))?;
            let raw = self.take(n * 4, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            out.push((name, Tensor::new(dims, data)?));
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        put_block(&mut out, &self.params)?;
        put_block(&mut out, &self.optimizer)?;
        put_block(&mut out, &self.rng)?;
        Ok(out)
    }

    /// Parses checkpoint bytes; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4, "magic")? != CKPT_MAGIC {
            return Err(Error::format(path, 0, "bad magic, not a checkpoint"));
        }
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(Error::format(
                path,
                4,
                format!("checkpoint version {version}, this build reads version {CKPT_VERSION}"),
            ));
        }
        let params = r.block()?;
        let optimizer = r.block()?;
        let rng = r.block()?;
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after the last block"));
        }
        Ok(Self {
            params,
            optimizer,
            rng,
        })
    }

    /// Writes through a temporary file and a rename, so a crash never leaves
    /// a half-written checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn find<'a>(block: &'a [NamedTensor], name: &str) -> Option<&'a Tensor<f32>> {
        block.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
