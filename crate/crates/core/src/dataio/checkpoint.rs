//! `VMC1` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VMC1"  u32 version
//! u64 config length, config text (UTF-8)
//! u64 step
//! rng: [u8; 32] seed, u64 stream, u128 word position
//! u64 optimizer step count
//! four tables: online, target, adam first moment, adam second moment
//!   u64 entries, then per entry:
//!   u32 name length, name, u8 dtype (1 = f64), u32 ndim, u64 dims[ndim], f64 data
//! ```
//!
//! Loading parses the whole file before anything is returned, so a damaged
//! file never leaves a half-restored state behind.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VMC1";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const MAX_NDIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub step: u64,
    pub rng: RngState,
    pub adam_t: u64,
    pub online: ParamStore,
    pub target: ParamStore,
    pub adam_m: ParamStore,
    pub adam_v: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.adam_t.to_le_bytes());
        for table in [&self.online, &self.target, &self.adam_m, &self.adam_v] {
            write_table(&mut out, table);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a VMC1 checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.len("config length")?;
        let config = String::from_utf8(r.take(len, "config")?.to_vec())
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let step = r.u64("step")?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        let adam_t = r.u64("optimizer step")?;
        let online = r.table("online")?;
        let target = r.table("target")?;
        let adam_m = r.table("adam_m")?;
        let adam_v = r.table("adam_v")?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        for other in [&target, &adam_m, &adam_v] {
            online
                .check_congruent(other)
                .map_err(|e| Error::Checkpoint(format!("table mismatch: {e}")))?;
        }
        Ok(Self {
            config,
            step,
            rng: RngState { seed, stream, word_pos },
            adam_t,
            online,
            target,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_table(out: &mut Vec<u8>, table: &ParamStore) {
    out.extend_from_slice(&(table.len() as u64).to_le_bytes());
    for (name, t) in table.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "{what} at byte {} needs {n} bytes, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    /// A length field, rejected early if it exceeds the remaining bytes.
    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        let remaining = (self.bytes.len() - self.pos) as u64;
        if v > remaining {
            return Err(Error::Checkpoint(format!(
                "{what} {v} at byte {at} exceeds the {remaining} remaining bytes"
            )));
        }
        Ok(v as usize)
    }

    fn table(&mut self, what: &str) -> Result<ParamStore> {
        let count = self.len(what)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let nlen = self.u32("name length")? as usize;
            let name = std::str::from_utf8(self.take(nlen, "name")?)
                .map_err(|_| Error::Checkpoint(format!("non UTF-8 tensor name in {what}")))?
                .to_string();
            let dtype = self.take(1, "dtype")?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype {dtype}")));
            }
            let ndim = self.u32("ndim")? as usize;
            if ndim > MAX_NDIM {
                return Err(Error::Checkpoint(format!("{name}: ndim {ndim} too large")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut elems: u64 = 1;
            for _ in 0..ndim {
                let d = self.u64("dim")?;
                elems = elems
                    .checked_mul(d)
                    .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
                shape.push(d as usize);
            }
            let nbytes = elems
                .checked_mul(8)
                .filter(|&b| b <= (self.bytes.len() - self.pos) as u64)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("{name}: data at byte {} exceeds the file", self.pos))
                })?;
            let data = self
                .take(nbytes as usize, "tensor data")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if store.get(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}` in {what}")));
            }
            store.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(store)
    }
}
