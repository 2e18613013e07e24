//! Binary checkpoint format. Layout, all integers little-endian:
//!
//! ```text
//! magic "GLIP" | version u32 | param count u32
//!   per entry: name length u16, UTF-8 name, T4F tensor block
//! opt count u32
//!   per entry: same framing, names prefixed "m." / "v."
//! step u64 | config length u32 | config JSON bytes
//! ```
//!
//! Entries are written in sorted name order, so load -> save is
//! byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 4] = b"GLIP";
pub const VERSION: u32 = 1;

/// Every learnable parameter by name, optimizer moments, step count, and an
/// echo of the training config.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Tensor4>,
    pub opt_m: BTreeMap<String, Tensor4>,
    pub opt_v: BTreeMap<String, Tensor4>,
    pub step: u64,
    pub config_json: String,
}

fn write_entry<W: Write>(out: &mut W, name: &str, t: &Tensor4) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::Invalid(format!("parameter name too long: {name}")));
    }
    out.write_all(&(bytes.len() as u16).to_le_bytes())?;
    out.write_all(bytes)?;
    t.write_t4f(out)
}

fn read_entry<R: Read>(inp: &mut R) -> Result<(String, Tensor4)> {
    let mut lb = [0u8; 2];
    inp.read_exact(&mut lb)?;
    let mut name = vec![0u8; u16::from_le_bytes(lb) as usize];
    inp.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("non-UTF8 parameter name".into()))?;
    let t = Tensor4::read_t4f(inp)?;
    Ok((name, t))
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            write_entry(out, name, t)?;
        }
        let opt_count = self.opt_m.len() + self.opt_v.len();
        out.write_all(&(opt_count as u32).to_le_bytes())?;
        for (name, t) in &self.opt_m {
            write_entry(out, &format!("m.{name}"), t)?;
        }
        for (name, t) in &self.opt_v {
            write_entry(out, &format!("v.{name}"), t)?;
        }
        out.write_all(&self.step.to_le_bytes())?;
        let cfg = self.config_json.as_bytes();
        out.write_all(&(cfg.len() as u32).to_le_bytes())?;
        out.write_all(cfg)?;
        Ok(())
    }

    pub fn read_from<R: Read>(inp: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        inp.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let mut b4 = [0u8; 4];
        inp.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        inp.read_exact(&mut b4)?;
        let n_params = u32::from_le_bytes(b4) as usize;
        let mut ck = Checkpoint::default();
        for _ in 0..n_params {
            let (name, t) = read_entry(inp)?;
            ck.params.insert(name, t);
        }
        inp.read_exact(&mut b4)?;
        let n_opt = u32::from_le_bytes(b4) as usize;
        for _ in 0..n_opt {
            let (name, t) = read_entry(inp)?;
            if let Some(rest) = name.strip_prefix("m.") {
                ck.opt_m.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix("v.") {
                ck.opt_v.insert(rest.to_string(), t);
            } else {
                return Err(Error::Format(format!("unknown optimizer entry {name}")));
            }
        }
        let mut b8 = [0u8; 8];
        inp.read_exact(&mut b8)?;
        ck.step = u64::from_le_bytes(b8);
        inp.read_exact(&mut b4)?;
        let mut cfg = vec![0u8; u32::from_le_bytes(b4) as usize];
        inp.read_exact(&mut cfg)?;
        ck.config_json = String::from_utf8(cfg).map_err(|_| Error::Format("non-UTF8 config echo".into()))?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Checkpoint::read_from(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint {
            step: 42,
            config_json: "{\"seed\":7}".into(),
            ..Default::default()
        };
        ck.params.insert("b.kernel".into(), Tensor4::filled((2, 1, 3, 3), 0.5));
        ck.params.insert("a.bias".into(), Tensor4::zeros((1, 2, 1, 1)));
        ck.opt_m.insert("b.kernel".into(), Tensor4::filled((2, 1, 3, 3), 0.1));
        ck.opt_v.insert("b.kernel".into(), Tensor4::filled((2, 1, 3, 3), 0.2));
        ck
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ck = sample();
        let mut buf1 = Vec::new();
        ck.write_to(&mut buf1).unwrap();
        let back = Checkpoint::read_from(&mut &buf1[..]).unwrap();
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf1, buf2);
        assert_eq!(back.step, 42);
        assert_eq!(back.params.len(), 2);
        assert_eq!(back.opt_m.len(), 1);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE\x01\x00\x00\x00".to_vec();
        assert!(Checkpoint::read_from(&mut &buf[..]).is_err());
    }
}
