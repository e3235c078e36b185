//! Portable binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DRNN"  u32 version
//! u32 len, model config as key=value text
//! u8 vocab kind (0 none, 1 char, 2 word), u32 count, count × (u32 len, utf-8),
//!   u32 unknown index (u32::MAX if none)
//! u32 tensor count, per tensor: u32 len, name, u32 rows, u32 cols,
//!   f64 lr multiplier, rows × cols f64 row-major
//! ```

use std::fs;
use std::path::Path;

use crate::config::{model_config_from_text, model_config_to_text};
use crate::data::{TextLevel, Vocabulary};
use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::model::{build, ModelConfig, ParamSet};

pub const MAGIC: &[u8; 4] = b"DRNN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub vocab: Option<Vocabulary>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamSet, vocab: Option<Vocabulary>) -> Self {
        Checkpoint { config, params, vocab }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(64 + 8 * self.params.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &model_config_to_text(&self.config))?;
        match &self.vocab {
            None => {
                out.push(0);
                put_u32(&mut out, 0)?;
                out.extend_from_slice(&u32::MAX.to_le_bytes());
            }
            Some(v) => {
                out.push(match v.level() {
                    TextLevel::Char => 1,
                    TextLevel::Word => 2,
                });
                put_u32(&mut out, v.size())?;
                for s in v.symbols() {
                    put_str(&mut out, s)?;
                }
                match v.unknown_index() {
                    Some(i) => put_u32(&mut out, i)?,
                    None => out.extend_from_slice(&u32::MAX.to_le_bytes()),
                }
            }
        }
        put_u32(&mut out, self.params.len())?;
        for p in &self.params {
            put_str(&mut out, &p.name)?;
            put_u32(&mut out, p.value.rows())?;
            put_u32(&mut out, p.value.cols())?;
            out.extend_from_slice(&p.lr_multiplier.to_le_bytes());
            for v in p.value.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Tensors are matched by name against the skeleton the stored config
    /// builds; missing, extra or misshapen tensors are errors.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = model_config_from_text(&r.string()?)?;
        let kind = r.u8()?;
        let count = r.u32()? as usize;
        let mut symbols = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            symbols.push(r.string()?);
        }
        let unk = r.u32()?;
        let unknown = (unk != u32::MAX).then_some(unk as usize);
        let vocab = match kind {
            0 => None,
            1 => Some(Vocabulary::from_symbols(TextLevel::Char, symbols, unknown)?),
            2 => Some(Vocabulary::from_symbols(TextLevel::Word, symbols, unknown)?),
            k => return Err(Error::Checkpoint(format!("unknown vocabulary kind {k}"))),
        };

        let (mut params, _) = build(&config)?;
        let n = r.u32()? as usize;
        if n != params.len() {
            return Err(Error::Checkpoint(format!(
                "{n} tensors stored, {} expected for {}",
                params.len(),
                config.architecture
            )));
        }
        let mut seen = vec![false; n];
        for _ in 0..n {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let mult = r.f64()?;
            let idx = params
                .index_of(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(Error::Checkpoint(format!("tensor `{name}` stored twice")));
            }
            let p = params.by_index_mut(idx);
            if p.value.shape() != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` is {rows}x{cols}, expected {:?}",
                    p.value.shape()
                )));
            }
            let bytes = r.take(rows * cols * 8)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            p.value = Matrix::new(rows, cols, data)?;
            p.lr_multiplier = mult;
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { config, params, vocab })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{init_model, InitPreset};
    use crate::math::Rng;
    use crate::model::Architecture;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::new(Architecture::Dots, 3, 3, 4)
            .with_transition_inter(5)
            .with_output_inter(2);
        let mut params = init_model(&cfg, InitPreset::Char, &mut Rng::new(3)).unwrap();
        params.get_mut("W_1").unwrap().lr_multiplier = 0.1;
        let vocab = Vocabulary::build("abc", TextLevel::Char).unwrap();
        Checkpoint::new(cfg, params, Some(vocab))
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"DRNN");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn word_vocab_and_no_vocab() {
        let mut ck = sample();
        ck.vocab = Some(Vocabulary::build("x y", TextLevel::Word).unwrap());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.vocab.unwrap().unknown_index(), Some(2));
        ck.vocab = None;
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(), ck);
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Checkpoint(_))));
    }
}
