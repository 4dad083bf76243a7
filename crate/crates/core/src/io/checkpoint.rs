//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "TGCK" | version u32 | section [u8; 4]
//! config text    (u32 length + UTF-8 key=value lines)
//! vocab file     (u32 length + UTF-8)
//! vocab digest   (u32 length + UTF-8)
//! block count u32, then per block:
//!     name (u32 length + UTF-8) | rank u32 | dims u64 x rank | f64 x numel
//! sha256 of every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gan::{Discriminator, GanConfig, Generator};
use crate::lm::{LmConfig, LmModel};
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;

pub const MAGIC: [u8; 4] = *b"TGCK";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Lm,
    Gan,
}

impl Section {
    fn tag(self) -> [u8; 4] {
        match self {
            Section::Lm => *b"LM\0\0",
            Section::Gan => *b"GAN\0",
        }
    }

    fn from_tag(tag: [u8; 4]) -> Result<Self> {
        match &tag {
            b"LM\0\0" => Ok(Section::Lm),
            b"GAN\0" => Ok(Section::Gan),
            _ => Err(Error::Corrupt(format!("unknown section tag {tag:?}"))),
        }
    }
}

/// The tokenizer a checkpoint was trained with: a file name relative to the
/// checkpoint and the vocabulary fingerprint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabRef {
    pub file: String,
    pub fingerprint: String,
}

impl VocabRef {
    pub fn new(file: impl Into<String>, vocab: &Vocab) -> Self {
        VocabRef {
            file: file.into(),
            fingerprint: vocab.fingerprint(),
        }
    }

    /// Loads the referenced vocabulary from beside `checkpoint` and checks its
    /// fingerprint.
    pub fn resolve(&self, checkpoint: &Path) -> Result<Vocab> {
        let path = checkpoint.parent().unwrap_or(Path::new(".")).join(&self.file);
        let vocab = Vocab::load(&path)?;
        if vocab.fingerprint() != self.fingerprint {
            return Err(Error::Validation(vec![format!(
                "{} has fingerprint {}, checkpoint expects {}",
                path.display(),
                vocab.fingerprint(),
                self.fingerprint
            )]));
        }
        Ok(vocab)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub section: Section,
    pub config: String,
    pub vocab: VocabRef,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.section.tag());
        put_str(&mut out, &self.config);
        put_str(&mut out, &self.vocab.file);
        put_str(&mut out, &self.vocab.fingerprint);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut head = Reader { bytes, pos: 0 };
        if head.array::<4>()? != MAGIC {
            return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = head.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < head.pos + CHECKSUM_LEN {
            return Err(Error::Corrupt("file is truncated".into()));
        }
        let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != stored {
            return Err(Error::Corrupt("checksum mismatch (truncated or modified file)".into()));
        }

        let mut r = Reader { bytes: body, pos: head.pos };
        let section = Section::from_tag(r.array()?)?;
        let config = r.string()?;
        let vocab = VocabRef {
            file: r.string()?,
            fingerprint: r.string()?,
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::new();
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Corrupt("dimension overflow".into()))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corrupt(format!("block `{name}` is too large")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Corrupt("block size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint {
            section,
            config,
            vocab,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn expect(self, section: Section) -> Result<Self> {
        if self.section != section {
            return Err(Error::Corrupt(format!(
                "expected a {section:?} checkpoint, found {:?}",
                self.section
            )));
        }
        Ok(self)
    }
}

fn blocks(store: &crate::optim::ParamStore) -> Vec<(String, Tensor)> {
    store
        .iter()
        .map(|p| (p.name.clone(), Tensor::new(p.value.shape(), p.value.data().to_vec()).expect("consistent")))
        .collect()
}

pub fn lm_checkpoint(model: &LmModel, vocab: VocabRef) -> Checkpoint {
    Checkpoint {
        section: Section::Lm,
        config: model.config().to_kv(),
        vocab,
        tensors: blocks(model.params()),
    }
}

pub fn save_lm(model: &LmModel, vocab: VocabRef, path: &Path) -> Result<()> {
    lm_checkpoint(model, vocab).save(path)
}

pub fn lm_from_checkpoint(ck: Checkpoint) -> Result<(LmModel, VocabRef)> {
    let ck = ck.expect(Section::Lm)?;
    let config = LmConfig::from_kv(&ck.config)?;
    let mut model = LmModel::new(config, 0)?;
    model.params_mut().load_from(&ck.tensors)?;
    Ok((model, ck.vocab))
}

pub fn load_lm(path: &Path) -> Result<(LmModel, VocabRef)> {
    lm_from_checkpoint(Checkpoint::load(path)?)
}

pub fn gan_checkpoint(g: &Generator, d: &Discriminator, vocab: VocabRef) -> Result<Checkpoint> {
    if g.config() != d.config() {
        return Err(Error::Contract("generator and discriminator configurations differ".into()));
    }
    let mut tensors = blocks(g.params());
    tensors.extend(blocks(d.params()));
    Ok(Checkpoint {
        section: Section::Gan,
        config: g.config().to_kv(),
        vocab,
        tensors,
    })
}

pub fn save_gan(g: &Generator, d: &Discriminator, vocab: VocabRef, path: &Path) -> Result<()> {
    gan_checkpoint(g, d, vocab)?.save(path)
}

pub fn gan_from_checkpoint(ck: Checkpoint) -> Result<(Generator, Discriminator, VocabRef)> {
    let ck = ck.expect(Section::Gan)?;
    let config = GanConfig::from_kv(&ck.config)?;
    let mut g = Generator::new(config.clone(), 0)?;
    let mut d = Discriminator::new(config, 0)?;
    let split = g.params().len().min(ck.tensors.len());
    g.params_mut().load_from(&ck.tensors[..split])?;
    d.params_mut().load_from(&ck.tensors[split..])?;
    Ok((g, d, ck.vocab))
}

pub fn load_gan(path: &Path) -> Result<(Generator, Discriminator, VocabRef)> {
    gan_from_checkpoint(Checkpoint::load(path)?)
}
