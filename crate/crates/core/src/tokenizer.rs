//! Character-level vocabulary shared by the language model and the GAN decode
//! path.
//!
//! Ids 0..4 are reserved (`PAD`, `BOS`, `EOS`, `UNK`); every distinct corpus
//! character gets an id above them in sorted order. Line breaks never become
//! tokens because datasets store one sequence per line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED_NAMES: [&str; NUM_RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl Vocab {
    /// Builds the vocabulary of all distinct characters of `corpus`.
    pub fn build(corpus: &str) -> Result<Self> {
        let mut chars: Vec<char> = corpus.chars().filter(|c| !is_line_break(*c)).collect();
        if chars.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from empty text".into()));
        }
        chars.sort_unstable();
        chars.dedup();
        Ok(Self::from_chars(chars))
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + NUM_RESERVED))
            .collect();
        Vocab { chars, index }
    }

    /// |V|, reserved ids included.
    pub fn len(&self) -> usize {
        self.chars.len() + NUM_RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn is_reserved(id: usize) -> bool {
        id < NUM_RESERVED
    }

    /// Printable form of a token id.
    pub fn token(&self, id: usize) -> Option<String> {
        if id < NUM_RESERVED {
            Some(RESERVED_NAMES[id].to_string())
        } else {
            self.chars.get(id - NUM_RESERVED).map(|c| c.to_string())
        }
    }

    /// `[BOS, chars.., EOS]`; characters outside the vocabulary map to `UNK`.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::with_capacity(text.len() + 2);
        ids.push(BOS);
        ids.extend(text.chars().map(|c| self.id(c)));
        ids.push(EOS);
        TokenSequence { ids }
    }

    /// Concatenates the characters of all non-reserved ids.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            if id >= self.len() {
                return Err(Error::Index {
                    op: "decode",
                    index: id,
                    bound: self.len(),
                });
            }
            if id >= NUM_RESERVED {
                out.push(self.chars[id - NUM_RESERVED]);
            }
        }
        Ok(out)
    }

    /// Short stable digest of the token list, used to detect datasets built
    /// with different vocabularies.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.chars {
            let mut buf = [0u8; 4];
            h.update(c.encode_utf8(&mut buf).as_bytes());
            h.update([0u8]);
        }
        h.finalize()[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// One token per line, line number = id. Backslash, tab and line breaks
    /// are written as `\\`, `\t`, `\n`, `\r`.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for name in RESERVED_NAMES {
            out.push_str(name);
            out.push('\n');
        }
        for &c in &self.chars {
            match c {
                '\\' => out.push_str("\\\\"),
                '\t' => out.push_str("\\t"),
                '\n' => out.push_str("\\n"),
                '\r' => out.push_str("\\r"),
                c => out.push(c),
            }
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.strip_suffix('\n').unwrap_or(text).split('\n').collect();
        if lines.len() <= NUM_RESERVED {
            return Err(Error::Input(format!(
                "vocabulary file has {} lines, needs at least {}",
                lines.len(),
                NUM_RESERVED + 1
            )));
        }
        for (i, name) in RESERVED_NAMES.iter().enumerate() {
            if lines[i] != *name {
                return Err(Error::Input(format!(
                    "vocabulary line {i} is `{}`, expected `{name}`",
                    lines[i]
                )));
            }
        }
        let mut chars = Vec::with_capacity(lines.len() - NUM_RESERVED);
        for (i, line) in lines.iter().enumerate().skip(NUM_RESERVED) {
            let c = match *line {
                "\\\\" => '\\',
                "\\t" => '\t',
                "\\n" => '\n',
                "\\r" => '\r',
                other => {
                    let mut it = other.chars();
                    match (it.next(), it.next()) {
                        (Some(c), None) => c,
                        _ => {
                            return Err(Error::Input(format!(
                                "vocabulary line {i} is not a single character: `{other}`"
                            )))
                        }
                    }
                }
            };
            chars.push(c);
        }
        let vocab = Self::from_chars(chars);
        if vocab.index.len() != vocab.chars.len() {
            return Err(Error::Input("vocabulary file lists a token twice".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_file_string(&text)
    }
}

fn is_line_break(c: char) -> bool {
    c == '\n' || c == '\r'
}

/// Ordered token ids `x_1 .. x_T`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks id range, BOS placement and PAD-only tail after the first EOS.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for (pos, &id) in self.ids.iter().enumerate() {
            if id >= vocab_size {
                return Err(Error::Index {
                    op: "token sequence",
                    index: id,
                    bound: vocab_size,
                });
            }
            if id == BOS && pos != 0 {
                return Err(Error::Input(format!("BOS at position {pos}")));
            }
        }
        if let Some(eos) = self.ids.iter().position(|&id| id == EOS) {
            if self.ids[eos + 1..].iter().any(|&id| id != PAD) {
                return Err(Error::Input("non-PAD token after EOS".into()));
            }
        }
        Ok(())
    }

    /// Keeps at most `max_len` ids. A cut sequence loses its EOS.
    pub fn truncated(&self, max_len: usize) -> Self {
        TokenSequence {
            ids: self.ids[..self.ids.len().min(max_len)].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn vocab_sizes() {
        let v = Vocab::build("abba").unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id('a'), 4);
        assert_eq!(v.id('b'), 5);
        assert_eq!(Vocab::build("a").unwrap().len(), 5);
        assert!(matches!(Vocab::build(""), Err(Error::Input(_))));
        assert!(matches!(Vocab::build("\n\n"), Err(Error::Input(_))));
    }

    #[test]
    fn encode_decode_examples() {
        let v = Vocab::build("hi there").unwrap();
        assert_eq!(v.encode("").ids, vec![BOS, EOS]);
        let seq = [BOS, v.id('h'), v.id('i'), EOS];
        assert_eq!(v.decode(&seq).unwrap(), "hi");
        assert_eq!(v.encode("hi").ids, seq);
        assert_eq!(v.encode("hz").ids[2], UNK);
        assert!(matches!(v.decode(&[v.len()]), Err(Error::Index { .. })));
    }

    #[test]
    fn corpus_lines_round_trip() {
        let corpus = include_str!("../../../data/corpus.txt");
        let v = Vocab::build(corpus).unwrap();
        for line in corpus.lines() {
            assert_eq!(v.decode(&v.encode(line).ids).unwrap(), line);
        }
    }

    #[test]
    fn vocab_is_deterministic_and_file_round_trips() {
        let text = "the \\quick\tbrown\r\nfox";
        let a = Vocab::build(text).unwrap();
        let b = Vocab::build(text).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let back = Vocab::from_file_string(&a.to_file_string()).unwrap();
        assert_eq!(a, back);
        assert_ne!(a.fingerprint(), Vocab::build("xyz").unwrap().fingerprint());
    }

    #[test]
    fn vocab_file_errors() {
        assert!(Vocab::from_file_string("<pad>\n<bos>\n<eos>\n<unk>\n").is_err());
        assert!(Vocab::from_file_string("<pad>\n<bos>\n<eos>\n<unk>\nab\n").is_err());
        assert!(Vocab::from_file_string("<pad>\n<bos>\n<eos>\n<unk>\na\na\n").is_err());
        assert!(Vocab::from_file_string("x\n<bos>\n<eos>\n<unk>\na\n").is_err());
    }

    #[test]
    fn sequence_invariants() {
        assert!(TokenSequence::new(vec![BOS, 4, EOS, PAD, PAD]).validate(6).is_ok());
        assert!(TokenSequence::new(vec![BOS, 4, EOS, 5]).validate(6).is_err());
        assert!(TokenSequence::new(vec![4, BOS]).validate(6).is_err());
        assert!(TokenSequence::new(vec![BOS, 6]).validate(6).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn strings_over_the_alphabet_round_trip(s in "[a-e ,.!]{0,40}") {
            let v = Vocab::build("abcde ,.!").unwrap();
            let seq = v.encode(&s);
            prop_assert!(seq.validate(v.len()).is_ok());
            prop_assert_eq!(v.decode(&seq.ids).unwrap(), s);
        }
    }
}
