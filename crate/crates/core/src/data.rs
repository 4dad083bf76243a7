//! Tokenized sequence collections with provenance, their text persistence, and
//! padded next-token batches.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, Vocab, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    Real,
    Synthetic,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Provenance::Real),
            "synthetic" => Ok(Provenance::Synthetic),
            other => Err(Error::Input(format!("unknown provenance tag `{other}`"))),
        }
    }
}

/// Sequences of one vocabulary, each tagged real or synthetic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    sequences: Vec<TokenSequence>,
    provenance: Vec<Provenance>,
    vocab_fingerprint: String,
}

impl Dataset {
    pub fn new(vocab: &Vocab) -> Self {
        Dataset {
            sequences: Vec::new(),
            provenance: Vec::new(),
            vocab_fingerprint: vocab.fingerprint(),
        }
    }

    /// Encodes each line, truncating to `max_len` ids.
    pub fn from_lines<'a>(
        vocab: &Vocab,
        lines: impl IntoIterator<Item = &'a str>,
        tag: Provenance,
        max_len: usize,
    ) -> Self {
        let mut ds = Dataset::new(vocab);
        for line in lines {
            ds.push(vocab.encode(line).truncated(max_len), tag);
        }
        ds
    }

    pub fn push(&mut self, seq: TokenSequence, tag: Provenance) {
        self.sequences.push(seq);
        self.provenance.push(tag);
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[TokenSequence] {
        &self.sequences
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn vocab_fingerprint(&self) -> &str {
        &self.vocab_fingerprint
    }

    pub fn count(&self, tag: Provenance) -> usize {
        self.provenance.iter().filter(|&&p| p == tag).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TokenSequence, Provenance)> {
        self.sequences.iter().zip(self.provenance.iter().copied())
    }

    /// Number of predicted positions over all sequences.
    pub fn target_count(&self) -> usize {
        self.sequences.iter().map(predicted_end).sum()
    }

    /// First `n` sequences.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Dataset {
            sequences: self.sequences[..n].to_vec(),
            provenance: self.provenance[..n].to_vec(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
        }
    }

    /// Splits off the last `ceil(len * fraction)` sequences (at least one,
    /// never all) as a held-out set.
    pub fn split_tail(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if self.len() < 2 {
            return Err(Error::Input("need at least two sequences to split".into()));
        }
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Parameter(format!("split fraction {fraction} not in (0, 1)")));
        }
        let held = ((self.len() as f64 * fraction).ceil() as usize).clamp(1, self.len() - 1);
        let cut = self.len() - held;
        let part = |r: std::ops::Range<usize>| Dataset {
            sequences: self.sequences[r.clone()].to_vec(),
            provenance: self.provenance[r].to_vec(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
        };
        Ok((part(0..cut), part(cut..self.len())))
    }

    /// Writes one decoded sequence per line to `text_path` and the line-aligned
    /// provenance tags to `tag_path`.
    pub fn save(&self, vocab: &Vocab, text_path: &Path, tag_path: &Path) -> Result<()> {
        self.check_vocab(vocab)?;
        let mut text = String::new();
        let mut tags = String::new();
        for (seq, tag) in self.iter() {
            text.push_str(&vocab.decode(&seq.ids)?);
            text.push('\n');
            tags.push_str(tag.as_str());
            tags.push('\n');
        }
        std::fs::write(text_path, text).map_err(|e| Error::file(text_path, e))?;
        std::fs::write(tag_path, tags).map_err(|e| Error::file(tag_path, e))?;
        Ok(())
    }

    pub fn load(vocab: &Vocab, text_path: &Path, tag_path: &Path, max_len: usize) -> Result<Self> {
        let text = std::fs::read_to_string(text_path).map_err(|e| Error::file(text_path, e))?;
        let tags = std::fs::read_to_string(tag_path).map_err(|e| Error::file(tag_path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        let tags: Vec<&str> = tags.lines().collect();
        if lines.len() != tags.len() {
            return Err(Error::Input(format!(
                "{} has {} lines but {} has {}",
                text_path.display(),
                lines.len(),
                tag_path.display(),
                tags.len()
            )));
        }
        let mut ds = Dataset::new(vocab);
        for (line, tag) in lines.into_iter().zip(tags) {
            ds.push(vocab.encode(line).truncated(max_len), tag.parse()?);
        }
        Ok(ds)
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        if self.vocab_fingerprint != vocab.fingerprint() {
            return Err(Error::Validation(vec![format!(
                "dataset vocabulary {} does not match {}",
                self.vocab_fingerprint,
                vocab.fingerprint()
            )]));
        }
        Ok(())
    }

    pub(crate) fn from_parts(
        sequences: Vec<TokenSequence>,
        provenance: Vec<Provenance>,
        vocab_fingerprint: String,
    ) -> Self {
        debug_assert_eq!(sequences.len(), provenance.len());
        Dataset {
            sequences,
            provenance,
            vocab_fingerprint,
        }
    }
}

/// Number of predicted positions of `s`: targets run up to and including the
/// first EOS (or the last id when there is none); the PAD tail is not predicted.
pub fn predicted_end(s: &TokenSequence) -> usize {
    match s.ids.iter().position(|&id| id == EOS) {
        Some(eos) => eos,
        None => s.len().saturating_sub(1),
    }
}

/// Right-padded next-token batch: `inputs[b, t]` predicts `targets[b, t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    /// `None` past the first EOS or the end of the sequence.
    pub targets: Vec<Option<usize>>,
}

impl Batch {
    pub fn from_sequences(seqs: &[&TokenSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if let Some(short) = seqs.iter().find(|s| s.len() < 2) {
            return Err(Error::Length {
                len: short.len(),
                detail: "next-token loss needs at least 2 tokens".into(),
            });
        }
        let seq = seqs.iter().map(|s| s.len()).max().unwrap_or(0) - 1;
        let batch = seqs.len();
        let mut inputs = vec![PAD; batch * seq];
        let mut targets = vec![None; batch * seq];
        for (b, s) in seqs.iter().enumerate() {
            let end = predicted_end(s);
            for t in 0..s.len() - 1 {
                inputs[b * seq + t] = s.ids[t];
                if t < end {
                    targets[b * seq + t] = Some(s.ids[t + 1]);
                }
            }
        }
        Ok(Batch {
            batch,
            seq,
            inputs,
            targets,
        })
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

/// Epoch-based sampler over a dataset.
///
/// Indices are first put in a canonical order (by token ids), so the batches
/// drawn for a seed depend only on the multiset of sequences, never on the
/// order in which the dataset lists them.
pub struct Batcher<'a> {
    data: &'a Dataset,
    canonical: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl<'a> Batcher<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Input("cannot sample batches from an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        let mut canonical: Vec<usize> = (0..data.len()).collect();
        canonical.sort_by(|&a, &b| data.sequences[a].cmp(&data.sequences[b]));
        Ok(Batcher {
            data,
            order: Vec::new(),
            canonical,
            cursor: 0,
            batch_size: batch_size.min(data.len()),
        })
    }

    pub fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let mut picked = Vec::with_capacity(self.batch_size);
        while picked.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.order = self.canonical.clone();
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            picked.push(&self.data.sequences[self.order[self.cursor]]);
            self.cursor += 1;
        }
        Batch::from_sequences(&picked)
    }
}

/// Deterministic chunks of `batch_size` in dataset order, for evaluation.
pub fn eval_batches(data: &Dataset, batch_size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
    data.sequences.chunks(batch_size.max(1)).map(|chunk| {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        Batch::from_sequences(&refs)
    })
}
