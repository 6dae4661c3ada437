//! Token vocabularies, sequences, prompt corpora, and seeded randomness.
//!
//! Everything downstream treats utterances as dense integer token ids, so the
//! invariants live here: ids are `0..size`, reserved control ids (end token,
//! and optionally more) occupy the top of the range, and every sequence knows
//! which vocabulary it belongs to so cross-vocabulary mistakes surface as
//! errors instead of silent nonsense.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::fsio;

/// Dense token identifier, valid only relative to a [`Vocabulary`].
pub type TokenId = u32;

#[derive(Debug, PartialEq, Eq)]
struct VocabInner {
    name: String,
    size: usize,
    reserved: usize,
}

/// A named token id space of `size` ids, the top `reserved` of which are
/// control tokens. The end-of-sequence token is always the last id; a
/// begin-of-sequence id, when present, sits just below it.
///
/// Cheap to clone (shared internally), compared by content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    inner: Arc<VocabInner>,
}

impl Vocabulary {
    /// `reserved >= 1` (the end token always exists) and at least one content
    /// token must remain below the reserved block.
    pub fn new(name: impl Into<String>, size: usize, reserved: usize) -> Result<Self> {
        let name = name.into();
        if reserved == 0 {
            return Err(Error::config(format!(
                "vocabulary '{name}' needs at least the end-of-sequence token reserved"
            )));
        }
        if size < reserved + 1 {
            return Err(Error::config(format!(
                "vocabulary '{name}' of size {size} leaves no content tokens below {reserved} reserved ids"
            )));
        }
        Ok(Vocabulary {
            inner: Arc::new(VocabInner {
                name,
                size,
                reserved,
            }),
        })
    }

    /// Standard prompt-side vocabulary: `size` ids, end token only.
    pub fn text(size: usize) -> Result<Self> {
        Vocabulary::new("text", size, 1)
    }

    /// Standard generator-side vocabulary: `size` ids, end token only.
    pub fn speech(size: usize) -> Result<Self> {
        Vocabulary::new("speech", size, 1)
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn size(&self) -> usize {
        self.inner.size
    }

    pub fn reserved(&self) -> usize {
        self.inner.reserved
    }

    /// Number of non-control tokens, i.e. ids `0..content_size()`.
    pub fn content_size(&self) -> usize {
        self.inner.size - self.inner.reserved
    }

    /// End-of-sequence id: always the top of the range.
    pub fn eos(&self) -> TokenId {
        (self.inner.size - 1) as TokenId
    }

    pub fn contains(&self, token: TokenId) -> bool {
        (token as usize) < self.inner.size
    }

    pub fn is_content(&self, token: TokenId) -> bool {
        (token as usize) < self.content_size()
    }
}

/// Checks two sequences (or a sequence and a model) agree on the vocabulary.
pub(crate) fn require_same_vocab(context: &str, a: &Vocabulary, b: &Vocabulary) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::usage(format!(
            "{context}: vocabulary mismatch ('{}' size {} vs '{}' size {})",
            a.name(),
            a.size(),
            b.name(),
            b.size()
        )))
    }
}

/// An immutable utterance: token ids validated against one vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    vocab: Vocabulary,
    tokens: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(vocab: &Vocabulary, tokens: Vec<TokenId>) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| !vocab.contains(t)) {
            return Err(Error::usage(format!(
                "token id {bad} out of range for vocabulary '{}' of size {}",
                vocab.name(),
                vocab.size()
            )));
        }
        Ok(TokenSequence {
            vocab: vocab.clone(),
            tokens,
        })
    }

    pub fn empty(vocab: &Vocabulary) -> Self {
        TokenSequence {
            vocab: vocab.clone(),
            tokens: Vec::new(),
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Which half of the corpus an entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

/// A set of prompt utterances with a train/held-out tag per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptCorpus {
    vocab: Vocabulary,
    entries: Vec<TokenSequence>,
    splits: Vec<Split>,
}

impl PromptCorpus {
    pub fn new(
        vocab: &Vocabulary,
        entries: Vec<TokenSequence>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::config("corpus must contain at least one entry"));
        }
        if entries.len() != splits.len() {
            return Err(Error::usage(format!(
                "corpus has {} entries but {} split tags",
                entries.len(),
                splits.len()
            )));
        }
        for e in &entries {
            require_same_vocab("corpus entry", e.vocab(), vocab)?;
        }
        Ok(PromptCorpus {
            vocab: vocab.clone(),
            entries,
            splits,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, index: usize) -> &TokenSequence {
        &self.entries[index]
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.splits[index]
    }

    /// Entries of one split, with their corpus-wide indices.
    pub fn iter_split(&self, split: Split) -> impl Iterator<Item = (usize, &TokenSequence)> {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(i, _)| self.splits[*i] == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|s| **s == split).count()
    }

    /// Re-tags the last `heldout` entries as the held-out split and the rest
    /// as train.
    pub fn with_heldout_tail(mut self, heldout: usize) -> Result<Self> {
        if heldout >= self.entries.len() {
            return Err(Error::config(format!(
                "cannot hold out {heldout} of {} entries",
                self.entries.len()
            )));
        }
        let train = self.entries.len() - heldout;
        for (i, s) in self.splits.iter_mut().enumerate() {
            *s = if i < train { Split::Train } else { Split::Heldout };
        }
        Ok(self)
    }

    /// Text serialization: a `vocab_size=<n>` header, then one line of
    /// space-separated token ids per entry. Held-out entry indices go to a
    /// `<path>.split` sidecar, one index per line.
    ///
    /// The header records only the size; readers reconstruct the standard
    /// prompt vocabulary ([`Vocabulary::text`]) of that size.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut body = format!("vocab_size={}\n", self.vocab.size());
        for entry in &self.entries {
            let mut line = String::new();
            for (i, t) in entry.tokens().iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{t}");
            }
            body.push_str(&line);
            body.push('\n');
        }
        fsio::write_atomic(path, body.as_bytes())?;

        let mut sidecar = String::new();
        for (i, s) in self.splits.iter().enumerate() {
            if *s == Split::Heldout {
                let _ = writeln!(sidecar, "{i}");
            }
        }
        fsio::write_atomic(sidecar_path(path), sidecar.as_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fsio::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty corpus file"))?;
        let size: usize = header
            .strip_prefix("vocab_size=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::parse(path, 1, "expected 'vocab_size=<n>' header"))?;
        let vocab = Vocabulary::text(size)?;

        let mut entries = Vec::new();
        for (lineno, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut tokens = Vec::new();
            for field in line.split_whitespace() {
                let t: TokenId = field.parse().map_err(|_| {
                    Error::parse(path, lineno + 1, format!("bad token id '{field}'"))
                })?;
                tokens.push(t);
            }
            entries.push(
                TokenSequence::new(&vocab, tokens)
                    .map_err(|e| Error::parse(path, lineno + 1, e.to_string()))?,
            );
        }

        let mut splits = vec![Split::Train; entries.len()];
        let sidecar = sidecar_path(path);
        if sidecar.exists() {
            let text = fsio::read_to_string(&sidecar)?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let idx: usize = line.parse().map_err(|_| {
                    Error::parse(&sidecar, lineno + 1, format!("bad entry index '{line}'"))
                })?;
                if idx >= splits.len() {
                    return Err(Error::parse(
                        &sidecar,
                        lineno + 1,
                        format!("index {idx} out of range for {} entries", splits.len()),
                    ));
                }
                splits[idx] = Split::Heldout;
            }
        }

        PromptCorpus::new(&vocab, entries, splits)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".split");
    path.with_file_name(name)
}

/// Draws `count` prompts of uniform length in `[min_len, max_len]`, each token
/// uniform over the content range of `vocab` (control ids never appear).
/// All entries start in the train split.
pub fn generate_corpus(
    rng: &mut SeededRng,
    count: usize,
    min_len: usize,
    max_len: usize,
    vocab: &Vocabulary,
) -> Result<PromptCorpus> {
    if count == 0 {
        return Err(Error::config("corpus entry count must be positive"));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::config(format!(
            "invalid prompt length bounds [{min_len}, {max_len}]"
        )));
    }
    let content = vocab.content_size();
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = min_len + rng.index(max_len - min_len + 1);
        let tokens = (0..len)
            .map(|_| rng.index(content) as TokenId)
            .collect::<Vec<_>>();
        entries.push(TokenSequence::new(vocab, tokens)?);
    }
    let splits = vec![Split::Train; count];
    PromptCorpus::new(vocab, entries, splits)
}

/// Deterministic random source: ChaCha8 keyed by a 64-bit seed.
///
/// The same `(seed, stream)` pair yields a bit-identical draw sequence on
/// every platform and every run. Parallel consumers must not share one
/// instance; give each its own via [`SeededRng::split`], which selects an
/// independent ChaCha stream of the same seed and does not depend on how much
/// of the parent has already been consumed.
///
/// Derived quantities (`index`, `f64`, `shuffle`) are implemented here on top
/// of the raw 64-bit output so their draw sequences are part of this crate's
/// contract rather than an upstream library's.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        SeededRng::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        SeededRng { seed, stream, rng }
    }

    /// Independent generator: same seed, distinct stream counter.
    pub fn split(&self, stream: u64) -> Self {
        SeededRng::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `0..n` without modulo bias (rejection sampling).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() needs a non-empty range");
        let n = n as u64;
        let bound = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < bound {
                return (x % n) as usize;
            }
        }
    }

    /// Uniform in `[0, 1)` with 53 random mantissa bits.
    pub fn f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Fisher-Yates shuffle driven by [`SeededRng::index`].
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}
