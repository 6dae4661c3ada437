//! Simulated recognition channel over frame signatures.
//!
//! A speech-token utterance is cut into frames of `frame_rate` consecutive
//! tokens; each complete frame is one of `|V_speech|^k` ordered signatures and
//! any trailing partial frame maps to a single distinguished pad signature.
//! The channel is one row-stochastic emission table over
//! `|V_speech|^k + 1` signatures x `|V_text|` text tokens, smoothed so every
//! probability is at least `smoothing_eps`. Frames are scored independently:
//! transcription takes the per-frame argmax, and teacher-forced NLL scores the
//! n-th truth token against the n-th frame's row (the pad row once frames run
//! out). Per-frame conditional independence is the modeling simplification
//! that keeps the channel exactly computable; the rest of the pipeline never
//! relies on it.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio;
use crate::seqcore::{require_same_vocab, TokenId, TokenSequence, Vocabulary};

/// Row index into the emission table. Interpretable only alongside the
/// channel's speech vocabulary and frame rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSignature(usize);

impl FrameSignature {
    /// Signature of one complete frame: base-`|V_speech|` digits,
    /// most-significant first.
    pub fn of_chunk(chunk: &[TokenId], speech_size: usize) -> Self {
        let mut idx = 0usize;
        for &t in chunk {
            idx = idx * speech_size + t as usize;
        }
        FrameSignature(idx)
    }

    /// The distinguished signature assigned to a trailing partial frame.
    pub fn pad(speech_size: usize, frame_rate: usize) -> Self {
        FrameSignature(speech_size.pow(frame_rate as u32))
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Frame decomposition: `ceil(len / frame_rate)` signatures, the last one the
/// pad signature when the final chunk is short. `frame_rate` must be >= 1.
pub fn frames(speech: &TokenSequence, frame_rate: usize) -> Vec<FrameSignature> {
    assert!(frame_rate >= 1, "frame_rate must be at least 1");
    let size = speech.vocab().size();
    speech
        .tokens()
        .chunks(frame_rate)
        .map(|chunk| {
            if chunk.len() == frame_rate {
                FrameSignature::of_chunk(chunk, size)
            } else {
                FrameSignature::pad(size, frame_rate)
            }
        })
        .collect()
}

/// Canonical frame code for a content text token: its base-`C` digits over the
/// content speech tokens, most-significant first (`C` = content speech count).
/// This fixes which frame "spells" each text token; channel builders put the
/// concentrated emission mass there and trainers use it as the supervised
/// target.
pub fn teacher_frame(
    token: TokenId,
    speech_vocab: &Vocabulary,
    frame_rate: usize,
) -> Result<Vec<TokenId>> {
    let base = speech_vocab.content_size();
    let capacity = base.checked_pow(frame_rate as u32).unwrap_or(usize::MAX);
    let t = token as usize;
    if t >= capacity {
        return Err(Error::config(format!(
            "text token {token} has no frame code: {base} content speech tokens over {frame_rate} positions"
        )));
    }
    let mut digits = vec![0 as TokenId; frame_rate];
    let mut rest = t;
    for d in digits.iter_mut().rev() {
        *d = (rest % base) as TokenId;
        rest /= base;
    }
    Ok(digits)
}

/// Concatenated frame codes for a whole text utterance (no end token).
pub fn teacher_encode(
    text: &TokenSequence,
    speech_vocab: &Vocabulary,
    frame_rate: usize,
) -> Result<TokenSequence> {
    let mut tokens = Vec::with_capacity(text.len() * frame_rate);
    for &t in text.tokens() {
        tokens.extend(teacher_frame(t, speech_vocab, frame_rate)?);
    }
    TokenSequence::new(speech_vocab, tokens)
}

/// Transcription plus teacher-forced channel score for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct AsrScore {
    pub transcript: TokenSequence,
    pub nll_total: f64,
    /// `nll_total / n_tokens`.
    pub nll_per_token: f64,
    /// Truth length the NLL was accumulated over.
    pub n_tokens: usize,
}

/// What shape of emission table a builder produces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChannelKind {
    /// Frame codes decode to their own text token with the mass not claimed
    /// by smoothing; everything else is uniform.
    Identity,
    /// Like identity, but each code leaks `noise` of its mass to the next
    /// content text token (cyclically), creating systematic confusions.
    Confusable { noise: f64 },
}

/// Frame-factorized emission model. Rows are indexed by [`FrameSignature`];
/// every row sums to one and every probability is at least `smoothing_eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct AsrChannelModel {
    text_vocab: Vocabulary,
    speech_vocab: Vocabulary,
    frame_rate: usize,
    smoothing_eps: f64,
    /// Row-major `[n_signatures x text_vocab.size()]`.
    emission: Vec<f64>,
}

impl AsrChannelModel {
    pub fn identity(
        text_vocab: &Vocabulary,
        speech_vocab: &Vocabulary,
        frame_rate: usize,
        smoothing_eps: f64,
    ) -> Result<Self> {
        Self::build(
            text_vocab,
            speech_vocab,
            frame_rate,
            smoothing_eps,
            ChannelKind::Identity,
        )
    }

    pub fn confusable(
        text_vocab: &Vocabulary,
        speech_vocab: &Vocabulary,
        frame_rate: usize,
        smoothing_eps: f64,
        noise: f64,
    ) -> Result<Self> {
        Self::build(
            text_vocab,
            speech_vocab,
            frame_rate,
            smoothing_eps,
            ChannelKind::Confusable { noise },
        )
    }

    pub fn build(
        text_vocab: &Vocabulary,
        speech_vocab: &Vocabulary,
        frame_rate: usize,
        smoothing_eps: f64,
        kind: ChannelKind,
    ) -> Result<Self> {
        let v = text_vocab.size();
        if frame_rate == 0 {
            return Err(Error::config("frame_rate must be at least 1"));
        }
        let n_signatures = speech_vocab
            .size()
            .checked_pow(frame_rate as u32)
            .and_then(|n| n.checked_add(1))
            .filter(|&n| n <= 4_000_000)
            .ok_or_else(|| {
                Error::config(format!(
                    "signature space |V_speech|^k = {}^{frame_rate} is beyond desk scale",
                    speech_vocab.size()
                ))
            })?;
        if !smoothing_eps.is_finite() || smoothing_eps <= 0.0 || smoothing_eps * v as f64 >= 1.0 {
            return Err(Error::config(format!(
                "smoothing_eps {smoothing_eps} must satisfy 0 < eps * |V_text| < 1"
            )));
        }
        if let ChannelKind::Confusable { noise } = kind {
            if !(0.0..=1.0).contains(&noise) {
                return Err(Error::config(format!("noise {noise} must lie in [0, 1]")));
            }
        }

        let uniform = vec![1.0 / v as f64; v];
        let mut emission = Vec::with_capacity(n_signatures * v);
        for _ in 0..n_signatures {
            emission.extend_from_slice(&uniform);
        }

        let content_text = text_vocab.content_size();
        for j in 0..content_text {
            let chunk = teacher_frame(j as TokenId, speech_vocab, frame_rate)?;
            let sig = FrameSignature::of_chunk(&chunk, speech_vocab.size());
            let mut target = vec![0.0; v];
            match kind {
                ChannelKind::Identity => target[j] = 1.0,
                ChannelKind::Confusable { noise } => {
                    target[j] = 1.0 - noise;
                    target[(j + 1) % content_text] += noise;
                }
            }
            let row = smooth_row(&target, smoothing_eps);
            emission[sig.index() * v..(sig.index() + 1) * v].copy_from_slice(&row);
        }

        Ok(AsrChannelModel {
            text_vocab: text_vocab.clone(),
            speech_vocab: speech_vocab.clone(),
            frame_rate,
            smoothing_eps,
            emission,
        })
    }

    /// Assembles a channel from explicit emission rows (signature-major),
    /// validating stochasticity and the smoothing floor.
    pub fn from_rows(
        text_vocab: &Vocabulary,
        speech_vocab: &Vocabulary,
        frame_rate: usize,
        smoothing_eps: f64,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let v = text_vocab.size();
        let expected = speech_vocab.size().pow(frame_rate as u32) + 1;
        if rows.len() != expected {
            return Err(Error::config(format!(
                "expected {expected} emission rows, got {}",
                rows.len()
            )));
        }
        let mut emission = Vec::with_capacity(expected * v);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != v {
                return Err(Error::config(format!(
                    "emission row {i} has {} entries, expected {v}",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "emission row {i} sums to {sum}, not 1"
                )));
            }
            if row.iter().any(|&p| p < smoothing_eps * (1.0 - 1e-9)) {
                return Err(Error::config(format!(
                    "emission row {i} dips below the smoothing floor {smoothing_eps}"
                )));
            }
            emission.extend_from_slice(&row);
        }
        Ok(AsrChannelModel {
            text_vocab: text_vocab.clone(),
            speech_vocab: speech_vocab.clone(),
            frame_rate,
            smoothing_eps,
            emission,
        })
    }

    pub fn text_vocab(&self) -> &Vocabulary {
        &self.text_vocab
    }

    pub fn speech_vocab(&self) -> &Vocabulary {
        &self.speech_vocab
    }

    pub fn frame_rate(&self) -> usize {
        self.frame_rate
    }

    pub fn smoothing_eps(&self) -> f64 {
        self.smoothing_eps
    }

    pub fn n_signatures(&self) -> usize {
        self.speech_vocab.size().pow(self.frame_rate as u32) + 1
    }

    pub fn row(&self, sig: FrameSignature) -> &[f64] {
        let v = self.text_vocab.size();
        &self.emission[sig.index() * v..(sig.index() + 1) * v]
    }

    pub fn frames(&self, speech: &TokenSequence) -> Result<Vec<FrameSignature>> {
        require_same_vocab("frames", speech.vocab(), &self.speech_vocab)?;
        Ok(frames(speech, self.frame_rate))
    }

    /// One text token per frame: the row argmax, lowest id on ties.
    /// Empty speech transcribes to the empty utterance.
    pub fn transcribe(&self, speech: &TokenSequence) -> Result<TokenSequence> {
        let frames = self.frames(speech)?;
        let tokens = frames
            .into_iter()
            .map(|sig| argmax_lowest(self.row(sig)) as TokenId)
            .collect();
        TokenSequence::new(&self.text_vocab, tokens)
    }

    /// Transcript plus exact teacher-forced negative log-likelihood of
    /// `truth`: the n-th truth token is scored against the n-th frame's row,
    /// and against the pad row once frames run out. Length mismatches are
    /// scored, never rejected; frames beyond the truth length contribute only
    /// to the transcript.
    pub fn teacher_forced_nll(
        &self,
        speech: &TokenSequence,
        truth: &TokenSequence,
    ) -> Result<AsrScore> {
        require_same_vocab("teacher_forced_nll truth", truth.vocab(), &self.text_vocab)?;
        if truth.is_empty() {
            return Err(Error::UndefinedMetric(
                "teacher-forced NLL over an empty truth".into(),
            ));
        }
        let frames = self.frames(speech)?;
        let pad = FrameSignature::pad(self.speech_vocab.size(), self.frame_rate);
        let mut nll_total = 0.0;
        for (n, &t) in truth.tokens().iter().enumerate() {
            let sig = frames.get(n).copied().unwrap_or(pad);
            nll_total -= self.row(sig)[t as usize].ln();
        }
        let transcript = self.transcribe(speech)?;
        let n_tokens = truth.len();
        Ok(AsrScore {
            transcript,
            nll_total,
            nll_per_token: nll_total / n_tokens as f64,
            n_tokens,
        })
    }

    /// Text form: one `k=.. vtext=.. vspeech=.. eps=..` header line, then one
    /// emission row per signature in index order (pad row last). Floats use
    /// the shortest representation that parses back bit-exactly.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let v = self.text_vocab.size();
        let mut body = format!(
            "k={} vtext={} vspeech={} eps={}\n",
            self.frame_rate,
            v,
            self.speech_vocab.size(),
            self.smoothing_eps
        );
        for sig in 0..self.n_signatures() {
            let row = &self.emission[sig * v..(sig + 1) * v];
            let mut line = String::new();
            for (i, p) in row.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{p}");
            }
            body.push_str(&line);
            body.push('\n');
        }
        fsio::write_atomic(path, body.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fsio::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty channel file"))?;

        let mut k = None;
        let mut vtext = None;
        let mut vspeech = None;
        let mut eps = None;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::parse(path, 1, format!("bad header field '{field}'")))?;
            match key {
                "k" => k = value.parse::<usize>().ok(),
                "vtext" => vtext = value.parse::<usize>().ok(),
                "vspeech" => vspeech = value.parse::<usize>().ok(),
                "eps" => eps = value.parse::<f64>().ok(),
                other => {
                    return Err(Error::parse(path, 1, format!("unknown header key '{other}'")))
                }
            }
        }
        let (k, vtext, vspeech, eps) = match (k, vtext, vspeech, eps) {
            (Some(k), Some(t), Some(s), Some(e)) => (k, t, s, e),
            _ => {
                return Err(Error::parse(
                    path,
                    1,
                    "header must provide k=, vtext=, vspeech=, eps=",
                ))
            }
        };

        let mut rows = Vec::new();
        for (lineno, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut row = Vec::with_capacity(vtext);
            for field in line.split_whitespace() {
                let p: f64 = field.parse().map_err(|_| {
                    Error::parse(path, lineno + 1, format!("bad probability '{field}'"))
                })?;
                row.push(p);
            }
            rows.push(row);
        }

        let text_vocab = Vocabulary::text(vtext)?;
        let speech_vocab = Vocabulary::speech(vspeech)?;
        AsrChannelModel::from_rows(&text_vocab, &speech_vocab, k, eps, rows)
            .map_err(|e| Error::parse(path, 1, e.to_string()))
    }
}

/// `target * (1 - |row| * eps) + eps` per entry: keeps the row stochastic with
/// an exact floor of `eps`.
fn smooth_row(target: &[f64], eps: f64) -> Vec<f64> {
    let scale = 1.0 - target.len() as f64 * eps;
    target.iter().map(|&p| p * scale + eps).collect()
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = i;
        }
    }
    best
}
