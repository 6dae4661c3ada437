//! Autoregressive categorical policy over speech tokens, with exact gradients.
//!
//! At output step `t` the model conditions on three discrete facts: the prompt
//! token aligned to the current frame (`prompt[t / frame_rate]`, or a
//! dedicated "exhausted" row once the prompt runs out), the within-frame phase
//! (`t mod frame_rate`), and the previously emitted token (a dedicated start
//! row at `t = 0`). Their embeddings plus a linear recurrence over the hidden
//! state feed a tanh nonlinearity and a linear head:
//!
//! ```text
//! pre_t  = P[ctx_t] + Phi[phase_t] + E[prev_t] + R h_{t-1} + b
//! h_t    = tanh(pre_t)
//! logits = W h_t + c
//! ```
//!
//! Log-probabilities are exact log-softmax values, and gradients are exact
//! backpropagation through the recurrence (no sampling in the gradient
//! itself), so finite-difference checks agree to numerical precision. The
//! whole parameter vector is one flat `Vec<f64>` with a documented layout,
//! which keeps snapshots, checkpoints, and optimizer state trivial.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::asr_sim::{teacher_encode, AsrChannelModel};
use crate::error::{Error, Result};
use crate::fsio;
use crate::seqcore::{
    require_same_vocab, PromptCorpus, SeededRng, Split, TokenId, TokenSequence, Vocabulary,
};

/// Architecture hyperparameters. Parameter count is a pure function of these.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDims {
    pub text_vocab: Vocabulary,
    pub speech_vocab: Vocabulary,
    /// Speech tokens per text token; aligns output steps to prompt positions.
    pub frame_rate: usize,
    pub hidden: usize,
    /// Hard cap on rollout length, end token included.
    pub max_len: usize,
}

impl PolicyDims {
    pub fn validate(&self) -> Result<()> {
        if self.frame_rate == 0 {
            return Err(Error::config("frame_rate must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden width must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len must be at least 1"));
        }
        let count = self.param_count();
        if count > 50_000 {
            return Err(Error::config(format!(
                "{count} parameters exceeds the 50k desk-scale budget"
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        layout(self).total
    }
}

/// Offsets of the parameter blocks inside the flat vector, in order:
/// prompt-context rows, phase rows, previous-token rows, recurrence matrix,
/// hidden bias, output weight, output bias.
#[derive(Debug, Clone, Copy)]
struct Layout {
    p_ctx: usize,
    phi: usize,
    e_prev: usize,
    r: usize,
    b: usize,
    w: usize,
    c: usize,
    total: usize,
}

fn layout(dims: &PolicyDims) -> Layout {
    let t = dims.text_vocab.size();
    let s = dims.speech_vocab.size();
    let h = dims.hidden;
    let k = dims.frame_rate;
    let p_ctx = 0;
    let phi = p_ctx + (t + 1) * h;
    let e_prev = phi + k * h;
    let r = e_prev + (s + 1) * h;
    let b = r + h * h;
    let w = b + h;
    let c = w + s * h;
    let total = c + s;
    Layout {
        p_ctx,
        phi,
        e_prev,
        r,
        b,
        w,
        c,
        total,
    }
}

/// The generator. Cloning snapshots the parameters; the clone is fully
/// isolated from later updates to the original.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    dims: PolicyDims,
    params: Vec<f64>,
}

impl PolicyModel {
    /// All-zero parameters: every conditional is exactly uniform.
    pub fn zeros(dims: PolicyDims) -> Result<Self> {
        dims.validate()?;
        let n = dims.param_count();
        Ok(PolicyModel {
            dims,
            params: vec![0.0; n],
        })
    }

    /// Uniform init in `[-scale, scale]`; breaks the symmetry that keeps an
    /// all-zero model's gradients degenerate.
    pub fn random_init(dims: PolicyDims, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::config(format!("init scale {scale} must be positive")));
        }
        let mut model = PolicyModel::zeros(dims)?;
        for p in &mut model.params {
            *p = (rng.f64() * 2.0 - 1.0) * scale;
        }
        Ok(model)
    }

    pub fn dims(&self) -> &PolicyDims {
        &self.dims
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// SHA-256 over the little-endian parameter bytes; used to audit that
    /// snapshots meant to stay frozen actually did.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            use std::fmt::Write as _;
            let _ = write!(hex, "{byte:02x}");
        }
        hex
    }

    fn check_prompt(&self, prompt: &TokenSequence) -> Result<()> {
        require_same_vocab("policy prompt", prompt.vocab(), &self.dims.text_vocab)
    }

    fn check_output(&self, output: &TokenSequence) -> Result<()> {
        require_same_vocab("policy output", output.vocab(), &self.dims.speech_vocab)
    }

    /// Row indices consumed at step `t`.
    fn step_rows(&self, prompt: &[TokenId], prev: Option<TokenId>, t: usize) -> (usize, usize, usize) {
        let k = self.dims.frame_rate;
        let ctx = match prompt.get(t / k) {
            Some(&tok) => tok as usize,
            None => self.dims.text_vocab.size(),
        };
        let phase = t % k;
        let prev_row = match prev {
            Some(tok) => tok as usize,
            None => self.dims.speech_vocab.size(),
        };
        (ctx, phase, prev_row)
    }

    /// One forward step: fills `h` (tanh state) and `logits`.
    fn step_forward(
        &self,
        rows: (usize, usize, usize),
        h_prev: Option<&[f64]>,
        h: &mut [f64],
        logits: &mut [f64],
    ) {
        let lay = layout(&self.dims);
        let hd = self.dims.hidden;
        let s = self.dims.speech_vocab.size();
        let p = &self.params;
        let (ctx, phase, prev_row) = rows;

        for i in 0..hd {
            let mut pre = p[lay.p_ctx + ctx * hd + i]
                + p[lay.phi + phase * hd + i]
                + p[lay.e_prev + prev_row * hd + i]
                + p[lay.b + i];
            if let Some(hp) = h_prev {
                let row = &p[lay.r + i * hd..lay.r + (i + 1) * hd];
                for (w_ij, hp_j) in row.iter().zip(hp) {
                    pre += w_ij * hp_j;
                }
            }
            h[i] = pre.tanh();
        }
        for (si, logit) in logits.iter_mut().enumerate().take(s) {
            let row = &p[lay.w + si * hd..lay.w + (si + 1) * hd];
            let mut acc = p[lay.c + si];
            for (w_sj, h_j) in row.iter().zip(h.iter()) {
                acc += w_sj * h_j;
            }
            *logit = acc;
        }
    }

    /// Exact per-token log-probabilities of `output` given `prompt`, no
    /// temperature. Empty output scores to an empty list.
    pub fn log_prob(&self, prompt: &TokenSequence, output: &TokenSequence) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        self.check_output(output)?;
        let mut grad_sink = Vec::new();
        self.grad_with_weights_impl(prompt.tokens(), output.tokens(), None, &mut grad_sink)
    }

    /// Full next-token log-distribution after `prefix`. Sums to one in
    /// probability space; exposed for normalization audits and diagnostics.
    pub fn next_token_log_probs(
        &self,
        prompt: &TokenSequence,
        prefix: &TokenSequence,
    ) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        self.check_output(prefix)?;
        let hd = self.dims.hidden;
        let s = self.dims.speech_vocab.size();
        let mut h_prev: Option<Vec<f64>> = None;
        let mut h = vec![0.0; hd];
        let mut logits = vec![0.0; s];
        let mut prev = None;
        for (t, &tok) in prefix.tokens().iter().enumerate() {
            let rows = self.step_rows(prompt.tokens(), prev, t);
            self.step_forward(rows, h_prev.as_deref(), &mut h, &mut logits);
            h_prev = Some(h.clone());
            prev = Some(tok);
        }
        let t = prefix.len();
        let rows = self.step_rows(prompt.tokens(), prev, t);
        self.step_forward(rows, h_prev.as_deref(), &mut h, &mut logits);
        let mut logps = logits;
        log_softmax_in_place(&mut logps);
        Ok(logps)
    }

    /// Draws one rollout at the given sampling temperature. Generation stops
    /// at the end token (included in the output) or at `max_len`; the
    /// `terminated` flag records which.
    ///
    /// `logp_sampled` holds exact log-probabilities under the tempered
    /// distribution actually sampled from; `logp_current` holds the
    /// untempered values the objective uses. `logp_old` and `logp_ref` start
    /// as copies of `logp_current` (at sampling time all three policy views
    /// coincide); the trainer rescores `logp_ref` against its frozen
    /// reference right after sampling.
    pub fn sample(
        &self,
        prompt: &TokenSequence,
        temperature: f64,
        rng: &mut SeededRng,
    ) -> Result<Rollout> {
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::config(format!(
                "sampling temperature {temperature} must be positive (use greedy() for the zero limit)"
            )));
        }
        self.sample_impl(prompt, Some(temperature), rng)
    }

    /// Temperature-zero limit: the argmax token at every step, lowest id on
    /// ties. Deterministic; records untempered log-probabilities in both the
    /// sampled and current slots.
    pub fn greedy(&self, prompt: &TokenSequence) -> Result<Rollout> {
        let mut unused = SeededRng::new(0);
        self.sample_impl(prompt, None, &mut unused)
    }

    fn sample_impl(
        &self,
        prompt: &TokenSequence,
        temperature: Option<f64>,
        rng: &mut SeededRng,
    ) -> Result<Rollout> {
        self.check_prompt(prompt)?;
        let hd = self.dims.hidden;
        let s = self.dims.speech_vocab.size();
        let eos = self.dims.speech_vocab.eos();

        let mut h_prev: Option<Vec<f64>> = None;
        let mut h = vec![0.0; hd];
        let mut logits = vec![0.0; s];
        let mut prev = None;
        let mut output: Vec<TokenId> = Vec::new();
        let mut logp_sampled = Vec::new();
        let mut logp_current = Vec::new();
        let mut terminated = false;

        for t in 0..self.dims.max_len {
            let rows = self.step_rows(prompt.tokens(), prev, t);
            self.step_forward(rows, h_prev.as_deref(), &mut h, &mut logits);

            let mut untempered = logits.clone();
            log_softmax_in_place(&mut untempered);

            let tok = match temperature {
                None => argmax_lowest(&logits) as TokenId,
                Some(tau) => {
                    let mut tempered: Vec<f64> = logits.iter().map(|l| l / tau).collect();
                    log_softmax_in_place(&mut tempered);
                    let u = rng.f64();
                    let mut acc = 0.0;
                    let mut chosen = s - 1;
                    for (i, lp) in tempered.iter().enumerate() {
                        acc += lp.exp();
                        if u < acc {
                            chosen = i;
                            break;
                        }
                    }
                    logp_sampled.push(tempered[chosen]);
                    chosen as TokenId
                }
            };
            if temperature.is_none() {
                logp_sampled.push(untempered[tok as usize]);
            }
            logp_current.push(untempered[tok as usize]);
            output.push(tok);

            if tok == eos {
                terminated = true;
                break;
            }
            h_prev = Some(h.clone());
            prev = Some(tok);
        }

        let output = TokenSequence::new(&self.dims.speech_vocab, output)?;
        Ok(Rollout {
            prompt: prompt.clone(),
            output,
            logp_old: logp_current.clone(),
            logp_ref: logp_current.clone(),
            logp_sampled,
            logp_current,
            terminated,
        })
    }

    /// Forward + exact backward for `sum_t weights[t] * log p(output[t] | ..)`.
    ///
    /// `weights_from_logps` receives the freshly computed per-token log-probs
    /// and returns one weight per token, so callers can derive importance
    /// ratios or KL terms from the same forward pass that the backward pass
    /// reuses. The weighted gradient is accumulated into `grad` (length
    /// `param_count`); the log-probs are returned.
    pub(crate) fn grad_with_weights(
        &self,
        prompt: &TokenSequence,
        output: &[TokenId],
        weights_from_logps: impl FnOnce(&[f64]) -> Vec<f64>,
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        self.grad_with_weights_impl(
            prompt.tokens(),
            output,
            Some(Box::new(weights_from_logps)),
            grad,
        )
    }

    /// Shared forward (and optional backward) over a full output sequence.
    /// With `weights` absent this is just teacher-forced scoring.
    #[allow(clippy::type_complexity)]
    fn grad_with_weights_impl(
        &self,
        prompt: &[TokenId],
        output: &[TokenId],
        weights_from_logps: Option<Box<dyn FnOnce(&[f64]) -> Vec<f64> + '_>>,
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        let s = self.dims.speech_vocab.size();
        if let Some(&bad) = output.iter().find(|&&t| (t as usize) >= s) {
            return Err(Error::usage(format!(
                "output token {bad} out of range for the speech vocabulary of size {s}"
            )));
        }
        let hd = self.dims.hidden;
        let n = output.len();

        // Forward, caching what backward needs.
        let mut hs: Vec<f64> = Vec::with_capacity(n * hd);
        let mut probs: Vec<f64> = Vec::with_capacity(n * s);
        let mut rows_used = Vec::with_capacity(n);
        let mut logps = Vec::with_capacity(n);
        let mut h = vec![0.0; hd];
        let mut logits = vec![0.0; s];
        let mut prev = None;
        for (t, &tok) in output.iter().enumerate() {
            let rows = self.step_rows(prompt, prev, t);
            let h_prev = if t == 0 {
                None
            } else {
                Some(&hs[(t - 1) * hd..t * hd])
            };
            self.step_forward(rows, h_prev, &mut h, &mut logits);
            let mut lp = logits.clone();
            log_softmax_in_place(&mut lp);
            logps.push(lp[tok as usize]);
            probs.extend(lp.iter().map(|l| l.exp()));
            hs.extend_from_slice(&h);
            rows_used.push(rows);
            prev = Some(tok);
        }

        let weights = match weights_from_logps {
            Some(f) => f(&logps),
            None => return Ok(logps),
        };
        if weights.len() != n {
            return Err(Error::usage(format!(
                "{} weights for {n} output tokens",
                weights.len()
            )));
        }
        if grad.len() != self.params.len() {
            return Err(Error::usage(format!(
                "gradient buffer of length {} for {} parameters",
                grad.len(),
                self.params.len()
            )));
        }

        // Backward through the recurrence.
        let lay = layout(&self.dims);
        let p = &self.params;
        let mut dh_carry = vec![0.0; hd];
        let mut dpre = vec![0.0; hd];
        for t in (0..n).rev() {
            let tok = output[t] as usize;
            let w_t = weights[t];
            let h_t = &hs[t * hd..(t + 1) * hd];
            let probs_t = &probs[t * s..(t + 1) * s];

            // d logits = w_t * (onehot - softmax); fold the head's
            // contribution straight into dh.
            let mut dh = dh_carry;
            for (si, &pr) in probs_t.iter().enumerate() {
                let dl = w_t * (f64::from(si == tok) - pr);
                grad[lay.c + si] += dl;
                let w_row = &p[lay.w + si * hd..lay.w + (si + 1) * hd];
                for j in 0..hd {
                    grad[lay.w + si * hd + j] += dl * h_t[j];
                    dh[j] += dl * w_row[j];
                }
            }

            for i in 0..hd {
                dpre[i] = dh[i] * (1.0 - h_t[i] * h_t[i]);
            }

            let (ctx, phase, prev_row) = rows_used[t];
            for i in 0..hd {
                let d = dpre[i];
                grad[lay.p_ctx + ctx * hd + i] += d;
                grad[lay.phi + phase * hd + i] += d;
                grad[lay.e_prev + prev_row * hd + i] += d;
                grad[lay.b + i] += d;
            }

            dh_carry = vec![0.0; hd];
            if t > 0 {
                let h_prev = &hs[(t - 1) * hd..t * hd];
                for i in 0..hd {
                    let d = dpre[i];
                    let r_row = &p[lay.r + i * hd..lay.r + (i + 1) * hd];
                    for j in 0..hd {
                        grad[lay.r + i * hd + j] += d * h_prev[j];
                        dh_carry[j] += d * r_row[j];
                    }
                }
            }
        }

        Ok(logps)
    }

    /// Binary checkpoint: a layout header then raw little-endian parameters.
    /// Round-trips bit-exactly.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::with_capacity(40 + self.params.len() * 8);
        bytes.extend_from_slice(b"GLPC");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for v in [
            self.dims.text_vocab.size() as u32,
            self.dims.speech_vocab.size() as u32,
            self.dims.frame_rate as u32,
            self.dims.hidden as u32,
            self.dims.max_len as u32,
        ] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for param in &self.params {
            bytes.extend_from_slice(&param.to_le_bytes());
        }
        fsio::write_atomic(path, &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fsio::read_bytes(path)?;
        let fail = |msg: &str| Error::parse(path, 0, msg);
        if bytes.len() < 36 || &bytes[0..4] != b"GLPC" {
            return Err(fail("not a policy checkpoint"));
        }
        let u32_at = |off: usize| -> u32 {
            u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap())
        };
        if u32_at(4) != 1 {
            return Err(fail("unsupported checkpoint version"));
        }
        let text = u32_at(8) as usize;
        let speech = u32_at(12) as usize;
        let frame_rate = u32_at(16) as usize;
        let hidden = u32_at(20) as usize;
        let max_len = u32_at(24) as usize;
        let count = u64::from_le_bytes(bytes[28..36].try_into().unwrap()) as usize;
        let dims = PolicyDims {
            text_vocab: Vocabulary::text(text)?,
            speech_vocab: Vocabulary::speech(speech)?,
            frame_rate,
            hidden,
            max_len,
        };
        dims.validate()
            .map_err(|e| fail(&format!("bad checkpoint header: {e}")))?;
        if count != dims.param_count() {
            return Err(fail(&format!(
                "checkpoint declares {count} parameters, layout requires {}",
                dims.param_count()
            )));
        }
        if bytes.len() != 36 + count * 8 {
            return Err(fail(&format!(
                "expected {} bytes of parameters, found {}",
                count * 8,
                bytes.len() - 36
            )));
        }
        let params = bytes[36..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(PolicyModel { dims, params })
    }
}

/// One sampled generation with everything the trainer needs to score it
/// later: the token path and per-token log-probabilities under the sampling
/// distribution, the current policy, the update-start snapshot, and the
/// frozen reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub prompt: TokenSequence,
    /// Raw emitted tokens; ends with the end token iff `terminated`.
    pub output: TokenSequence,
    pub logp_sampled: Vec<f64>,
    pub logp_current: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    /// True when generation stopped at the end token rather than the cap.
    pub terminated: bool,
}

impl Rollout {
    /// Output with a single trailing end token stripped: what the channel
    /// scores. The end token can only ever be final (sampling stops on it).
    pub fn content_output(&self) -> TokenSequence {
        let toks = self.output.tokens();
        let eos = self.output.vocab().eos();
        let cut = match toks.last() {
            Some(&last) if last == eos => toks.len() - 1,
            _ => toks.len(),
        };
        TokenSequence::new(self.output.vocab(), toks[..cut].to_vec())
            .expect("subsequence of a valid sequence")
    }

    /// Re-scores `logp_ref` under a frozen reference policy.
    pub fn rescore_ref(&mut self, reference: &PolicyModel) -> Result<()> {
        self.logp_ref = reference.log_prob(&self.prompt, &self.output)?;
        Ok(())
    }

    /// Re-scores `logp_current` under (a possibly updated) `model`.
    pub fn rescore_current(&mut self, model: &PolicyModel) -> Result<()> {
        self.logp_current = model.log_prob(&self.prompt, &self.output)?;
        Ok(())
    }
}

/// Supervised warm-start settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Per-position probability of replacing a target content token with a
    /// random content token; the end token is never corrupted.
    pub label_noise: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1500,
            learning_rate: 0.1,
            label_noise: 0.2,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config(format!(
                "pretrain learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::config(format!(
                "label noise {} must lie in [0, 1)",
                self.label_noise
            )));
        }
        Ok(())
    }
}

/// Teacher-forced maximum likelihood on noisy frame codes.
///
/// Each step draws one train prompt, builds its canonical frame encoding plus
/// the end token, corrupts content positions with probability `label_noise`,
/// and takes one plain ascent step on the mean per-token log-likelihood. The
/// injected noise plus a finite step budget leave the warm-started policy
/// deliberately imperfect, which is the headroom later optimization consumes.
/// Deterministic given the rng seed. `steps = 0` returns the model unchanged.
pub fn pretrain_supervised(
    model: PolicyModel,
    corpus: &PromptCorpus,
    channel: &AsrChannelModel,
    config: &PretrainConfig,
    rng: &mut SeededRng,
) -> Result<PolicyModel> {
    config.validate()?;
    require_same_vocab(
        "pretrain text",
        corpus.vocab(),
        &model.dims.text_vocab,
    )?;
    require_same_vocab(
        "pretrain speech",
        channel.speech_vocab(),
        &model.dims.speech_vocab,
    )?;
    if channel.frame_rate() != model.dims.frame_rate {
        return Err(Error::config(format!(
            "channel frame rate {} differs from policy frame rate {}",
            channel.frame_rate(),
            model.dims.frame_rate
        )));
    }
    let train: Vec<&TokenSequence> = corpus.iter_split(Split::Train).map(|(_, e)| e).collect();
    if train.is_empty() {
        return Err(Error::config("pretraining needs a non-empty train split"));
    }

    let mut model = model;
    let eos = model.dims.speech_vocab.eos();
    let content = model.dims.speech_vocab.content_size();
    let mut grad = vec![0.0; model.param_count()];
    for _ in 0..config.steps {
        let prompt = train[rng.index(train.len())];
        let code = teacher_encode(prompt, &model.dims.speech_vocab, model.dims.frame_rate)?;
        let mut target = code.tokens().to_vec();
        target.push(eos);
        for tok in target.iter_mut().take(code.len()) {
            if rng.f64() < config.label_noise {
                *tok = rng.index(content) as TokenId;
            }
        }
        let w = 1.0 / target.len() as f64;
        grad.iter_mut().for_each(|g| *g = 0.0);
        model.grad_with_weights(prompt, &target, |logps| vec![w; logps.len()], &mut grad)?;
        for (p, g) in model.params.iter_mut().zip(&grad) {
            *p += config.learning_rate * g;
        }
    }
    Ok(model)
}

fn log_softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    for l in logits.iter_mut() {
        *l -= lse;
    }
}

fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asr_sim::AsrChannelModel;
    use crate::editdist;
    use crate::seqcore::{generate_corpus, Vocabulary};

    fn dims(text: usize, speech: usize, hidden: usize, max_len: usize) -> PolicyDims {
        PolicyDims {
            text_vocab: Vocabulary::text(text).unwrap(),
            speech_vocab: Vocabulary::speech(speech).unwrap(),
            frame_rate: 2,
            hidden,
            max_len,
        }
    }

    fn tiny_random(seed: u64) -> PolicyModel {
        let mut rng = SeededRng::new(seed);
        PolicyModel::random_init(dims(4, 6, 5, 8), 0.4, &mut rng).unwrap()
    }

    fn prompt(model: &PolicyModel, toks: &[TokenId]) -> TokenSequence {
        TokenSequence::new(&model.dims.text_vocab, toks.to_vec()).unwrap()
    }

    #[test]
    fn zero_model_is_exactly_uniform() {
        let model = PolicyModel::zeros(dims(4, 16, 5, 8)).unwrap();
        let p = prompt(&model, &[0, 1]);
        let out = TokenSequence::new(&model.dims.speech_vocab, vec![3]).unwrap();
        let lp = model.log_prob(&p, &out).unwrap();
        assert_eq!(lp.len(), 1);
        assert!((lp[0] - (-(16f64).ln())).abs() < 1e-15);
    }

    #[test]
    fn log_prob_of_empty_output_is_empty() {
        let model = tiny_random(3);
        let p = prompt(&model, &[0]);
        let empty = TokenSequence::empty(&model.dims.speech_vocab);
        assert!(model.log_prob(&p, &empty).unwrap().is_empty());
    }

    #[test]
    fn length_one_outputs_sum_to_one() {
        let model = tiny_random(5);
        let p = prompt(&model, &[1, 2]);
        let s = model.dims.speech_vocab.size();
        let mut total = 0.0;
        for tok in 0..s as TokenId {
            let out = TokenSequence::new(&model.dims.speech_vocab, vec![tok]).unwrap();
            total += model.log_prob(&p, &out).unwrap()[0].exp();
        }
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sampled_prefixes_stay_normalized() {
        let model = tiny_random(7);
        let p = prompt(&model, &[0, 3, 1]);
        let mut rng = SeededRng::new(11);
        for _ in 0..20 {
            let r = model.sample(&p, 1.0, &mut rng).unwrap();
            for cut in 0..=r.output.len().min(4) {
                let prefix =
                    TokenSequence::new(&model.dims.speech_vocab, r.output.tokens()[..cut].to_vec())
                        .unwrap();
                let lps = model.next_token_log_probs(&p, &prefix).unwrap();
                let total: f64 = lps.iter().map(|l| l.exp()).sum();
                assert!((total - 1.0).abs() < 1e-9);
                assert!(lps.iter().all(|&l| l <= 0.0));
            }
        }
    }

    #[test]
    fn rescoring_reproduces_sampling_logps() {
        let model = tiny_random(9);
        let p = prompt(&model, &[2, 0]);
        let mut rng = SeededRng::new(13);
        for _ in 0..50 {
            let r = model.sample(&p, 1.0, &mut rng).unwrap();
            let again = model.log_prob(&p, &r.output).unwrap();
            for (a, b) in r.logp_current.iter().zip(&again) {
                assert!((a - b).abs() < 1e-9);
            }
            // At temperature 1 the sampling distribution is the policy.
            for (a, b) in r.logp_sampled.iter().zip(&r.logp_current) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(r.logp_current.iter().all(|&l| l <= 0.0));
            assert_eq!(r.logp_current.len(), r.output.len());
        }
    }

    #[test]
    fn tempered_logps_follow_the_tempered_distribution() {
        let model = tiny_random(10);
        let p = prompt(&model, &[1]);
        let mut rng = SeededRng::new(14);
        let tau = 0.7;
        let r = model.sample(&p, tau, &mut rng).unwrap();
        // Log-softmax is shift-invariant, so re-tempering the untempered
        // log-probs reproduces softmax(logits / tau) exactly.
        let empty = TokenSequence::empty(&model.dims.speech_vocab);
        let untempered = model.next_token_log_probs(&p, &empty).unwrap();
        let mut tempered: Vec<f64> = untempered.iter().map(|l| l / tau).collect();
        log_softmax_in_place(&mut tempered);
        let tok = r.output.tokens()[0] as usize;
        assert!((r.logp_sampled[0] - tempered[tok]).abs() < 1e-9);
        assert!((r.logp_current[0] - untempered[tok]).abs() < 1e-12);
    }

    #[test]
    fn greedy_is_deterministic_and_breaks_ties_low() {
        let model = PolicyModel::zeros(dims(4, 6, 5, 8)).unwrap();
        let p = prompt(&model, &[0]);
        let a = model.greedy(&p).unwrap();
        let b = model.greedy(&p).unwrap();
        assert_eq!(a.output, b.output);
        // All-equal logits: the lowest id wins every step, eos never fires.
        assert_eq!(a.output.tokens(), &[0, 0, 0, 0, 0, 0, 0, 0]);
        assert!(!a.terminated);

        let random = tiny_random(21);
        let g1 = random.greedy(&prompt(&random, &[1, 2])).unwrap();
        let g2 = random.greedy(&prompt(&random, &[1, 2])).unwrap();
        assert_eq!(g1.output, g2.output);
    }

    #[test]
    fn near_zero_temperature_matches_greedy() {
        let model = tiny_random(23);
        let p = prompt(&model, &[0, 1]);
        let mut rng = SeededRng::new(5);
        let cold = model.sample(&p, 0.01, &mut rng).unwrap();
        let greedy = model.greedy(&p).unwrap();
        assert_eq!(cold.output, greedy.output);
    }

    #[test]
    fn zero_temperature_is_rejected() {
        let model = tiny_random(2);
        let p = prompt(&model, &[0]);
        let mut rng = SeededRng::new(1);
        assert!(matches!(
            model.sample(&p, 0.0, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn different_seeds_drift_apart() {
        let model = tiny_random(31);
        let p = prompt(&model, &[0, 2]);
        let mut a = SeededRng::new(100);
        let mut b = SeededRng::new(101);
        let outs_a: Vec<_> = (0..10).map(|_| model.sample(&p, 1.0, &mut a).unwrap().output).collect();
        let outs_b: Vec<_> = (0..10).map(|_| model.sample(&p, 1.0, &mut b).unwrap().output).collect();
        assert_ne!(outs_a, outs_b);

        let mut c = SeededRng::new(100);
        let outs_c: Vec<_> = (0..10).map(|_| model.sample(&p, 1.0, &mut c).unwrap().output).collect();
        assert_eq!(outs_a, outs_c);
    }

    #[test]
    fn rollouts_stop_at_eos_or_cap() {
        let model = tiny_random(37);
        let p = prompt(&model, &[3]);
        let mut rng = SeededRng::new(8);
        let eos = model.dims.speech_vocab.eos();
        for _ in 0..200 {
            let r = model.sample(&p, 1.5, &mut rng).unwrap();
            assert!(!r.output.is_empty());
            assert!(r.output.len() <= model.dims.max_len);
            if r.terminated {
                assert_eq!(*r.output.tokens().last().unwrap(), eos);
                assert_eq!(r.content_output().len(), r.output.len() - 1);
            } else {
                assert_eq!(r.output.len(), model.dims.max_len);
            }
            // eos never appears before the final position.
            let body = &r.output.tokens()[..r.output.len() - 1];
            assert!(body.iter().all(|&t| t != eos));
        }
    }

    #[test]
    fn snapshot_isolation() {
        let model = tiny_random(41);
        let snapshot = model.clone();
        let p = prompt(&model, &[1]);
        let out = TokenSequence::new(&model.dims.speech_vocab, vec![2, 4]).unwrap();
        let before = snapshot.log_prob(&p, &out).unwrap();
        let mut mutated = model;
        for v in mutated.params_mut() {
            *v += 0.25;
        }
        let after_snapshot = snapshot.log_prob(&p, &out).unwrap();
        let after_mutated = mutated.log_prob(&p, &out).unwrap();
        assert_eq!(before, after_snapshot);
        assert_ne!(before, after_mutated);
    }

    #[test]
    fn sampling_frequencies_match_log_probs() {
        // Length-1 rollouts: cap at one token, count empirical frequencies.
        let d = PolicyDims {
            max_len: 1,
            ..dims(4, 6, 5, 8)
        };
        let mut rng = SeededRng::new(55);
        let model = PolicyModel::random_init(d, 0.5, &mut rng).unwrap();
        let p = prompt(&model, &[2]);
        let s = model.dims.speech_vocab.size();

        let n = 100_000usize;
        let mut counts = vec![0usize; s];
        let mut draw = SeededRng::new(77);
        for _ in 0..n {
            let r = model.sample(&p, 1.0, &mut draw).unwrap();
            counts[r.output.tokens()[0] as usize] += 1;
        }
        for (tok, &count) in counts.iter().enumerate() {
            let out = TokenSequence::new(&model.dims.speech_vocab, vec![tok as TokenId]).unwrap();
            let prob = model.log_prob(&p, &out).unwrap()[0].exp();
            let freq = count as f64 / n as f64;
            let se = (prob * (1.0 - prob) / n as f64).sqrt();
            assert!(
                (freq - prob).abs() <= 3.0 * se,
                "token {tok}: freq {freq} vs prob {prob} (se {se})"
            );
        }
    }

    #[test]
    fn weighted_gradient_matches_central_differences() {
        let model = tiny_random(61);
        let p = prompt(&model, &[1, 3]);
        let output: Vec<TokenId> = vec![2, 0, 5, 1];
        let weights: Vec<f64> = vec![0.7, -0.3, 1.1, 0.25];

        let mut grad = vec![0.0; model.param_count()];
        model
            .grad_with_weights(&p, &output, |_| weights.clone(), &mut grad)
            .unwrap();

        let f = |m: &PolicyModel| -> f64 {
            let mut sink = vec![0.0; m.param_count()];
            let lps = m
                .grad_with_weights_impl(p.tokens(), &output, None, &mut sink)
                .unwrap();
            lps.iter().zip(&weights).map(|(l, w)| l * w).sum()
        };

        let h = 1e-5;
        let mut perturbed = model.clone();
        for (i, &g) in grad.iter().enumerate() {
            let orig = perturbed.params[i];
            perturbed.params[i] = orig + h;
            let up = f(&perturbed);
            perturbed.params[i] = orig - h;
            let down = f(&perturbed);
            perturbed.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let tol = 1e-8 + 1e-4 * g.abs().max(fd.abs());
            assert!(
                (g - fd).abs() <= tol,
                "param {i}: analytic {g} vs fd {fd}"
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let model = tiny_random(71);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        model.save(&path).unwrap();
        let back = PolicyModel::load(&path).unwrap();
        assert_eq!(model.dims, back.dims);
        assert_eq!(model.params.len(), back.params.len());
        for (a, b) in model.params.iter().zip(&back.params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(model.param_hash(), back.param_hash());
    }

    #[test]
    fn load_rejects_corrupt_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(
            PolicyModel::load(&path),
            Err(Error::Parse { .. })
        ));
    }

    fn pretrain_setup() -> (PolicyModel, PromptCorpus, AsrChannelModel) {
        let text = Vocabulary::text(6).unwrap();
        let speech = Vocabulary::speech(10).unwrap();
        let mut rng = SeededRng::new(5);
        let corpus = generate_corpus(&mut rng, 40, 2, 4, &text)
            .unwrap()
            .with_heldout_tail(8)
            .unwrap();
        let channel = AsrChannelModel::identity(&text, &speech, 2, 1e-4).unwrap();
        let d = PolicyDims {
            text_vocab: text,
            speech_vocab: speech,
            frame_rate: 2,
            hidden: 12,
            max_len: 12,
        };
        let model = PolicyModel::random_init(d, 0.1, &mut rng).unwrap();
        (model, corpus, channel)
    }

    fn heldout_cer(model: &PolicyModel, corpus: &PromptCorpus, channel: &AsrChannelModel) -> f64 {
        let counts = corpus.iter_split(Split::Heldout).map(|(_, prompt)| {
            let r = model.greedy(prompt).unwrap();
            let transcript = channel.transcribe(&r.content_output()).unwrap();
            editdist::measure(prompt, &transcript).map(|m| (m.distance, m.ref_len))
        });
        editdist::corpus_cer_from_counts(counts).unwrap()
    }

    #[test]
    fn pretraining_reduces_heldout_error() {
        let (model, corpus, channel) = pretrain_setup();
        let before = heldout_cer(&model, &corpus, &channel);
        let cfg = PretrainConfig {
            steps: 800,
            learning_rate: 0.2,
            label_noise: 0.1,
        };
        let mut rng = SeededRng::new(17);
        let trained = pretrain_supervised(model, &corpus, &channel, &cfg, &mut rng).unwrap();
        let after = heldout_cer(&trained, &corpus, &channel);
        assert!(
            after < before * 0.7,
            "pretraining did not help: {before} -> {after}"
        );
    }

    #[test]
    fn pretraining_is_deterministic_and_zero_steps_is_identity() {
        let (model, corpus, channel) = pretrain_setup();
        let cfg = PretrainConfig {
            steps: 50,
            learning_rate: 0.2,
            label_noise: 0.3,
        };
        let a = pretrain_supervised(
            model.clone(),
            &corpus,
            &channel,
            &cfg,
            &mut SeededRng::new(9),
        )
        .unwrap();
        let b = pretrain_supervised(
            model.clone(),
            &corpus,
            &channel,
            &cfg,
            &mut SeededRng::new(9),
        )
        .unwrap();
        assert_eq!(a.params, b.params);

        let zero = PretrainConfig { steps: 0, ..cfg };
        let same = pretrain_supervised(
            model.clone(),
            &corpus,
            &channel,
            &zero,
            &mut SeededRng::new(9),
        )
        .unwrap();
        assert_eq!(same.params, model.params);
    }

    #[test]
    fn parameter_budget_is_enforced() {
        let d = PolicyDims {
            text_vocab: Vocabulary::text(64).unwrap(),
            speech_vocab: Vocabulary::speech(64).unwrap(),
            frame_rate: 2,
            hidden: 200,
            max_len: 16,
        };
        assert!(matches!(PolicyModel::zeros(d), Err(Error::Config(_))));
    }
}
