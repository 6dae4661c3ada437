//! Heldout (or train-split) evaluation: decode one hypothesis per prompt,
//! push it through the channel and reward head, aggregate.

use std::path::Path;

use crate::asr_sim::AsrChannelModel;
use crate::editdist;
use crate::error::{Error, Result};
use crate::fsio;
use crate::policy::PolicyModel;
use crate::reward::{score_rollout_full, RewardConfig};
use crate::seqcore::{PromptCorpus, SeededRng, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Argmax token at every step; deterministic.
    Greedy,
    /// One draw at temperature 1, seeded per prompt id so rows do not depend
    /// on evaluation order.
    Sampled,
}

impl DecodeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Sampled => "sampled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "sampled" => Ok(DecodeMode::Sampled),
            other => Err(Error::config(format!(
                "unknown decode mode '{other}' (expected greedy or sampled)"
            ))),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One prompt's evaluation record. `distance` and `ref_len` are raw integer
/// counts so the corpus error rate can be recomputed exactly from the rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub prompt_id: usize,
    pub ref_len: usize,
    pub hyp_len: usize,
    pub distance: usize,
    pub cer: f64,
    pub nll_per_token: f64,
    pub nll_used: f64,
    pub r_cer: f64,
    pub r_nll: f64,
    pub r_combined: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Total edit distance over total reference length, not a mean of rates.
    pub corpus_cer: f64,
    pub mean_nll_per_token: f64,
    pub mean_reward: f64,
    pub rows: Vec<EvalRow>,
}

/// Decodes every prompt in `split` once and scores the results.
pub fn evaluate(
    model: &PolicyModel,
    corpus: &PromptCorpus,
    split: Split,
    channel: &AsrChannelModel,
    reward_config: &RewardConfig,
    decode: DecodeMode,
    seed: u64,
) -> Result<EvalReport> {
    let base = SeededRng::new(seed);
    let mut rows = Vec::new();
    for (prompt_id, prompt) in corpus.iter_split(split) {
        let rollout = match decode {
            DecodeMode::Greedy => model.greedy(prompt)?,
            DecodeMode::Sampled => {
                let mut rng = base.split(prompt_id as u64);
                model.sample(prompt, 1.0, &mut rng)?
            }
        };
        let hypothesis = rollout.content_output();
        let scored = score_rollout_full(reward_config, channel, prompt, &hypothesis)?;
        rows.push(EvalRow {
            prompt_id,
            ref_len: prompt.len(),
            hyp_len: hypothesis.len(),
            distance: scored.distance,
            cer: scored.breakdown.cer,
            nll_per_token: scored.nll_per_token,
            nll_used: scored.breakdown.nll_used,
            r_cer: scored.breakdown.r_cer,
            r_nll: scored.breakdown.r_nll,
            r_combined: scored.breakdown.r_combined,
        });
    }
    if rows.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "evaluation split {split:?} is empty"
        )));
    }
    let corpus_cer = editdist::corpus_cer_from_counts(
        rows.iter().map(|r| Ok((r.distance, r.ref_len))),
    )?;
    let n = rows.len() as f64;
    let mean_nll_per_token = rows.iter().map(|r| r.nll_per_token).sum::<f64>() / n;
    let mean_reward = rows.iter().map(|r| r.r_combined).sum::<f64>() / n;
    Ok(EvalReport {
        corpus_cer,
        mean_nll_per_token,
        mean_reward,
        rows,
    })
}

pub const EVAL_CSV_HEADER: &str =
    "prompt_id,ref_len,hyp_len,distance,cer,nll_per_token,nll_used,r_cer,r_nll,r_combined";

/// Writes the per-prompt rows as CSV. Floats use shortest round-trip
/// formatting, so parsing the file back loses nothing.
pub fn write_eval_csv(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::with_capacity(64 * (report.rows.len() + 1));
    out.push_str(EVAL_CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.prompt_id,
            r.ref_len,
            r.hyp_len,
            r.distance,
            r.cer,
            r.nll_per_token,
            r.nll_used,
            r.r_cer,
            r.r_nll,
            r.r_combined
        ));
    }
    fsio::write_atomic(path, out.as_bytes())
}

/// Reads rows written by [`write_eval_csv`].
pub fn read_eval_csv(path: impl AsRef<Path>) -> Result<Vec<EvalRow>> {
    let path = path.as_ref();
    let text = fsio::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == EVAL_CSV_HEADER => {}
        _ => return Err(Error::parse(path, 1, "missing evaluation CSV header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected 10 fields, found {}", fields.len()),
            ));
        }
        let pu = |j: usize| -> Result<usize> {
            fields[j]
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("bad integer '{}'", fields[j])))
        };
        let pf = |j: usize| -> Result<f64> {
            fields[j]
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("bad number '{}'", fields[j])))
        };
        rows.push(EvalRow {
            prompt_id: pu(0)?,
            ref_len: pu(1)?,
            hyp_len: pu(2)?,
            distance: pu(3)?,
            cer: pf(4)?,
            nll_per_token: pf(5)?,
            nll_used: pf(6)?,
            r_cer: pf(7)?,
            r_nll: pf(8)?,
            r_combined: pf(9)?,
        });
    }
    Ok(rows)
}
