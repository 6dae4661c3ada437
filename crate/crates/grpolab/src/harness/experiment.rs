//! One experiment, end to end: build the world from a config, warm-start the
//! policy, train each configured reward mode into its own subdirectory, and
//! leave behind a run directory that is self-describing and re-checkable.
//!
//! Directory layout:
//!
//! ```text
//! out/
//!   config.copy        verbatim input configuration
//!   corpus.txt(.split) prompts and the heldout assignment
//!   channel.txt        emission model
//!   pretrained.bin     the shared warm start
//!   eval_baseline.csv  heldout evaluation of the warm start
//!   report.csv         baseline + per-mode heldout aggregates
//!   <mode>/            one per entry in run.modes
//!     metrics.jsonl    one update-level record per line
//!     detail.jsonl     one rollout-level record per line
//!     eval_<step>.csv  heldout evaluation every eval.every updates
//!     checkpoint_<step>.bin  periodic checkpoints
//!     checkpoint_final.bin   the trained policy
//!     eval_final.csv   heldout evaluation of the trained policy
//! ```
//!
//! A failure at any stage writes a `FAILED` marker with the error text into
//! the run directory before the error propagates.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::asr_sim::AsrChannelModel;
use crate::error::{Error, Result};
use crate::fsio;
use crate::grpo::{self, RolloutDetail, TrainSink, UpdateMetrics};
use crate::harness::compare::{write_report, ReportRow};
use crate::harness::config::ExperimentConfig;
use crate::harness::evaluate::{evaluate, write_eval_csv, DecodeMode};
use crate::policy::PolicyModel;
use crate::reward::RewardConfig;
use crate::seqcore::{PromptCorpus, Split};

/// Streams training logs into a run directory and evaluates on a schedule.
///
/// Log lines go to `*.jsonl.tmp` files that only move to their final names on
/// [`FileSink::finish`], so a crashed run never leaves a plausible-looking
/// complete log behind.
pub struct FileSink<'a> {
    dir: PathBuf,
    metrics: BufWriter<File>,
    details: BufWriter<File>,
    eval_every: usize,
    decode: DecodeMode,
    eval_seed: u64,
    corpus: &'a PromptCorpus,
    channel: &'a AsrChannelModel,
    reward: &'a RewardConfig,
}

impl<'a> FileSink<'a> {
    pub fn new(
        dir: impl AsRef<Path>,
        eval_every: usize,
        decode: DecodeMode,
        eval_seed: u64,
        corpus: &'a PromptCorpus,
        channel: &'a AsrChannelModel,
        reward: &'a RewardConfig,
    ) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fsio::create_dir_all(&dir)?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            Ok(BufWriter::new(
                File::create(&path).map_err(|e| Error::io(&path, e))?,
            ))
        };
        Ok(FileSink {
            metrics: open("metrics.jsonl.tmp")?,
            details: open("detail.jsonl.tmp")?,
            dir,
            eval_every,
            decode,
            eval_seed,
            corpus,
            channel,
            reward,
        })
    }

    /// Flushes and promotes the temporary logs to their real names.
    pub fn finish(mut self) -> Result<()> {
        self.metrics
            .flush()
            .map_err(|e| Error::io(self.dir.join("metrics.jsonl.tmp"), e))?;
        self.details
            .flush()
            .map_err(|e| Error::io(self.dir.join("detail.jsonl.tmp"), e))?;
        drop(self.metrics);
        drop(self.details);
        for name in ["metrics.jsonl", "detail.jsonl"] {
            let tmp = self.dir.join(format!("{name}.tmp"));
            let real = self.dir.join(name);
            std::fs::rename(&tmp, &real).map_err(|e| Error::io(&real, e))?;
        }
        Ok(())
    }
}

impl TrainSink for FileSink<'_> {
    fn on_update(
        &mut self,
        metrics: &UpdateMetrics,
        details: &[RolloutDetail],
        model: &PolicyModel,
    ) -> Result<()> {
        let mpath = self.dir.join("metrics.jsonl.tmp");
        let line = serde_json::to_string(metrics)
            .map_err(|e| Error::Run(format!("could not encode metrics: {e}")))?;
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(&mpath, e))?;
        let dpath = self.dir.join("detail.jsonl.tmp");
        for d in details {
            let line = serde_json::to_string(d)
                .map_err(|e| Error::Run(format!("could not encode detail: {e}")))?;
            writeln!(self.details, "{line}").map_err(|e| Error::io(&dpath, e))?;
        }
        if self.eval_every > 0 && metrics.step.is_multiple_of(self.eval_every) {
            let report = evaluate(
                model,
                self.corpus,
                Split::Heldout,
                self.channel,
                self.reward,
                self.decode,
                self.eval_seed,
            )?;
            write_eval_csv(&report, self.dir.join(format!("eval_{}.csv", metrics.step)))?;
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, step: usize, model: &PolicyModel) -> Result<()> {
        model.save(self.dir.join(format!("checkpoint_{step}.bin")))
    }
}

/// Reads a metrics log (one JSON record per line).
pub fn read_metrics_log(path: impl AsRef<Path>) -> Result<Vec<UpdateMetrics>> {
    let path = path.as_ref();
    let text = fsio::read_to_string(path)?;
    let mut metrics = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: UpdateMetrics =
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        metrics.push(m);
    }
    Ok(metrics)
}

/// Runs the configured experiment into `out_dir`. `raw_config` is the exact
/// text the user supplied (or the rendered defaults); it is preserved
/// verbatim as `config.copy`.
pub fn run_experiment(
    config: &ExperimentConfig,
    raw_config: &str,
    out_dir: impl AsRef<Path>,
) -> Result<()> {
    let out_dir = out_dir.as_ref();
    config.validate()?;
    fsio::create_dir_all(out_dir)?;
    let result = run_experiment_inner(config, raw_config, out_dir);
    if let Err(e) = &result {
        let _ = fsio::write_atomic(out_dir.join("FAILED"), format!("{e}\n").as_bytes());
    }
    result
}

fn run_experiment_inner(
    config: &ExperimentConfig,
    raw_config: &str,
    out_dir: &Path,
) -> Result<()> {
    {
        let mut seen = Vec::new();
        for mode in &config.run.modes {
            if seen.contains(mode) {
                return Err(Error::config(format!(
                    "run.modes lists '{}' twice",
                    mode.as_str()
                )));
            }
            seen.push(*mode);
        }
    }
    fsio::write_atomic(out_dir.join("config.copy"), raw_config.as_bytes())?;

    let corpus = config.build_corpus()?;
    corpus.write(out_dir.join("corpus.txt"))?;
    let channel = config.build_channel()?;
    channel.save(out_dir.join("channel.txt"))?;

    let pretrained = config.pretrained_policy(&corpus, &channel)?;
    pretrained.save(out_dir.join("pretrained.bin"))?;

    let baseline = evaluate(
        &pretrained,
        &corpus,
        Split::Heldout,
        &channel,
        &config.reward,
        config.eval.decode,
        config.eval.seed,
    )?;
    write_eval_csv(&baseline, out_dir.join("eval_baseline.csv"))?;

    let mut report_rows = vec![ReportRow {
        run: "baseline".into(),
        corpus_cer: baseline.corpus_cer,
        mean_nll_per_token: baseline.mean_nll_per_token,
        mean_reward: baseline.mean_reward,
    }];

    for &mode in &config.run.modes {
        let mode_dir = out_dir.join(mode.as_str());
        let reward = RewardConfig {
            mode,
            ..config.reward
        };
        let mut sink = FileSink::new(
            &mode_dir,
            config.eval.every,
            config.eval.decode,
            config.eval.seed,
            &corpus,
            &channel,
            &reward,
        )?;
        let (final_model, _) = grpo::train(
            pretrained.clone(),
            &corpus,
            &channel,
            &reward,
            &config.grpo,
            &mut sink,
        )?;
        sink.finish()?;
        final_model.save(mode_dir.join("checkpoint_final.bin"))?;
        let final_eval = evaluate(
            &final_model,
            &corpus,
            Split::Heldout,
            &channel,
            &reward,
            config.eval.decode,
            config.eval.seed,
        )?;
        write_eval_csv(&final_eval, mode_dir.join("eval_final.csv"))?;
        report_rows.push(ReportRow {
            run: mode.as_str().into(),
            corpus_cer: final_eval.corpus_cer,
            mean_nll_per_token: final_eval.mean_nll_per_token,
            mean_reward: final_eval.mean_reward,
        });
    }

    write_report(&report_rows, out_dir.join("report.csv"))
}
