use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use grpolab::asr_sim::AsrChannelModel;
use grpolab::grpo;
use grpolab::harness::config::ExperimentConfig;
use grpolab::harness::{
    compare_runs, correlation_analysis, evaluate, read_detail_log, read_report, write_eval_csv,
    FileSink,
};
use grpolab::policy::PolicyModel;
use grpolab::reward::{RewardConfig, RewardMode};
use grpolab::seqcore::{PromptCorpus, Split};
use grpolab::{Error, Result};

#[derive(Parser)]
#[command(
    name = "grpolab",
    version,
    about = "Desk-scale GRPO training bench: optimize a token policy against a simulated recognition channel"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a prompt corpus and its heldout split.
    GenCorpus {
        /// Destination file (a .split sidecar is written next to it).
        #[arg(long)]
        out: PathBuf,
        /// Configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build the recognition channel's emission model.
    GenChannel {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override channel.kind (identity or confusable).
        #[arg(long)]
        kind: Option<String>,
        /// Override channel.noise.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Warm-start a policy on teacher frame codes.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        channel: PathBuf,
        /// Destination checkpoint.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Optimize a pretrained policy; writes logs and checkpoints into a
    /// directory.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        channel: PathBuf,
        /// Starting checkpoint (from pretrain).
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override reward.mode for this run.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Evaluate a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        channel: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// heldout or train.
        #[arg(long, default_value = "heldout")]
        split: String,
        /// Optional CSV destination for the per-prompt rows.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the whole pipeline (corpus, channel, pretrain, every configured
    /// mode, report) into a run directory.
    Run {
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare finished run directories; the first is the base.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Correlate reward components across detail logs.
    Correlate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override correlate.min_len.
        #[arg(long)]
        min_len: Option<usize>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<(ExperimentConfig, String)> {
    match path {
        Some(p) => {
            let text = grpolab::fsio::read_to_string(p)?;
            let config = ExperimentConfig::parse_str(&text, p)?;
            Ok((config, text))
        }
        None => {
            let config = ExperimentConfig::default();
            let text = config.render();
            Ok((config, text))
        }
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "heldout" => Ok(Split::Heldout),
        "train" => Ok(Split::Train),
        other => Err(Error::usage(format!(
            "unknown split '{other}' (expected heldout or train)"
        ))),
    }
}

fn print_eval_summary(label: &str, report: &grpolab::harness::EvalReport) {
    println!(
        "{label}: corpus_cer {:.6}  mean_nll_per_token {:.6}  mean_reward {:.6}  ({} prompts)",
        report.corpus_cer,
        report.mean_nll_per_token,
        report.mean_reward,
        report.rows.len()
    );
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenCorpus { out, config } => {
            let (config, _) = load_config(&config)?;
            let corpus = config.build_corpus()?;
            corpus.write(&out)?;
            println!(
                "wrote {} prompts ({} train, {} heldout) to {}",
                corpus.len(),
                corpus.count(Split::Train),
                corpus.count(Split::Heldout),
                out.display()
            );
        }
        Command::GenChannel {
            out,
            config,
            kind,
            noise,
        } => {
            let (mut config, _) = load_config(&config)?;
            if let Some(kind) = kind {
                match kind.as_str() {
                    "identity" | "confusable" => config.channel.kind = kind,
                    other => {
                        return Err(Error::usage(format!(
                            "unknown channel kind '{other}' (expected identity or confusable)"
                        )))
                    }
                }
            }
            if let Some(noise) = noise {
                config.channel.noise = noise;
            }
            config.validate()?;
            let channel = config.build_channel()?;
            channel.save(&out)?;
            println!(
                "wrote {} channel ({} signatures over {} text tokens) to {}",
                config.channel.kind,
                channel.n_signatures(),
                channel.text_vocab().size(),
                out.display()
            );
        }
        Command::Pretrain {
            corpus,
            channel,
            out,
            config,
        } => {
            let (config, _) = load_config(&config)?;
            let corpus = PromptCorpus::read(&corpus)?;
            let channel = AsrChannelModel::load(&channel)?;
            let model = config.pretrained_policy(&corpus, &channel)?;
            model.save(&out)?;
            let report = evaluate(
                &model,
                &corpus,
                Split::Heldout,
                &channel,
                &config.reward,
                config.eval.decode,
                config.eval.seed,
            )?;
            print_eval_summary("pretrained (heldout)", &report);
            println!("wrote checkpoint to {}", out.display());
        }
        Command::Train {
            corpus,
            channel,
            model,
            out_dir,
            config,
            mode,
        } => {
            let (config, _) = load_config(&config)?;
            let corpus = PromptCorpus::read(&corpus)?;
            let channel = AsrChannelModel::load(&channel)?;
            let initial = PolicyModel::load(&model)?;
            let reward = RewardConfig {
                mode: match mode {
                    Some(m) => RewardMode::parse(&m)?,
                    None => config.reward.mode,
                },
                ..config.reward
            };
            let mut sink = FileSink::new(
                &out_dir,
                config.eval.every,
                config.eval.decode,
                config.eval.seed,
                &corpus,
                &channel,
                &reward,
            )?;
            let (final_model, history) = grpo::train(
                initial,
                &corpus,
                &channel,
                &reward,
                &config.grpo,
                &mut sink,
            )?;
            sink.finish()?;
            final_model.save(out_dir.join("checkpoint_final.bin"))?;
            let report = evaluate(
                &final_model,
                &corpus,
                Split::Heldout,
                &channel,
                &reward,
                config.eval.decode,
                config.eval.seed,
            )?;
            write_eval_csv(&report, out_dir.join("eval_final.csv"))?;
            if let Some(last) = history.last() {
                println!(
                    "trained {} updates (mode {}); final batch mean_reward {:.6}, mean_cer {:.6}",
                    history.len(),
                    reward.mode,
                    last.mean_reward,
                    last.mean_cer
                );
            }
            print_eval_summary("final (heldout)", &report);
        }
        Command::Eval {
            corpus,
            channel,
            checkpoint,
            split,
            out,
            config,
        } => {
            let (config, _) = load_config(&config)?;
            let corpus = PromptCorpus::read(&corpus)?;
            let channel = AsrChannelModel::load(&channel)?;
            let model = PolicyModel::load(&checkpoint)?;
            let split = parse_split(&split)?;
            let report = evaluate(
                &model,
                &corpus,
                split,
                &channel,
                &config.reward,
                config.eval.decode,
                config.eval.seed,
            )?;
            print_eval_summary(&format!("{split:?}").to_lowercase(), &report);
            if let Some(out) = out {
                write_eval_csv(&report, &out)?;
                println!("wrote rows to {}", out.display());
            }
        }
        Command::Run { out_dir, config } => {
            let (config, raw) = load_config(&config)?;
            grpolab::harness::run_experiment(&config, &raw, &out_dir)?;
            for row in read_report(&out_dir)? {
                println!(
                    "{:<12} corpus_cer {:.6}  mean_nll_per_token {:.6}  mean_reward {:.6}",
                    row.run, row.corpus_cer, row.mean_nll_per_token, row.mean_reward
                );
            }
            println!("run directory: {}", out_dir.display());
        }
        Command::Compare { dirs } => {
            let (table, all_ok) = compare_runs(&dirs)?;
            print!("{table}");
            if !all_ok {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Correlate {
            files,
            config,
            min_len,
        } => {
            let (config, _) = load_config(&config)?;
            let min_len = min_len.unwrap_or(config.correlate.min_len);
            for file in &files {
                let details = read_detail_log(file)?;
                let report = correlation_analysis(&details, min_len)?;
                println!(
                    "{}: n_used {}/{} (prompt_len >= {min_len})  r(r_cer, r_nll) {:+.4}  r(cer, reward) {:+.4}  r(nll, reward) {:+.4}",
                    file.display(),
                    report.n_used,
                    report.n_total,
                    report.r_cer_nll,
                    report.r_cer_reward,
                    report.r_nll_reward
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors; genuine usage
            // problems exit 1 like every other caller mistake.
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
