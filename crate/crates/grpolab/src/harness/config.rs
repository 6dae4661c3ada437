//! Experiment configuration: a flat `key = value` file, one dotted key per
//! line, `#` comments. Every key has a default; unknown keys are rejected so
//! typos fail loudly instead of silently running the default.

use std::path::Path;

use crate::asr_sim::{AsrChannelModel, ChannelKind};
use crate::error::{Error, Result};
use crate::grpo::{GrpoConfig, OptimizerKind};
use crate::harness::evaluate::DecodeMode;
use crate::policy::{PolicyDims, PolicyModel, PretrainConfig};
use crate::reward::{NllNormalization, RewardConfig, RewardMode};
use crate::seqcore::{generate_corpus, PromptCorpus, SeededRng, Vocabulary};
use crate::{fsio, policy};

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSection {
    pub text_vocab_size: usize,
    pub train_count: usize,
    pub heldout_count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            text_vocab_size: 8,
            train_count: 512,
            heldout_count: 64,
            min_len: 4,
            max_len: 8,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSection {
    /// `identity` or `confusable`.
    pub kind: String,
    /// Mass moved to the neighbouring code under `confusable`.
    pub noise: f64,
    /// Speech tokens per text token.
    pub k: usize,
    pub speech_vocab_size: usize,
    pub eps: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection {
            kind: "identity".into(),
            noise: 0.1,
            k: 2,
            speech_vocab_size: 16,
            eps: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySection {
    pub hidden: usize,
    pub max_len: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            hidden: 16,
            max_len: 20,
            init_scale: 0.1,
            seed: 23,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            steps: 400,
            learning_rate: 0.08,
            label_noise: 0.35,
            seed: 29,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    /// Evaluate heldout every this many updates during training (0 = final
    /// only).
    pub every: usize,
    pub decode: DecodeMode,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            every: 50,
            decode: DecodeMode::Greedy,
            seed: 101,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    /// Reward modes trained as separate arms of one experiment.
    pub modes: Vec<RewardMode>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            modes: vec![RewardMode::Combined],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelateSection {
    /// Rollouts from prompts shorter than this are excluded from the
    /// correlation analysis.
    pub min_len: usize,
}

impl Default for CorrelateSection {
    fn default() -> Self {
        CorrelateSection { min_len: 4 }
    }
}

/// All knobs of one experiment. The default value IS the reference
/// experiment; a config file only lists deviations from it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusSection,
    pub channel: ChannelSection,
    pub policy: PolicySection,
    pub pretrain: PretrainSection,
    pub reward: RewardConfig,
    pub grpo: GrpoConfig,
    pub eval: EvalSection,
    pub run: RunSection,
    pub correlate: CorrelateSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusSection::default(),
            channel: ChannelSection::default(),
            policy: PolicySection::default(),
            pretrain: PretrainSection::default(),
            reward: RewardConfig::default(),
            // The reference run uses Adam and two ascent sweeps per update;
            // the library defaults stay at plain SGD with one sweep.
            grpo: GrpoConfig {
                optimizer: OptimizerKind::Adam,
                inner_epochs: 2,
                ..GrpoConfig::default()
            },
            eval: EvalSection::default(),
            run: RunSection::default(),
            correlate: CorrelateSection::default(),
        }
    }
}

fn p_usize(path: &Path, line: usize, key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::parse(path, line, format!("{key}: '{v}' is not an unsigned integer")))
}

fn p_u64(path: &Path, line: usize, key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::parse(path, line, format!("{key}: '{v}' is not an unsigned integer")))
}

fn p_f64(path: &Path, line: usize, key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::parse(path, line, format!("{key}: '{v}' is not a number")))
}

impl ExperimentConfig {
    /// The fixed setup every ablation in this bench deviates from.
    pub fn reference() -> Self {
        ExperimentConfig::default()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fsio::read_to_string(path)?;
        Self::parse_str(&text, path)
    }

    /// Parses config text. `origin` only labels error messages.
    pub fn parse_str(text: &str, origin: &Path) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(
                    origin,
                    line_no,
                    format!("expected 'key = value', found '{line}'"),
                ));
            };
            config.apply(key.trim(), value.trim(), origin, line_no)?;
        }
        config.validate()?;
        Ok(config)
    }

    fn apply(&mut self, key: &str, value: &str, path: &Path, line: usize) -> Result<()> {
        let reparse = |e: Error| Error::parse(path, line, e.to_string());
        match key {
            "corpus.text_vocab_size" => {
                self.corpus.text_vocab_size = p_usize(path, line, key, value)?
            }
            "corpus.train_count" => self.corpus.train_count = p_usize(path, line, key, value)?,
            "corpus.heldout_count" => {
                self.corpus.heldout_count = p_usize(path, line, key, value)?
            }
            "corpus.min_len" => self.corpus.min_len = p_usize(path, line, key, value)?,
            "corpus.max_len" => self.corpus.max_len = p_usize(path, line, key, value)?,
            "corpus.seed" => self.corpus.seed = p_u64(path, line, key, value)?,
            "channel.kind" => match value {
                "identity" | "confusable" => self.channel.kind = value.into(),
                other => {
                    return Err(Error::parse(
                        path,
                        line,
                        format!("channel.kind: '{other}' is not identity or confusable"),
                    ))
                }
            },
            "channel.noise" => self.channel.noise = p_f64(path, line, key, value)?,
            "channel.k" => self.channel.k = p_usize(path, line, key, value)?,
            "channel.speech_vocab_size" => {
                self.channel.speech_vocab_size = p_usize(path, line, key, value)?
            }
            "channel.eps" => self.channel.eps = p_f64(path, line, key, value)?,
            "policy.hidden" => self.policy.hidden = p_usize(path, line, key, value)?,
            "policy.max_len" => self.policy.max_len = p_usize(path, line, key, value)?,
            "policy.init_scale" => self.policy.init_scale = p_f64(path, line, key, value)?,
            "policy.seed" => self.policy.seed = p_u64(path, line, key, value)?,
            "pretrain.steps" => self.pretrain.steps = p_usize(path, line, key, value)?,
            "pretrain.learning_rate" => {
                self.pretrain.learning_rate = p_f64(path, line, key, value)?
            }
            "pretrain.label_noise" => self.pretrain.label_noise = p_f64(path, line, key, value)?,
            "pretrain.seed" => self.pretrain.seed = p_u64(path, line, key, value)?,
            "reward.alpha_c" => self.reward.alpha_c = p_f64(path, line, key, value)?,
            "reward.alpha_n" => self.reward.alpha_n = p_f64(path, line, key, value)?,
            "reward.lambda_c" => self.reward.lambda_c = p_f64(path, line, key, value)?,
            "reward.lambda_n" => self.reward.lambda_n = p_f64(path, line, key, value)?,
            "reward.mode" => self.reward.mode = RewardMode::parse(value).map_err(reparse)?,
            "reward.nll_normalization" => {
                self.reward.nll_normalization =
                    NllNormalization::parse(value).map_err(reparse)?
            }
            "grpo.group_size" => self.grpo.group_size = p_usize(path, line, key, value)?,
            "grpo.beta" => self.grpo.beta = p_f64(path, line, key, value)?,
            "grpo.learning_rate" => self.grpo.learning_rate = p_f64(path, line, key, value)?,
            "grpo.updates" => self.grpo.updates = p_usize(path, line, key, value)?,
            "grpo.inner_epochs" => self.grpo.inner_epochs = p_usize(path, line, key, value)?,
            "grpo.batch_size" => self.grpo.batch_size = p_usize(path, line, key, value)?,
            "grpo.temperature" => self.grpo.temperature = p_f64(path, line, key, value)?,
            "grpo.std_epsilon" => self.grpo.std_epsilon = p_f64(path, line, key, value)?,
            "grpo.clip_epsilon" => {
                self.grpo.clip_epsilon = if value == "none" {
                    None
                } else {
                    Some(p_f64(path, line, key, value)?)
                }
            }
            "grpo.optimizer" => {
                self.grpo.optimizer = OptimizerKind::parse(value).map_err(reparse)?
            }
            "grpo.checkpoint_every" => {
                self.grpo.checkpoint_every = p_usize(path, line, key, value)?
            }
            "grpo.seed" => self.grpo.seed = p_u64(path, line, key, value)?,
            "eval.every" => self.eval.every = p_usize(path, line, key, value)?,
            "eval.decode" => self.eval.decode = DecodeMode::parse(value).map_err(reparse)?,
            "eval.seed" => self.eval.seed = p_u64(path, line, key, value)?,
            "run.modes" => {
                let mut modes = Vec::new();
                for part in value.split(',') {
                    let part = part.trim();
                    if part.is_empty() {
                        continue;
                    }
                    modes.push(RewardMode::parse(part).map_err(reparse)?);
                }
                if modes.is_empty() {
                    return Err(Error::parse(path, line, "run.modes: empty mode list"));
                }
                self.run.modes = modes;
            }
            "correlate.min_len" => self.correlate.min_len = p_usize(path, line, key, value)?,
            unknown => {
                return Err(Error::config(format!(
                    "unknown configuration key '{unknown}' at {}:{line}",
                    path.display()
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.min_len == 0 || self.corpus.min_len > self.corpus.max_len {
            return Err(Error::config(format!(
                "corpus length range [{}, {}] is invalid",
                self.corpus.min_len, self.corpus.max_len
            )));
        }
        if self.corpus.train_count == 0 {
            return Err(Error::config("corpus.train_count must be positive"));
        }
        if !(self.channel.noise >= 0.0 && self.channel.noise <= 1.0) {
            return Err(Error::config(format!(
                "channel.noise {} must lie in [0, 1]",
                self.channel.noise
            )));
        }
        self.reward.validate()?;
        self.grpo.validate()?;
        self.pretrain_config().validate()?;
        if self.run.modes.is_empty() {
            return Err(Error::config("run.modes must name at least one mode"));
        }
        Ok(())
    }

    /// Canonical text listing every key with its active value. Parsing the
    /// rendered text reproduces the config exactly.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("corpus.text_vocab_size", self.corpus.text_vocab_size.to_string());
        kv("corpus.train_count", self.corpus.train_count.to_string());
        kv("corpus.heldout_count", self.corpus.heldout_count.to_string());
        kv("corpus.min_len", self.corpus.min_len.to_string());
        kv("corpus.max_len", self.corpus.max_len.to_string());
        kv("corpus.seed", self.corpus.seed.to_string());
        kv("channel.kind", self.channel.kind.clone());
        kv("channel.noise", self.channel.noise.to_string());
        kv("channel.k", self.channel.k.to_string());
        kv("channel.speech_vocab_size", self.channel.speech_vocab_size.to_string());
        kv("channel.eps", self.channel.eps.to_string());
        kv("policy.hidden", self.policy.hidden.to_string());
        kv("policy.max_len", self.policy.max_len.to_string());
        kv("policy.init_scale", self.policy.init_scale.to_string());
        kv("policy.seed", self.policy.seed.to_string());
        kv("pretrain.steps", self.pretrain.steps.to_string());
        kv("pretrain.learning_rate", self.pretrain.learning_rate.to_string());
        kv("pretrain.label_noise", self.pretrain.label_noise.to_string());
        kv("pretrain.seed", self.pretrain.seed.to_string());
        kv("reward.alpha_c", self.reward.alpha_c.to_string());
        kv("reward.alpha_n", self.reward.alpha_n.to_string());
        kv("reward.lambda_c", self.reward.lambda_c.to_string());
        kv("reward.lambda_n", self.reward.lambda_n.to_string());
        kv("reward.mode", self.reward.mode.as_str().into());
        kv("reward.nll_normalization", self.reward.nll_normalization.as_str().into());
        kv("grpo.group_size", self.grpo.group_size.to_string());
        kv("grpo.beta", self.grpo.beta.to_string());
        kv("grpo.learning_rate", self.grpo.learning_rate.to_string());
        kv("grpo.updates", self.grpo.updates.to_string());
        kv("grpo.inner_epochs", self.grpo.inner_epochs.to_string());
        kv("grpo.batch_size", self.grpo.batch_size.to_string());
        kv("grpo.temperature", self.grpo.temperature.to_string());
        kv("grpo.std_epsilon", self.grpo.std_epsilon.to_string());
        kv(
            "grpo.clip_epsilon",
            match self.grpo.clip_epsilon {
                None => "none".into(),
                Some(e) => e.to_string(),
            },
        );
        kv("grpo.optimizer", self.grpo.optimizer.as_str().into());
        kv("grpo.checkpoint_every", self.grpo.checkpoint_every.to_string());
        kv("grpo.seed", self.grpo.seed.to_string());
        kv("eval.every", self.eval.every.to_string());
        kv("eval.decode", self.eval.decode.as_str().into());
        kv("eval.seed", self.eval.seed.to_string());
        kv(
            "run.modes",
            self.run
                .modes
                .iter()
                .map(|m| m.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("correlate.min_len", self.correlate.min_len.to_string());
        out
    }

    pub fn text_vocab(&self) -> Result<Vocabulary> {
        Vocabulary::text(self.corpus.text_vocab_size)
    }

    pub fn speech_vocab(&self) -> Result<Vocabulary> {
        Vocabulary::speech(self.channel.speech_vocab_size)
    }

    pub fn build_corpus(&self) -> Result<PromptCorpus> {
        let vocab = self.text_vocab()?;
        let mut rng = SeededRng::new(self.corpus.seed);
        generate_corpus(
            &mut rng,
            self.corpus.train_count + self.corpus.heldout_count,
            self.corpus.min_len,
            self.corpus.max_len,
            &vocab,
        )?
        .with_heldout_tail(self.corpus.heldout_count)
    }

    pub fn build_channel(&self) -> Result<AsrChannelModel> {
        let text = self.text_vocab()?;
        let speech = self.speech_vocab()?;
        let kind = match self.channel.kind.as_str() {
            "identity" => ChannelKind::Identity,
            "confusable" => ChannelKind::Confusable {
                noise: self.channel.noise,
            },
            other => return Err(Error::config(format!("unknown channel kind '{other}'"))),
        };
        AsrChannelModel::build(&text, &speech, self.channel.k, self.channel.eps, kind)
    }

    pub fn policy_dims(&self) -> Result<PolicyDims> {
        Ok(PolicyDims {
            text_vocab: self.text_vocab()?,
            speech_vocab: self.speech_vocab()?,
            frame_rate: self.channel.k,
            hidden: self.policy.hidden,
            max_len: self.policy.max_len,
        })
    }

    pub fn init_policy(&self) -> Result<PolicyModel> {
        let mut rng = SeededRng::new(self.policy.seed);
        PolicyModel::random_init(self.policy_dims()?, self.policy.init_scale, &mut rng)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain.steps,
            learning_rate: self.pretrain.learning_rate,
            label_noise: self.pretrain.label_noise,
        }
    }

    /// Warm-starts a fresh policy: random init then supervised pretraining.
    pub fn pretrained_policy(
        &self,
        corpus: &PromptCorpus,
        channel: &AsrChannelModel,
    ) -> Result<PolicyModel> {
        let init = self.init_policy()?;
        let mut rng = SeededRng::new(self.pretrain.seed);
        policy::pretrain_supervised(init, corpus, channel, &self.pretrain_config(), &mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origin() -> std::path::PathBuf {
        std::path::PathBuf::from("<test config>")
    }

    #[test]
    fn defaults_render_and_reparse_exactly() {
        let config = ExperimentConfig::reference();
        let text = config.render();
        let back = ExperimentConfig::parse_str(&text, &origin()).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn overrides_keep_unrelated_defaults() {
        let text = "\
# a comment
grpo.updates = 12

reward.mode = cer_only  # trailing comment
corpus.seed = 999
";
        let config = ExperimentConfig::parse_str(text, &origin()).unwrap();
        assert_eq!(config.grpo.updates, 12);
        assert_eq!(config.reward.mode, RewardMode::CerOnly);
        assert_eq!(config.corpus.seed, 999);
        let default = ExperimentConfig::default();
        assert_eq!(config.grpo.group_size, default.grpo.group_size);
        assert_eq!(config.channel, default.channel);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::parse_str("grpo.momentum = 0.9\n", &origin()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("grpo.momentum"));
    }

    #[test]
    fn malformed_lines_and_values_point_at_the_line() {
        let err = ExperimentConfig::parse_str("corpus.seed\n", &origin()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        let err =
            ExperimentConfig::parse_str("\n\ngrpo.beta = warm\n", &origin()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn later_assignments_win() {
        let config =
            ExperimentConfig::parse_str("grpo.updates = 5\ngrpo.updates = 9\n", &origin())
                .unwrap();
        assert_eq!(config.grpo.updates, 9);
    }

    #[test]
    fn mode_lists_and_clip_parse() {
        let config = ExperimentConfig::parse_str(
            "run.modes = combined, cer_only,nll_only\ngrpo.clip_epsilon = 0.2\n",
            &origin(),
        )
        .unwrap();
        assert_eq!(
            config.run.modes,
            vec![RewardMode::Combined, RewardMode::CerOnly, RewardMode::NllOnly]
        );
        assert_eq!(config.grpo.clip_epsilon, Some(0.2));
        let config =
            ExperimentConfig::parse_str("grpo.clip_epsilon = none\n", &origin()).unwrap();
        assert_eq!(config.grpo.clip_epsilon, None);
    }

    #[test]
    fn cross_field_validation_fires() {
        let err = ExperimentConfig::parse_str("corpus.min_len = 9\n", &origin()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = ExperimentConfig::parse_str("grpo.group_size = 1\n", &origin()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn reference_config_is_buildable() {
        let config = ExperimentConfig::reference();
        config.validate().unwrap();
        let corpus = config.build_corpus().unwrap();
        assert_eq!(corpus.count(crate::seqcore::Split::Train), 512);
        assert_eq!(corpus.count(crate::seqcore::Split::Heldout), 64);
        let channel = config.build_channel().unwrap();
        assert_eq!(channel.frame_rate(), 2);
        let dims = config.policy_dims().unwrap();
        assert!(dims.param_count() <= 50_000);
    }
}
