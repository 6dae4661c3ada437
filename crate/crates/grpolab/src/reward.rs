//! Bounded rewards from channel feedback and their weighted harmonic blend.
//!
//! Two components, each mapped into [0, 1]:
//!
//! ```text
//! r_cer = 1 - tanh(alpha_c * cer)          correctness, 1 at cer = 0
//! r_nll = exp(-nll / alpha_n)              confidence,  1 at nll = 0
//! ```
//!
//! blended by a weighted harmonic mean, which punishes imbalance: a rollout
//! must do well on both axes to score well on the blend,
//!
//! ```text
//! R = (lambda_c + lambda_n) / (lambda_c / r_cer + lambda_n / r_nll)
//! ```
//!
//! with the continuity convention that a zero component with positive weight
//! pins the blend to zero. `r_cer` is evaluated as `2 e^{-2x} / (1 + e^{-2x})`,
//! which is algebraically `1 - tanh(x)` but keeps full relative precision when
//! `tanh(x)` approaches 1.

use serde::{Deserialize, Serialize};

use crate::asr_sim::AsrChannelModel;
use crate::editdist;
use crate::error::{Error, Result};
use crate::seqcore::TokenSequence;

/// Which component(s) drive the scalar training reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardMode {
    CerOnly,
    NllOnly,
    Combined,
}

impl RewardMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardMode::CerOnly => "cer_only",
            RewardMode::NllOnly => "nll_only",
            RewardMode::Combined => "combined",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cer_only" => Ok(RewardMode::CerOnly),
            "nll_only" => Ok(RewardMode::NllOnly),
            "combined" => Ok(RewardMode::Combined),
            other => Err(Error::config(format!(
                "unknown reward mode '{other}' (expected cer_only, nll_only, or combined)"
            ))),
        }
    }
}

impl std::fmt::Display for RewardMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether `r_nll` sees the summed or the length-normalized channel NLL.
/// Per-token keeps the confidence signal comparable across utterance lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NllNormalization {
    PerToken,
    Total,
}

impl NllNormalization {
    pub fn as_str(self) -> &'static str {
        match self {
            NllNormalization::PerToken => "per_token",
            NllNormalization::Total => "total",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_token" => Ok(NllNormalization::PerToken),
            "total" => Ok(NllNormalization::Total),
            other => Err(Error::config(format!(
                "unknown nll normalization '{other}' (expected per_token or total)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Sharpness of the correctness map; must be positive.
    pub alpha_c: f64,
    /// Temperature of the confidence map; must be positive.
    pub alpha_n: f64,
    /// Blend weight on the correctness component; non-negative.
    pub lambda_c: f64,
    /// Blend weight on the confidence component; non-negative.
    pub lambda_n: f64,
    pub mode: RewardMode,
    pub nll_normalization: NllNormalization,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha_c: 3.0,
            alpha_n: 3.0,
            lambda_c: 0.6,
            lambda_n: 0.4,
            mode: RewardMode::Combined,
            nll_normalization: NllNormalization::PerToken,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha_c.is_finite()
            || self.alpha_c <= 0.0
            || !self.alpha_n.is_finite()
            || self.alpha_n <= 0.0
        {
            return Err(Error::config(format!(
                "alpha_c = {} and alpha_n = {} must both be positive",
                self.alpha_c, self.alpha_n
            )));
        }
        if self.lambda_c < 0.0 || self.lambda_n < 0.0 {
            return Err(Error::config("blend weights must be non-negative"));
        }
        if self.lambda_c + self.lambda_n <= 0.0 {
            return Err(Error::config(
                "at least one blend weight must be positive",
            ));
        }
        Ok(())
    }
}

/// Correctness reward `1 - tanh(alpha_c * cer)`, evaluated in the
/// cancellation-free form. Strictly decreasing in `cer`, 1 at 0.
pub fn reward_cer(cer: f64, alpha_c: f64) -> Result<f64> {
    if !alpha_c.is_finite() || alpha_c <= 0.0 {
        return Err(Error::config(format!("alpha_c = {alpha_c} must be positive")));
    }
    if !cer.is_finite() || cer < 0.0 {
        return Err(Error::usage(format!("cer = {cer} must be finite and >= 0")));
    }
    let e = (-2.0 * alpha_c * cer).exp();
    Ok(2.0 * e / (1.0 + e))
}

/// Confidence reward `exp(-nll / alpha_n)`. Strictly decreasing in `nll`, 1 at 0.
pub fn reward_nll(nll: f64, alpha_n: f64) -> Result<f64> {
    if !alpha_n.is_finite() || alpha_n <= 0.0 {
        return Err(Error::config(format!("alpha_n = {alpha_n} must be positive")));
    }
    if !nll.is_finite() || nll < 0.0 {
        return Err(Error::usage(format!("nll = {nll} must be finite and >= 0")));
    }
    Ok((-nll / alpha_n).exp())
}

/// Weighted harmonic mean of the two components. A zero weight drops its
/// component entirely; a zero-valued component with positive weight drives the
/// blend to its limit value 0.
pub fn combine(r_cer: f64, r_nll: f64, lambda_c: f64, lambda_n: f64) -> Result<f64> {
    if lambda_c < 0.0 || lambda_n < 0.0 || lambda_c + lambda_n <= 0.0 {
        return Err(Error::config(format!(
            "blend weights ({lambda_c}, {lambda_n}) must be non-negative with a positive sum"
        )));
    }
    for (name, r) in [("r_cer", r_cer), ("r_nll", r_nll)] {
        if !r.is_finite() || !(0.0..=1.0).contains(&r) {
            return Err(Error::usage(format!("{name} = {r} must lie in [0, 1]")));
        }
    }
    if lambda_c == 0.0 {
        return Ok(r_nll);
    }
    if lambda_n == 0.0 {
        return Ok(r_cer);
    }
    if r_cer == 0.0 || r_nll == 0.0 {
        return Ok(0.0);
    }
    Ok((lambda_c + lambda_n) / (lambda_c / r_cer + lambda_n / r_nll))
}

/// Everything the trainer logs about one scored rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub cer: f64,
    /// The NLL value the confidence reward saw (after normalization).
    pub nll_used: f64,
    pub r_cer: f64,
    pub r_nll: f64,
    /// The scalar the optimizer maximizes, per the configured mode.
    pub r_combined: f64,
}

/// Breakdown plus the intermediate channel artifacts, for evaluation reports.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRollout {
    pub breakdown: RewardBreakdown,
    pub transcript: TokenSequence,
    pub distance: usize,
    pub nll_total: f64,
    pub nll_per_token: f64,
}

/// Scores one generated utterance end to end: transcribe, measure the error
/// rate against `truth`, take the teacher-forced NLL, map both through the
/// reward heads. `truth` must be non-empty; the mode picks which component
/// lands in `r_combined` (the others are still reported).
pub fn score_rollout(
    config: &RewardConfig,
    model: &AsrChannelModel,
    truth: &TokenSequence,
    speech: &TokenSequence,
) -> Result<RewardBreakdown> {
    Ok(score_rollout_full(config, model, truth, speech)?.breakdown)
}

pub fn score_rollout_full(
    config: &RewardConfig,
    model: &AsrChannelModel,
    truth: &TokenSequence,
    speech: &TokenSequence,
) -> Result<ScoredRollout> {
    config.validate()?;
    let score = model.teacher_forced_nll(speech, truth)?;
    let edit = editdist::measure(truth, &score.transcript)?;
    let nll_used = match config.nll_normalization {
        NllNormalization::PerToken => score.nll_per_token,
        NllNormalization::Total => score.nll_total,
    };
    let r_cer = reward_cer(edit.cer, config.alpha_c)?;
    let r_nll = reward_nll(nll_used, config.alpha_n)?;
    let r_combined = match config.mode {
        RewardMode::CerOnly => r_cer,
        RewardMode::NllOnly => r_nll,
        RewardMode::Combined => combine(r_cer, r_nll, config.lambda_c, config.lambda_n)?,
    };
    Ok(ScoredRollout {
        breakdown: RewardBreakdown {
            cer: edit.cer,
            nll_used,
            r_cer,
            r_nll,
            r_combined,
        },
        transcript: score.transcript,
        distance: edit.distance,
        nll_total: score.nll_total,
        nll_per_token: score.nll_per_token,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asr_sim::{teacher_encode, AsrChannelModel};
    use crate::seqcore::{SeededRng, TokenSequence, Vocabulary};

    /// Independent route for 1 - tanh(x): 2 / (1 + e^{2x}).
    fn oracle_rcer(cer: f64, alpha: f64) -> f64 {
        2.0 / (1.0 + (2.0 * alpha * cer).exp())
    }

    /// Independent route for the harmonic blend, no division cascade.
    fn oracle_combine(rc: f64, rn: f64, lc: f64, ln_: f64) -> f64 {
        rc * rn * (lc + ln_) / (lc * rn + ln_ * rc)
    }

    #[test]
    fn frozen_component_values() {
        // High-precision references computed independently.
        assert!((reward_cer(0.0, 3.0).unwrap() - 1.0).abs() == 0.0);
        assert!((reward_cer(1.0, 3.0).unwrap() - 0.004945246313269549).abs() < 1e-15);
        assert!((reward_cer(0.0141, 3.0).unwrap() - 0.9577252109452769).abs() < 1e-15);
        assert!((reward_cer(0.1, 3.0).unwrap() - 0.7086873875484091).abs() < 1e-15);
        assert_eq!(reward_nll(0.0, 3.0).unwrap(), 1.0);
        assert!((reward_nll(3.0, 3.0).unwrap() - 0.36787944117144233).abs() < 1e-15);
        assert!((reward_nll(6.0, 3.0).unwrap() - 0.1353352832366127).abs() < 1e-15);
    }

    #[test]
    fn frozen_blend_values() {
        // combine at the worked component values.
        let got = combine(0.957733, 0.367879, 0.6, 0.4).unwrap();
        assert!((got - 0.5835008913359365).abs() < 1e-12);
        // Degenerate weights reduce to single components exactly.
        assert_eq!(combine(0.3, 0.9, 1.0, 0.0).unwrap(), 0.3);
        assert_eq!(combine(0.3, 0.9, 0.0, 1.0).unwrap(), 0.9);
        // Zero component with positive weight pins the blend.
        assert_eq!(combine(0.0, 0.9, 0.6, 0.4).unwrap(), 0.0);
        assert_eq!(combine(0.9, 0.0, 0.6, 0.4).unwrap(), 0.0);
        // Equal components are a fixed point.
        assert!((combine(0.7, 0.7, 0.6, 0.4).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(matches!(reward_cer(-0.1, 3.0), Err(Error::Usage(_))));
        assert!(matches!(reward_cer(0.1, 0.0), Err(Error::Config(_))));
        assert!(matches!(reward_nll(-1.0, 3.0), Err(Error::Usage(_))));
        assert!(matches!(reward_nll(1.0, -3.0), Err(Error::Config(_))));
        assert!(matches!(combine(0.5, 0.5, 0.0, 0.0), Err(Error::Config(_))));
        assert!(matches!(combine(1.5, 0.5, 0.6, 0.4), Err(Error::Usage(_))));
    }

    #[test]
    fn components_match_independent_oracles_on_a_grid() {
        let mut rng = SeededRng::new(17);
        for _ in 0..2000 {
            let cer = rng.f64() * 5.0;
            let nll = rng.f64() * 100.0;
            let rc = reward_cer(cer, 3.0).unwrap();
            let rn = reward_nll(nll, 3.0).unwrap();
            let rc_oracle = oracle_rcer(cer, 3.0);
            assert!(
                (rc - rc_oracle).abs() <= 1e-9 * rc_oracle.max(1e-300),
                "cer {cer}: {rc} vs {rc_oracle}"
            );
            assert!((0.0..=1.0).contains(&rc));
            assert!((0.0..=1.0).contains(&rn));
            if rc > 0.0 && rn > 0.0 {
                let blend = combine(rc, rn, 0.6, 0.4).unwrap();
                let blend_oracle = oracle_combine(rc, rn, 0.6, 0.4);
                assert!((blend - blend_oracle).abs() <= 1e-9 * blend_oracle.max(1e-300));
                // Harmonic mean never exceeds the weighted arithmetic mean.
                let arith = 0.6 * rc + 0.4 * rn;
                assert!(blend <= arith + 1e-15);
                assert!(blend >= rc.min(rn) - 1e-15);
                assert!(blend <= rc.max(rn) + 1e-15);
            }
        }
    }

    #[test]
    fn components_are_strictly_monotone() {
        let mut prev_c = f64::INFINITY;
        let mut prev_n = f64::INFINITY;
        for i in 0..=50 {
            let x = i as f64 * 0.1;
            let rc = reward_cer(x, 3.0).unwrap();
            let rn = reward_nll(x * 20.0, 3.0).unwrap();
            assert!(rc < prev_c || i == 0);
            assert!(rn < prev_n || i == 0);
            prev_c = rc;
            prev_n = rn;
        }
    }

    #[test]
    fn scored_rollout_with_one_substituted_frame() {
        let t = Vocabulary::text(8).unwrap();
        let s = Vocabulary::speech(16).unwrap();
        let ch = AsrChannelModel::identity(&t, &s, 2, 1e-4).unwrap();
        let truth = TokenSequence::new(&t, vec![0, 1, 2, 3, 4, 5, 6, 0, 1, 2]).unwrap();
        let mut speech = teacher_encode(&truth, &s, 2).unwrap().tokens().to_vec();
        // Corrupt the second frame into the code of a different token.
        speech[2] = 0;
        speech[3] = 5;
        let speech = TokenSequence::new(&s, speech).unwrap();
        let cfg = RewardConfig::default();
        let b = score_rollout(&cfg, &ch, &truth, &speech).unwrap();
        assert!((b.cer - 0.1).abs() < 1e-15);
        assert!((b.r_cer - 0.7086873875484091).abs() < 1e-12);
        // The corrupted frame scores the truth token at the smoothing floor,
        // so the error-rate reward is the weaker component; the blend sits
        // strictly between the two.
        assert!(b.r_cer < b.r_combined && b.r_combined < b.r_nll);
        // Mode only changes which component lands in r_combined.
        let cer_only = RewardConfig {
            mode: RewardMode::CerOnly,
            ..cfg
        };
        let b2 = score_rollout(&cer_only, &ch, &truth, &speech).unwrap();
        assert_eq!(b2.r_combined, b2.r_cer);
        assert_eq!(b2.r_cer, b.r_cer);
        assert_eq!(b2.r_nll, b.r_nll);
    }

    #[test]
    fn perfect_rollout_under_identity_channel_scores_near_one() {
        let t = Vocabulary::text(8).unwrap();
        let s = Vocabulary::speech(16).unwrap();
        let ch = AsrChannelModel::identity(&t, &s, 2, 1e-4).unwrap();
        let truth = TokenSequence::new(&t, vec![3, 1, 4]).unwrap();
        let speech = teacher_encode(&truth, &s, 2).unwrap();
        let b = score_rollout(&RewardConfig::default(), &ch, &truth, &speech).unwrap();
        assert_eq!(b.cer, 0.0);
        assert_eq!(b.r_cer, 1.0);
        assert!(b.r_nll > 0.999);
        assert!(b.r_combined > 0.999);
    }
}
