//! How the two reward channels co-move across logged rollouts.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio;
use crate::grpo::RolloutDetail;

/// Pearson correlation coefficient. Undefined (an error, not a silent NaN)
/// for fewer than three points or when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::usage(format!(
            "{} x values against {} y values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::UndefinedStatistic(format!(
            "correlation over {} points",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::usage("non-finite value in correlation input"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedStatistic(
            "correlation with a zero-variance side".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Correlations among a detail log's scoring columns, after dropping
/// rollouts whose prompt is shorter than `min_len` (very short prompts make
/// both error rate and confidence nearly saturate, which only adds noise).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub n_total: usize,
    pub n_used: usize,
    /// Between the error-rate reward and the confidence reward.
    pub r_cer_nll: f64,
    /// Between the raw error rate and the scalar the optimizer saw.
    pub r_cer_reward: f64,
    /// Between the raw (normalized) NLL and the scalar the optimizer saw.
    pub r_nll_reward: f64,
}

pub fn correlation_analysis(
    details: &[RolloutDetail],
    min_len: usize,
) -> Result<CorrelationReport> {
    let used: Vec<&RolloutDetail> = details
        .iter()
        .filter(|d| d.prompt_len >= min_len)
        .collect();
    let col = |f: fn(&RolloutDetail) -> f64| -> Vec<f64> { used.iter().map(|d| f(d)).collect() };
    let r_cer = col(|d| d.r_cer);
    let r_nll = col(|d| d.r_nll);
    let cer = col(|d| d.cer);
    let nll = col(|d| d.nll_used);
    let reward = col(|d| d.r_combined);
    Ok(CorrelationReport {
        n_total: details.len(),
        n_used: used.len(),
        r_cer_nll: pearson(&r_cer, &r_nll)?,
        r_cer_reward: pearson(&cer, &reward)?,
        r_nll_reward: pearson(&nll, &reward)?,
    })
}

/// Reads a training detail log (one JSON record per line).
pub fn read_detail_log(path: impl AsRef<Path>) -> Result<Vec<RolloutDetail>> {
    let path = path.as_ref();
    let text = fsio::read_to_string(path)?;
    let mut details = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let detail: RolloutDetail = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        details.push(detail);
    }
    Ok(details)
}
