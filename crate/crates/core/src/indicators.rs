//! Token-level pseudo-label quality: confidence, attentive score and their
//! gated combination.
//!
//! Positions are 0-based indices into `DecodeTrace::tokens`; the scored
//! range is `P..L`, which covers the emitted tokens and the final eos.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::decoding::DecodeTrace;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    History,
    Future,
    #[default]
    Both,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "history" => Ok(Variant::History),
            "future" => Ok(Variant::Future),
            "both" => Ok(Variant::Both),
            _ => Err(Error::Config(format!("unknown attentive variant `{s}`"))),
        }
    }
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::History => "history",
            Variant::Future => "future",
            Variant::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndicatorConfig {
    /// Conflict threshold on the ratios `A²/C` and `C²/A`.
    pub lambda: f64,
    /// Temperature of the consistent branch.
    pub tau: f64,
    /// Floor for ratio denominators and normalization means.
    pub epsilon: f64,
    /// Mean-normalize the combined score per utterance.
    pub renorm_star: bool,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        IndicatorConfig {
            lambda: 2.0,
            tau: 10.0,
            epsilon: 1e-8,
            renorm_star: true,
        }
    }
}

impl IndicatorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("tau", self.tau), ("epsilon", self.epsilon)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenScores {
    pub utterance_id: String,
    pub positions: Vec<usize>,
    pub raw_conf: Vec<f64>,
    pub raw_attn: Vec<f64>,
    pub conf: Vec<f64>,
    pub attn: Vec<f64>,
    pub star: Vec<f64>,
    pub variant: Variant,
}

impl TokenScores {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Per-step maximum posterior over the scored range.
pub fn confidence_scores(trace: &DecodeTrace) -> Result<Vec<f64>> {
    if trace.step_max_prob.is_empty() {
        return Err(Error::Input(format!("trace {} has no scored positions", trace.utterance_id)));
    }
    if let Some(bad) = trace.step_max_prob.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::Input(format!("step probability {bad} outside (0, 1]")));
    }
    Ok(trace.step_max_prob.clone())
}

/// Attention mass involving each scored token. `history` sums the token's
/// own row over scored columns up to the diagonal, `future` sums its column
/// from the diagonal down, `both` adds the two without double-counting the
/// diagonal.
pub fn attentive_scores(attention: &[Vec<f64>], prompt_len: usize, variant: Variant) -> Result<Vec<f64>> {
    let l = attention.len();
    if l <= prompt_len {
        return Err(Error::Input(format!(
            "attention matrix of size {l} has no positions after a prompt of {prompt_len}"
        )));
    }
    if attention.iter().any(|r| r.len() != l) {
        return Err(Error::Input("attention matrix is not square".into()));
    }
    Ok((prompt_len..l)
        .map(|t| {
            let history: f64 = attention[t][prompt_len..=t].iter().sum();
            let future: f64 = (t + 1..l).map(|i| attention[i][t]).sum();
            match variant {
                Variant::History => history,
                Variant::Future => attention[t][t] + future,
                Variant::Both => history + future,
            }
        })
        .collect())
}

/// Divides every score by the arithmetic mean.
pub fn mean_normalize(scores: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Input("cannot normalize an empty score vector".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Input("non-finite score".into()));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    if mean <= epsilon {
        return Err(Error::Degenerate(format!("score mean {mean} is not above {epsilon}")));
    }
    Ok(scores.iter().map(|s| s / mean).collect())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Combined score of one token before any renormalization.
pub fn star_scalar(c: f64, a: f64, config: &IndicatorConfig) -> f64 {
    let r_ac = a * a / c.max(config.epsilon);
    let r_ca = c * c / a.max(config.epsilon);
    let conflict = (sigmoid(r_ac - config.lambda) + sigmoid(r_ca - config.lambda)) * a;
    let consistent =
        sigmoid(config.lambda - r_ac) * sigmoid(config.lambda - r_ca) * a * ((c - a) / config.tau).exp();
    conflict + consistent
}

/// Per-token combined scores, mean-normalized when `renorm_star` is set.
pub fn star_combine(conf: &[f64], attn: &[f64], config: &IndicatorConfig) -> Result<Vec<f64>> {
    config.validate()?;
    if conf.len() != attn.len() {
        return Err(Error::Input(format!(
            "{} confidence scores but {} attentive scores",
            conf.len(),
            attn.len()
        )));
    }
    for (&c, &a) in conf.iter().zip(attn) {
        if !(c.is_finite() && a.is_finite()) {
            return Err(Error::Input(format!("non-finite indicator pair ({c}, {a})")));
        }
        if c <= 0.0 || a < 0.0 {
            return Err(Error::Input(format!("indicator pair ({c}, {a}) needs C > 0 and A >= 0")));
        }
    }
    let s: Vec<f64> = conf.iter().zip(attn).map(|(&c, &a)| star_scalar(c, a, config)).collect();
    if config.renorm_star {
        mean_normalize(&s, config.epsilon)
    } else {
        Ok(s)
    }
}

pub fn score_trace(trace: &DecodeTrace, config: &IndicatorConfig, variant: Variant) -> Result<TokenScores> {
    let raw_conf = confidence_scores(trace)?;
    let raw_attn = attentive_scores(&trace.attention, trace.prompt_len, variant)?;
    let conf = mean_normalize(&raw_conf, config.epsilon)?;
    let attn = mean_normalize(&raw_attn, config.epsilon)?;
    let star = star_combine(&conf, &attn, config)?;
    Ok(TokenScores {
        utterance_id: trace.utterance_id.clone(),
        positions: (trace.prompt_len..trace.len()).collect(),
        raw_conf,
        raw_attn,
        conf,
        attn,
        star,
        variant,
    })
}

#[derive(Serialize)]
struct ScoresRecord<'a> {
    config: &'a IndicatorConfig,
    #[serde(flatten)]
    scores: &'a TokenScores,
}

/// One JSON record per utterance with the indicator configuration echoed.
pub fn write_scores(scores: &[TokenScores], config: &IndicatorConfig, out: &mut impl Write) -> Result<()> {
    for s in scores {
        serde_json::to_writer(&mut *out, &ScoresRecord { config, scores: s })
            .map_err(|e| Error::Input(e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io("<scores>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(l: usize) -> Vec<Vec<f64>> {
        (0..l).map(|i| (0..l).map(|j| f64::from(u8::from(i == j))).collect()).collect()
    }

    fn trace(l: usize, probs: Vec<f64>, attention: Vec<Vec<f64>>) -> DecodeTrace {
        DecodeTrace {
            utterance_id: "t".into(),
            prompt_len: 1,
            tokens: (0..l as u32).collect(),
            step_max_prob: probs.clone(),
            step_token_prob: probs,
            attention,
            log_likelihood: 0.0,
            truncated: false,
        }
    }

    #[test]
    fn scalar_examples() {
        let cfg = IndicatorConfig::default();
        assert!((star_scalar(1.17, 0.43, &cfg) - 0.482).abs() < 5e-4);
        let s = star_scalar(1.0, 1.0, &cfg);
        let expected = 2.0 * sigmoid(-1.0) + sigmoid(1.0).powi(2);
        assert!((s - expected).abs() < 1e-15);
        assert!((s - 1.072).abs() < 1e-3);
        assert!((star_scalar(0.81, 1.47, &cfg) - 1.61).abs() < 5e-3);
    }

    #[test]
    fn attentive_examples() {
        let a = attentive_scores(&identity(5), 1, Variant::Both).unwrap();
        assert_eq!(a, vec![1.0; 4]);
        assert!(attentive_scores(&identity(1), 1, Variant::Both).is_err());
        // Lower-triangular uniform rows, L = 3, P = 1.
        let w = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.0],
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        ];
        let h = attentive_scores(&w, 1, Variant::History).unwrap();
        let f = attentive_scores(&w, 1, Variant::Future).unwrap();
        let b = attentive_scores(&w, 1, Variant::Both).unwrap();
        assert_eq!(h, vec![0.5, 2.0 / 3.0]);
        assert_eq!(f, vec![0.5 + 1.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(b, vec![0.5 + 1.0 / 3.0, 2.0 / 3.0]);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(mean_normalize(&[2.0, 2.0, 2.0], 1e-8).unwrap(), vec![1.0; 3]);
        assert_eq!(mean_normalize(&[1.0, 3.0], 1e-8).unwrap(), vec![0.5, 1.5]);
        assert!(matches!(mean_normalize(&[0.0, 0.0], 1e-8), Err(Error::Degenerate(_))));
        assert!(mean_normalize(&[], 1e-8).is_err());
    }

    #[test]
    fn constant_trace_scores_one() {
        let t = trace(5, vec![1.0; 4], identity(5));
        let s = score_trace(&t, &IndicatorConfig::default(), Variant::Both).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.positions, vec![1, 2, 3, 4]);
        for v in s.conf.iter().chain(&s.attn).chain(&s.star) {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_posterior_confidence() {
        let t = trace(3, vec![1.0 / 50.0; 2], identity(3));
        assert_eq!(confidence_scores(&t).unwrap(), vec![0.02; 2]);
    }

    #[test]
    fn combine_rejects_bad_input() {
        let cfg = IndicatorConfig::default();
        assert!(star_combine(&[1.0], &[f64::NAN], &cfg).is_err());
        assert!(star_combine(&[0.0], &[1.0], &cfg).is_err());
        assert!(star_combine(&[1.0, 2.0], &[1.0], &cfg).is_err());
        let raw = IndicatorConfig {
            renorm_star: false,
            ..cfg
        };
        let s = star_combine(&[1.0, 1.0], &[0.0, 2.0], &raw).unwrap();
        assert_eq!(s[0], 0.0);
    }
}
