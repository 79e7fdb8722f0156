//! Utterance-level filtering by ensemble disagreement.
//!
//! An utterance's uncertainty is the mean normalized edit distance between
//! its base transcription and each alternative, scaled by the number of
//! distinct alternatives. The highest-scoring `alpha` percent are dropped.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{Token, Utterance};
use crate::decoding::{
    beam_decode, forced_trace, perturbed_decodes, DecodeOptions, HypothesisOrigin, HypothesisSet,
};
use crate::error::{Error, Result};
use crate::metrics::{edit_distance, edit_distance_value, AlignOp};
use crate::model::Model;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    /// Perturbed copies per utterance.
    pub k: usize,
    /// Perturbation scale relative to each tensor's spread.
    pub rho: f64,
    /// Percent of utterances dropped.
    pub alpha: f64,
    pub beam_n: usize,
    /// Use raw edit distance instead of the length-normalized one.
    pub raw_ed: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            k: 5,
            rho: 0.05,
            alpha: 20.0,
            beam_n: 5,
            raw_ed: false,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("rho must be finite and >= 0, got {}", self.rho)));
        }
        if !(0.0..100.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 100), got {}", self.alpha)));
        }
        if self.beam_n < 2 {
            return Err(Error::Config("beam_n must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceQuality {
    pub utterance_id: String,
    /// Mean (normalized) edit distance; `+∞` for a truncated base.
    pub u: f64,
    /// Distinct alternatives.
    pub dedup: usize,
    pub score: f64,
    /// Position in descending score order, 0 = most uncertain.
    pub rank: usize,
    pub kept: bool,
    pub origin: HypothesisOrigin,
}

pub fn utterance_uncertainty(hyps: &HypothesisSet, raw_ed: bool) -> Result<f64> {
    if hyps.alts.is_empty() {
        return Err(Error::Input(format!("utterance {} has no alternatives", hyps.base.utterance_id)));
    }
    if hyps.base.truncated {
        return Ok(f64::INFINITY);
    }
    let base = hyps.base.content();
    let total: f64 = hyps
        .alts
        .iter()
        .map(|alt| {
            let d = edit_distance_value(base, alt) as f64;
            if raw_ed {
                d
            } else {
                d / base.len().max(alt.len()).max(1) as f64
            }
        })
        .sum();
    Ok(total / hyps.alts.len() as f64)
}

/// Number of distinct alternatives; the base is not counted.
pub fn dedup_factor(hyps: &HypothesisSet) -> Result<usize> {
    if hyps.alts.is_empty() {
        return Err(Error::Input(format!("utterance {} has no alternatives", hyps.base.utterance_id)));
    }
    Ok(hyps.alts.iter().collect::<HashSet<_>>().len())
}

/// Unranked quality record; `rank` and `kept` are set by [`rank_and_filter`].
pub fn utterance_quality(hyps: &HypothesisSet, raw_ed: bool) -> Result<UtteranceQuality> {
    let u = utterance_uncertainty(hyps, raw_ed)?;
    let dedup = dedup_factor(hyps)?;
    Ok(UtteranceQuality {
        utterance_id: hyps.base.utterance_id.clone(),
        u,
        dedup,
        score: dedup as f64 * u,
        rank: 0,
        kept: true,
        origin: hyps.origin,
    })
}

/// Number of utterances dropped out of `n` at percentile `alpha`.
pub fn drop_count(n: usize, alpha: f64) -> usize {
    let raw = alpha * n as f64 / 100.0;
    (raw - 1e-9).ceil().max(0.0) as usize
}

/// Ranks by score (descending, ties by id ascending), drops the top
/// `ceil(alpha/100 · N)` and every truncated utterance. Output is in rank
/// order and independent of input order.
pub fn rank_and_filter(qualities: &[UtteranceQuality], alpha: f64) -> Result<Vec<UtteranceQuality>> {
    if !(0.0..100.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 100), got {alpha}")));
    }
    let mut ranked = qualities.to_vec();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.utterance_id.cmp(&b.utterance_id))
    });
    let dropped = drop_count(ranked.len(), alpha);
    for (i, q) in ranked.iter_mut().enumerate() {
        q.rank = i;
        q.kept = i >= dropped && q.u.is_finite();
    }
    Ok(ranked)
}

pub fn gaussian_hypotheses<T: Real>(
    model: &Model<T>,
    utterance: &Utterance,
    k: usize,
    rho: f64,
    seed_value: u64,
    opts: &DecodeOptions,
) -> Result<HypothesisSet> {
    perturbed_decodes(model, utterance, k, rho, seed_value, opts)
}

/// Best beam hypothesis as base; the whole N-best list as alternatives.
pub fn beam_hypotheses<T: Real>(
    model: &Model<T>,
    utterance: &Utterance,
    beam_n: usize,
    opts: &DecodeOptions,
) -> Result<HypothesisSet> {
    if beam_n < 2 {
        return Err(Error::Config("beam hypotheses need beam_n >= 2".into()));
    }
    let result = beam_decode(model, utterance, beam_n, opts)?;
    Ok(HypothesisSet {
        base: result.best,
        alts: result.hypotheses.iter().map(|h| h.content().to_vec()).collect(),
        origin: HypothesisOrigin::Beam,
    })
}

/// Per-slot majority vote over the N-best list aligned to its best entry.
/// Each slot of the best hypothesis receives one vote per hypothesis (its
/// aligned token, or nothing for a deletion); ties go to the best
/// hypothesis's own token. Insertions relative to the best are ignored.
pub fn consensus(nbest: &[Vec<Token>]) -> Vec<Token> {
    let Some(best) = nbest.first() else {
        return Vec::new();
    };
    let mut votes: Vec<BTreeMap<Option<Token>, usize>> = vec![BTreeMap::new(); best.len()];
    for hyp in nbest {
        let mut aligned: Vec<Option<Token>> = vec![None; best.len()];
        for op in edit_distance(hyp, best).ops {
            match op {
                AlignOp::Match { hyp: h, reference: r } | AlignOp::Substitute { hyp: h, reference: r } => {
                    aligned[r] = Some(hyp[h]);
                }
                AlignOp::Delete { .. } | AlignOp::Insert { .. } => {}
            }
        }
        for (slot, tok) in votes.iter_mut().zip(aligned) {
            *slot.entry(tok).or_insert(0) += 1;
        }
    }
    votes
        .iter()
        .zip(best)
        .filter_map(|(slot, &own)| {
            let top = *slot.values().max().expect("every slot has votes");
            if slot.get(&Some(own)) == Some(&top) {
                return Some(own);
            }
            slot.iter().find(|(_, &c)| c == top).and_then(|(t, _)| *t)
        })
        .collect()
}

/// Consensus sequence as base (traced under the model); the N-best list as
/// alternatives.
pub fn consensus_hypotheses<T: Real>(
    model: &Model<T>,
    utterance: &Utterance,
    beam_n: usize,
    opts: &DecodeOptions,
) -> Result<HypothesisSet> {
    if beam_n < 2 {
        return Err(Error::Config("consensus hypotheses need beam_n >= 2".into()));
    }
    let result = beam_decode(model, utterance, beam_n, opts)?;
    let alts: Vec<Vec<Token>> = result.hypotheses.iter().map(|h| h.content().to_vec()).collect();
    let base = if result.best.truncated {
        result.best
    } else {
        let mut emitted = consensus(&alts);
        emitted.push(model.config.vocab.eos);
        forced_trace(model, utterance, &emitted, opts)?
    };
    Ok(HypothesisSet {
        base,
        alts,
        origin: HypothesisOrigin::Consensus,
    })
}

/// Filter report with columns `id, U, l, score, kept, origin`, in rank
/// order. Infinite uncertainty is written as `inf`.
pub fn write_filter_report(ranked: &[UtteranceQuality], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Input(format!("csv: {e}"));
    w.write_record(["id", "U", "l", "score", "kept", "origin"]).map_err(err)?;
    let fmt = |x: f64| {
        if x.is_finite() {
            format!("{x:.6}")
        } else {
            "inf".to_string()
        }
    };
    for q in ranked {
        w.write_record([
            q.utterance_id.clone(),
            fmt(q.u),
            q.dedup.to_string(),
            fmt(q.score),
            q.kept.to_string(),
            q.origin.as_str().to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("<filter report>", e))
}
