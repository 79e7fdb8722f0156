//! Evaluation records of one seed and their aggregation across seeds.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptConfig;
use crate::corpus::Corpus;
use crate::decoding::greedy_decode;
use crate::error::{Error, Result};
use crate::indicators::score_trace;
use crate::metrics::{indicator_metrics, nce_with, token_correctness, IndicatorMetrics, NceClip};

pub const STUDY_FORMAT: &str = "starlab-study";
pub const SUMMARY_FORMAT: &str = "starlab-summary";
pub const FORMAT_VERSION: u32 = 1;

/// TER of one checkpoint on one domain's test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerRow {
    pub checkpoint: String,
    pub arm: String,
    /// Target domain the checkpoint was adapted on; `None` for the frozen model.
    pub adapted_on: Option<String>,
    pub domain: String,
    pub utterances: usize,
    pub ter: f64,
    pub frozen_ter: f64,
    /// `(frozen - arm) / frozen`; `None` when the frozen TER is zero.
    pub relative_reduction: Option<f64>,
}

pub fn relative_reduction(frozen: f64, arm: f64) -> Option<f64> {
    (frozen > 0.0).then(|| (frozen - arm) / frozen)
}

/// Indicator quality on frozen-model pseudo labels of one pool of tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorStudy {
    /// A target domain, or `all` for the pool over every target.
    pub domain: String,
    pub utterances: usize,
    pub tokens: usize,
    pub correct_tokens: usize,
    pub metrics: Vec<IndicatorMetrics>,
}

/// Pseudo-label TER before and after utterance filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStudy {
    pub domain: String,
    pub alpha: f64,
    pub utterances: usize,
    pub kept: usize,
    /// `None` when the pool has no reference tokens.
    pub pseudo_ter: Option<f64>,
    pub kept_ter: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// CRC-32 of the source checkpoint every arm started from.
    pub source_digest: String,
    /// Configured arm checkpoints that were not found.
    pub missing: Vec<String>,
    pub ter: Vec<TerRow>,
    pub indicators: Vec<IndicatorStudy>,
    pub filter: Vec<FilterStudy>,
}

/// Content-token scores and correctness labels pooled over utterances.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledTokens {
    pub utterances: usize,
    pub conf: Vec<f64>,
    pub attn: Vec<f64>,
    pub star: Vec<f64>,
    pub labels: Vec<bool>,
}

impl LabeledTokens {
    pub fn extend(&mut self, other: &LabeledTokens) {
        self.utterances += other.utterances;
        self.conf.extend(&other.conf);
        self.attn.extend(&other.attn);
        self.star.extend(&other.star);
        self.labels.extend(&other.labels);
    }
}

/// Greedy pseudo labels of `model` on a referenced corpus, scored with the
/// configured indicators. Utterances skipped by adaptation (truncated,
/// fewer than two scored tokens, degenerate scores) are skipped here too;
/// the eos position carries no correctness label and is left out.
pub fn label_tokens(model: &crate::model::Model, corpus: &Corpus, config: &AdaptConfig) -> Result<LabeledTokens> {
    model.ensure_vocab(&corpus.vocab)?;
    let opts = config.decode_options();
    let ind = config.indicator_config();
    let mut out = LabeledTokens::default();
    for u in &corpus.utterances {
        let reference = u
            .reference
            .as_deref()
            .ok_or_else(|| Error::Input(format!("utterance {} has no reference", u.id)))?;
        let trace = greedy_decode(model, u, &opts)?;
        if trace.truncated || trace.scored_len() < 2 {
            continue;
        }
        let scores = match score_trace(&trace, &ind, config.variant) {
            Ok(s) => s,
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        };
        let n = trace.content().len();
        out.utterances += 1;
        out.conf.extend(&scores.conf[..n]);
        out.attn.extend(&scores.attn[..n]);
        out.star.extend(&scores.star[..n]);
        out.labels.extend(token_correctness(trace.content(), reference));
    }
    Ok(out)
}

pub fn indicator_study(domain: &str, tokens: &LabeledTokens, threshold: f64, clip: NceClip) -> Result<IndicatorStudy> {
    let metrics = [("conf", &tokens.conf), ("attn", &tokens.attn), ("star", &tokens.star)]
        .into_iter()
        .map(|(name, scores)| {
            let mut m = indicator_metrics(name, scores, &tokens.labels, threshold)?;
            m.nce = match nce_with(scores, &tokens.labels, clip) {
                Ok(v) => Some(v),
                Err(Error::Undefined(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IndicatorStudy {
        domain: domain.to_string(),
        utterances: tokens.utterances,
        tokens: tokens.labels.len(),
        correct_tokens: tokens.labels.iter().filter(|&&l| l).count(),
        metrics,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "undefined".to_string(), |v| v.to_string())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("csv: {e}"))
}

/// Columns: `checkpoint, arm, adapted_on, domain, utterances, ter,
/// frozen_ter, relative_reduction`.
pub fn write_ter_csv(rows: &[TerRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "checkpoint",
        "arm",
        "adapted_on",
        "domain",
        "utterances",
        "ter",
        "frozen_ter",
        "relative_reduction",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.checkpoint.clone(),
            r.arm.clone(),
            r.adapted_on.clone().unwrap_or_default(),
            r.domain.clone(),
            r.utterances.to_string(),
            r.ter.to_string(),
            r.frozen_ter.to_string(),
            opt(r.relative_reduction),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<ter csv>", e))
}

/// Columns: `domain, utterances, tokens, correct_tokens, indicator, nce,
/// var_correct, var_wrong, threshold, correct_high, correct_low,
/// wrong_high, wrong_low` with raw confusion counts.
pub fn write_indicator_csv(studies: &[IndicatorStudy], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "domain",
        "utterances",
        "tokens",
        "correct_tokens",
        "indicator",
        "nce",
        "var_correct",
        "var_wrong",
        "threshold",
        "correct_high",
        "correct_low",
        "wrong_high",
        "wrong_low",
    ])
    .map_err(csv_err)?;
    for s in studies {
        for m in &s.metrics {
            let c = m.confusion.counts;
            w.write_record([
                s.domain.clone(),
                s.utterances.to_string(),
                s.tokens.to_string(),
                s.correct_tokens.to_string(),
                m.indicator.clone(),
                opt(m.nce),
                opt(m.var_correct),
                opt(m.var_wrong),
                m.confusion.threshold.to_string(),
                c[0][0].to_string(),
                c[0][1].to_string(),
                c[1][0].to_string(),
                c[1][1].to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io("<indicator csv>", e))
}

/// Columns: `domain, alpha, utterances, kept, pseudo_ter, kept_ter`.
pub fn write_filter_csv(rows: &[FilterStudy], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["domain", "alpha", "utterances", "kept", "pseudo_ter", "kept_ter"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.domain.clone(),
            r.alpha.to_string(),
            r.utterances.to_string(),
            r.kept.to_string(),
            opt(r.pseudo_ter),
            opt(r.kept_ter),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<filter csv>", e))
}

/// Median of the defined values; the mean of the middle pair for even counts.
pub fn median(values: &[Option<f64>]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// One quantity per seed plus its median.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSeries {
    pub quantity: String,
    pub name: String,
    pub per_seed: Vec<Option<f64>>,
    pub median: Option<f64>,
}

impl SeedSeries {
    fn new(quantity: &str, name: &str, per_seed: Vec<Option<f64>>) -> Self {
        SeedSeries {
            quantity: quantity.into(),
            name: name.into(),
            median: median(&per_seed),
            per_seed,
        }
    }
}

/// Cross-seed aggregate. Target quantities are means over the target
/// domains of each seed, with every arm measured on the domain it was
/// adapted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: String,
    pub version: u32,
    pub seeds: Vec<u64>,
    pub config: BTreeMap<String, String>,
    pub series: Vec<SeedSeries>,
}

impl Summary {
    pub fn get(&self, quantity: &str, name: &str) -> Option<&SeedSeries> {
        self.series.iter().find(|s| s.quantity == quantity && s.name == name)
    }
}

fn target_ter<'a>(study: &'a StudyResult, arm: &str, domain: &str) -> Option<&'a TerRow> {
    study.ter.iter().find(|r| {
        r.domain == domain
            && r.arm == arm
            && (arm == "frozen" || r.adapted_on.as_deref() == Some(domain))
    })
}

/// Aggregates per-seed studies; `source` and `targets` name the domains.
pub fn summarize(
    studies: &[StudyResult],
    arms: &[String],
    source: &str,
    targets: &[String],
    config: BTreeMap<String, String>,
) -> Summary {
    let mut series = Vec::new();
    let per_seed = |f: &dyn Fn(&StudyResult) -> Option<f64>| studies.iter().map(f).collect::<Vec<_>>();

    series.push(SeedSeries::new(
        "source_ter",
        "frozen",
        per_seed(&|s| target_ter(s, "frozen", source).map(|r| r.ter)),
    ));
    for arm in arms {
        let ters = per_seed(&|s| {
            let v: Option<Vec<f64>> = targets.iter().map(|d| target_ter(s, arm, d).map(|r| r.ter)).collect();
            v.and_then(|v| mean(&v))
        });
        series.push(SeedSeries::new("target_ter", arm, ters));
        let reductions = per_seed(&|s| {
            let v: Option<Vec<f64>> = targets
                .iter()
                .map(|d| target_ter(s, arm, d).and_then(|r| r.relative_reduction))
                .collect();
            v.and_then(|v| mean(&v))
        });
        series.push(SeedSeries::new("relative_reduction", arm, reductions));
    }
    for ind in ["conf", "attn", "star"] {
        let find = |s: &StudyResult| -> Option<IndicatorMetrics> {
            s.indicators
                .iter()
                .find(|i| i.domain == "all")
                .and_then(|i| i.metrics.iter().find(|m| m.indicator == ind).cloned())
        };
        series.push(SeedSeries::new("nce", ind, per_seed(&|s| find(s).and_then(|m| m.nce))));
        series.push(SeedSeries::new(
            "var_correct",
            ind,
            per_seed(&|s| find(s).and_then(|m| m.var_correct)),
        ));
    }
    let filter_mean = |s: &StudyResult, f: fn(&FilterStudy) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = s.filter.iter().map(f).collect();
        v.filter(|v| v.len() == targets.len()).and_then(|v| mean(&v))
    };
    series.push(SeedSeries::new(
        "filter_pseudo_ter",
        "all",
        per_seed(&|s| filter_mean(s, |f| f.pseudo_ter)),
    ));
    series.push(SeedSeries::new(
        "filter_kept_ter",
        "all",
        per_seed(&|s| filter_mean(s, |f| f.kept_ter)),
    ));
    Summary {
        format: SUMMARY_FORMAT.into(),
        version: FORMAT_VERSION,
        seeds: studies.iter().map(|s| s.seed).collect(),
        config,
        series,
    }
}

/// Columns: `quantity, name, seed-<s>..., median`.
pub fn write_summary_csv(summary: &Summary, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["quantity".to_string(), "name".to_string()];
    header.extend(summary.seeds.iter().map(|s| format!("seed-{s}")));
    header.push("median".into());
    w.write_record(&header).map_err(csv_err)?;
    for s in &summary.series {
        let mut row = vec![s.quantity.clone(), s.name.clone()];
        row.extend(s.per_seed.iter().map(|v| opt(*v)));
        row.push(opt(s.median));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<summary csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(arm: &str, adapted_on: Option<&str>, domain: &str, ter: f64, frozen: f64) -> TerRow {
        TerRow {
            checkpoint: arm.into(),
            arm: arm.into(),
            adapted_on: adapted_on.map(String::from),
            domain: domain.into(),
            utterances: 10,
            ter,
            frozen_ter: frozen,
            relative_reduction: relative_reduction(frozen, ter),
        }
    }

    fn study(seed: u64, star: f64) -> StudyResult {
        StudyResult {
            format: STUDY_FORMAT.into(),
            version: FORMAT_VERSION,
            seed,
            config: BTreeMap::new(),
            source_digest: String::new(),
            missing: Vec::new(),
            ter: vec![
                row("frozen", None, "src", 0.0, 0.0),
                row("frozen", None, "a", 0.2, 0.2),
                row("frozen", None, "b", 0.4, 0.4),
                row("star", Some("a"), "a", star, 0.2),
                row("star", Some("a"), "b", 0.0, 0.4),
                row("star", Some("b"), "b", 0.2, 0.4),
            ],
            indicators: Vec::new(),
            filter: Vec::new(),
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[Some(3.0), None, Some(1.0), Some(2.0)]), Some(2.0));
        assert_eq!(median(&[Some(4.0), Some(1.0)]), Some(2.5));
        assert_eq!(median(&[None]), None);
    }

    #[test]
    fn summary_uses_matching_adaptation_domain() {
        let studies = [study(0, 0.1), study(1, 0.2)];
        let arms = vec!["frozen".to_string(), "star".to_string()];
        let targets = vec!["a".to_string(), "b".to_string()];
        let s = summarize(&studies, &arms, "src", &targets, BTreeMap::new());
        let t = s.get("target_ter", "star").unwrap();
        for (got, want) in t.per_seed.iter().zip([0.15, 0.2]) {
            assert!((got.unwrap() - want).abs() < 1e-12);
        }
        let r = s.get("relative_reduction", "star").unwrap();
        assert!((r.per_seed[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((r.per_seed[1].unwrap() - 0.25).abs() < 1e-12);
        assert!((s.get("target_ter", "frozen").unwrap().median.unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(s.get("source_ter", "frozen").unwrap().median, Some(0.0));
        assert_eq!(s.get("nce", "star").unwrap().median, None);
        let mut buf = Vec::new();
        write_summary_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("quantity,name,seed-0,seed-1,median\n"));
    }

    #[test]
    fn reduction_column() {
        assert_eq!(relative_reduction(0.0, 0.1), None);
        assert!((relative_reduction(0.3, 0.2).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }
}
