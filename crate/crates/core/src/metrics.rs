//! Edit distance, token error rate, correctness labels and indicator
//! quality measures.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::Token;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "op")]
pub enum AlignOp {
    Match { hyp: usize, reference: usize },
    Substitute { hyp: usize, reference: usize },
    /// Hypothesis token with no reference counterpart.
    Insert { hyp: usize },
    /// Reference token missing from the hypothesis.
    Delete { reference: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub ops: Vec<AlignOp>,
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl Alignment {
    /// Rebuilds the hypothesis from the reference by replaying the ops.
    pub fn replay(&self, hyp: &[Token], reference: &[Token]) -> Vec<Token> {
        self.ops
            .iter()
            .filter_map(|op| match *op {
                AlignOp::Match { reference: r, .. } => Some(reference[r]),
                AlignOp::Substitute { hyp: h, .. } | AlignOp::Insert { hyp: h } => Some(hyp[h]),
                AlignOp::Delete { .. } => None,
            })
            .collect()
    }
}

fn dp_table(hyp: &[Token], reference: &[Token]) -> Vec<Vec<usize>> {
    let (n, m) = (hyp.len(), reference.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[i - 1][j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            d[i][j] = diag.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d
}

/// Distance only, in `O(min)` memory.
pub fn edit_distance_value(a: &[Token], b: &[Token]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`. Among
/// optimal paths the trace-back prefers match, then substitute, then
/// delete, then insert.
pub fn edit_distance(hyp: &[Token], reference: &[Token]) -> Alignment {
    let d = dp_table(hyp, reference);
    let (mut i, mut j) = (hyp.len(), reference.len());
    let mut ops = Vec::with_capacity(i.max(j));
    let (mut s, mut ins, mut del) = (0, 0, 0);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && hyp[i - 1] == reference[j - 1] && d[i][j] == d[i - 1][j - 1] {
            ops.push(AlignOp::Match {
                hyp: i - 1,
                reference: j - 1,
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1 {
            ops.push(AlignOp::Substitute {
                hyp: i - 1,
                reference: j - 1,
            });
            s += 1;
            i -= 1;
            j -= 1;
        } else if j > 0 && d[i][j] == d[i][j - 1] + 1 {
            ops.push(AlignOp::Delete { reference: j - 1 });
            del += 1;
            j -= 1;
        } else {
            ops.push(AlignOp::Insert { hyp: i - 1 });
            ins += 1;
            i -= 1;
        }
    }
    ops.reverse();
    Alignment {
        ops,
        distance: d[hyp.len()][reference.len()],
        substitutions: s,
        insertions: ins,
        deletions: del,
    }
}

/// Corpus token error rate: total edits over total reference tokens.
pub fn ter(hyps: &[Vec<Token>], refs: &[Vec<Token>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Undefined("TER with zero reference tokens".into()));
    }
    let edits: usize = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| edit_distance_value(h, r))
        .sum();
    Ok(edits as f64 / total as f64)
}

/// One label per hypothesis token: matched tokens are correct,
/// substituted and inserted tokens are wrong.
pub fn token_correctness(hyp: &[Token], reference: &[Token]) -> Vec<bool> {
    let mut labels = vec![false; hyp.len()];
    for op in edit_distance(hyp, reference).ops {
        if let AlignOp::Match { hyp: h, .. } = op {
            labels[h] = true;
        }
    }
    labels
}

fn check_pairs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Input("non-finite score".into()));
    }
    Ok(())
}

/// Rows `{correct, wrong}`, columns `{high, low}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub threshold: f64,
    /// Raw counts `[[correct_high, correct_low], [wrong_high, wrong_low]]`.
    pub counts: [[usize; 2]; 2],
    /// Row-normalized; `None` for a row with no tokens.
    pub correct: Option<[f64; 2]>,
    pub wrong: Option<[f64; 2]>,
}

pub fn confusion_matrix(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Confusion> {
    check_pairs(scores, labels)?;
    let mut counts = [[0usize; 2]; 2];
    for (&s, &ok) in scores.iter().zip(labels) {
        counts[usize::from(!ok)][usize::from(s < threshold)] += 1;
    }
    let norm = |row: [usize; 2]| {
        let n = row[0] + row[1];
        (n > 0).then(|| [row[0] as f64 / n as f64, row[1] as f64 / n as f64])
    };
    Ok(Confusion {
        threshold,
        counts,
        correct: norm(counts[0]),
        wrong: norm(counts[1]),
    })
}

fn population_variance(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    Some(xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n)
}

/// Population variance of the scores of correct and of wrong tokens;
/// `None` for an empty class.
pub fn score_variance(scores: &[f64], labels: &[bool]) -> Result<(Option<f64>, Option<f64>)> {
    check_pairs(scores, labels)?;
    let pick = |want: bool| -> Vec<f64> {
        scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == want)
            .map(|(&s, _)| s)
            .collect()
    };
    Ok((population_variance(&pick(true)), population_variance(&pick(false))))
}

/// Score-to-probability clipping bounds for NCE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NceClip {
    pub lo: f64,
    pub hi: f64,
}

impl Default for NceClip {
    fn default() -> Self {
        NceClip { lo: 0.01, hi: 0.99 }
    }
}

pub fn nce(scores: &[f64], labels: &[bool]) -> Result<f64> {
    nce_with(scores, labels, NceClip::default())
}

/// Normalized cross-entropy with natural logarithms.
pub fn nce_with(scores: &[f64], labels: &[bool], clip: NceClip) -> Result<f64> {
    check_pairs(scores, labels)?;
    if !(0.0 < clip.lo && clip.lo < clip.hi && clip.hi < 1.0) {
        return Err(Error::Config(format!("NCE clip bounds {clip:?} must satisfy 0 < lo < hi < 1")));
    }
    let n = labels.len();
    let n_correct = labels.iter().filter(|&&l| l).count();
    if n_correct == 0 || n_correct == n {
        return Err(Error::Undefined("NCE needs both correct and wrong tokens".into()));
    }
    let p = n_correct as f64 / n as f64;
    let h_base = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
    let h_s = -scores
        .iter()
        .zip(labels)
        .map(|(&s, &ok)| {
            let s = s.clamp(clip.lo, clip.hi);
            if ok {
                s.ln()
            } else {
                (1.0 - s).ln()
            }
        })
        .sum::<f64>()
        / n as f64;
    Ok((h_base - h_s) / h_base)
}

/// Quality measures of one indicator over a labeled token pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorMetrics {
    pub indicator: String,
    pub nce: Option<f64>,
    pub var_correct: Option<f64>,
    pub var_wrong: Option<f64>,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub configuration: String,
    pub ter: f64,
    pub tokens: usize,
    pub correct_tokens: usize,
    pub indicators: Vec<IndicatorMetrics>,
}

/// Computes every metric for each named score column against `labels`.
pub fn indicator_metrics(name: &str, scores: &[f64], labels: &[bool], threshold: f64) -> Result<IndicatorMetrics> {
    let (var_correct, var_wrong) = score_variance(scores, labels)?;
    let nce = match nce(scores, labels) {
        Ok(v) => Some(v),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(IndicatorMetrics {
        indicator: name.to_string(),
        nce,
        var_correct,
        var_wrong,
        confusion: confusion_matrix(scores, labels, threshold)?,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

/// CSV with one row per configuration × indicator.
///
/// Columns: `configuration, indicator, ter, tokens, correct_tokens, nce,
/// var_correct, var_wrong, threshold, correct_high, correct_low,
/// wrong_high, wrong_low`. Undefined values are written as `undefined`;
/// confusion cells are row-normalized fractions.
pub fn write_metrics_csv(reports: &[EvalReport], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Input(format!("csv: {e}"));
    w.write_record([
        "configuration",
        "indicator",
        "ter",
        "tokens",
        "correct_tokens",
        "nce",
        "var_correct",
        "var_wrong",
        "threshold",
        "correct_high",
        "correct_low",
        "wrong_high",
        "wrong_low",
    ])
    .map_err(io)?;
    for r in reports {
        for m in &r.indicators {
            let c = &m.confusion;
            w.write_record([
                r.configuration.clone(),
                m.indicator.clone(),
                format!("{:.6}", r.ter),
                r.tokens.to_string(),
                r.correct_tokens.to_string(),
                opt(m.nce),
                opt(m.var_correct),
                opt(m.var_wrong),
                format!("{}", c.threshold),
                opt(c.correct.map(|r| r[0])),
                opt(c.correct.map(|r| r[1])),
                opt(c.wrong.map(|r| r[0])),
                opt(c.wrong.map(|r| r[1])),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}
