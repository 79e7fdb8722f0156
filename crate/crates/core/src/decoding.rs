//! Auto-regressive decoding with trace capture.
//!
//! A [`DecodeTrace`] keeps everything the token-level indicators need: the
//! emitted tokens, the posterior of every emission and the decoder
//! self-attention matrix assembled one query row per fed token. Row `i`
//! of the matrix is the attention of token `i` over tokens `0..=i`,
//! averaged over heads and (by default) over decoder layers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Token, Utterance};
use crate::error::{Error, Result};
use crate::model::network::encode;
use crate::model::{IncrementalDecoder, Model, StepOutput};
use crate::seed;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DecodeOptions {
    /// Trace length limit; `None` uses the model's `max_len`.
    pub max_len: Option<usize>,
    /// Restrict the attention matrix to one decoder layer instead of the
    /// mean over all layers.
    pub attention_layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeTrace {
    pub utterance_id: String,
    pub prompt_len: usize,
    /// Prompt, emitted tokens and (unless truncated) the final eos.
    pub tokens: Vec<Token>,
    /// Largest posterior at each emission step (`tokens.len() - prompt_len`).
    pub step_max_prob: Vec<f64>,
    /// Posterior of the token actually emitted at each step.
    pub step_token_prob: Vec<f64>,
    /// Dense `L×L` lower-triangular attention matrix.
    pub attention: Vec<Vec<f64>>,
    pub log_likelihood: f64,
    pub truncated: bool,
}

impl DecodeTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of scored positions, `L - P`.
    pub fn scored_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    /// The pseudo transcription: emitted tokens without prompt and eos.
    pub fn content(&self) -> &[Token] {
        let end = if self.truncated {
            self.tokens.len()
        } else {
            self.tokens.len() - 1
        };
        &self.tokens[self.prompt_len..end]
    }

    /// Stable 64-bit digest of tokens and probabilities.
    pub fn fingerprint(&self) -> u64 {
        let mut h = seed::derive_str(0, &self.utterance_id);
        for &t in &self.tokens {
            h = seed::derive(h, t as u64);
        }
        for p in self.step_token_prob.iter().chain(&self.step_max_prob) {
            h = seed::derive(h, p.to_bits());
        }
        h
    }
}

/// Tokens the decoder may never emit: pad and prompt tokens.
fn suppressed<T: Real>(model: &Model<T>) -> Vec<bool> {
    let v = &model.config.vocab;
    (0..v.size)
        .map(|t| t == v.pad || v.prompt.contains(&t))
        .collect()
}

/// Softmax over the emittable tokens. Suppressed entries get probability 0.
fn posterior(logits: &[f64], suppress: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(suppress)
        .filter(|(_, &s)| !s)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits
        .iter()
        .zip(suppress)
        .map(|(&l, &s)| if s { 0.0 } else { (l - max).exp() })
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    p
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

struct TraceBuilder {
    layer: Option<usize>,
    rows: Vec<Vec<f64>>,
}

impl TraceBuilder {
    fn push(&mut self, step: &StepOutput) {
        let row = match self.layer {
            Some(l) => step.self_attention[l].clone(),
            None => {
                let n = step.self_attention.len() as f64;
                let mut acc = vec![0.0; step.self_attention[0].len()];
                for layer in &step.self_attention {
                    acc.iter_mut().zip(layer).for_each(|(a, b)| *a += b);
                }
                acc.iter_mut().for_each(|a| *a /= n);
                acc
            }
        };
        self.rows.push(row);
    }

    fn finish(self) -> Vec<Vec<f64>> {
        let l = self.rows.len();
        self.rows
            .into_iter()
            .map(|mut r| {
                r.resize(l, 0.0);
                r
            })
            .collect()
    }
}

fn trace_limit<T: Real>(model: &Model<T>, opts: &DecodeOptions) -> Result<usize> {
    let limit = opts.max_len.unwrap_or(model.config.max_len).min(model.config.max_len);
    if limit < model.config.vocab.prompt_len() + 1 {
        return Err(Error::Config(format!("decode max_len {limit} is shorter than the prompt")));
    }
    if let Some(l) = opts.attention_layer {
        if l >= model.config.dec_layers {
            return Err(Error::Config(format!(
                "attention layer {l} out of range ({} decoder layers)",
                model.config.dec_layers
            )));
        }
    }
    Ok(limit)
}

fn check_features<T: Real>(model: &Model<T>, utterance: &Utterance) -> Result<()> {
    if utterance.features.cols != model.config.feature_dim || utterance.features.rows == 0 {
        return Err(Error::Input(format!(
            "utterance {} has a {}×{} feature matrix; model expects feature dim {}",
            utterance.id, utterance.features.rows, utterance.features.cols, model.config.feature_dim
        )));
    }
    if !utterance.features.all_finite() {
        return Err(Error::Input(format!("utterance {} has non-finite features", utterance.id)));
    }
    Ok(())
}

/// Runs the decoder either greedily (`forced = None`) or along a given
/// emission sequence, recording the full trace.
fn run_trace<T: Real>(
    model: &Model<T>,
    utterance: &Utterance,
    opts: &DecodeOptions,
    forced: Option<&[Token]>,
) -> Result<DecodeTrace> {
    check_features(model, utterance)?;
    let limit = trace_limit(model, opts)?;
    let vocab = &model.config.vocab;
    let suppress = suppressed(model);
    let enc = encode(&model.params, &model.config, &utterance.features);
    let mut dec = IncrementalDecoder::new(&model.params, &model.config, &enc.memory);
    let mut builder = TraceBuilder {
        layer: opts.attention_layer,
        rows: Vec::new(),
    };
    let mut tokens = vocab.prompt.clone();
    let mut last = None;
    for &t in &vocab.prompt {
        let out = dec.step(t);
        builder.push(&out);
        last = Some(out);
    }
    let mut step_max_prob = Vec::new();
    let mut step_token_prob = Vec::new();
    let mut truncated = false;
    loop {
        let step = last.take().expect("decoder has produced logits");
        let p = posterior(&step.logits, &suppress);
        let i = step_max_prob.len();
        let token = match forced {
            None => argmax(&p) as Token,
            Some(seq) => seq[i],
        };
        step_max_prob.push(p[argmax(&p)]);
        step_token_prob.push(p[token as usize]);
        tokens.push(token);
        let done = token == vocab.eos || forced.is_some_and(|s| s.len() == i + 1);
        if !done && tokens.len() >= limit {
            truncated = true;
        }
        // Feed the token so its own attention row is recorded.
        let out = dec.step(token);
        builder.push(&out);
        if done || truncated {
            break;
        }
        last = Some(out);
    }
    if forced.is_some() && *tokens.last().unwrap() != vocab.eos {
        truncated = true;
    }
    let log_likelihood = step_token_prob.iter().map(|p| p.ln()).sum();
    Ok(DecodeTrace {
        utterance_id: utterance.id.clone(),
        prompt_len: vocab.prompt_len(),
        tokens,
        step_max_prob,
        step_token_prob,
        attention: builder.finish(),
        log_likelihood,
        truncated,
    })
}

pub fn greedy_decode<T: Real>(model: &Model<T>, utterance: &Utterance, opts: &DecodeOptions) -> Result<DecodeTrace> {
    run_trace(model, utterance, opts, None)
}

/// Trace of a given emission sequence (content tokens, optionally ending
/// in eos).
pub fn forced_trace<T: Real>(
    model: &Model<T>,
    utterance: &Utterance,
    emitted: &[Token],
    opts: &DecodeOptions,
) -> Result<DecodeTrace> {
    if emitted.is_empty() {
        return Err(Error::Input("forced sequence is empty".into()));
    }
    let limit = trace_limit(model, opts)?;
    if emitted.len() + model.config.vocab.prompt_len() > limit {
        return Err(Error::Length {
            requested: emitted.len(),
            limit: limit - model.config.vocab.prompt_len(),
        });
    }
    run_trace(model, utterance, opts, Some(emitted))
}

/// One scored hypothesis from beam search. `tokens` are the emitted tokens
/// (eos included when finished).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<Token>,
    pub log_likelihood: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn normalized(&self) -> f64 {
        self.log_likelihood / self.tokens.len().max(1) as f64
    }

    /// Emitted tokens without the trailing eos.
    pub fn content(&self) -> &[Token] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

/// Source of next-token log-probabilities for beam search.
pub trait StepScorer {
    type State: Clone;

    /// Initial state and the log-probabilities of the first emission.
    fn start(&self) -> (Self::State, Vec<f64>);

    /// Feeds `token` and returns the log-probabilities of the next one.
    fn advance(&self, state: &mut Self::State, token: Token) -> Vec<f64>;
}

fn rank_hypotheses(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| {
        b.normalized()
            .total_cmp(&a.normalized())
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Beam search keeping `beam_n` live prefixes ranked by log-likelihood.
/// Every eos extension of a live prefix is kept as a finished candidate;
/// the result is the `beam_n` best by length-normalized log-likelihood.
pub fn beam_search<S: StepScorer>(scorer: &S, beam_n: usize, max_steps: usize, eos: Token) -> Vec<Hypothesis> {
    struct Live<St> {
        state: St,
        next: Vec<f64>,
        tokens: Vec<Token>,
        ll: f64,
    }
    let (state, next) = scorer.start();
    let mut live = vec![Live {
        state,
        next,
        tokens: Vec::new(),
        ll: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_steps {
        let mut candidates: Vec<(f64, usize, Token)> = Vec::new();
        for (bi, b) in live.iter().enumerate() {
            let eos_lp = b.next[eos as usize];
            if eos_lp.is_finite() {
                let mut tokens = b.tokens.clone();
                tokens.push(eos);
                finished.push(Hypothesis {
                    tokens,
                    log_likelihood: b.ll + eos_lp,
                    finished: true,
                });
            }
            let mut order: Vec<usize> = (0..b.next.len())
                .filter(|&t| t != eos as usize && b.next[t].is_finite())
                .collect();
            order.sort_by(|&x, &y| b.next[y].total_cmp(&b.next[x]).then(x.cmp(&y)));
            for &t in order.iter().take(beam_n) {
                candidates.push((b.ll + b.next[t], bi, t as Token));
            }
        }
        if step + 1 == max_steps {
            break;
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(beam_n);
        if candidates.is_empty() {
            break;
        }
        if finished.len() >= beam_n {
            rank_hypotheses(&mut finished);
            let worst = finished[beam_n - 1].normalized();
            let cur_len = (step + 1) as f64;
            if candidates[0].0 / cur_len < worst {
                break;
            }
        }
        live = candidates
            .into_iter()
            .map(|(ll, bi, t)| {
                let mut state = live[bi].state.clone();
                let next = scorer.advance(&mut state, t);
                let mut tokens = live[bi].tokens.clone();
                tokens.push(t);
                Live {
                    state,
                    next,
                    tokens,
                    ll,
                }
            })
            .collect();
    }
    if finished.is_empty() {
        // Nothing reached eos inside the step budget.
        finished = live
            .into_iter()
            .map(|b| Hypothesis {
                tokens: b.tokens,
                log_likelihood: b.ll,
                finished: false,
            })
            .collect();
    }
    rank_hypotheses(&mut finished);
    finished.dedup_by(|a, b| a.tokens == b.tokens);
    finished.truncate(beam_n);
    finished
}

struct ModelScorer<'a, T> {
    start: IncrementalDecoder<'a, T>,
    first: Vec<f64>,
    suppress: Vec<bool>,
}

impl<'a, T: Real> StepScorer for ModelScorer<'a, T> {
    type State = IncrementalDecoder<'a, T>;

    fn start(&self) -> (Self::State, Vec<f64>) {
        (self.start.clone(), self.first.clone())
    }

    fn advance(&self, state: &mut Self::State, token: Token) -> Vec<f64> {
        let out = state.step(token);
        posterior(&out.logits, &self.suppress)
            .into_iter()
            .map(f64::ln)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    /// Ranked hypotheses, best first.
    pub hypotheses: Vec<Hypothesis>,
    /// Trace of the best hypothesis.
    pub best: DecodeTrace,
}

/// N-best decoding. `beam_n = 1` is exactly greedy decoding; for larger
/// beams the greedy hypothesis always competes for the list, so the best
/// entry never scores below it.
pub fn beam_decode<T: Real>(
    model: &Model<T>,
    utterance: &Utterance,
    beam_n: usize,
    opts: &DecodeOptions,
) -> Result<BeamResult> {
    if beam_n == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let greedy = greedy_decode(model, utterance, opts)?;
    let greedy_hyp = Hypothesis {
        tokens: greedy.tokens[greedy.prompt_len..].to_vec(),
        log_likelihood: greedy.log_likelihood,
        finished: !greedy.truncated,
    };
    if beam_n == 1 {
        return Ok(BeamResult {
            hypotheses: vec![greedy_hyp],
            best: greedy,
        });
    }
    let limit = trace_limit(model, opts)?;
    let vocab = &model.config.vocab;
    let enc = encode(&model.params, &model.config, &utterance.features);
    let mut dec = IncrementalDecoder::new(&model.params, &model.config, &enc.memory);
    let suppress = suppressed(model);
    let mut first = Vec::new();
    for &t in &vocab.prompt {
        first = dec.step(t).logits;
    }
    let first = posterior(&first, &suppress).into_iter().map(f64::ln).collect();
    let scorer = ModelScorer {
        start: dec,
        first,
        suppress,
    };
    let max_steps = limit - vocab.prompt_len();
    let mut hyps = beam_search(&scorer,beam_n, max_steps, vocab.eos);
    if !hyps.iter().any(|h| h.tokens == greedy_hyp.tokens) {
        hyps.push(greedy_hyp);
        rank_hypotheses(&mut hyps);
        hyps.truncate(beam_n);
    }
    let best = if hyps[0].tokens == greedy.tokens[greedy.prompt_len..] {
        greedy
    } else {
        forced_trace(model, utterance, &hyps[0].tokens, opts)?
    };
    Ok(BeamResult { hypotheses: hyps, best })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HypothesisOrigin {
    Gaussian,
    Beam,
    Consensus,
}

impl HypothesisOrigin {
    pub fn as_str(&self) -> &'static str {
        match self {
            HypothesisOrigin::Gaussian => "gaussian",
            HypothesisOrigin::Beam => "beam",
            HypothesisOrigin::Consensus => "consensus",
        }
    }
}

/// A base transcription and its alternatives.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSet {
    pub base: DecodeTrace,
    /// Alternative transcriptions (content tokens only).
    pub alts: Vec<Vec<Token>>,
    pub origin: HypothesisOrigin,
}

/// `K` perturbed copies of a model, built once and reused across
/// utterances.
pub struct PerturbedEnsemble<T = f32> {
    pub members: Vec<Model<T>>,
}

impl<T: Real> PerturbedEnsemble<T> {
    pub fn new(model: &Model<T>, k: usize, rho: f64, seed_value: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        let members = (0..k)
            .map(|i| crate::model::perturb_params(model, rho, seed::derive(seed_value, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(PerturbedEnsemble { members })
    }

    /// Greedy decodes of every member, given the unperturbed base trace.
    pub fn hypotheses(&self, base: DecodeTrace, utterance: &Utterance, opts: &DecodeOptions) -> Result<HypothesisSet> {
        let alts = self
            .members
            .iter()
            .map(|m| greedy_decode(m, utterance, opts).map(|t| t.content().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(HypothesisSet {
            base,
            alts,
            origin: HypothesisOrigin::Gaussian,
        })
    }
}

pub fn perturbed_decodes<T: Real>(
    model: &Model<T>,
    utterance: &Utterance,
    k: usize,
    rho: f64,
    seed_value: u64,
    opts: &DecodeOptions,
) -> Result<HypothesisSet> {
    let ensemble = PerturbedEnsemble::new(model, k, rho, seed_value)?;
    let base = greedy_decode(model, utterance, opts)?;
    ensemble.hypotheses(base, utterance, opts)
}

pub fn write_traces(traces: &[DecodeTrace], out: &mut impl Write) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut *out, t).map_err(|e| Error::Input(e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io("<traces>", e))?;
    }
    Ok(())
}

pub fn save_traces(traces: &[DecodeTrace], path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_traces(traces, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_traces(input: impl BufRead) -> Result<Vec<DecodeTrace>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let t: DecodeTrace = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        validate_trace(&t).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(t);
    }
    Ok(out)
}

pub fn load_traces(path: &Path) -> Result<Vec<DecodeTrace>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_traces(BufReader::new(f))
}

/// Structural checks for traces that come from outside the decoder.
pub fn validate_trace(t: &DecodeTrace) -> Result<()> {
    let l = t.tokens.len();
    if t.prompt_len == 0 || t.prompt_len > l {
        return Err(Error::Input("prompt_len out of range".into()));
    }
    let scored = l - t.prompt_len;
    if t.step_max_prob.len() != scored || t.step_token_prob.len() != scored {
        return Err(Error::Input(format!(
            "{scored} scored positions but {} / {} step probabilities",
            t.step_max_prob.len(),
            t.step_token_prob.len()
        )));
    }
    if t.attention.len() != l || t.attention.iter().any(|r| r.len() != l) {
        return Err(Error::Input(format!("attention matrix is not {l}×{l}")));
    }
    let probs_ok = t
        .step_max_prob
        .iter()
        .chain(&t.step_token_prob)
        .all(|p| p.is_finite() && *p >= 0.0 && *p <= 1.0);
    if !probs_ok {
        return Err(Error::Input("step probabilities outside [0, 1]".into()));
    }
    if t.attention.iter().flatten().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Input("attention entries must be finite and >= 0".into()));
    }
    Ok(())
}
