//! Self-training adaptation: pseudo-labeling, utterance filtering, token
//! scoring and weighted finetuning, repeated for a number of rounds.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Token, Utterance};
use crate::decoding::{greedy_decode, DecodeOptions, DecodeTrace, HypothesisOrigin, PerturbedEnsemble};
use crate::error::{Error, Result};
use crate::indicators::{score_trace, IndicatorConfig, TokenScores, Variant};
use crate::metrics::ter;
use crate::model::{backward_and_step, Model, OptimState};
use crate::seed;
use crate::uttfilter::{
    beam_hypotheses, consensus_hypotheses, rank_and_filter, utterance_quality, FilterConfig, UtteranceQuality,
};

pub const RUN_REPORT_FORMAT: &str = "starlab-run-report";
pub const RUN_REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Star,
    Conf,
    Attn,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterOrigin {
    Gaussian,
    Beam,
    Consensus,
    None,
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "star" => Ok(WeightMode::Star),
            "conf" => Ok(WeightMode::Conf),
            "attn" => Ok(WeightMode::Attn),
            "uniform" => Ok(WeightMode::Uniform),
            _ => Err(Error::Config(format!("unknown weight mode `{s}`"))),
        }
    }
}

impl std::str::FromStr for FilterOrigin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(FilterOrigin::Gaussian),
            "beam" => Ok(FilterOrigin::Beam),
            "consensus" => Ok(FilterOrigin::Consensus),
            "none" => Ok(FilterOrigin::None),
            _ => Err(Error::Config(format!("unknown filter origin `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub lambda: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub renorm_star: bool,
    pub alpha: f64,
    pub k: usize,
    pub rho: f64,
    pub beam_n: usize,
    pub raw_ed: bool,
    pub lr: f64,
    pub epochs: usize,
    pub grad_accum: usize,
    pub rounds: usize,
    pub filter_origin: FilterOrigin,
    pub weight_mode: WeightMode,
    pub variant: Variant,
    /// Single decoder layer for the attention matrix; `None` averages all.
    pub attention_layer: Option<usize>,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        let ind = IndicatorConfig::default();
        let filt = FilterConfig::default();
        AdaptConfig {
            lambda: ind.lambda,
            tau: ind.tau,
            epsilon: ind.epsilon,
            renorm_star: ind.renorm_star,
            alpha: filt.alpha,
            k: filt.k,
            rho: filt.rho,
            beam_n: filt.beam_n,
            raw_ed: filt.raw_ed,
            lr: 1e-5,
            epochs: 2,
            grad_accum: 16,
            rounds: 1,
            filter_origin: FilterOrigin::Gaussian,
            weight_mode: WeightMode::Star,
            variant: Variant::Both,
            attention_layer: None,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn indicator_config(&self) -> IndicatorConfig {
        IndicatorConfig {
            lambda: self.lambda,
            tau: self.tau,
            epsilon: self.epsilon,
            renorm_star: self.renorm_star,
        }
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            k: self.k,
            rho: self.rho,
            alpha: self.alpha,
            beam_n: self.beam_n,
            raw_ed: self.raw_ed,
        }
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            max_len: None,
            attention_layer: self.attention_layer,
        }
    }

    pub fn finetune_config(&self, seed_value: u64) -> FinetuneConfig {
        FinetuneConfig {
            lr: self.lr,
            epochs: self.epochs,
            grad_accum: self.grad_accum,
            seed: seed_value,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.indicator_config().validate()?;
        self.filter_config().validate()?;
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        self.finetune_config(self.seed).validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub grad_accum: usize,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.grad_accum == 0 {
            return Err(Error::Config("grad_accum must be at least 1".into()));
        }
        Ok(())
    }
}

/// One pseudo-labeled utterance. `scores` and `quality` are filled by the
/// phases that need them.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSample {
    /// Index into the corpus the sample was decoded from.
    pub index: usize,
    pub trace: DecodeTrace,
    pub scores: Option<TokenScores>,
    pub quality: Option<UtteranceQuality>,
}

/// Greedy pseudo labels for every utterance. References are not read.
pub fn pseudo_label(model: &Model, corpus: &Corpus, opts: &DecodeOptions) -> Result<Vec<PseudoSample>> {
    corpus
        .utterances
        .iter()
        .enumerate()
        .map(|(index, u)| {
            Ok(PseudoSample {
                index,
                trace: greedy_decode(model, u, opts)?,
                scores: None,
                quality: None,
            })
        })
        .collect()
}

/// A finetuning example: target content tokens and one weight per scored
/// position (content plus eos).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample<'a> {
    pub utterance: &'a Utterance,
    pub target: Vec<Token>,
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    /// Loss of every example in visiting order.
    pub step_losses: Vec<f64>,
    pub epoch_mean_loss: Vec<f64>,
    pub updates: u64,
}

/// Batch-1 weighted finetuning with gradient accumulation over a seeded
/// shuffle per epoch. Leftover gradients are applied at the end of each
/// epoch. All examples are validated before the first update.
pub fn informed_finetune(
    model: &Model,
    examples: &[TrainExample<'_>],
    config: &FinetuneConfig,
) -> Result<(Model, FinetuneLog)> {
    config.validate()?;
    let mut model = model.clone();
    for ex in examples {
        if let Some(w) = &ex.weights {
            if w.len() != ex.target.len() + 1 {
                return Err(Error::Input(format!(
                    "utterance {}: {} weights for {} scored positions",
                    ex.utterance.id,
                    w.len(),
                    ex.target.len() + 1
                )));
            }
        }
        model.check_target(ex.utterance, &ex.target)?;
    }
    let mut log = FinetuneLog::default();
    if config.epochs == 0 || examples.is_empty() {
        return Ok((model, log));
    }
    let mut optim = OptimState::new(&model, config.lr, config.grad_accum)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = seed::rng(seed::derive(config.seed, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let ex = &examples[i];
            let graph = model.loss_graph(ex.utterance, &ex.target, ex.weights.as_deref())?;
            log.step_losses.push(graph.loss);
            total += graph.loss;
            if backward_and_step(&mut model, &mut optim, &graph)? {
                log.updates += 1;
            }
        }
        if optim.pending() > 0 {
            optim.apply(&mut model);
            log.updates += 1;
        }
        log.epoch_mean_loss.push(total / examples.len() as f64);
    }
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub seed: u64,
    pub pseudo_labels: usize,
    pub truncated: usize,
    /// Pseudo labels with fewer than two scored tokens.
    pub too_short: usize,
    pub dropped_by_filter: usize,
    /// Samples whose indicator normalization was degenerate.
    pub degenerate: usize,
    pub kept: usize,
    pub dropped_ids: Vec<String>,
    /// Order-sensitive digest of every pseudo-label trace of the round.
    pub trace_digest: String,
    /// Pseudo-label TER over all utterances; only when references exist.
    pub pseudo_ter: Option<f64>,
    /// Pseudo-label TER over the utterances surviving the filter.
    pub filter_kept_ter: Option<f64>,
    /// Pseudo-label TER over the finetuning set.
    pub kept_pseudo_ter: Option<f64>,
    pub finetune: FinetuneLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub version: u32,
    pub arm: String,
    pub corpus_domain: String,
    pub corpus_size: usize,
    pub config: AdaptConfig,
    pub rounds: Vec<RoundReport>,
}

/// Wall-clock per phase, kept apart from the report so reports stay
/// byte-identical across runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTimings {
    pub pseudo_label_s: Vec<f64>,
    pub filter_s: Vec<f64>,
    pub score_s: Vec<f64>,
    pub finetune_s: Vec<f64>,
}

/// Result of an adaptation run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: Model,
    pub report: RunReport,
    pub timings: RunTimings,
    /// Ranked utterance qualities per round; empty for unfiltered rounds.
    pub rankings: Vec<Vec<UtteranceQuality>>,
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn trace_digest(samples: &[PseudoSample]) -> String {
    let h = samples
        .iter()
        .fold(0x5354_4152u64, |h, s| seed::derive(h, s.trace.fingerprint()));
    format!("{h:016x}")
}

fn pseudo_ter<'a>(corpus: &Corpus, samples: impl Iterator<Item = &'a PseudoSample>) -> Option<f64> {
    if !corpus.has_references() {
        return None;
    }
    let (hyps, refs): (Vec<Vec<Token>>, Vec<Vec<Token>>) = samples
        .map(|s| {
            let r = corpus.utterances[s.index].reference.clone().expect("references present");
            (s.trace.content().to_vec(), r)
        })
        .unzip();
    ter(&hyps, &refs).ok()
}

/// Fills `quality` for every sample with the configured ensemble and marks
/// which samples survive ranking.
fn filter_samples(
    model: &Model,
    corpus: &Corpus,
    samples: &mut [PseudoSample],
    config: &AdaptConfig,
    round_seed: u64,
) -> Result<Vec<UtteranceQuality>> {
    let opts = config.decode_options();
    let ensemble = match config.filter_origin {
        FilterOrigin::Gaussian => Some(PerturbedEnsemble::new(
            model,
            config.k,
            config.rho,
            seed::derive_str(round_seed, "perturb"),
        )?),
        _ => None,
    };
    let mut qualities = Vec::with_capacity(samples.len());
    for s in samples.iter() {
        let utt = &corpus.utterances[s.index];
        let hyps = match config.filter_origin {
            FilterOrigin::Gaussian => ensemble.as_ref().expect("built above").hypotheses(s.trace.clone(), utt, &opts)?,
            FilterOrigin::Beam => beam_hypotheses(model, utt, config.beam_n, &opts)?,
            FilterOrigin::Consensus => consensus_hypotheses(model, utt, config.beam_n, &opts)?,
            FilterOrigin::None => unreachable!("no filtering requested"),
        };
        qualities.push(utterance_quality(&hyps, config.raw_ed)?);
    }
    let ranked = rank_and_filter(&qualities, config.alpha)?;
    let by_id: std::collections::HashMap<&str, &UtteranceQuality> =
        ranked.iter().map(|q| (q.utterance_id.as_str(), q)).collect();
    for s in samples.iter_mut() {
        s.quality = Some((*by_id[s.trace.utterance_id.as_str()]).clone());
    }
    Ok(ranked)
}

fn round_seed(base: u64, round: usize) -> u64 {
    seed::derive_str(seed::derive(base, round as u64), "round")
}

/// Pseudo labels of `model` with qualities filled exactly as the first
/// round of [`run_star`] fills them.
pub fn filter_round(model: &Model, corpus: &Corpus, config: &AdaptConfig) -> Result<Vec<PseudoSample>> {
    config.validate()?;
    if config.filter_origin == FilterOrigin::None {
        return Err(Error::Config("filter_origin is none".into()));
    }
    model.ensure_vocab(&corpus.vocab)?;
    let mut samples = pseudo_label(model, corpus, &config.decode_options())?;
    filter_samples(model, corpus, &mut samples, config, round_seed(config.seed, 0))?;
    Ok(samples)
}

/// Full pipeline for `config.rounds` rounds; each round re-labels with the
/// latest model. The input model is not modified.
pub fn run_star(model: &Model, corpus: &Corpus, config: &AdaptConfig) -> Result<RunOutput> {
    run_star_with_arm(model, corpus, config, "star")
}

pub fn run_star_with_arm(
    model: &Model,
    corpus: &Corpus,
    config: &AdaptConfig,
    arm: &str,
) -> Result<RunOutput> {
    run_star_observed(model, corpus, config, arm, &mut |_, _| Ok(()))
}

/// As [`run_star`], calling `observer(round, model)` after every round.
pub fn run_star_observed(
    model: &Model,
    corpus: &Corpus,
    config: &AdaptConfig,
    arm: &str,
    observer: &mut dyn FnMut(usize, &Model) -> Result<()>,
) -> Result<RunOutput> {
    config.validate()?;
    model.ensure_vocab(&corpus.vocab)?;
    let opts = config.decode_options();
    let ind = config.indicator_config();
    let mut current = model.clone();
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut timings = RunTimings::default();
    let mut rankings = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let round_seed = round_seed(config.seed, round);
        let t = Instant::now();
        let mut samples = pseudo_label(&current, corpus, &opts)?;
        timings.pseudo_label_s.push(secs(t.elapsed()));
        let digest = trace_digest(&samples);
        let all_ter = pseudo_ter(corpus, samples.iter());

        let t = Instant::now();
        rankings.push(if config.filter_origin != FilterOrigin::None {
            filter_samples(&current, corpus, &mut samples, config, round_seed)?
        } else {
            Vec::new()
        });
        timings.filter_s.push(secs(t.elapsed()));
        let filter_ter = pseudo_ter(
            corpus,
            samples.iter().filter(|s| s.quality.as_ref().is_none_or(|q| q.kept)),
        );

        let t = Instant::now();
        let (mut truncated, mut too_short, mut dropped, mut degenerate) = (0, 0, 0, 0);
        let mut dropped_ids = Vec::new();
        let mut kept: Vec<PseudoSample> = Vec::new();
        for mut s in samples {
            if s.trace.truncated {
                truncated += 1;
                dropped_ids.push(s.trace.utterance_id.clone());
                continue;
            }
            if s.quality.as_ref().is_some_and(|q| !q.kept) {
                dropped += 1;
                dropped_ids.push(s.trace.utterance_id.clone());
                continue;
            }
            if s.trace.scored_len() < 2 {
                too_short += 1;
                continue;
            }
            if config.weight_mode != WeightMode::Uniform {
                match score_trace(&s.trace, &ind, config.variant) {
                    Ok(sc) => s.scores = Some(sc),
                    Err(Error::Degenerate(_)) => {
                        degenerate += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            }
            kept.push(s);
        }
        let kept_ter = pseudo_ter(corpus, kept.iter());
        let examples: Vec<TrainExample<'_>> = kept
            .iter()
            .map(|s| TrainExample {
                utterance: &corpus.utterances[s.index],
                target: s.trace.content().to_vec(),
                weights: s.scores.as_ref().map(|sc| match config.weight_mode {
                    WeightMode::Star => sc.star.clone(),
                    WeightMode::Conf => sc.conf.clone(),
                    WeightMode::Attn => sc.attn.clone(),
                    WeightMode::Uniform => unreachable!("uniform samples are not scored"),
                }),
            })
            .collect();
        timings.score_s.push(secs(t.elapsed()));

        let t = Instant::now();
        let ft = config.finetune_config(seed::derive_str(round_seed, "finetune"));
        let (next, log) = informed_finetune(&current, &examples, &ft)?;
        timings.finetune_s.push(secs(t.elapsed()));
        current = next;
        observer(round, &current)?;
        rounds.push(RoundReport {
            round,
            seed: round_seed,
            pseudo_labels: corpus.len(),
            truncated,
            too_short,
            dropped_by_filter: dropped,
            degenerate,
            kept: examples.len(),
            dropped_ids,
            trace_digest: digest,
            pseudo_ter: all_ter,
            filter_kept_ter: filter_ter,
            kept_pseudo_ter: kept_ter,
            finetune: log,
        });
    }
    let report = RunReport {
        format: RUN_REPORT_FORMAT.into(),
        version: RUN_REPORT_VERSION,
        arm: arm.into(),
        corpus_domain: corpus.domain.name.clone(),
        corpus_size: corpus.len(),
        config: config.clone(),
        rounds,
    };
    Ok(RunOutput {
        model: current,
        report,
        timings,
        rankings,
    })
}

/// Plain self-training: greedy pseudo labels, unit weights, no filtering,
/// one round.
pub fn run_self_training(model: &Model, corpus: &Corpus, config: &AdaptConfig) -> Result<(Model, FinetuneLog)> {
    model.ensure_vocab(&corpus.vocab)?;
    let samples = pseudo_label(model, corpus, &config.decode_options())?;
    let examples: Vec<TrainExample<'_>> = samples
        .iter()
        .filter(|s| !s.trace.truncated && s.trace.scored_len() >= 2)
        .map(|s| TrainExample {
            utterance: &corpus.utterances[s.index],
            target: s.trace.content().to_vec(),
            weights: None,
        })
        .collect();
    let round_seed = round_seed(config.seed, 0);
    informed_finetune(model, &examples, &config.finetune_config(seed::derive_str(round_seed, "finetune")))
}

/// Finetuning on ground-truth references with unit weights.
pub fn run_supervised(model: &Model, corpus: &Corpus, config: &AdaptConfig) -> Result<(Model, FinetuneLog)> {
    model.ensure_vocab(&corpus.vocab)?;
    let examples = corpus
        .utterances
        .iter()
        .map(|u| {
            let target = u
                .reference
                .clone()
                .ok_or_else(|| Error::Input(format!("utterance {} has no reference", u.id)))?;
            Ok(TrainExample {
                utterance: u,
                target,
                weights: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let round_seed = round_seed(config.seed, 0);
    informed_finetune(model, &examples, &config.finetune_config(seed::derive_str(round_seed, "finetune")))
}

/// Origin recorded for filter reports of a given configuration.
pub fn hypothesis_origin(filter: FilterOrigin) -> Option<HypothesisOrigin> {
    match filter {
        FilterOrigin::Gaussian => Some(HypothesisOrigin::Gaussian),
        FilterOrigin::Beam => Some(HypothesisOrigin::Beam),
        FilterOrigin::Consensus => Some(HypothesisOrigin::Consensus),
        FilterOrigin::None => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_codebook, synth_corpus, DomainSpec, Vocab};
    use crate::model::{init_model, ModelConfig};

    fn setup() -> (Model, Corpus) {
        let cfg = ModelConfig {
            model_dim: 16,
            ff_dim: 32,
            heads: 2,
            max_len: 10,
            ..ModelConfig::default()
        };
        let cb = make_codebook(&Vocab::default(), 16, 2).unwrap();
        let c = synth_corpus(&DomainSpec::clean("t"), &cb, 12, 2..=5, 3).unwrap();
        let mut m = init_model(&cfg).unwrap();
        // A few supervised steps so decodes terminate.
        let ac = AdaptConfig {
            lr: 3e-3,
            epochs: 30,
            grad_accum: 2,
            ..AdaptConfig::default()
        };
        m = run_supervised(&m, &c, &ac).unwrap().0;
        (m, c)
    }

    #[test]
    fn empty_corpus_has_no_labels() {
        let (m, c) = setup();
        assert!(pseudo_label(&m, &c.head(0), &DecodeOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn reduction_to_self_training() {
        let (m, c) = setup();
        let cfg = AdaptConfig {
            weight_mode: WeightMode::Uniform,
            filter_origin: FilterOrigin::None,
            lr: 1e-3,
            grad_accum: 4,
            ..AdaptConfig::default()
        };
        let RunOutput { model: a, report, .. } = run_star(&m, &c, &cfg).unwrap();
        let (b, log) = run_self_training(&m, &c, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(report.rounds[0].finetune, log);
        assert_ne!(a.params, m.params);
    }

    #[test]
    fn zero_epochs_and_zero_weights_leave_model() {
        let (m, c) = setup();
        let cfg = FinetuneConfig {
            lr: 1e-2,
            epochs: 0,
            grad_accum: 2,
            seed: 1,
        };
        let ex: Vec<_> = c
            .utterances
            .iter()
            .map(|u| TrainExample {
                utterance: u,
                target: u.reference.clone().unwrap(),
                weights: Some(vec![0.0; u.reference.as_ref().unwrap().len() + 1]),
            })
            .collect();
        assert_eq!(informed_finetune(&m, &ex, &cfg).unwrap().0, m);
        let cfg = FinetuneConfig { epochs: 2, ..cfg };
        let (out, log) = informed_finetune(&m, &ex, &cfg).unwrap();
        assert_eq!(out.params, m.params);
        assert!(log.updates > 0);
    }

    #[test]
    fn weight_mismatch_aborts_before_update() {
        let (m, c) = setup();
        let u = &c.utterances[0];
        let ex = vec![TrainExample {
            utterance: u,
            target: u.reference.clone().unwrap(),
            weights: Some(vec![1.0]),
        }];
        let cfg = FinetuneConfig {
            lr: 1e-2,
            epochs: 1,
            grad_accum: 1,
            seed: 0,
        };
        assert!(matches!(informed_finetune(&m, &ex, &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn star_ignores_references_and_relabels_each_round() {
        let (m, c) = setup();
        let cfg = AdaptConfig {
            lr: 1e-3,
            rounds: 2,
            alpha: 25.0,
            grad_accum: 4,
            ..AdaptConfig::default()
        };
        let ra = run_star(&m, &c, &cfg).unwrap();
        let rb = run_star(&m, &c.without_references(), &cfg).unwrap();
        assert_eq!(ra.model, rb.model);
        assert_eq!(ra.rankings[0].len(), c.len());
        assert_eq!(ra.rankings, rb.rankings);
        let mut standalone: Vec<UtteranceQuality> =
            filter_round(&m, &c, &cfg).unwrap().into_iter().map(|s| s.quality.unwrap()).collect();
        standalone.sort_by_key(|q| q.rank);
        assert_eq!(standalone, ra.rankings[0]);
        let (ra, rb) = (ra.report, rb.report);
        assert!(rb.rounds[0].pseudo_ter.is_none());
        assert!(ra.rounds[0].pseudo_ter.is_some());
        assert_eq!(ra.rounds[0].dropped_by_filter + ra.rounds[0].truncated, 3.max(ra.rounds[0].truncated));
        // Round two labels come from the round-one model.
        let m1 = run_star(&m, &c, &AdaptConfig { rounds: 1, ..cfg.clone() }).unwrap().model;
        let relabel = pseudo_label(&m1, &c, &DecodeOptions::default()).unwrap();
        assert_eq!(ra.rounds[1].trace_digest, trace_digest(&relabel));
        let j1 = serde_json::to_string(&ra).unwrap();
        let j2 = serde_json::to_string(&run_star(&m, &c, &cfg).unwrap().report).unwrap();
        assert_eq!(j1, j2);
    }

    #[test]
    fn supervised_requires_references() {
        let (m, c) = setup();
        assert!(run_supervised(&m, &c.without_references(), &AdaptConfig::default()).is_err());
    }
}
