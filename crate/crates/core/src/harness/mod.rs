//! Experiment orchestration: corpus generation, source training,
//! adaptation arms, evaluation, sweeps and cross-seed reports.
//!
//! Commands communicate only through files under `<out>/seed-<s>/`:
//!
//! ```text
//! corpora/<domain>.<split>.jsonl   manifest.json
//! source/model.ckpt  curve.csv  report.json
//! adapt/<domain>/<arm>/model.ckpt  report.json  filter-round<r>.csv  timings.json
//! eval/results.csv  indicators.csv  filter.csv  study.json
//! sweep/<axis>.csv  <axis>.json
//! ```
//!
//! and `<out>/report/summary.{csv,json}` across seeds. Every JSON report
//! embeds the effective configuration; `timings.json` is the only output
//! that varies between identical runs.

pub mod config;
pub mod study;
pub mod train;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::{filter_round, run_star_observed, run_star_with_arm, run_supervised, FilterOrigin, FinetuneLog, RunReport};
use crate::corpus::{load_corpus, make_codebook, save_corpus, synth_corpus, Corpus};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, read_checkpoint, save_checkpoint, Model};
use crate::seed;
use crate::uttfilter::write_filter_report;

pub use config::{arm_config, Arm, ExperimentConfig};
use study::{FilterStudy, LabeledTokens, StudyResult, TerRow};
use train::{decode_ter, read_curve, train_source, write_curve};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_CONVERGENCE: i32 = 4;

/// Exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Input(_)
        | Error::Length { .. }
        | Error::Degenerate(_)
        | Error::Undefined(_)
        | Error::Parse { .. }
        | Error::Version { .. }
        | Error::Checkpoint(_)
        | Error::Io { .. } => EXIT_INPUT,
        Error::NonFiniteGradient { .. } => EXIT_OTHER,
    }
}

/// Files written by a command and an optional non-fatal warning.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
    pub warning: Option<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.warning.is_some() {
            EXIT_CONVERGENCE
        } else {
            EXIT_OK
        }
    }
}

/// Paths of one seed's artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub root: PathBuf,
    pub seed: u64,
}

impl Layout {
    pub fn new(root: &Path, seed_value: u64) -> Self {
        Layout {
            root: root.to_path_buf(),
            seed: seed_value,
        }
    }

    pub fn seed_dir(&self) -> PathBuf {
        self.root.join(format!("seed-{}", self.seed))
    }

    pub fn corpora_dir(&self) -> PathBuf {
        self.seed_dir().join("corpora")
    }

    pub fn corpus(&self, domain: &str, split: &str) -> PathBuf {
        self.corpora_dir().join(format!("{domain}.{split}.jsonl"))
    }

    pub fn source_dir(&self) -> PathBuf {
        self.seed_dir().join("source")
    }

    pub fn source_checkpoint(&self) -> PathBuf {
        self.source_dir().join("model.ckpt")
    }

    pub fn adapt_dir(&self, domain: &str, arm: Arm) -> PathBuf {
        self.seed_dir().join("adapt").join(domain).join(arm.as_str())
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.seed_dir().join("eval")
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.seed_dir().join("sweep")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Ensures `dirs` may be written: existing non-empty directories are
/// refused unless `force`, in which case they are cleared.
fn claim(dirs: &[PathBuf], force: bool) -> Result<()> {
    for d in dirs {
        let occupied = d.is_dir() && fs::read_dir(d).map_err(io_err(d))?.next().is_some();
        if occupied && !force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                d.display()
            )));
        }
    }
    for d in dirs {
        if d.exists() {
            fs::remove_dir_all(d).map_err(io_err(d))?;
        }
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T, out: &mut Outcome) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Input(e.to_string()))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io_err(path))?;
    out.written.push(path.to_path_buf());
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

fn write_with(path: &Path, out: &mut Outcome, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf).map_err(io_err(path))?;
    out.written.push(path.to_path_buf());
    Ok(())
}

fn load_source(layout: &Layout) -> Result<(Model, String)> {
    let path = layout.source_checkpoint();
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let (model, _) = read_checkpoint(&bytes)?;
    Ok((model, format!("{:08x}", crc32fast::hash(&bytes))))
}

fn load_split(layout: &Layout, domain: &str, split: &str, config: &ExperimentConfig) -> Result<Corpus> {
    let corpus = load_corpus(&layout.corpus(domain, split))?;
    if corpus.vocab != config.vocab()? {
        return Err(Error::Input(format!(
            "{}: vocabulary differs from the configuration",
            layout.corpus(domain, split).display()
        )));
    }
    Ok(corpus)
}

#[derive(Serialize)]
struct CorpusManifest<'a> {
    format: &'static str,
    version: u32,
    seed: u64,
    config: BTreeMap<String, String>,
    codebook_seed: u64,
    files: Vec<ManifestEntry<'a>>,
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    domain: &'a str,
    split: &'static str,
    utterances: usize,
    file: String,
}

/// Writes train and test splits for every domain, plus a validation split
/// for the source.
pub fn cmd_gen_corpus(config: &ExperimentConfig, root: &Path, force: bool) -> Result<Outcome> {
    config.validate()?;
    let layout = Layout::new(root, config.seed);
    claim(&[layout.corpora_dir()], force)?;
    let mut out = Outcome::default();
    let vocab = config.vocab()?;
    let codebook_seed = seed::derive_str(config.seed, "codebook");
    let codebook = make_codebook(&vocab, config.corpus.feature_dim, codebook_seed)?;
    let cs = &config.corpus;
    let mut files = Vec::new();
    for (i, d) in cs.domains.iter().enumerate() {
        let mut splits = vec![("train", cs.train_size), ("test", cs.test_size)];
        if i == 0 {
            splits.push(("valid", cs.valid_size));
        }
        for (split, n) in splits {
            let s = seed::derive_str(config.seed, &format!("corpus/{}/{split}", d.name));
            let corpus = synth_corpus(d, &codebook, n, cs.min_len..=cs.max_len, s)?;
            let path = layout.corpus(&d.name, split);
            save_corpus(&corpus, &path)?;
            out.written.push(path.clone());
            files.push(ManifestEntry {
                domain: &d.name,
                split,
                utterances: n,
                file: format!("{}.{split}.jsonl", d.name),
            });
        }
    }
    let manifest = CorpusManifest {
        format: "starlab-corpora",
        version: 1,
        seed: config.seed,
        config: config.echo(),
        codebook_seed,
        files,
    };
    write_json(&layout.corpora_dir().join("manifest.json"), &manifest, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub epochs: usize,
    pub steps: u64,
    pub valid_ter: f64,
    pub test_ter: f64,
    pub converged: bool,
}

/// Trains the source model; with `train.resume` continues from the saved
/// checkpoint and curve. Not reaching the target TER is a warning.
pub fn cmd_train_source(config: &ExperimentConfig, root: &Path, force: bool) -> Result<Outcome> {
    config.validate()?;
    let layout = Layout::new(root, config.seed);
    let src = &config.source().name;
    let train = load_split(&layout, src, "train", config)?;
    let valid = load_split(&layout, src, "valid", config)?;
    let test = load_split(&layout, src, "test", config)?;
    let dir = layout.source_dir();
    let curve_path = dir.join("curve.csv");
    let (model, optim, curve) = if config.train.resume {
        let (model, optim) = load_checkpoint(&layout.source_checkpoint())?;
        let optim = optim.ok_or_else(|| Error::Input("source checkpoint has no optimizer state".into()))?;
        let curve = read_curve(fs::File::open(&curve_path).map_err(io_err(&curve_path))?)?;
        if model.config != config.model_config()? {
            return Err(Error::Config("model settings differ from the checkpoint being resumed".into()));
        }
        (model, Some(optim), curve)
    } else {
        claim(&[dir.clone()], force)?;
        (Model::init(&config.model_config()?)?, None, Vec::new())
    };
    let run = train_source(
        model,
        optim,
        curve,
        &train,
        &valid,
        &config.train,
        seed::derive_str(config.seed, "source-train"),
    )?;
    let mut out = Outcome::default();
    save_checkpoint(&run.model, Some(&run.optim), &layout.source_checkpoint())?;
    out.written.push(layout.source_checkpoint());
    write_with(&curve_path, &mut out, |b| write_curve(&run.curve, b))?;
    let last = run.curve.last().expect("at least one epoch");
    let report = SourceReport {
        format: "starlab-source-report".into(),
        version: 1,
        seed: config.seed,
        config: config.echo(),
        epochs: last.epoch,
        steps: run.model.step_count,
        valid_ter: last.valid_ter,
        test_ter: decode_ter(&run.model, &test, &Default::default())?,
        converged: run.converged,
    };
    write_json(&dir.join("report.json"), &report, &mut out)?;
    if !run.converged {
        out.warning = Some(format!(
            "source validation TER {:.4} did not reach {} within {} epochs",
            last.valid_ter, config.train.target_ter, config.train.max_epochs
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptRecord {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub arm: String,
    pub domain: String,
    pub source_digest: String,
    /// Present for every arm except `supervised`.
    pub run: Option<RunReport>,
    /// Present for `supervised`.
    pub supervised: Option<FinetuneLog>,
}

fn adapt_arms(config: &ExperimentConfig, arm: Option<Arm>) -> Result<Vec<Arm>> {
    match arm {
        Some(Arm::Frozen) => Err(Error::Config("the frozen arm has no adaptation step".into())),
        Some(a) => Ok(vec![a]),
        None => Ok(config.study.arms.iter().copied().filter(|a| *a != Arm::Frozen).collect()),
    }
}

/// Adapts the source model to every target domain with `arm`, or with
/// every configured arm.
pub fn cmd_adapt(config: &ExperimentConfig, root: &Path, arm: Option<Arm>, force: bool) -> Result<Outcome> {
    config.validate()?;
    let layout = Layout::new(root, config.seed);
    let arms = adapt_arms(config, arm)?;
    let (source, digest) = load_source(&layout)?;
    let corpora = config
        .targets()
        .iter()
        .map(|d| load_split(&layout, &d.name, "train", config))
        .collect::<Result<Vec<_>>>()?;
    let dirs: Vec<PathBuf> = config
        .targets()
        .iter()
        .flat_map(|d| arms.iter().map(|a| layout.adapt_dir(&d.name, *a)))
        .collect();
    claim(&dirs, force)?;
    let base = config.adapt_config();
    let mut out = Outcome::default();
    for (d, corpus) in config.targets().iter().zip(&corpora) {
        for &arm in &arms {
            let dir = layout.adapt_dir(&d.name, arm);
            let mut record = AdaptRecord {
                format: "starlab-adapt-report".into(),
                version: 1,
                seed: config.seed,
                config: config.echo(),
                arm: arm.to_string(),
                domain: d.name.clone(),
                source_digest: digest.clone(),
                run: None,
                supervised: None,
            };
            let model = if arm == Arm::Supervised {
                let (model, log) = run_supervised(&source, corpus, &base)?;
                record.supervised = Some(log);
                model
            } else {
                let run = run_star_with_arm(&source, corpus, &arm_config(&base, arm), arm.as_str())?;
                for (r, ranked) in run.rankings.iter().enumerate().filter(|(_, r)| !r.is_empty()) {
                    write_with(&dir.join(format!("filter-round{r}.csv")), &mut out, |b| {
                        write_filter_report(ranked, b)
                    })?;
                }
                let timings = dir.join("timings.json");
                write_json(&timings, &run.timings, &mut out)?;
                record.run = Some(run.report);
                run.model
            };
            save_checkpoint(&model, None, &dir.join("model.ckpt"))?;
            out.written.push(dir.join("model.ckpt"));
            write_json(&dir.join("report.json"), &record, &mut out)?;
        }
    }
    Ok(out)
}

fn filter_study(
    layout: &Layout,
    source: &Model,
    domain: &str,
    corpus: &Corpus,
    config: &ExperimentConfig,
) -> Result<Option<FilterStudy>> {
    let star = arm_config(&config.adapt_config(), Arm::Star);
    let gaussian = crate::adaptation::AdaptConfig {
        filter_origin: FilterOrigin::Gaussian,
        ..star.clone()
    };
    let report = layout.adapt_dir(domain, Arm::Star).join("report.json");
    if report.is_file() && star.filter_origin == FilterOrigin::Gaussian {
        let rec: AdaptRecord = read_json(&report)?;
        if let Some(r0) = rec.run.as_ref().and_then(|r| r.rounds.first()) {
            if let Some(p) = r0.pseudo_ter {
                return Ok(Some(FilterStudy {
                    domain: domain.into(),
                    alpha: gaussian.alpha,
                    utterances: r0.pseudo_labels,
                    kept: r0.pseudo_labels - r0.dropped_by_filter,
                    pseudo_ter: Some(p),
                    kept_ter: r0.filter_kept_ter,
                }));
            }
        }
    }
    let samples = filter_round(source, corpus, &gaussian)?;
    let pair = |s: &crate::adaptation::PseudoSample| {
        let r = corpus.utterances[s.index].reference.clone();
        r.map(|r| (s.trace.content().to_vec(), r))
    };
    let all: Option<Vec<_>> = samples.iter().map(pair).collect();
    let kept: Option<Vec<_>> = samples
        .iter()
        .filter(|s| s.quality.as_ref().is_some_and(|q| q.kept))
        .map(pair)
        .collect();
    let (Some(all), Some(kept)) = (all, kept) else {
        return Ok(None);
    };
    let ter_of = |v: Vec<(Vec<u32>, Vec<u32>)>| {
        let (h, r): (Vec<_>, Vec<_>) = v.into_iter().unzip();
        match crate::metrics::ter(&h, &r) {
            Ok(t) => Ok(Some(t)),
            Err(Error::Undefined(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let n_kept = kept.len();
    Ok(Some(FilterStudy {
        domain: domain.into(),
        alpha: gaussian.alpha,
        utterances: all.len(),
        kept: n_kept,
        pseudo_ter: ter_of(all)?,
        kept_ter: ter_of(kept)?,
    }))
}

/// TER of the frozen and every adapted checkpoint on every domain's test
/// split, indicator quality and filtering quality on frozen pseudo labels
/// of the target training splits.
pub fn cmd_evaluate(config: &ExperimentConfig, root: &Path, force: bool) -> Result<Outcome> {
    config.validate()?;
    let layout = Layout::new(root, config.seed);
    let (source, digest) = load_source(&layout)?;
    let tests = config
        .corpus
        .domains
        .iter()
        .map(|d| load_split(&layout, &d.name, "test", config))
        .collect::<Result<Vec<_>>>()?;
    let mut checkpoints: Vec<(String, Arm, Option<String>, Model)> =
        vec![("frozen".into(), Arm::Frozen, None, source.clone())];
    let mut missing = Vec::new();
    for d in config.targets() {
        for &arm in config.study.arms.iter().filter(|a| **a != Arm::Frozen) {
            let dir = layout.adapt_dir(&d.name, arm);
            let name = format!("{arm}@{}", d.name);
            if !dir.join("model.ckpt").is_file() {
                missing.push(name);
                continue;
            }
            let rec: AdaptRecord = read_json(&dir.join("report.json"))?;
            if rec.source_digest != digest {
                return Err(Error::Input(format!(
                    "{} was adapted from a different source checkpoint",
                    dir.display()
                )));
            }
            let (model, _) = load_checkpoint(&dir.join("model.ckpt"))?;
            checkpoints.push((name, arm, Some(d.name.clone()), model));
        }
    }
    claim(&[layout.eval_dir()], force)?;

    let opts = config.adapt_config().decode_options();
    let frozen: Vec<f64> = tests
        .iter()
        .map(|t| decode_ter(&source, t, &opts))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (name, arm, adapted_on, model) in &checkpoints {
        for (t, &f) in tests.iter().zip(&frozen) {
            let ter = if *arm == Arm::Frozen { f } else { decode_ter(model, t, &opts)? };
            rows.push(TerRow {
                checkpoint: name.clone(),
                arm: arm.to_string(),
                adapted_on: adapted_on.clone(),
                domain: t.domain.name.clone(),
                utterances: t.len(),
                ter,
                frozen_ter: f,
                relative_reduction: study::relative_reduction(f, ter),
            });
        }
    }

    let acfg = config.adapt_config();
    let clip = crate::metrics::NceClip {
        lo: config.eval.nce_clip_lo,
        hi: config.eval.nce_clip_hi,
    };
    let mut indicators = Vec::new();
    let mut filters = Vec::new();
    let mut pool = LabeledTokens::default();
    for d in config.targets() {
        let train = load_split(&layout, &d.name, "train", config)?;
        let tokens = study::label_tokens(&source, &train, &acfg)?;
        indicators.push(study::indicator_study(&d.name, &tokens, config.eval.threshold, clip)?);
        pool.extend(&tokens);
        if let Some(f) = filter_study(&layout, &source, &d.name, &train, config)? {
            filters.push(f);
        }
    }
    indicators.push(study::indicator_study("all", &pool, config.eval.threshold, clip)?);

    let mut out = Outcome::default();
    let dir = layout.eval_dir();
    write_with(&dir.join("results.csv"), &mut out, |b| study::write_ter_csv(&rows, b))?;
    write_with(&dir.join("indicators.csv"), &mut out, |b| {
        study::write_indicator_csv(&indicators, b)
    })?;
    write_with(&dir.join("filter.csv"), &mut out, |b| study::write_filter_csv(&filters, b))?;
    let result = StudyResult {
        format: study::STUDY_FORMAT.into(),
        version: study::FORMAT_VERSION,
        seed: config.seed,
        config: config.echo(),
        source_digest: digest,
        missing,
        ter: rows,
        indicators,
        filter: filters,
    };
    write_json(&dir.join("study.json"), &result, &mut out)?;
    Ok(out)
}

/// Sweep axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    TrainSize,
    Threshold,
    Rounds,
    Alpha,
    Lambda,
    Tau,
}

impl Axis {
    pub const ALL: [Axis; 6] = [
        Axis::TrainSize,
        Axis::Threshold,
        Axis::Rounds,
        Axis::Alpha,
        Axis::Lambda,
        Axis::Tau,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Axis::TrainSize => "train_size",
            Axis::Threshold => "threshold",
            Axis::Rounds => "rounds",
            Axis::Alpha => "alpha",
            Axis::Lambda => "lambda",
            Axis::Tau => "tau",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep axis `{s}`")))
    }
}

/// One grid point of a sweep. TER axes fill `ter`, `frozen_ter` and
/// `domain_ter` with STAR test TER averaged over the targets; the
/// threshold axis fills `indicators` from frozen pseudo labels pooled
/// over the targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub frozen_ter: Option<f64>,
    pub ter: Option<f64>,
    pub domain_ter: BTreeMap<String, f64>,
    pub indicators: Vec<crate::metrics::IndicatorMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub axis: String,
    pub config: BTreeMap<String, String>,
    pub points: Vec<SweepPoint>,
}

fn write_sweep_csv(report: &SweepReport, targets: &[String], out: impl std::io::Write) -> Result<()> {
    let err = |e: csv::Error| Error::Input(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(out);
    if report.axis == Axis::Threshold.as_str() {
        w.write_record(["axis", "value", "seed", "indicator", "correct_high", "correct_low", "wrong_high", "wrong_low"])
            .map_err(err)?;
        for p in &report.points {
            for m in &p.indicators {
                let c = m.confusion.counts;
                w.write_record([
                    report.axis.clone(),
                    p.value.to_string(),
                    report.seed.to_string(),
                    m.indicator.clone(),
                    c[0][0].to_string(),
                    c[0][1].to_string(),
                    c[1][0].to_string(),
                    c[1][1].to_string(),
                ])
                .map_err(err)?;
            }
        }
    } else {
        let mut header: Vec<String> = ["axis", "value", "seed", "frozen_ter", "ter"].map(String::from).to_vec();
        header.extend(targets.iter().map(|d| format!("ter_{d}")));
        w.write_record(&header).map_err(err)?;
        let opt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
        for p in &report.points {
            let mut row = vec![
                report.axis.clone(),
                p.value.to_string(),
                report.seed.to_string(),
                opt(p.frozen_ter),
                opt(p.ter),
            ];
            row.extend(targets.iter().map(|d| opt(p.domain_ter.get(d).copied())));
            w.write_record(&row).map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io("<sweep csv>", e))
}

fn ter_point(value: f64, frozen: &[f64], ters: Vec<(String, f64)>) -> SweepPoint {
    let n = ters.len() as f64;
    SweepPoint {
        value,
        frozen_ter: Some(frozen.iter().sum::<f64>() / frozen.len() as f64),
        ter: Some(ters.iter().map(|(_, t)| t).sum::<f64>() / n),
        domain_ter: ters.into_iter().collect(),
        indicators: Vec::new(),
    }
}

/// Reruns STAR across the grid of `axis` on every target with shared seeds.
pub fn cmd_sweep(config: &ExperimentConfig, root: &Path, axis: Axis, force: bool) -> Result<Outcome> {
    config.validate()?;
    let layout = Layout::new(root, config.seed);
    let (source, _) = load_source(&layout)?;
    let targets: Vec<String> = config.targets().iter().map(|d| d.name.clone()).collect();
    let trains = targets
        .iter()
        .map(|d| load_split(&layout, d, "train", config))
        .collect::<Result<Vec<_>>>()?;
    let tests = targets
        .iter()
        .map(|d| load_split(&layout, d, "test", config))
        .collect::<Result<Vec<_>>>()?;
    let star = arm_config(&config.adapt_config(), Arm::Star);
    let opts = star.decode_options();
    let frozen: Vec<f64> = tests.iter().map(|t| decode_ter(&source, t, &opts)).collect::<Result<_>>()?;
    let s = &config.study;
    let grid: Vec<f64> = match axis {
        Axis::TrainSize => s.train_sizes.iter().map(|&n| n as f64).collect(),
        Axis::Threshold => s.thresholds.clone(),
        Axis::Rounds => (0..=s.max_rounds).map(|r| r as f64).collect(),
        Axis::Alpha => s.alphas.clone(),
        Axis::Lambda => s.lambdas.clone(),
        Axis::Tau => s.taus.clone(),
    };
    if grid.is_empty() {
        return Err(Error::Config(format!("the {} grid is empty", axis.as_str())));
    }
    if axis == Axis::TrainSize {
        if let Some(&n) = s.train_sizes.iter().find(|&&n| n == 0 || n > config.corpus.train_size) {
            return Err(Error::Config(format!(
                "train size {n} outside 1..={}",
                config.corpus.train_size
            )));
        }
    }
    let sweep_dir = layout.sweep_dir();
    let csv_path = sweep_dir.join(format!("{}.csv", axis.as_str()));
    let json_path = sweep_dir.join(format!("{}.json", axis.as_str()));
    if (csv_path.exists() || json_path.exists()) && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            json_path.display()
        )));
    }
    fs::create_dir_all(&sweep_dir).map_err(io_err(&sweep_dir))?;

    let mut points = Vec::with_capacity(grid.len());
    match axis {
        Axis::Threshold => {
            let mut pool = LabeledTokens::default();
            for train in &trains {
                pool.extend(&study::label_tokens(&source, train, &star)?);
            }
            let clip = crate::metrics::NceClip {
                lo: config.eval.nce_clip_lo,
                hi: config.eval.nce_clip_hi,
            };
            for &th in &grid {
                let st = study::indicator_study("all", &pool, th, clip)?;
                points.push(SweepPoint {
                    value: th,
                    frozen_ter: None,
                    ter: None,
                    domain_ter: BTreeMap::new(),
                    indicators: st.metrics,
                });
            }
        }
        Axis::Rounds => {
            let cfg = crate::adaptation::AdaptConfig {
                rounds: s.max_rounds,
                ..star.clone()
            };
            let mut per_round: Vec<Vec<(String, f64)>> = vec![Vec::new(); s.max_rounds + 1];
            for ((d, train), (test, &f)) in targets.iter().zip(&trains).zip(tests.iter().zip(&frozen)) {
                per_round[0].push((d.clone(), f));
                run_star_observed(&source, train, &cfg, "star", &mut |round, model| {
                    per_round[round + 1].push((d.clone(), decode_ter(model, test, &opts)?));
                    Ok(())
                })?;
            }
            for (r, ters) in per_round.into_iter().enumerate() {
                points.push(ter_point(r as f64, &frozen, ters));
            }
        }
        _ => {
            for &v in &grid {
                let mut cfg = star.clone();
                match axis {
                    Axis::Alpha => cfg.alpha = v,
                    Axis::Lambda => cfg.lambda = v,
                    Axis::Tau => cfg.tau = v,
                    _ => {}
                }
                cfg.validate()?;
                let mut ters = Vec::new();
                for ((d, train), test) in targets.iter().zip(&trains).zip(&tests) {
                    let train = if axis == Axis::TrainSize { train.head(v as usize) } else { train.clone() };
                    let run = run_star_with_arm(&source, &train, &cfg, "star")?;
                    ters.push((d.clone(), decode_ter(&run.model, test, &opts)?));
                }
                points.push(ter_point(v, &frozen, ters));
            }
        }
    }
    let report = SweepReport {
        format: "starlab-sweep".into(),
        version: 1,
        seed: config.seed,
        axis: axis.as_str().into(),
        config: config.echo(),
        points,
    };
    let mut out = Outcome::default();
    write_with(&csv_path, &mut out, |b| write_sweep_csv(&report, &targets, b))?;
    write_json(&json_path, &report, &mut out)?;
    Ok(out)
}

/// Aggregates the evaluation of every configured seed.
pub fn cmd_report(config: &ExperimentConfig, root: &Path, force: bool) -> Result<Outcome> {
    config.validate()?;
    if config.study.seeds.is_empty() {
        return Err(Error::Config("study.seeds is empty".into()));
    }
    let studies = config
        .study
        .seeds
        .iter()
        .map(|&s| read_json::<StudyResult>(&Layout::new(root, s).eval_dir().join("study.json")))
        .collect::<Result<Vec<_>>>()?;
    let layout = Layout::new(root, config.seed);
    claim(&[layout.report_dir()], force)?;
    let arms: Vec<String> = config.study.arms.iter().map(|a| a.to_string()).collect();
    let targets: Vec<String> = config.targets().iter().map(|d| d.name.clone()).collect();
    let mut echo = config.echo();
    echo.remove("seed");
    let summary = study::summarize(&studies, &arms, &config.source().name, &targets, echo);
    let mut out = Outcome::default();
    let dir = layout.report_dir();
    write_with(&dir.join("summary.csv"), &mut out, |b| study::write_summary_csv(&summary, b))?;
    write_json(&dir.join("summary.json"), &summary, &mut out)?;
    Ok(out)
}
