//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Keys are grouped by prefix (`corpus.`, `model.`, `train.`, `adapt.`,
//! `eval.`, `study.`); lists are comma-separated. Unknown and duplicate
//! keys are rejected. Every key has a default, so an empty file is the
//! default study preset.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::adaptation::{AdaptConfig, FilterOrigin, WeightMode};
use crate::corpus::{DomainSpec, Vocab};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::seed;

/// Adaptation arms of a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Arm {
    Frozen,
    SelfTrain,
    UttOnly,
    ConfOnly,
    AttnOnly,
    Star,
    Supervised,
}

impl Arm {
    pub const ALL: [Arm; 7] = [
        Arm::Frozen,
        Arm::SelfTrain,
        Arm::UttOnly,
        Arm::ConfOnly,
        Arm::AttnOnly,
        Arm::Star,
        Arm::Supervised,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Arm::Frozen => "frozen",
            Arm::SelfTrain => "self-train",
            Arm::UttOnly => "utt-only",
            Arm::ConfOnly => "conf-only",
            Arm::AttnOnly => "attn-only",
            Arm::Star => "star",
            Arm::Supervised => "supervised",
        }
    }
}

impl Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSettings {
    pub vocab_size: u32,
    pub prompt_len: usize,
    pub feature_dim: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub valid_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// The first domain is the source; the rest are adaptation targets.
    pub domains: Vec<DomainSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub lr: f64,
    pub grad_accum: usize,
    pub min_epochs: usize,
    pub max_epochs: usize,
    /// Validation TER at which source training stops.
    pub target_ter: f64,
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub threshold: f64,
    pub nce_clip_lo: f64,
    pub nce_clip_hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudySettings {
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    pub train_sizes: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub max_rounds: usize,
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub taus: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusSettings,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub model_max_len: usize,
    pub train: TrainSettings,
    /// Adaptation settings; `seed` is replaced per run from the run seed.
    pub adapt: AdaptConfig,
    pub eval: EvalSettings,
    pub study: StudySettings,
}

fn domain(name: &str, noise_sigma: f64, channel_seed: u64, channel_mix: f64) -> DomainSpec {
    DomainSpec {
        noise_sigma,
        channel_seed,
        channel_mix,
        ..DomainSpec::clean(name)
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        ExperimentConfig {
            seed: 0,
            corpus: CorpusSettings {
                vocab_size: 50,
                prompt_len: 1,
                feature_dim: 16,
                train_size: 2000,
                test_size: 300,
                valid_size: 200,
                min_len: 4,
                max_len: 12,
                domains: vec![
                    domain("source", 0.0, 0, 0.0),
                    domain("noisy", 0.2, 0, 0.0),
                    domain("accent", 0.0, 7, 0.35),
                    domain("mixed", 0.15, 9, 0.2),
                ],
            },
            enc_layers: model.enc_layers,
            dec_layers: model.dec_layers,
            heads: model.heads,
            model_dim: model.model_dim,
            ff_dim: model.ff_dim,
            model_max_len: model.max_len,
            train: TrainSettings {
                lr: 1e-3,
                grad_accum: 8,
                min_epochs: 4,
                max_epochs: 8,
                target_ter: 0.05,
                resume: false,
            },
            adapt: AdaptConfig {
                lr: 3e-4,
                epochs: 3,
                ..AdaptConfig::default()
            },
            eval: EvalSettings {
                threshold: 1.0,
                nce_clip_lo: 0.01,
                nce_clip_hi: 0.99,
            },
            study: StudySettings {
                seeds: vec![0, 1, 2, 3, 4],
                arms: Arm::ALL.to_vec(),
                train_sizes: vec![50, 100, 200, 500, 1000],
                thresholds: vec![0.5, 0.75, 1.0, 1.25, 1.5],
                max_rounds: 3,
                alphas: vec![0.0, 10.0, 20.0, 30.0, 40.0],
                lambdas: vec![1.0, 1.5, 2.0, 3.0, 4.0],
                taus: vec![1.0, 5.0, 10.0, 20.0, 50.0],
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

struct Pairs {
    map: BTreeMap<String, (usize, String)>,
}

impl Pairs {
    fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some((line, v)) = self.map.remove(key) {
            *slot = parse(key, &v).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    fn take_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some((line, v)) = self.map.remove(key) {
            *slot = parse_list(key, &v).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            let k = k.trim().to_string();
            if map.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate key `{k}`"),
                });
            }
        }
        let mut p = Pairs { map };
        let mut c = ExperimentConfig::default();
        p.take("seed", &mut c.seed)?;

        let cs = &mut c.corpus;
        p.take("corpus.vocab_size", &mut cs.vocab_size)?;
        p.take("corpus.prompt_len", &mut cs.prompt_len)?;
        p.take("corpus.feature_dim", &mut cs.feature_dim)?;
        p.take("corpus.train_size", &mut cs.train_size)?;
        p.take("corpus.test_size", &mut cs.test_size)?;
        p.take("corpus.valid_size", &mut cs.valid_size)?;
        p.take("corpus.min_len", &mut cs.min_len)?;
        p.take("corpus.max_len", &mut cs.max_len)?;
        let mut names: Vec<String> = cs.domains.iter().map(|d| d.name.clone()).collect();
        p.take_list("corpus.domains", &mut names)?;
        let defaults = cs.domains.clone();
        cs.domains = names
            .iter()
            .map(|n| {
                defaults
                    .iter()
                    .find(|d| &d.name == n)
                    .cloned()
                    .unwrap_or_else(|| DomainSpec::clean(n))
            })
            .collect();
        for d in cs.domains.iter_mut() {
            let pre = format!("corpus.domain.{}.", d.name);
            p.take(&format!("{pre}noise_sigma"), &mut d.noise_sigma)?;
            p.take(&format!("{pre}channel_seed"), &mut d.channel_seed)?;
            p.take(&format!("{pre}channel_mix"), &mut d.channel_mix)?;
            p.take(&format!("{pre}token_prior_skew"), &mut d.token_prior_skew)?;
            p.take(&format!("{pre}frames_per_token"), &mut d.frames_per_token)?;
        }

        p.take("model.enc_layers", &mut c.enc_layers)?;
        p.take("model.dec_layers", &mut c.dec_layers)?;
        p.take("model.heads", &mut c.heads)?;
        p.take("model.model_dim", &mut c.model_dim)?;
        p.take("model.ff_dim", &mut c.ff_dim)?;
        p.take("model.max_len", &mut c.model_max_len)?;

        let t = &mut c.train;
        p.take("train.lr", &mut t.lr)?;
        p.take("train.grad_accum", &mut t.grad_accum)?;
        p.take("train.min_epochs", &mut t.min_epochs)?;
        p.take("train.max_epochs", &mut t.max_epochs)?;
        p.take("train.target_ter", &mut t.target_ter)?;
        p.take("train.resume", &mut t.resume)?;

        let a = &mut c.adapt;
        p.take("adapt.lambda", &mut a.lambda)?;
        p.take("adapt.tau", &mut a.tau)?;
        p.take("adapt.epsilon", &mut a.epsilon)?;
        p.take("adapt.renorm_star", &mut a.renorm_star)?;
        p.take("adapt.alpha", &mut a.alpha)?;
        p.take("adapt.k", &mut a.k)?;
        p.take("adapt.rho", &mut a.rho)?;
        p.take("adapt.beam_n", &mut a.beam_n)?;
        p.take("adapt.raw_ed", &mut a.raw_ed)?;
        p.take("adapt.lr", &mut a.lr)?;
        p.take("adapt.epochs", &mut a.epochs)?;
        p.take("adapt.grad_accum", &mut a.grad_accum)?;
        p.take("adapt.rounds", &mut a.rounds)?;
        p.take("adapt.filter_origin", &mut a.filter_origin)?;
        p.take("adapt.weight_mode", &mut a.weight_mode)?;
        p.take("adapt.variant", &mut a.variant)?;
        let mut layer = String::from("mean");
        p.take("adapt.attention_layer", &mut layer)?;
        a.attention_layer = match layer.as_str() {
            "mean" => None,
            n => Some(parse("adapt.attention_layer", n)?),
        };

        let e = &mut c.eval;
        p.take("eval.threshold", &mut e.threshold)?;
        p.take("eval.nce_clip_lo", &mut e.nce_clip_lo)?;
        p.take("eval.nce_clip_hi", &mut e.nce_clip_hi)?;

        let s = &mut c.study;
        p.take_list("study.seeds", &mut s.seeds)?;
        p.take_list("study.arms", &mut s.arms)?;
        p.take_list("study.train_sizes", &mut s.train_sizes)?;
        p.take_list("study.thresholds", &mut s.thresholds)?;
        p.take("study.max_rounds", &mut s.max_rounds)?;
        p.take_list("study.alphas", &mut s.alphas)?;
        p.take_list("study.lambdas", &mut s.lambdas)?;
        p.take_list("study.taus", &mut s.taus)?;

        if let Some((key, (line, _))) = p.map.into_iter().next() {
            return Err(Error::Parse {
                line,
                message: format!("unknown key `{key}`"),
            });
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its effective value, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("seed", self.seed.to_string());
        let cs = &self.corpus;
        put("corpus.vocab_size", cs.vocab_size.to_string());
        put("corpus.prompt_len", cs.prompt_len.to_string());
        put("corpus.feature_dim", cs.feature_dim.to_string());
        put("corpus.train_size", cs.train_size.to_string());
        put("corpus.test_size", cs.test_size.to_string());
        put("corpus.valid_size", cs.valid_size.to_string());
        put("corpus.min_len", cs.min_len.to_string());
        put("corpus.max_len", cs.max_len.to_string());
        let names: Vec<&str> = cs.domains.iter().map(|d| d.name.as_str()).collect();
        put("corpus.domains", names.join(","));
        for d in &cs.domains {
            let pre = format!("corpus.domain.{}.", d.name);
            put(&format!("{pre}noise_sigma"), d.noise_sigma.to_string());
            put(&format!("{pre}channel_seed"), d.channel_seed.to_string());
            put(&format!("{pre}channel_mix"), d.channel_mix.to_string());
            put(&format!("{pre}token_prior_skew"), d.token_prior_skew.to_string());
            put(&format!("{pre}frames_per_token"), d.frames_per_token.to_string());
        }
        put("model.enc_layers", self.enc_layers.to_string());
        put("model.dec_layers", self.dec_layers.to_string());
        put("model.heads", self.heads.to_string());
        put("model.model_dim", self.model_dim.to_string());
        put("model.ff_dim", self.ff_dim.to_string());
        put("model.max_len", self.model_max_len.to_string());
        let t = &self.train;
        put("train.lr", t.lr.to_string());
        put("train.grad_accum", t.grad_accum.to_string());
        put("train.min_epochs", t.min_epochs.to_string());
        put("train.max_epochs", t.max_epochs.to_string());
        put("train.target_ter", t.target_ter.to_string());
        put("train.resume", t.resume.to_string());
        let a = &self.adapt;
        put("adapt.lambda", a.lambda.to_string());
        put("adapt.tau", a.tau.to_string());
        put("adapt.epsilon", a.epsilon.to_string());
        put("adapt.renorm_star", a.renorm_star.to_string());
        put("adapt.alpha", a.alpha.to_string());
        put("adapt.k", a.k.to_string());
        put("adapt.rho", a.rho.to_string());
        put("adapt.beam_n", a.beam_n.to_string());
        put("adapt.raw_ed", a.raw_ed.to_string());
        put("adapt.lr", a.lr.to_string());
        put("adapt.epochs", a.epochs.to_string());
        put("adapt.grad_accum", a.grad_accum.to_string());
        put("adapt.rounds", a.rounds.to_string());
        put("adapt.filter_origin", filter_name(a.filter_origin).into());
        put("adapt.weight_mode", weight_name(a.weight_mode).into());
        put("adapt.variant", a.variant.as_str().into());
        put(
            "adapt.attention_layer",
            a.attention_layer.map_or_else(|| "mean".to_string(), |l| l.to_string()),
        );
        let e = &self.eval;
        put("eval.threshold", e.threshold.to_string());
        put("eval.nce_clip_lo", e.nce_clip_lo.to_string());
        put("eval.nce_clip_hi", e.nce_clip_hi.to_string());
        let s = &self.study;
        put("study.seeds", join(&s.seeds));
        put("study.arms", join(&s.arms));
        put("study.train_sizes", join(&s.train_sizes));
        put("study.thresholds", join(&s.thresholds));
        put("study.max_rounds", s.max_rounds.to_string());
        put("study.alphas", join(&s.alphas));
        put("study.lambdas", join(&s.lambdas));
        put("study.taus", join(&s.taus));
        out
    }

    /// The configuration as a parseable file.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn echo(&self) -> BTreeMap<String, String> {
        self.to_pairs().into_iter().collect()
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.corpus.vocab_size, self.corpus.prompt_len)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
            model_dim: self.model_dim,
            ff_dim: self.ff_dim,
            feature_dim: self.corpus.feature_dim,
            vocab: self.vocab()?,
            max_len: self.model_max_len,
            init_seed: seed::derive_str(self.seed, "model"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            seed: seed::derive_str(self.seed, "adapt"),
            ..self.adapt.clone()
        }
    }

    pub fn source(&self) -> &DomainSpec {
        &self.corpus.domains[0]
    }

    pub fn targets(&self) -> &[DomainSpec] {
        &self.corpus.domains[1..]
    }

    pub fn validate(&self) -> Result<()> {
        let cs = &self.corpus;
        if cs.domains.len() < 2 {
            return Err(Error::Config("need a source domain and at least one target".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for d in &cs.domains {
            d.validate()?;
            if d.name.is_empty() || !d.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-') {
                return Err(Error::Config(format!("domain name `{}` must be [A-Za-z0-9_-]+", d.name)));
            }
            if !seen.insert(d.name.clone()) {
                return Err(Error::Config(format!("duplicate domain `{}`", d.name)));
            }
        }
        if cs.min_len == 0 || cs.min_len > cs.max_len {
            return Err(Error::Config("corpus lengths need 1 <= min_len <= max_len".into()));
        }
        if cs.train_size == 0 || cs.test_size == 0 || cs.valid_size == 0 {
            return Err(Error::Config("corpus split sizes must be positive".into()));
        }
        let model = self.model_config()?;
        if cs.max_len > model.max_target_len() {
            return Err(Error::Config(format!(
                "corpus.max_len {} exceeds the model's target limit {}",
                cs.max_len,
                model.max_target_len()
            )));
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) || t.grad_accum == 0 || t.max_epochs == 0 || t.min_epochs > t.max_epochs {
            return Err(Error::Config(
                "train needs lr > 0, grad_accum >= 1 and 1 <= max_epochs, min_epochs <= max_epochs".into(),
            ));
        }
        let mut a = self.adapt.clone();
        // Filtering settings only matter for arms that filter.
        if a.filter_origin == FilterOrigin::None {
            a.filter_origin = FilterOrigin::Gaussian;
        }
        a.validate()?;
        if let Some(l) = a.attention_layer {
            if l >= self.dec_layers {
                return Err(Error::Config(format!("adapt.attention_layer {l} out of range")));
            }
        }
        let e = &self.eval;
        if !(0.0 < e.nce_clip_lo && e.nce_clip_lo < e.nce_clip_hi && e.nce_clip_hi < 1.0) {
            return Err(Error::Config("eval NCE clip needs 0 < lo < hi < 1".into()));
        }
        if self.study.max_rounds == 0 {
            return Err(Error::Config("study.max_rounds must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn filter_name(f: FilterOrigin) -> &'static str {
    match f {
        FilterOrigin::Gaussian => "gaussian",
        FilterOrigin::Beam => "beam",
        FilterOrigin::Consensus => "consensus",
        FilterOrigin::None => "none",
    }
}

pub fn weight_name(w: WeightMode) -> &'static str {
    match w {
        WeightMode::Star => "star",
        WeightMode::Conf => "conf",
        WeightMode::Attn => "attn",
        WeightMode::Uniform => "uniform",
    }
}

/// Adaptation settings for `arm`, derived from the configured STAR run.
pub fn arm_config(base: &AdaptConfig, arm: Arm) -> AdaptConfig {
    let filter = if base.filter_origin == FilterOrigin::None {
        FilterOrigin::Gaussian
    } else {
        base.filter_origin
    };
    let (weight_mode, filter_origin) = match arm {
        Arm::Frozen | Arm::SelfTrain | Arm::Supervised => (WeightMode::Uniform, FilterOrigin::None),
        Arm::UttOnly => (WeightMode::Uniform, filter),
        Arm::ConfOnly => (WeightMode::Conf, filter),
        Arm::AttnOnly => (WeightMode::Attn, filter),
        Arm::Star => (base.weight_mode, base.filter_origin),
    };
    AdaptConfig {
        weight_mode,
        filter_origin,
        ..base.clone()
    }
}
