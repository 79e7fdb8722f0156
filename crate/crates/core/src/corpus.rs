//! Synthetic multi-domain transduction corpora.
//!
//! Each token owns a fixed unit vector in a shared codebook. An utterance
//! renders its token sequence as `frames_per_token` copies of the token's
//! vector, pushed through a per-domain linear "channel" and corrupted with
//! additive Gaussian noise. Source and target domains differ only in the
//! channel, the noise level and the token prior, so the size of the domain
//! shift is a dial.
//!
//! Corpus files are JSON lines: one header record followed by one record
//! per utterance.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Mat;

pub const CORPUS_FORMAT: &str = "starlab-corpus";
pub const CORPUS_VERSION: u32 = 1;
/// Longest reference an utterance may carry.
pub const MAX_REFERENCE_LEN: usize = 256;

pub type Token = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    pub size: u32,
    pub pad: Token,
    pub bos: Token,
    pub eos: Token,
    /// Fixed leading decoder tokens. Always starts with `bos`.
    pub prompt: Vec<Token>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new(50, 1).expect("default vocab is valid")
    }
}

impl Vocab {
    /// `pad = 0`, `bos = 1`, `eos = 2`; extra prompt tags take ids 3, 4, ...
    pub fn new(size: u32, prompt_len: usize) -> Result<Self> {
        let prompt = std::iter::once(1)
            .chain((0..prompt_len.saturating_sub(1)).map(|i| 3 + i as Token))
            .collect();
        let v = Vocab {
            size,
            pad: 0,
            bos: 1,
            eos: 2,
            prompt,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!(
                "vocab size must be at least 8, got {}",
                self.size
            )));
        }
        let reserved = [self.pad, self.bos, self.eos];
        if reserved.iter().any(|&t| t >= self.size) {
            return Err(Error::Config("reserved token id out of range".into()));
        }
        if self.pad == self.bos || self.pad == self.eos || self.bos == self.eos {
            return Err(Error::Config("bos, eos and pad must be distinct".into()));
        }
        if self.prompt.first() != Some(&self.bos) {
            return Err(Error::Config("prompt must start with bos".into()));
        }
        let mut seen = HashSet::new();
        for &t in &self.prompt {
            if t >= self.size || t == self.eos || t == self.pad || !seen.insert(t) {
                return Err(Error::Config(format!("invalid prompt token {t}")));
            }
        }
        if self.content_tokens().len() < 2 {
            return Err(Error::Config("vocab leaves fewer than 2 content tokens".into()));
        }
        Ok(())
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt.len()
    }

    pub fn is_reserved(&self, t: Token) -> bool {
        t == self.pad || t == self.eos || self.prompt.contains(&t)
    }

    /// Tokens that may appear in references, ascending.
    pub fn content_tokens(&self) -> Vec<Token> {
        (0..self.size).filter(|&t| !self.is_reserved(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub noise_sigma: f64,
    pub channel_seed: u64,
    /// Blend between the identity (0) and a random rotation (1).
    pub channel_mix: f64,
    pub token_prior_skew: f64,
    pub frames_per_token: usize,
}

impl DomainSpec {
    pub fn clean(name: &str) -> Self {
        DomainSpec {
            name: name.to_string(),
            noise_sigma: 0.0,
            channel_seed: 0,
            channel_mix: 0.0,
            token_prior_skew: 1.0,
            frames_per_token: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "domain {}: noise_sigma must be finite and >= 0",
                self.name
            )));
        }
        if !(0.0..=1.0).contains(&self.channel_mix) {
            return Err(Error::Config(format!(
                "domain {}: channel_mix must lie in [0, 1]",
                self.name
            )));
        }
        if !(self.token_prior_skew >= 0.0 && self.token_prior_skew.is_finite()) {
            return Err(Error::Config(format!(
                "domain {}: token_prior_skew must be finite and >= 0",
                self.name
            )));
        }
        if self.frames_per_token == 0 {
            return Err(Error::Config(format!(
                "domain {}: frames_per_token must be positive",
                self.name
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.noise_sigma == 0.0 && self.channel_mix == 0.0
    }

    /// The fixed `F×F` channel matrix, applied as `x ↦ M·x`.
    pub fn channel_transform(&self, feature_dim: usize) -> Mat<f64> {
        let mut m = Mat::zeros(feature_dim, feature_dim);
        for i in 0..feature_dim {
            *m.at_mut(i, i) = 1.0;
        }
        if self.channel_mix == 0.0 {
            return m;
        }
        let rot = random_orthogonal(feature_dim, seed::derive_str(self.channel_seed, "channel"));
        for (a, b) in m.data.iter_mut().zip(&rot.data) {
            *a = (1.0 - self.channel_mix) * *a + self.channel_mix * b;
        }
        m
    }
}

fn random_orthogonal(n: usize, seed_value: u64) -> Mat<f64> {
    let mut rng = seed::rng(seed_value);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    Mat::from_vec(n, n, rows.concat())
}

/// Token → unit-norm feature vector table shared by every domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub vocab: Vocab,
    pub seed: u64,
    pub vectors: Mat<f64>,
}

impl Codebook {
    pub fn feature_dim(&self) -> usize {
        self.vectors.cols
    }

    pub fn vector(&self, t: Token) -> &[f64] {
        self.vectors.row(t as usize)
    }
}

pub fn make_codebook(vocab: &Vocab, feature_dim: usize, seed_value: u64) -> Result<Codebook> {
    if feature_dim < 4 {
        return Err(Error::Config(format!(
            "feature_dim must be at least 4, got {feature_dim}"
        )));
    }
    vocab.validate()?;
    let mut rng = seed::rng(seed::derive_str(seed_value, "codebook"));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut vectors = Mat::zeros(vocab.size as usize, feature_dim);
    for t in 0..vocab.size as usize {
        let row = vectors.row_mut(t);
        loop {
            row.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                row.iter_mut().for_each(|x| *x /= norm);
                break;
            }
        }
    }
    Ok(Codebook {
        vocab: vocab.clone(),
        seed: seed_value,
        vectors,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub domain: String,
    /// Content tokens only: no bos, eos or prompt tags.
    pub reference: Option<Vec<Token>>,
    /// `T×F` frames.
    pub features: Mat<f64>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.features.rows
    }
}

fn zipf_sampler(vocab: &Vocab, skew: f64) -> (Vec<Token>, WeightedIndex<f64>) {
    let tokens = vocab.content_tokens();
    let weights: Vec<f64> = (0..tokens.len())
        .map(|rank| (rank as f64 + 1.0).powf(-skew))
        .collect();
    let dist = WeightedIndex::new(&weights).expect("positive zipf weights");
    (tokens, dist)
}

pub fn synth_utterance(
    domain: &DomainSpec,
    codebook: &Codebook,
    length: usize,
    seed_value: u64,
    id: impl Into<String>,
) -> Result<Utterance> {
    domain.validate()?;
    if length == 0 || length > MAX_REFERENCE_LEN {
        return Err(Error::Length {
            requested: length,
            limit: MAX_REFERENCE_LEN,
        });
    }
    let (tokens, dist) = zipf_sampler(&codebook.vocab, domain.token_prior_skew);
    let mut tok_rng = seed::rng(seed::derive_str(seed_value, "tokens"));
    let reference: Vec<Token> = (0..length)
        .map(|_| tokens[dist.sample(&mut tok_rng)])
        .collect();
    let features = render(domain, codebook, &reference, seed::derive_str(seed_value, "noise"));
    Ok(Utterance {
        id: id.into(),
        domain: domain.name.clone(),
        reference: Some(reference),
        features,
    })
}

/// Renders a token sequence through the domain's channel and noise.
pub fn render(domain: &DomainSpec, codebook: &Codebook, tokens: &[Token], noise_seed: u64) -> Mat<f64> {
    let f = codebook.feature_dim();
    let channel = domain.channel_transform(f);
    let fpt = domain.frames_per_token;
    let mut features = Mat::zeros(tokens.len() * fpt, f);
    let mut transformed = vec![0.0; f];
    for (i, &t) in tokens.iter().enumerate() {
        let v = codebook.vector(t);
        for (r, out) in transformed.iter_mut().enumerate() {
            *out = channel.row(r).iter().zip(v).map(|(a, b)| a * b).sum();
        }
        for k in 0..fpt {
            features.row_mut(i * fpt + k).copy_from_slice(&transformed);
        }
    }
    if domain.noise_sigma > 0.0 {
        let mut rng = seed::rng(noise_seed);
        let normal = Normal::new(0.0, domain.noise_sigma).expect("valid sigma");
        features
            .data
            .iter_mut()
            .for_each(|x| *x += normal.sample(&mut rng));
    }
    features
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub domain: DomainSpec,
    pub codebook_seed: u64,
    pub feature_dim: usize,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Same inputs with every reference removed.
    pub fn without_references(&self) -> Corpus {
        let mut c = self.clone();
        c.utterances.iter_mut().for_each(|u| u.reference = None);
        c
    }

    /// The first `n` utterances.
    pub fn head(&self, n: usize) -> Corpus {
        let mut c = self.clone();
        c.utterances.truncate(n);
        c
    }

    pub fn has_references(&self) -> bool {
        self.utterances.iter().all(|u| u.reference.is_some())
    }
}

pub fn synth_corpus(
    domain: &DomainSpec,
    codebook: &Codebook,
    count: usize,
    length_range: RangeInclusive<usize>,
    seed_value: u64,
) -> Result<Corpus> {
    if length_range.is_empty() || *length_range.start() == 0 {
        return Err(Error::Config(format!(
            "length range {}..={} is empty or admits zero-length utterances",
            length_range.start(),
            length_range.end()
        )));
    }
    let mut len_rng = seed::rng(seed::derive_str(seed_value, "lengths"));
    let utterances = (0..count)
        .map(|i| {
            let n = len_rng.random_range(length_range.clone());
            synth_utterance(
                domain,
                codebook,
                n,
                seed::derive(seed_value, i as u64),
                format!("{}-{:05}", domain.name, i),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        vocab: codebook.vocab.clone(),
        domain: domain.clone(),
        codebook_seed: codebook.seed,
        feature_dim: codebook.feature_dim(),
        utterances,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    format: String,
    version: u32,
    vocab: Vocab,
    domain: DomainSpec,
    codebook_seed: u64,
    feature_dim: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceRecord {
    id: String,
    domain: String,
    #[serde(rename = "ref")]
    reference: Option<Vec<Token>>,
    shape: [usize; 2],
    feat: Vec<f64>,
}

pub fn write_corpus(corpus: &Corpus, out: &mut impl Write) -> Result<()> {
    let header = HeaderRecord {
        format: CORPUS_FORMAT.to_string(),
        version: CORPUS_VERSION,
        vocab: corpus.vocab.clone(),
        domain: corpus.domain.clone(),
        codebook_seed: corpus.codebook_seed,
        feature_dim: corpus.feature_dim,
        count: corpus.utterances.len(),
    };
    let to_io = |e: serde_json::Error| Error::Input(e.to_string());
    serde_json::to_writer(&mut *out, &header).map_err(to_io)?;
    out.write_all(b"\n").map_err(|e| Error::io("<corpus>", e))?;
    for u in &corpus.utterances {
        let rec = UtteranceRecord {
            id: u.id.clone(),
            domain: u.domain.clone(),
            reference: u.reference.clone(),
            shape: [u.features.rows, u.features.cols],
            feat: u.features.data.clone(),
        };
        serde_json::to_writer(&mut *out, &rec).map_err(to_io)?;
        out.write_all(b"\n").map_err(|e| Error::io("<corpus>", e))?;
    }
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_corpus(corpus, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_line<'a, T: Deserialize<'a>>(line: &'a str, number: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        line: number,
        message: e.to_string(),
    })
}

pub fn read_corpus(input: impl BufRead) -> Result<Corpus> {
    let mut lines = input.lines().enumerate();
    let next = |lines: &mut std::iter::Enumerate<std::io::Lines<_>>| -> Result<Option<(usize, String)>> {
        match lines.next() {
            None => Ok(None),
            Some((i, Ok(l))) => Ok(Some((i + 1, l))),
            Some((i, Err(e))) => Err(Error::Parse {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    };
    let (n, line) = next(&mut lines)?.ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let header: HeaderRecord = parse_line(&line, n)?;
    if header.format != CORPUS_FORMAT {
        return Err(Error::Parse {
            line: n,
            message: format!("unexpected format tag `{}`", header.format),
        });
    }
    if header.version != CORPUS_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: CORPUS_VERSION,
        });
    }
    header.vocab.validate()?;
    let mut utterances = Vec::with_capacity(header.count);
    let mut ids = HashSet::new();
    while let Some((n, line)) = next(&mut lines)? {
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = parse_line(&line, n)?;
        let bad = |message: String| Error::Parse { line: n, message };
        if rec.shape[1] != header.feature_dim || rec.shape[0] * rec.shape[1] != rec.feat.len() {
            return Err(bad(format!("feature shape {:?} inconsistent", rec.shape)));
        }
        if rec.feat.iter().any(|x| !x.is_finite()) {
            return Err(bad("non-finite feature value".into()));
        }
        if let Some(r) = &rec.reference {
            if r.iter().any(|&t| t >= header.vocab.size || header.vocab.is_reserved(t)) {
                return Err(bad("reference contains an out-of-range or reserved token".into()));
            }
        }
        if !ids.insert(rec.id.clone()) {
            return Err(bad(format!("duplicate utterance id `{}`", rec.id)));
        }
        utterances.push(Utterance {
            id: rec.id,
            domain: rec.domain,
            reference: rec.reference,
            features: Mat::from_vec(rec.shape[0], rec.shape[1], rec.feat),
        });
    }
    if utterances.len() != header.count {
        return Err(Error::Parse {
            line: header.count + 1,
            message: format!(
                "file truncated: header announces {} utterances, found {}",
                header.count,
                utterances.len()
            ),
        });
    }
    Ok(Corpus {
        vocab: header.vocab,
        domain: header.domain,
        codebook_seed: header.codebook_seed,
        feature_dim: header.feature_dim,
        utterances,
    })
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noisy(sigma: f64) -> DomainSpec {
        DomainSpec {
            noise_sigma: sigma,
            ..DomainSpec::clean("noisy")
        }
    }

    #[test]
    fn codebook_is_deterministic_and_unit_norm() {
        let v = Vocab::default();
        let a = make_codebook(&v, 16, 7).unwrap();
        let b = make_codebook(&v, 16, 7).unwrap();
        assert_eq!(a, b);
        for t in 0..v.size {
            let n: f64 = a.vector(t).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-9);
        }
        let c = make_codebook(&v, 16, 8).unwrap();
        assert!((0..v.size).any(|t| a.vector(t) != c.vector(t)));
    }

    #[test]
    fn codebook_rejects_tiny_feature_dim() {
        assert!(matches!(
            make_codebook(&Vocab::default(), 3, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn vocab_invariants() {
        assert!(Vocab::new(7, 1).is_err());
        let v = Vocab::new(50, 3).unwrap();
        assert_eq!(v.prompt, vec![1, 3, 4]);
        assert!(v.content_tokens().iter().all(|&t| !v.is_reserved(t)));
        assert_eq!(v.content_tokens().len(), 45);
    }

    #[test]
    fn identity_domain_reproduces_codebook_rows() {
        let cb = make_codebook(&Vocab::default(), 16, 3).unwrap();
        let d = DomainSpec::clean("src");
        assert!(d.is_identity());
        let u = synth_utterance(&d, &cb, 6, 11, "u").unwrap();
        let r = u.reference.as_ref().unwrap();
        assert_eq!(u.num_frames(), 18);
        for (i, &t) in r.iter().enumerate() {
            for k in 0..3 {
                assert_eq!(u.features.row(i * 3 + k), cb.vector(t));
            }
        }
        assert_eq!(u, synth_utterance(&d, &cb, 6, 11, "u").unwrap());
    }

    #[test]
    fn noise_level_matches_sigma() {
        let cb = make_codebook(&Vocab::default(), 16, 3).unwrap();
        let clean = synth_utterance(&DomainSpec::clean("a"), &cb, 250, 5, "u").unwrap();
        let dirty = synth_utterance(&noisy(0.5), &cb, 250, 5, "u").unwrap();
        assert_eq!(clean.reference, dirty.reference);
        let res: Vec<f64> = clean
            .features
            .data
            .iter()
            .zip(&dirty.features.data)
            .map(|(a, b)| b - a)
            .collect();
        assert!(res.len() >= 10_000);
        let mean = res.iter().sum::<f64>() / res.len() as f64;
        let var = res.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / res.len() as f64;
        let std = var.sqrt();
        assert!((0.45..=0.55).contains(&std), "std {std}");
        let msd = res.iter().map(|x| x * x).sum::<f64>() / res.len() as f64;
        assert!((msd - 0.25).abs() <= 0.025, "mean squared distance {msd}");
    }

    #[test]
    fn length_limits() {
        let cb = make_codebook(&Vocab::default(), 16, 3).unwrap();
        let d = DomainSpec::clean("a");
        assert!(matches!(
            synth_utterance(&d, &cb, MAX_REFERENCE_LEN + 1, 1, "u"),
            Err(Error::Length { .. })
        ));
        assert!(synth_corpus(&d, &cb, 3, 5..=4, 1).is_err());
        let empty = synth_corpus(&d, &cb, 0, 5..=20, 1).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn corpus_lengths_stay_in_range() {
        let v = Vocab::default();
        let cb = make_codebook(&v, 16, 3).unwrap();
        let c = synth_corpus(&DomainSpec::clean("a"), &cb, 2000, 5..=20, 9).unwrap();
        assert_eq!(c.len(), 2000);
        for u in &c.utterances {
            let r = u.reference.as_ref().unwrap();
            assert!((5..=20).contains(&r.len()));
            assert!(r.iter().all(|&t| !v.is_reserved(t)));
        }
        let ids: HashSet<_> = c.utterances.iter().map(|u| &u.id).collect();
        assert_eq!(ids.len(), c.len());
    }

    #[test]
    fn serialization_is_byte_stable_and_exact() {
        let cb = make_codebook(&Vocab::default(), 16, 3).unwrap();
        let d = noisy(0.3);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_corpus(&synth_corpus(&d, &cb, 20, 2..=6, 4).unwrap(), &mut a).unwrap();
        write_corpus(&synth_corpus(&d, &cb, 20, 2..=6, 4).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        let back = read_corpus(&a[..]).unwrap();
        assert_eq!(back, synth_corpus(&d, &cb, 20, 2..=6, 4).unwrap());
    }

    #[test]
    fn truncated_and_unknown_fields_are_rejected() {
        let cb = make_codebook(&Vocab::default(), 16, 3).unwrap();
        let c = synth_corpus(&noisy(0.1), &cb, 4, 2..=3, 4).unwrap();
        let mut bytes = Vec::new();
        write_corpus(&c, &mut bytes).unwrap();
        let text = String::from_utf8(bytes).unwrap();

        // Cut mid-record.
        let cut = &text[..text.len() - 40];
        match read_corpus(cut.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
        // Cut on a record boundary.
        let lines: Vec<&str> = text.lines().collect();
        let short = lines[..3].join("\n");
        assert!(matches!(read_corpus(short.as_bytes()), Err(Error::Parse { .. })));

        let extra = text.replacen("{\"id\"", "{\"speaker\":\"x\",\"id\"", 1);
        match read_corpus(extra.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("speaker"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
