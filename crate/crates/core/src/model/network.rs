//! Pre-norm transformer encoder-decoder.
//!
//! Encoder: input projection + sinusoidal positions, `enc_layers` blocks of
//! self-attention and feed-forward, final norm. Decoder: token embedding +
//! positions, `dec_layers` blocks of causal self-attention,
//! cross-attention over the encoder memory and feed-forward, final norm and
//! output projection.

use super::layers::{attend_row, AttentionCache, FeedForwardCache, NormCache};
use super::params::{DecoderLayer, EncoderLayer, Params};
use super::ModelConfig;
use crate::corpus::Token;
use crate::tensor::{log_softmax, sinusoid, softmax_in_place, Mat, Real};

struct EncLayerCache<T> {
    a: Mat<T>,
    n1: NormCache<T>,
    attn: AttentionCache<T>,
    b: Mat<T>,
    n2: NormCache<T>,
    ff: FeedForwardCache<T>,
}

pub struct EncoderCache<T> {
    x: Mat<T>,
    layers: Vec<EncLayerCache<T>>,
    norm: NormCache<T>,
    pub memory: Mat<T>,
}

struct DecLayerCache<T> {
    a: Mat<T>,
    n1: NormCache<T>,
    self_attn: AttentionCache<T>,
    c: Mat<T>,
    n2: NormCache<T>,
    cross: AttentionCache<T>,
    d: Mat<T>,
    n3: NormCache<T>,
    ff: FeedForwardCache<T>,
}

pub struct DecoderCache<T> {
    inputs: Vec<Token>,
    layers: Vec<DecLayerCache<T>>,
    norm: NormCache<T>,
    normed: Mat<T>,
    pub logits: Mat<T>,
}

impl<T: Real> DecoderCache<T> {
    /// Per layer, the head-averaged causal self-attention matrix.
    pub fn self_attention(&self) -> Vec<Mat<f64>> {
        self.layers
            .iter()
            .map(|l| head_mean(&l.self_attn.probs))
            .collect()
    }
}

fn head_mean<T: Real>(probs: &[Mat<T>]) -> Mat<f64> {
    let mut out = Mat::zeros(probs[0].rows, probs[0].cols);
    for p in probs {
        for (o, &v) in out.data.iter_mut().zip(&p.data) {
            *o += v.as_f64();
        }
    }
    out.scale(1.0 / probs.len() as f64);
    out
}

fn encoder_layer_forward<T: Real>(
    layer: &EncoderLayer<T>,
    h: &mut Mat<T>,
    heads: usize,
) -> EncLayerCache<T> {
    let (a, n1) = layer.norm1.forward(h);
    let (att, attn) = layer.attn.forward(&a, &a, heads, false);
    h.add_assign(&att);
    let (b, n2) = layer.norm2.forward(h);
    let (f, ff) = layer.ff.forward(&b);
    h.add_assign(&f);
    EncLayerCache {
        a,
        n1,
        attn,
        b,
        n2,
        ff,
    }
}

fn encoder_layer_backward<T: Real>(
    layer: &EncoderLayer<T>,
    cache: &EncLayerCache<T>,
    dh: &mut Mat<T>,
    heads: usize,
    grad: &mut EncoderLayer<T>,
) {
    let db = layer.ff.backward(&cache.b, &cache.ff, dh, &mut grad.ff);
    dh.add_assign(&layer.norm2.backward(&cache.n2, &db, &mut grad.norm2));
    let (dq, dkv) = layer
        .attn
        .backward(&cache.a, &cache.a, &cache.attn, dh, heads, &mut grad.attn);
    let mut da = dq;
    da.add_assign(&dkv);
    dh.add_assign(&layer.norm1.backward(&cache.n1, &da, &mut grad.norm1));
}

pub fn encode<T: Real>(params: &Params<T>, config: &ModelConfig, features: &Mat<f64>) -> EncoderCache<T> {
    let x: Mat<T> = features.cast();
    let mut h = params.input.forward(&x);
    h.add_assign(&sinusoid(h.rows, config.model_dim));
    let layers = params
        .encoder
        .iter()
        .map(|l| encoder_layer_forward(l, &mut h, config.heads))
        .collect();
    let (memory, norm) = params.enc_norm.forward(&h);
    EncoderCache {
        x,
        layers,
        norm,
        memory,
    }
}

fn embed_tokens<T: Real>(params: &Params<T>, config: &ModelConfig, tokens: &[Token], start: usize) -> Mat<T> {
    let d = config.model_dim;
    let pe: Mat<T> = sinusoid(start + tokens.len(), d);
    let mut h = Mat::zeros(tokens.len(), d);
    for (i, &t) in tokens.iter().enumerate() {
        let row = h.row_mut(i);
        for ((o, &e), &p) in row.iter_mut().zip(params.embed.row(t as usize)).zip(pe.row(start + i)) {
            *o = e + p;
        }
    }
    h
}

fn decoder_layer_forward<T: Real>(
    layer: &DecoderLayer<T>,
    h: &mut Mat<T>,
    memory: &Mat<T>,
    heads: usize,
) -> DecLayerCache<T> {
    let (a, n1) = layer.norm1.forward(h);
    let (sa, self_attn) = layer.self_attn.forward(&a, &a, heads, true);
    h.add_assign(&sa);
    let (c, n2) = layer.norm2.forward(h);
    let (ca, cross) = layer.cross_attn.forward(&c, memory, heads, false);
    h.add_assign(&ca);
    let (d, n3) = layer.norm3.forward(h);
    let (f, ff) = layer.ff.forward(&d);
    h.add_assign(&f);
    DecLayerCache {
        a,
        n1,
        self_attn,
        c,
        n2,
        cross,
        d,
        n3,
        ff,
    }
}

/// Teacher-forced decoder pass over `inputs`; row `i` of the logits
/// predicts the token following `inputs[i]`.
pub fn decode_teacher_forced<T: Real>(
    params: &Params<T>,
    config: &ModelConfig,
    memory: &Mat<T>,
    inputs: &[Token],
) -> DecoderCache<T> {
    let mut h = embed_tokens(params, config, inputs, 0);
    let layers = params
        .decoder
        .iter()
        .map(|l| decoder_layer_forward(l, &mut h, memory, config.heads))
        .collect();
    let (normed, norm) = params.dec_norm.forward(&h);
    let logits = params.output.forward(&normed);
    DecoderCache {
        inputs: inputs.to_vec(),
        layers,
        norm,
        normed,
        logits,
    }
}

/// A computed loss together with everything needed to differentiate it.
pub struct LossGraph<T> {
    enc: EncoderCache<T>,
    dec: DecoderCache<T>,
    /// First logits row that is scored (`prompt_len - 1`).
    first_row: usize,
    /// Scored targets: content tokens followed by eos.
    targets: Vec<Token>,
    weights: Vec<f64>,
    pub loss: f64,
    /// `log P(target_l | prefix, x)` per scored position.
    pub step_log_probs: Vec<f64>,
}

impl<T: Real> LossGraph<T> {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn decoder(&self) -> &DecoderCache<T> {
        &self.dec
    }
}

pub fn loss_graph<T: Real>(
    params: &Params<T>,
    config: &ModelConfig,
    features: &Mat<f64>,
    target: &[Token],
    weights: Vec<f64>,
) -> LossGraph<T> {
    let vocab = &config.vocab;
    let mut inputs = vocab.prompt.clone();
    inputs.extend_from_slice(target);
    let mut targets = target.to_vec();
    targets.push(vocab.eos);
    debug_assert_eq!(targets.len(), weights.len());

    let enc = encode(params, config, features);
    let dec = decode_teacher_forced(params, config, &enc.memory, &inputs);
    let first_row = vocab.prompt_len() - 1;
    let mut loss = 0.0;
    let mut step_log_probs = Vec::with_capacity(targets.len());
    for (i, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
        let lp = log_softmax(dec.logits.row(first_row + i))[t as usize].as_f64();
        step_log_probs.push(lp);
        loss += -lp * w;
    }
    LossGraph {
        enc,
        dec,
        first_row,
        targets,
        weights,
        loss,
        step_log_probs,
    }
}

/// Gradient of `graph.loss` with respect to every parameter.
pub fn backward<T: Real>(params: &Params<T>, config: &ModelConfig, graph: &LossGraph<T>) -> Params<T> {
    let heads = config.heads;
    let mut grad = params.zeros_like();
    let dec = &graph.dec;

    let mut dlogits = Mat::zeros(dec.logits.rows, dec.logits.cols);
    for (i, (&t, &w)) in graph.targets.iter().zip(&graph.weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let r = graph.first_row + i;
        let row = dlogits.row_mut(r);
        row.copy_from_slice(dec.logits.row(r));
        softmax_in_place(row);
        row[t as usize] = row[t as usize] - T::one();
        let wt = T::of(w);
        row.iter_mut().for_each(|g| *g = *g * wt);
    }

    let dnormed = params.output.backward(&dec.normed, &dlogits, &mut grad.output);
    let mut dh = params.dec_norm.backward(&dec.norm, &dnormed, &mut grad.dec_norm);
    let memory = &graph.enc.memory;
    let mut dmemory = Mat::zeros(memory.rows, memory.cols);
    for ((layer, cache), g) in params
        .decoder
        .iter()
        .zip(&dec.layers)
        .zip(grad.decoder.iter_mut())
        .rev()
    {
        let dd = layer.ff.backward(&cache.d, &cache.ff, &dh, &mut g.ff);
        dh.add_assign(&layer.norm3.backward(&cache.n3, &dd, &mut g.norm3));
        let (dc, dm) = layer
            .cross_attn
            .backward(&cache.c, memory, &cache.cross, &dh, heads, &mut g.cross_attn);
        dmemory.add_assign(&dm);
        dh.add_assign(&layer.norm2.backward(&cache.n2, &dc, &mut g.norm2));
        let (dq, dkv) = layer
            .self_attn
            .backward(&cache.a, &cache.a, &cache.self_attn, &dh, heads, &mut g.self_attn);
        let mut da = dq;
        da.add_assign(&dkv);
        dh.add_assign(&layer.norm1.backward(&cache.n1, &da, &mut g.norm1));
    }
    for (i, &t) in dec.inputs.iter().enumerate() {
        let dst = grad.embed.row_mut(t as usize);
        for (a, &b) in dst.iter_mut().zip(dh.row(i)) {
            *a = *a + b;
        }
    }

    let enc = &graph.enc;
    let mut dh = params.enc_norm.backward(&enc.norm, &dmemory, &mut grad.enc_norm);
    for ((layer, cache), g) in params
        .encoder
        .iter()
        .zip(&enc.layers)
        .zip(grad.encoder.iter_mut())
        .rev()
    {
        encoder_layer_backward(layer, cache, &mut dh, heads, g);
    }
    params.input.backward_params(&enc.x, &dh, &mut grad.input);
    grad
}

/// Output of one incremental decoder step.
pub struct StepOutput {
    pub logits: Vec<f64>,
    /// Per decoder layer, head-averaged self-attention of the new query over
    /// positions `0..=pos`.
    pub self_attention: Vec<Vec<f64>>,
}

/// Key/value-cached auto-regressive decoder.
#[derive(Clone)]
pub struct IncrementalDecoder<'a, T> {
    params: &'a Params<T>,
    config: &'a ModelConfig,
    cross_k: std::rc::Rc<Vec<Mat<T>>>,
    cross_v: std::rc::Rc<Vec<Mat<T>>>,
    self_k: Vec<Mat<T>>,
    self_v: Vec<Mat<T>>,
    pos: usize,
}

impl<'a, T: Real> IncrementalDecoder<'a, T> {
    pub fn new(params: &'a Params<T>, config: &'a ModelConfig, memory: &Mat<T>) -> Self {
        let d = config.model_dim;
        let cross_k = params.decoder.iter().map(|l| l.cross_attn.k.forward(memory)).collect();
        let cross_v = params.decoder.iter().map(|l| l.cross_attn.v.forward(memory)).collect();
        IncrementalDecoder {
            params,
            config,
            cross_k: std::rc::Rc::new(cross_k),
            cross_v: std::rc::Rc::new(cross_v),
            self_k: vec![Mat::zeros(0, d); params.decoder.len()],
            self_v: vec![Mat::zeros(0, d); params.decoder.len()],
            pos: 0,
        }
    }

    /// Number of tokens fed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn step(&mut self, token: Token) -> StepOutput {
        let heads = self.config.heads;
        let mut h = embed_tokens(self.params, self.config, &[token], self.pos);
        let mut self_attention = Vec::with_capacity(self.params.decoder.len());
        for (i, layer) in self.params.decoder.iter().enumerate() {
            let (a, _) = layer.norm1.forward(&h);
            let q = layer.self_attn.q.forward(&a);
            let k = layer.self_attn.k.forward(&a);
            let v = layer.self_attn.v.forward(&a);
            self.self_k[i].data.extend_from_slice(&k.data);
            self.self_k[i].rows += 1;
            self.self_v[i].data.extend_from_slice(&v.data);
            self.self_v[i].rows += 1;
            let (ctx, probs) = attend_row(&q, &self.self_k[i], &self.self_v[i], heads);
            self_attention.push(probs);
            h.add_assign(&layer.self_attn.o.forward(&ctx));

            let (c, _) = layer.norm2.forward(&h);
            let q = layer.cross_attn.q.forward(&c);
            let (ctx, _) = attend_row(&q, &self.cross_k[i], &self.cross_v[i], heads);
            h.add_assign(&layer.cross_attn.o.forward(&ctx));

            let (d, _) = layer.norm3.forward(&h);
            let (f, _) = layer.ff.forward(&d);
            h.add_assign(&f);
        }
        let (normed, _) = self.params.dec_norm.forward(&h);
        let logits = self.params.output.forward(&normed);
        self.pos += 1;
        StepOutput {
            logits: logits.data.iter().map(|x| x.as_f64()).collect(),
            self_attention,
        }
    }
}
