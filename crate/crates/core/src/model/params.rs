//! Parameter containers. Gradients and optimizer moments reuse the same
//! structs, so every per-tensor operation walks `tensors()` /
//! `tensors_mut()` in one fixed order.

use rand::Rng as _;

use super::ModelConfig;
use crate::seed;
use crate::tensor::{Mat, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in × out`
    pub w: Mat<T>,
    /// `1 × out`
    pub b: Mat<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Mat<T>,
    pub bias: Mat<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub norm1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub ff: FeedForward<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub norm1: LayerNorm<T>,
    pub self_attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub cross_attn: Attention<T>,
    pub norm3: LayerNorm<T>,
    pub ff: FeedForward<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub input: Linear<T>,
    pub encoder: Vec<EncoderLayer<T>>,
    pub enc_norm: LayerNorm<T>,
    /// `vocab × model_dim`
    pub embed: Mat<T>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub dec_norm: LayerNorm<T>,
    pub output: Linear<T>,
}

impl<T: Real> Linear<T> {
    fn zeros(inp: usize, out: usize) -> Self {
        Linear {
            w: Mat::zeros(inp, out),
            b: Mat::zeros(1, out),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat<T>)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat<T>>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

impl<T: Real> LayerNorm<T> {
    fn identity(dim: usize) -> Self {
        LayerNorm {
            gain: Mat::filled(1, dim, T::one()),
            bias: Mat::zeros(1, dim),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat<T>)>) {
        out.push((format!("{prefix}.gain"), &self.gain));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat<T>>) {
        out.push(&mut self.gain);
        out.push(&mut self.bias);
    }
}

impl<T: Real> Attention<T> {
    fn zeros(dim: usize) -> Self {
        Attention {
            q: Linear::zeros(dim, dim),
            k: Linear::zeros(dim, dim),
            v: Linear::zeros(dim, dim),
            o: Linear::zeros(dim, dim),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat<T>)>) {
        self.q.visit(&format!("{prefix}.q"), out);
        self.k.visit(&format!("{prefix}.k"), out);
        self.v.visit(&format!("{prefix}.v"), out);
        self.o.visit(&format!("{prefix}.o"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat<T>>) {
        self.q.visit_mut(out);
        self.k.visit_mut(out);
        self.v.visit_mut(out);
        self.o.visit_mut(out);
    }
}

impl<T: Real> FeedForward<T> {
    fn zeros(dim: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::zeros(dim, hidden),
            down: Linear::zeros(hidden, dim),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat<T>)>) {
        self.up.visit(&format!("{prefix}.up"), out);
        self.down.visit(&format!("{prefix}.down"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat<T>>) {
        self.up.visit_mut(out);
        self.down.visit_mut(out);
    }
}

impl<T: Real> Params<T> {
    /// Structure for `config` with weights zeroed and norms at identity.
    pub fn skeleton(config: &ModelConfig) -> Self {
        let d = config.model_dim;
        let ff = config.ff_dim;
        Params {
            input: Linear::zeros(config.feature_dim, d),
            encoder: (0..config.enc_layers)
                .map(|_| EncoderLayer {
                    norm1: LayerNorm::identity(d),
                    attn: Attention::zeros(d),
                    norm2: LayerNorm::identity(d),
                    ff: FeedForward::zeros(d, ff),
                })
                .collect(),
            enc_norm: LayerNorm::identity(d),
            embed: Mat::zeros(config.vocab.size as usize, d),
            decoder: (0..config.dec_layers)
                .map(|_| DecoderLayer {
                    norm1: LayerNorm::identity(d),
                    self_attn: Attention::zeros(d),
                    norm2: LayerNorm::identity(d),
                    cross_attn: Attention::zeros(d),
                    norm3: LayerNorm::identity(d),
                    ff: FeedForward::zeros(d, ff),
                })
                .collect(),
            dec_norm: LayerNorm::identity(d),
            output: Linear::zeros(d, config.vocab.size as usize),
        }
    }

    /// Scaled-uniform initialization: weight matrices draw from
    /// `U(-1/√fan_in, 1/√fan_in)`, embeddings from `U(-1, 1)`, biases start
    /// at zero and norms at identity.
    pub fn init(config: &ModelConfig) -> Self {
        let mut p = Params::skeleton(config);
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, tensor) in names.iter().zip(p.tensors_mut()) {
            let bound = if name == "embed" {
                1.0
            } else if name.ends_with(".w") {
                1.0 / (tensor.rows as f64).sqrt()
            } else {
                continue;
            };
            let mut rng = seed::rng(seed::derive_str(config.init_seed, name));
            for x in tensor.data.iter_mut() {
                *x = T::of(rng.random_range(-bound..bound));
            }
        }
        p
    }

    /// Named tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Mat<T>)> {
        let mut out = Vec::new();
        self.input.visit("input", &mut out);
        for (i, l) in self.encoder.iter().enumerate() {
            l.norm1.visit(&format!("enc.{i}.norm1"), &mut out);
            l.attn.visit(&format!("enc.{i}.attn"), &mut out);
            l.norm2.visit(&format!("enc.{i}.norm2"), &mut out);
            l.ff.visit(&format!("enc.{i}.ff"), &mut out);
        }
        self.enc_norm.visit("enc_norm", &mut out);
        out.push(("embed".to_string(), &self.embed));
        for (i, l) in self.decoder.iter().enumerate() {
            l.norm1.visit(&format!("dec.{i}.norm1"), &mut out);
            l.self_attn.visit(&format!("dec.{i}.self_attn"), &mut out);
            l.norm2.visit(&format!("dec.{i}.norm2"), &mut out);
            l.cross_attn.visit(&format!("dec.{i}.cross_attn"), &mut out);
            l.norm3.visit(&format!("dec.{i}.norm3"), &mut out);
            l.ff.visit(&format!("dec.{i}.ff"), &mut out);
        }
        self.dec_norm.visit("dec_norm", &mut out);
        self.output.visit("output", &mut out);
        out
    }

    /// Mutable tensors in the same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Mat<T>> {
        let mut out = Vec::new();
        self.input.visit_mut(&mut out);
        for l in self.encoder.iter_mut() {
            l.norm1.visit_mut(&mut out);
            l.attn.visit_mut(&mut out);
            l.norm2.visit_mut(&mut out);
            l.ff.visit_mut(&mut out);
        }
        self.enc_norm.visit_mut(&mut out);
        out.push(&mut self.embed);
        for l in self.decoder.iter_mut() {
            l.norm1.visit_mut(&mut out);
            l.self_attn.visit_mut(&mut out);
            l.norm2.visit_mut(&mut out);
            l.cross_attn.visit_mut(&mut out);
            l.norm3.visit_mut(&mut out);
            l.ff.visit_mut(&mut out);
        }
        self.dec_norm.visit_mut(&mut out);
        self.output.visit_mut(&mut out);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill_zero());
        z
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self, config: &ModelConfig) -> Params<U> {
        let mut out = Params::<U>::skeleton(config);
        for ((_, src), dst) in self.tensors().into_iter().zip(out.tensors_mut()) {
            *dst = src.cast();
        }
        out
    }

    pub fn add_assign(&mut self, other: &Params<T>) {
        for (a, (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }
}
