//! The recognizer: a small attention encoder-decoder trained with
//! teacher forcing and a per-token weighted cross-entropy.

mod checkpoint;
mod layers;
pub mod network;
mod optim;
pub mod params;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use network::{IncrementalDecoder, LossGraph, StepOutput};
pub use optim::{backward_and_step, OptimState};
pub use params::Params;

use crate::corpus::{Token, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Mat, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub feature_dim: usize,
    pub vocab: Vocab,
    /// Longest decoder sequence, prompt and eos included.
    pub max_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            model_dim: 64,
            ff_dim: 128,
            feature_dim: 16,
            vocab: Vocab::default(),
            max_len: 24,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("model_dim", self.model_dim),
            ("ff_dim", self.ff_dim),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::Config("model_dim must be even".into()));
        }
        self.vocab.validate()?;
        if self.max_len < self.vocab.prompt_len() + 2 {
            return Err(Error::Config(format!(
                "max_len {} leaves no room after the {}-token prompt",
                self.max_len,
                self.vocab.prompt_len()
            )));
        }
        Ok(())
    }

    /// Longest content sequence that fits with prompt and eos.
    pub fn max_target_len(&self) -> usize {
        self.max_len - self.vocab.prompt_len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: Params<T>,
    pub step_count: u64,
}

pub fn init_model(config: &ModelConfig) -> Result<Model<f32>> {
    Model::init(config)
}

impl<T: Real> Model<T> {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            config: config.clone(),
            params: Params::init(config),
            step_count: 0,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(&self.config),
            step_count: self.step_count,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.tensors().iter().all(|(_, t)| t.all_finite())
    }

    pub fn ensure_vocab(&self, vocab: &Vocab) -> Result<()> {
        if &self.config.vocab != vocab {
            return Err(Error::Input(format!(
                "model vocabulary (size {}) does not match data vocabulary (size {})",
                self.config.vocab.size, vocab.size
            )));
        }
        Ok(())
    }

    /// Validates a target sequence against the vocabulary and length limit.
    pub fn check_target(&self, utterance: &Utterance, target: &[Token]) -> Result<()> {
        let vocab = &self.config.vocab;
        if utterance.features.cols != self.config.feature_dim {
            return Err(Error::Input(format!(
                "utterance {} has feature dim {}, model expects {}",
                utterance.id, utterance.features.cols, self.config.feature_dim
            )));
        }
        if utterance.features.rows == 0 {
            return Err(Error::Input(format!("utterance {} has no frames", utterance.id)));
        }
        if let Some(&t) = target.iter().find(|&&t| t == vocab.pad) {
            return Err(Error::Input(format!("target contains pad token {t}")));
        }
        if let Some(&t) = target.iter().find(|&&t| t >= vocab.size || vocab.is_reserved(t)) {
            return Err(Error::Input(format!("target contains reserved or out-of-range token {t}")));
        }
        if target.len() > self.config.max_target_len() {
            return Err(Error::Length {
                requested: target.len(),
                limit: self.config.max_target_len(),
            });
        }
        Ok(())
    }

    /// Builds the differentiable weighted loss
    /// `Σ_l −log P(y_l | y_<l, x) · w_l` over content tokens and eos.
    pub fn loss_graph(
        &self,
        utterance: &Utterance,
        target: &[Token],
        weights: Option<&[f64]>,
    ) -> Result<LossGraph<T>> {
        self.check_target(utterance, target)?;
        let weights = match weights {
            None => vec![1.0; target.len() + 1],
            Some(w) => {
                if w.len() != target.len() + 1 {
                    return Err(Error::Input(format!(
                        "{} weights for {} scored positions",
                        w.len(),
                        target.len() + 1
                    )));
                }
                if let Some(bad) = w.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                    return Err(Error::Input(format!("weight {bad} is negative or non-finite")));
                }
                w.to_vec()
            }
        };
        Ok(network::loss_graph(
            &self.params,
            &self.config,
            &utterance.features,
            target,
            weights,
        ))
    }

    /// Unweighted teacher-forced cross-entropy and the per-step log-probs.
    pub fn teacher_forced_loss(&self, utterance: &Utterance, target: &[Token]) -> Result<(f64, Vec<f64>)> {
        let g = self.loss_graph(utterance, target, None)?;
        Ok((g.loss, g.step_log_probs))
    }

    pub fn weighted_loss(&self, utterance: &Utterance, target: &[Token], weights: &[f64]) -> Result<f64> {
        Ok(self.loss_graph(utterance, target, Some(weights))?.loss)
    }

    pub fn gradient(&self, graph: &LossGraph<T>) -> Params<T> {
        network::backward(&self.params, &self.config, graph)
    }

    /// Copy with i.i.d. Gaussian noise added to every tensor, scaled per
    /// tensor to `rho` times that tensor's own standard deviation.
    pub fn perturbed(&self, rho: f64, seed_value: u64) -> Model<T> {
        let mut out = self.clone();
        if rho == 0.0 {
            return out;
        }
        let names: Vec<String> = self.params.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, tensor) in names.iter().zip(out.params.tensors_mut()) {
            let std = tensor_std(tensor);
            if std == 0.0 {
                continue;
            }
            let normal = Normal::new(0.0, rho * std).expect("finite noise scale");
            let mut rng = seed::rng(seed::derive_str(seed_value, name));
            for x in tensor.data.iter_mut() {
                *x = T::of(x.as_f64() + normal.sample(&mut rng));
            }
        }
        out
    }
}

pub fn perturb_params<T: Real>(model: &Model<T>, rho: f64, seed_value: u64) -> Result<Model<T>> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::Input(format!("rho must be finite and >= 0, got {rho}")));
    }
    Ok(model.perturbed(rho, seed_value))
}

/// Population standard deviation of a tensor's entries.
pub fn tensor_std<T: Real>(t: &Mat<T>) -> f64 {
    let n = t.len() as f64;
    let mean = t.data.iter().map(|x| x.as_f64()).sum::<f64>() / n;
    (t.data.iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_codebook, synth_utterance, DomainSpec};

    fn small_config() -> ModelConfig {
        ModelConfig {
            model_dim: 16,
            ff_dim: 24,
            heads: 2,
            ..ModelConfig::default()
        }
    }

    fn utterance(seed_value: u64, n: usize) -> Utterance {
        let cb = make_codebook(&Vocab::default(), 16, 1).unwrap();
        synth_utterance(&DomainSpec::clean("src"), &cb, n, seed_value, "u").unwrap()
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let cfg = ModelConfig::default();
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        assert_eq!(a, b);
        let bad = ModelConfig {
            heads: 3,
            model_dim: 64,
            ..ModelConfig::default()
        };
        assert!(matches!(init_model(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn default_parameter_count() {
        // Summed by hand from the tensor shapes.
        let (f, d, ff, v) = (16, 64, 128, 50);
        let lin = |i: usize, o: usize| i * o + o;
        let norm = 2 * d;
        let attn = 4 * lin(d, d);
        let ffn = lin(d, ff) + lin(ff, d);
        let enc = 2 * (norm + attn + norm + ffn);
        let dec = 2 * (norm + attn + norm + attn + norm + ffn);
        let expected = lin(f, d) + enc + norm + v * d + dec + norm + lin(d, v);
        let m = init_model(&ModelConfig::default()).unwrap();
        assert_eq!(m.param_count(), expected);
        assert_eq!(init_model(&ModelConfig::default()).unwrap().param_count(), expected);
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let m = init_model(&ModelConfig::default()).unwrap();
        let ln_v = (50f64).ln();
        let mut total = 0.0;
        let mut count = 0;
        for s in 0..8 {
            let u = utterance(s, 10);
            let (loss, lps) = m.teacher_forced_loss(&u, u.reference.as_ref().unwrap()).unwrap();
            total += loss;
            count += lps.len();
        }
        let per_token = total / count as f64;
        assert!(
            (0.8 * ln_v..=1.2 * ln_v).contains(&per_token),
            "per-token loss {per_token}"
        );
    }

    #[test]
    fn weighted_loss_identities() {
        let m = init_model(&small_config()).unwrap();
        let u = utterance(3, 7);
        let r = u.reference.clone().unwrap();
        let (plain, lps) = m.teacher_forced_loss(&u, &r).unwrap();
        assert_eq!(m.weighted_loss(&u, &r, &[1.0; 8]).unwrap(), plain);
        assert_eq!(m.weighted_loss(&u, &r, &[0.0; 8]).unwrap(), 0.0);
        assert_eq!(m.weighted_loss(&u, &r, &[2.0; 8]).unwrap(), 2.0 * plain);
        let w: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin().abs()).collect();
        let dot: f64 = w.iter().zip(&lps).map(|(a, b)| -a * b).sum();
        assert!((m.weighted_loss(&u, &r, &w).unwrap() - dot).abs() <= 1e-9);
    }

    #[test]
    fn invalid_targets_and_weights_are_rejected() {
        let m = init_model(&small_config()).unwrap();
        let u = utterance(3, 4);
        assert!(matches!(m.teacher_forced_loss(&u, &[5, 0, 6]), Err(Error::Input(_))));
        assert!(matches!(
            m.weighted_loss(&u, &[5, 6], &[1.0, -0.5, 1.0]),
            Err(Error::Input(_))
        ));
        assert!(matches!(m.weighted_loss(&u, &[5, 6], &[1.0]), Err(Error::Input(_))));
        let long = vec![5; 30];
        assert!(matches!(m.teacher_forced_loss(&u, &long), Err(Error::Length { .. })));
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let mut m: Model<f64> = init_model(&small_config()).unwrap().cast();
        // Nonzero biases and non-unit norms so their gradients are exercised.
        for (i, t) in m.params.tensors_mut().into_iter().enumerate() {
            for (j, x) in t.data.iter_mut().enumerate() {
                *x += ((i * 17 + j) as f64 * 0.37).sin() * 0.05;
            }
        }
        let u = utterance(4, 6);
        let r = u.reference.clone().unwrap();
        let w: Vec<f64> = (0..7).map(|i| 0.3 + (i as f64 * 1.3).cos().abs()).collect();
        let g = m.loss_graph(&u, &r, Some(&w)).unwrap();
        let grad = m.gradient(&g);
        let grads: Vec<(String, Vec<f64>)> = grad
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.data.clone()))
            .collect();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (ti, (name, gdata)) in grads.iter().enumerate() {
            for k in [0usize, 7, 13] {
                if k >= gdata.len() {
                    continue;
                }
                let eval = |delta: f64| {
                    let mut p = m.clone();
                    p.params.tensors_mut()[ti].data[k] += delta;
                    p.weighted_loss(&u, &r, &w).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = (fd - gdata[k]).abs() / fd.abs().max(gdata[k].abs()).max(1e-6);
                assert!(rel <= 1e-3, "{name}[{k}]: analytic {} vs fd {fd}", gdata[k]);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-3);
    }

    #[test]
    fn perturbation_scale_and_purity() {
        let mut m = init_model(&ModelConfig::default()).unwrap();
        // Give biases and norms some spread so every tensor is exercised.
        for (i, t) in m.params.tensors_mut().into_iter().enumerate() {
            for (j, x) in t.data.iter_mut().enumerate() {
                *x += ((i * 31 + j) as f32 * 0.013).sin() * 0.01;
            }
        }
        let before = m.clone();
        assert_eq!(perturb_params(&m, 0.0, 1).unwrap(), m);
        let p1 = perturb_params(&m, 0.05, 9).unwrap();
        let p2 = perturb_params(&m, 0.05, 9).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(m, before);
        for ((name, orig), (_, pert)) in m.params.tensors().into_iter().zip(p1.params.tensors()) {
            if orig.len() < 1000 {
                continue;
            }
            let res: Vec<f64> = orig
                .data
                .iter()
                .zip(&pert.data)
                .map(|(a, b)| (*b as f64) - (*a as f64))
                .collect();
            let n = res.len() as f64;
            let mean = res.iter().sum::<f64>() / n;
            let std = (res.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            let ratio = std / tensor_std(orig);
            assert!((0.04..=0.06).contains(&ratio), "{name}: ratio {ratio}");
        }
        assert!(perturb_params(&m, -1.0, 1).is_err());
    }
}
