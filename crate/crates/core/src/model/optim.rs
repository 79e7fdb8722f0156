//! Adaptive-moment optimizer with gradient accumulation.

use super::network::LossGraph;
use super::params::Params;
use super::Model;
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T = f32> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_accum_steps: usize,
    /// Number of updates applied so far.
    pub t: u64,
    pub first_moment: Params<T>,
    pub second_moment: Params<T>,
    accumulated: Params<T>,
    pending: usize,
}

impl<T: Real> OptimState<T> {
    pub fn new(model: &Model<T>, learning_rate: f64, grad_accum_steps: usize) -> Result<Self> {
        if grad_accum_steps == 0 {
            return Err(Error::Config("grad_accum_steps must be positive".into()));
        }
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {learning_rate}")));
        }
        let zeros = model.params.zeros_like();
        Ok(OptimState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_accum_steps,
            t: 0,
            first_moment: zeros.clone(),
            second_moment: zeros.clone(),
            accumulated: zeros,
            pending: 0,
        })
    }

    /// Gradients added since the last update.
    pub fn pending(&self) -> usize {
        self.pending
    }

    /// Adds one gradient. Rejects it, leaving the accumulator untouched, if
    /// any entry is non-finite.
    pub fn accumulate(&mut self, grad: &Params<T>) -> Result<()> {
        for (name, t) in grad.tensors() {
            if !t.all_finite() {
                return Err(Error::NonFiniteGradient { tensor: name });
            }
        }
        self.accumulated.add_assign(grad);
        self.pending += 1;
        Ok(())
    }

    /// Applies one update from the mean of the pending gradients and clears
    /// them. No-op when nothing is pending.
    pub fn apply(&mut self, model: &mut Model<T>) {
        if self.pending == 0 {
            return;
        }
        self.t += 1;
        let inv_n = 1.0 / self.pending as f64;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        let params = model.params.tensors_mut();
        let m = self.first_moment.tensors_mut();
        let v = self.second_moment.tensors_mut();
        let g = self.accumulated.tensors_mut();
        for (((p, m), v), g) in params.into_iter().zip(m).zip(v).zip(g) {
            for (((p, m), v), g) in p
                .data
                .iter_mut()
                .zip(m.data.iter_mut())
                .zip(v.data.iter_mut())
                .zip(g.data.iter_mut())
            {
                let grad = g.as_f64() * inv_n;
                let m1 = b1 * m.as_f64() + (1.0 - b1) * grad;
                let v1 = b2 * v.as_f64() + (1.0 - b2) * grad * grad;
                *m = T::of(m1);
                *v = T::of(v1);
                if lr != 0.0 {
                    let step = lr * (m1 / bc1) / ((v1 / bc2).sqrt() + eps);
                    *p = T::of(p.as_f64() - step);
                }
                *g = T::zero();
            }
        }
        self.pending = 0;
        model.step_count += 1;
    }
}

/// Backpropagates `graph` into the accumulator and updates `model` once
/// `grad_accum_steps` gradients have been collected. Returns whether an
/// update happened.
pub fn backward_and_step<T: Real>(
    model: &mut Model<T>,
    optim: &mut OptimState<T>,
    graph: &LossGraph<T>,
) -> Result<bool> {
    let grad = model.gradient(graph);
    optim.accumulate(&grad)?;
    if optim.pending >= optim.grad_accum_steps {
        optim.apply(model);
        return Ok(true);
    }
    Ok(false)
}

pub(crate) fn restore<T: Real>(
    model: &Model<T>,
    learning_rate: f64,
    betas: (f64, f64),
    epsilon: f64,
    grad_accum_steps: usize,
    t: u64,
    first_moment: Params<T>,
    second_moment: Params<T>,
) -> OptimState<T> {
    OptimState {
        learning_rate,
        beta1: betas.0,
        beta2: betas.1,
        epsilon,
        grad_accum_steps,
        t,
        first_moment,
        second_moment,
        accumulated: model.params.zeros_like(),
        pending: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_codebook, synth_corpus, DomainSpec, Vocab};
    use crate::model::{init_model, ModelConfig};

    fn setup() -> (Model, Vec<crate::corpus::Utterance>) {
        let cfg = ModelConfig {
            model_dim: 16,
            ff_dim: 32,
            heads: 2,
            ..ModelConfig::default()
        };
        let cb = make_codebook(&Vocab::default(), 16, 2).unwrap();
        let c = synth_corpus(&DomainSpec::clean("s"), &cb, 16, 3..=6, 5).unwrap();
        (init_model(&cfg).unwrap(), c.utterances)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (mut m, utts) = setup();
        let before = m.params.clone();
        let mut opt = OptimState::new(&m, 0.0, 2).unwrap();
        for u in &utts[..4] {
            let g = m.loss_graph(u, u.reference.as_ref().unwrap(), None).unwrap();
            backward_and_step(&mut m, &mut opt, &g).unwrap();
        }
        assert_eq!(m.params, before);
        assert_eq!(m.step_count, 2);
    }

    #[test]
    fn accumulated_update_matches_replay() {
        let (m0, utts) = setup();
        let mut a = m0.clone();
        let mut opt_a = OptimState::new(&a, 1e-3, 16).unwrap();
        let mut updates = 0;
        for u in &utts {
            let g = a.loss_graph(u, u.reference.as_ref().unwrap(), None).unwrap();
            if backward_and_step(&mut a, &mut opt_a, &g).unwrap() {
                updates += 1;
            }
        }
        assert_eq!(updates, 1);

        // Replay: sixteen separate accumulations, then one explicit step.
        let mut b = m0.clone();
        let mut opt_b = OptimState::new(&b, 1e-3, 16).unwrap();
        for u in &utts {
            let g = b.loss_graph(u, u.reference.as_ref().unwrap(), None).unwrap();
            let grad = b.gradient(&g);
            opt_b.accumulate(&grad).unwrap();
        }
        opt_b.apply(&mut b);
        for ((_, x), (_, y)) in a.params.tensors().into_iter().zip(b.params.tensors()) {
            for (p, q) in x.data.iter().zip(&y.data) {
                assert!(((p - q) as f64).abs() <= 1e-12);
            }
        }
        assert_ne!(a.params, m0.params);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let (m, _) = setup();
        let mut opt = OptimState::new(&m, 1e-3, 1).unwrap();
        let mut g = m.params.zeros_like();
        g.embed.data[3] = f32::NAN;
        match opt.accumulate(&g) {
            Err(Error::NonFiniteGradient { tensor }) => assert_eq!(tensor, "embed"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(opt.pending(), 0);
    }
}
