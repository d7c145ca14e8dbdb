//! AdamW with decoupled weight decay.
//!
//! Moments are held in f64 regardless of the model's storage scalar, and
//! the update arithmetic runs in f64, so training trajectories depend only
//! on (seed, data, config) and not on accumulated storage rounding in the
//! optimizer state itself.

use super::TransformerModel;
use crate::error::{Error, Result};
use crate::model::backward::GradBuf;
use crate::num::Real;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        AdamW {
            lr,
            ..Default::default()
        }
    }
}

/// First/second moment estimates plus the step counter.
pub struct OptState {
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptState {
    pub fn new<R: Real>(model: &TransformerModel<R>) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for name in model.param_names() {
            let len = model.param(&name).expect("own name").len();
            m.insert(name.clone(), vec![0.0f64; len]);
            v.insert(name, vec![0.0f64; len]);
        }
        OptState { t: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam step over every parameter:
    /// `p ← p − lr·(m̂ / (√v̂ + eps) + wd·p)`.
    pub fn step<R: Real>(
        &self,
        model: &mut TransformerModel<R>,
        grads: &GradBuf,
        state: &mut OptState,
    ) -> Result<()> {
        state.t += 1;
        let bc1 = 1.0 - self.beta1.powi(state.t as i32);
        let bc2 = 1.0 - self.beta2.powi(state.t as i32);
        for name in model.param_names() {
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::Data(format!("optimizer: no gradient for {name}")))?;
            let p = model.param_mut(&name).expect("own name");
            if g.len() != p.data.len() {
                return Err(Error::Data(format!(
                    "optimizer: gradient shape mismatch for {name}: {} vs {}",
                    g.len(),
                    p.data.len()
                )));
            }
            let m = state.m.get_mut(&name).expect("state matches model");
            let v = state.v.get_mut(&name).expect("state matches model");
            for i in 0..g.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let pi = p.data[i].to_f64();
                let step = self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * pi);
                p.data[i] = R::from_f64(pi - step);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, loss_and_grads, seq_loss_and_grads, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 12,
        }
    }

    #[test]
    fn zero_grads_zero_decay_leave_params_unchanged() {
        let mut m = init_model::<f32>(tiny(), 1).unwrap();
        let before = m.clone();
        let grads = GradBuf::zeros_like(&m);
        let mut st = OptState::new(&m);
        let opt = AdamW {
            weight_decay: 0.0,
            ..Default::default()
        };
        opt.step(&mut m, &grads, &mut st).unwrap();
        assert_eq!(m, before);
        assert_eq!(st.steps_taken(), 1);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut m = init_model::<f32>(tiny(), 2).unwrap();
        let before = m.clone();
        let mut buf = GradBuf::zeros_like(&m);
        seq_loss_and_grads(&m, &[1, 5, 6], &[5, 6, 7], &[true; 3], 1.0, &mut buf).unwrap();
        let mut st = OptState::new(&m);
        let opt = AdamW {
            lr: 0.0,
            ..Default::default()
        };
        opt.step(&mut m, &buf, &mut st).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn repeated_steps_memorize_a_sequence() {
        let mut m = init_model::<f32>(tiny(), 3).unwrap();
        let tokens = [0u32, 4, 9, 2, 7];
        let targets = [4u32, 9, 2, 7, 1];
        let mask = [true; 5];
        let (initial, _) = loss_and_grads(&m, &tokens, &targets, &mask).unwrap();
        let opt = AdamW::with_lr(3e-3);
        let mut st = OptState::new(&m);
        let mut buf = GradBuf::zeros_like(&m);
        let mut last = initial;
        for _ in 0..200 {
            buf.zero();
            let (sum, n) =
                seq_loss_and_grads(&m, &tokens, &targets, &mask, 1.0 / 5.0, &mut buf).unwrap();
            last = sum / n as f64;
            opt.step(&mut m, &buf, &mut st).unwrap();
        }
        assert!(
            last < 0.2 * initial,
            "loss failed to drop: {initial} -> {last}"
        );
        assert_eq!(st.steps_taken(), 200);
    }
}
