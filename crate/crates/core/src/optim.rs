//! Gradient clipping and parameter-update rules (AdamW, Adadelta).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::params::ModelState;

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm. Frozen groups hold zero gradients and do not
/// contribute.
pub fn clip_grad_norm(state: &mut ModelState, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (id, p) in state.iter() {
        if state.is_frozen(id) {
            continue;
        }
        if let Some(g) = p.value.grad() {
            for v in g {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        op: "clip_grad_norm",
                    });
                }
                sq += v * v;
            }
        }
    }
    let norm = math::sqrt(sq);
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in state.iter_mut() {
            if let Some(g) = p.value.grad_mut() {
                for v in g {
                    *v *= scale;
                }
            }
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    AdamW {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
    Adadelta {
        lr: f64,
        rho: f64,
        eps: f64,
    },
}

impl OptimKind {
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        OptimKind::AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn adadelta(lr: f64) -> Self {
        OptimKind::Adadelta {
            lr,
            rho: 0.9,
            eps: 1e-6,
        }
    }
}

/// Per-parameter moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimKind,
    step: u64,
    // AdamW: (m, v); Adadelta: (sq_grad_avg, sq_delta_avg).
    m1: Vec<Vec<f64>>,
    m2: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimKind, state: &ModelState) -> Self {
        let m1 = state.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        let m2 = state.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        OptimizerState {
            kind,
            step: 0,
            m1,
            m2,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. Frozen groups are skipped entirely: their values and
    /// moment buffers stay bit-identical.
    pub fn step(&mut self, state: &mut ModelState) -> Result<()> {
        if !state.grads_seen() {
            return Err(Error::Invalid(
                "optimizer step before any backward pass".into(),
            ));
        }
        if self.m1.len() != state.len() {
            return Err(Error::Invalid(
                "optimizer state does not match parameter count".into(),
            ));
        }
        self.step += 1;
        let frozen: Vec<bool> = state.iter().map(|(id, _)| state.is_frozen(id)).collect();
        match self.kind {
            OptimKind::AdamW {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let bc1 = 1.0 - math::powi(beta1, self.step as i32);
                let bc2 = 1.0 - math::powi(beta2, self.step as i32);
                for (i, p) in state.iter_mut().enumerate() {
                    if frozen[i] {
                        continue;
                    }
                    let n = p.value.len();
                    let g: Vec<f64> = p.value.grad().map(|g| g.to_vec()).unwrap_or(vec![0.0; n]);
                    let vals = p.value.values_mut();
                    for j in 0..n {
                        let m = &mut self.m1[i][j];
                        let v = &mut self.m2[i][j];
                        *m = beta1 * *m + (1.0 - beta1) * g[j];
                        *v = beta2 * *v + (1.0 - beta2) * g[j] * g[j];
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        // Decoupled weight decay.
                        vals[j] -= lr * (mhat / (math::sqrt(vhat) + eps) + weight_decay * vals[j]);
                    }
                }
            }
            OptimKind::Adadelta { lr, rho, eps } => {
                for (i, p) in state.iter_mut().enumerate() {
                    if frozen[i] {
                        continue;
                    }
                    let n = p.value.len();
                    let g: Vec<f64> = p.value.grad().map(|g| g.to_vec()).unwrap_or(vec![0.0; n]);
                    let vals = p.value.values_mut();
                    for j in 0..n {
                        let acc = &mut self.m1[i][j];
                        let dacc = &mut self.m2[i][j];
                        *acc = rho * *acc + (1.0 - rho) * g[j] * g[j];
                        let delta = -math::sqrt(*dacc + eps) / math::sqrt(*acc + eps) * g[j];
                        *dacc = rho * *dacc + (1.0 - rho) * delta * delta;
                        vals[j] += lr * delta;
                    }
                }
            }
        }
        Ok(())
    }

    /// Raw view for checkpointing: (step, first moments, second moments).
    pub fn raw(&self) -> (u64, &[Vec<f64>], &[Vec<f64>]) {
        (self.step, &self.m1, &self.m2)
    }

    pub fn restore(kind: OptimKind, step: u64, m1: Vec<Vec<f64>>, m2: Vec<Vec<f64>>) -> Self {
        OptimizerState { kind, step, m1, m2 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param_state(value: f64) -> (ModelState, crate::params::ParamId) {
        let mut s = ModelState::new();
        let g = s.group("head");
        let id = s.add(g, "p", Tensor::new(alloc::vec![value], &[1]).unwrap());
        (s, id)
    }

    fn set_grad(state: &mut ModelState, id: crate::params::ParamId, g: &[f64]) {
        state.param_mut(id).value.accumulate_grad(g, 1.0);
        // accumulate_grads is what normally flips the flag; emulate it.
        let mut tape = crate::tape::Tape::new();
        let bound = state.bind(&mut tape).unwrap();
        state.accumulate_grads(&tape, &bound, 1.0);
    }

    #[test]
    fn clip_below_threshold_is_identity() {
        let (mut s, id) = one_param_state(0.0);
        set_grad(&mut s, id, &[3.0]);
        let norm = clip_grad_norm(&mut s, 5.0).unwrap();
        assert_eq!(norm, 3.0);
        assert_eq!(s.param(id).value.grad().unwrap(), &[3.0]);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut s = ModelState::new();
        let g = s.group("head");
        let id = s.add(g, "p", Tensor::zeros(&[2]));
        set_grad(&mut s, id, &[3.0, 4.0]);
        let norm = clip_grad_norm(&mut s, 1.0).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        let gv = s.param(id).value.grad().unwrap();
        assert!((gv[0] - 0.6).abs() < 1e-12 && (gv[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clip_idempotent_and_zero_safe() {
        let mut s = ModelState::new();
        let g = s.group("head");
        let id = s.add(g, "p", Tensor::zeros(&[2]));
        set_grad(&mut s, id, &[3.0, 4.0]);
        clip_grad_norm(&mut s, 1.0).unwrap();
        let once = s.param(id).value.grad().unwrap().to_vec();
        let second = clip_grad_norm(&mut s, 1.0).unwrap();
        assert!((second - 1.0).abs() < 1e-12);
        assert_eq!(s.param(id).value.grad().unwrap(), &once[..]);

        let (mut z, _) = one_param_state(1.0);
        let norm = clip_grad_norm(&mut z, 5.0).unwrap();
        assert_eq!(norm, 0.0);
    }

    #[test]
    fn step_before_backward_rejected() {
        let (mut s, _) = one_param_state(1.0);
        let mut opt = OptimizerState::new(OptimKind::adamw(1e-3, 0.0), &s);
        assert!(opt.step(&mut s).is_err());
    }

    #[test]
    fn adamw_descends_on_positive_gradient() {
        let (mut s, id) = one_param_state(1.0);
        set_grad(&mut s, id, &[1.0]);
        let mut opt = OptimizerState::new(OptimKind::adamw(1e-4, 0.0), &s);
        opt.step(&mut s).unwrap();
        assert!(s.param(id).value.values()[0] < 1.0);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params() {
        let (mut s, id) = one_param_state(2.5);
        set_grad(&mut s, id, &[0.0]);
        let mut opt = OptimizerState::new(OptimKind::adamw(1e-3, 0.0), &s);
        opt.step(&mut s).unwrap();
        assert_eq!(s.param(id).value.values()[0], 2.5);

        let (mut s2, id2) = one_param_state(2.5);
        set_grad(&mut s2, id2, &[0.0]);
        let mut opt2 = OptimizerState::new(OptimKind::adadelta(1.2), &s2);
        opt2.step(&mut s2).unwrap();
        assert_eq!(s2.param(id2).value.values()[0], 2.5);
    }

    #[test]
    fn frozen_group_bit_identical_after_step() {
        let mut s = ModelState::new();
        let enc = s.group("encoder");
        let head = s.group("head");
        let a = s.add(enc, "w_enc", Tensor::new(alloc::vec![1.0, -2.0], &[2]).unwrap());
        let b = s.add(head, "w_head", Tensor::new(alloc::vec![0.5], &[1]).unwrap());
        s.set_frozen("encoder", true).unwrap();
        // Force nonzero gradient onto the frozen param directly.
        s.param_mut(a).value.accumulate_grad(&[10.0, 10.0], 1.0);
        set_grad(&mut s, b, &[1.0]);

        let before = s.group_bytes("encoder");
        let mut opt = OptimizerState::new(OptimKind::adamw(0.1, 0.01), &s);
        opt.step(&mut s).unwrap();
        assert_eq!(s.group_bytes("encoder"), before);
        assert_ne!(s.param(b).value.values()[0], 0.5);
    }
}
