//! Named, grouped model parameters with freeze flags.
//!
//! Components register their tensors here and keep [`ParamId`] handles.
//! Binding a state onto a [`Tape`] produces one leaf per parameter; frozen
//! groups bind as constants so no gradient is ever computed for them.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: usize,
    pub value: Tensor,
}

#[derive(Debug, Clone)]
struct Group {
    name: String,
    frozen: bool,
}

/// All learnable parameters of a model, partitioned into named groups.
#[derive(Debug, Clone, Default)]
pub struct ModelState {
    params: Vec<Param>,
    groups: Vec<Group>,
    /// Set once gradients have been accumulated at least once; optimizers
    /// refuse to step before then.
    grads_seen: bool,
}

impl ModelState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Find or create a parameter group.
    pub fn group(&mut self, name: &str) -> usize {
        if let Some(i) = self.groups.iter().position(|g| g.name == name) {
            return i;
        }
        self.groups.push(Group {
            name: name.to_string(),
            frozen: false,
        });
        self.groups.len() - 1
    }

    pub fn group_names(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().map(|g| g.name.as_str())
    }

    pub fn add(&mut self, group: usize, name: &str, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.to_string(),
            group,
            value: value.with_grad(),
        });
        ParamId(self.params.len() - 1)
    }

    /// Convenience: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight init.
    pub fn add_uniform(
        &mut self,
        group: usize,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut StreamRng,
    ) -> ParamId {
        let bound = 1.0 / crate::math::sqrt(fan_in.max(1) as f64);
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        self.add(group, name, Tensor::new(values, shape).expect("shape"))
    }

    /// Convenience: N(0, std) init (positional tables, mask vectors).
    pub fn add_normal(
        &mut self,
        group: usize,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut StreamRng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.normal(0.0, std)).collect();
        self.add(group, name, Tensor::new(values, shape).expect("shape"))
    }

    pub fn add_zeros(&mut self, group: usize, name: &str, shape: &[usize]) -> ParamId {
        self.add(group, name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn set_frozen(&mut self, group_name: &str, frozen: bool) -> Result<()> {
        match self.groups.iter_mut().find(|g| g.name == group_name) {
            Some(g) => {
                g.frozen = frozen;
                Ok(())
            }
            None => Err(Error::Invalid(alloc::format!(
                "unknown parameter group '{group_name}'"
            ))),
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.groups[self.params[id.0].group].frozen
    }

    pub fn group_frozen(&self, group_name: &str) -> bool {
        self.groups
            .iter()
            .find(|g| g.name == group_name)
            .map(|g| g.frozen)
            .unwrap_or(false)
    }

    pub fn grads_seen(&self) -> bool {
        self.grads_seen
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Bind every parameter onto a tape. Frozen parameters become plain
    /// constants; everything else becomes a gradient leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let mut vars = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let frozen = self.groups[p.group].frozen;
            vars.push(tape.leaf_tensor(&p.value, !frozen).map_err(|e| {
                Error::Invalid(alloc::format!("binding '{}': {e}", self.params[i].name))
            })?);
        }
        Ok(BoundParams { vars })
    }

    /// Pull node gradients from a tape back into the parameter accumulators,
    /// scaled (e.g. 1/batch for a mean-of-losses step). Frozen groups are
    /// skipped.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundParams, scale: f64) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if self.groups[p.group].frozen {
                continue;
            }
            if let Some(g) = tape.grad(bound.vars[i]) {
                p.value.accumulate_grad(g, scale);
            }
        }
        self.grads_seen = true;
    }

    /// Flat byte-comparable snapshot of the parameters in a group.
    pub fn group_bytes(&self, group_name: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.params {
            if self.groups[p.group].name == group_name {
                for v in p.value.values() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Flat snapshot of every parameter value, in registration order.
    pub fn all_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.params {
            for v in p.value.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Tape-bound view of a [`ModelState`]: one `Var` per parameter, aligned by
/// parameter index.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngKey;

    #[test]
    fn groups_dedupe_by_name() {
        let mut s = ModelState::new();
        let a = s.group("encoder");
        let b = s.group("encoder");
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_params_bind_without_grad() {
        let mut s = ModelState::new();
        let g = s.group("enc");
        let id = s.add(g, "w", Tensor::new(alloc::vec![1.0, 2.0], &[2]).unwrap());
        s.set_frozen("enc", true).unwrap();

        let mut tape = Tape::new();
        let bound = s.bind(&mut tape).unwrap();
        let x = bound.var(id);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());

        s.accumulate_grads(&tape, &bound, 1.0);
        assert_eq!(s.param(id).value.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn accumulate_scales_and_sums() {
        let mut s = ModelState::new();
        let g = s.group("head");
        let id = s.add(g, "w", Tensor::new(alloc::vec![3.0], &[1]).unwrap());

        for _ in 0..2 {
            let mut tape = Tape::new();
            let bound = s.bind(&mut tape).unwrap();
            let x = bound.var(id);
            let loss = tape.mul(x, x).unwrap();
            tape.backward(loss).unwrap();
            s.accumulate_grads(&tape, &bound, 0.5);
        }
        // d(x^2)/dx = 6 at x=3; two passes at scale 0.5 sum back to 6.
        assert_eq!(s.param(id).value.grad().unwrap(), &[6.0]);
    }

    #[test]
    fn deterministic_init_from_key() {
        let mut s1 = ModelState::new();
        let mut s2 = ModelState::new();
        let g1 = s1.group("x");
        let g2 = s2.group("x");
        let mut r1 = RngKey::new(7).derive("init", 0).rng();
        let mut r2 = RngKey::new(7).derive("init", 0).rng();
        s1.add_uniform(g1, "w", &[4, 4], 4, &mut r1);
        s2.add_uniform(g2, "w", &[4, 4], 4, &mut r2);
        assert_eq!(s1.all_bytes(), s2.all_bytes());
    }
}
