//! AdamW with per-parameter learning rate, weight decay and optional
//! per-entry update masks.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Graph, ParamId, ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Group {
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
struct Slot {
    group: Group,
    /// Entries allowed to change; `None` means all.
    mask: Option<Vec<bool>>,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    slots: BTreeMap<ParamId, Slot>,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Registers a parameter. Parameters never registered are not updated.
    pub fn add<R: Real>(
        &mut self,
        store: &ParamStore<R>,
        id: ParamId,
        group: Group,
        mask: Option<Vec<bool>>,
    ) {
        let n = store.get(id).len();
        debug_assert!(mask.as_ref().is_none_or(|m| m.len() == n));
        self.slots.insert(
            id,
            Slot {
                group,
                mask,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.keys().copied()
    }

    /// One update from the gradients recorded in `g`.
    pub fn step<R: Real>(&mut self, store: &mut ParamStore<R>, g: &Graph<R>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - libm::pow(b1, t as f64);
        let c2 = 1.0 - libm::pow(b2, t as f64);
        for (&id, slot) in self.slots.iter_mut() {
            let Some(var) = g.param_var(id) else { continue };
            let Some(grad) = g.grad(var) else { continue };
            let w = store.get_mut(id).data_mut();
            let Group { lr, weight_decay } = slot.group;
            for i in 0..w.len() {
                if slot.mask.as_ref().is_some_and(|m| !m[i]) {
                    continue;
                }
                let gi = grad[i].as_f64();
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * gi;
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * gi * gi;
                let mhat = slot.m[i] / c1;
                let vhat = slot.v[i] / c2;
                let mut x = w[i].as_f64();
                x -= lr * weight_decay * x;
                x -= lr * mhat / (libm::sqrt(vhat) + self.eps);
                w[i] = R::from_f64(x);
            }
        }
    }
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn minimizes_quadratic_and_respects_mask() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .insert("x", Tensor::from_f64(&[2], &[3.0, -2.0]).unwrap())
            .unwrap();
        let mut opt = AdamW::new();
        opt.add(
            &store,
            id,
            Group {
                lr: 0.1,
                weight_decay: 0.0,
            },
            Some(vec![true, false]),
        );
        for _ in 0..300 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.square(x).unwrap();
            let l = g.sum(sq).unwrap();
            g.backward(l).unwrap();
            opt.step(&mut store, &g);
        }
        let x = store.get(id).data();
        assert!(x[0].abs() < 1e-2);
        assert_eq!(x[1], -2.0);
    }
}
