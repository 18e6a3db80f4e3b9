//! Minimal CPU neural-network kernel: layers with explicit forward caches
//! and hand-written backward passes over `ndarray` buffers.
//!
//! There is no general autograd tape. Each backbone owns a static graph and
//! drives its layers' `backward` methods in reverse order, accumulating
//! parameter gradients into a [`Grads`] store keyed by [`ParamId`]. All
//! reductions run in a fixed order, so training is bit-reproducible.

pub mod functional;
pub mod layers;

pub use layers::{Conv2d, ConvCtx, LayerNorm, Linear, LinearCtx, LnCtx};

/// Index of one learnable array inside a model's parameter table.
pub type ParamId = usize;

/// Sentinel for "no parameter slot assigned yet".
pub const UNSET: ParamId = usize::MAX;

/// Classification of a parameter, used to derive trainable sets per mode
/// and to hash parameter groups in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Frozen-able base weight of an adaptable layer (conv kernel or linear matrix).
    BaseWeight,
    /// Bias vector of an adaptable layer.
    BaseBias,
    /// LayerNorm gamma/beta.
    Norm,
    /// Relative-position bias table.
    RelPos,
    /// Low-rank factor A.
    LoraA,
    /// Low-rank factor B.
    LoraB,
}

impl ParamKind {
    pub fn is_adapter(self) -> bool {
        matches!(self, ParamKind::LoraA | ParamKind::LoraB)
    }
}

/// One row of a model's parameter table.
#[derive(Debug, Clone)]
pub struct ParamInfo {
    pub pid: ParamId,
    pub name: String,
    pub kind: ParamKind,
    pub len: usize,
}

/// Gradient accumulator. Slots are flattened row-major buffers matching the
/// parameter table; only `active` slots are filled so frozen parameters cost
/// nothing.
#[derive(Debug, Clone)]
pub struct Grads {
    active: Vec<bool>,
    slots: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn new(n_params: usize, active: Vec<bool>) -> Self {
        assert_eq!(active.len(), n_params);
        Grads { active, slots: vec![None; n_params] }
    }

    /// All slots active; used by standalone layer tests.
    pub fn all_active(n_params: usize) -> Self {
        Grads::new(n_params, vec![true; n_params])
    }

    pub fn wants(&self, pid: ParamId) -> bool {
        pid != UNSET && self.active[pid]
    }

    /// Accumulate a flattened contribution into `pid`'s slot.
    pub fn add(&mut self, pid: ParamId, contribution: &[f32]) {
        if !self.wants(pid) {
            return;
        }
        match &mut self.slots[pid] {
            Some(buf) => {
                assert_eq!(buf.len(), contribution.len());
                for (acc, c) in buf.iter_mut().zip(contribution) {
                    *acc += c;
                }
            }
            None => self.slots[pid] = Some(contribution.to_vec()),
        }
    }

    pub fn get(&self, pid: ParamId) -> Option<&[f32]> {
        self.slots.get(pid).and_then(|s| s.as_deref())
    }

    /// Fold another accumulator into this one (fixed slot order).
    pub fn merge(&mut self, other: Grads) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (pid, slot) in other.slots.into_iter().enumerate() {
            if let Some(buf) = slot {
                self.add(pid, &buf);
            }
        }
    }

    /// Scale every accumulated gradient (e.g. by 1/batch).
    pub fn scale(&mut self, factor: f32) {
        for slot in self.slots.iter_mut().flatten() {
            for v in slot.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grads_accumulate_and_merge() {
        let mut g = Grads::new(3, vec![true, false, true]);
        g.add(0, &[1.0, 2.0]);
        g.add(0, &[0.5, 0.5]);
        g.add(1, &[9.0]); // inactive, dropped
        assert_eq!(g.get(0).unwrap(), &[1.5, 2.5]);
        assert!(g.get(1).is_none());

        let mut h = Grads::new(3, vec![true, false, true]);
        h.add(2, &[4.0]);
        g.merge(h);
        assert_eq!(g.get(2).unwrap(), &[4.0]);
    }
}
