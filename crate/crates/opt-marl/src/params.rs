//! Flat parameter storage with a named layout, plus the RMSprop update used
//! by the trainer. Keeping every trainable tensor in one contiguous vector
//! makes target-network copies, checkpointing, and finite-difference checks
//! over whole networks trivial.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::error::{OptError, Result};
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone)]
struct Entry {
    offset: usize,
    shape: (usize, usize),
    fan_in: usize,
}

/// Name -> (offset, shape) map over one flat vector.
#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    entries: Vec<(String, Entry)>,
    index: HashMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a (rows x cols) tensor; `fan_in` scales the init range.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        let entry = Entry {
            offset: self.total,
            shape: (rows, cols),
            fan_in,
        };
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), entry));
        self.total += rows * cols;
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn shape_of(&self, name: &str) -> Option<(usize, usize)> {
        self.index.get(name).map(|&i| self.entries[i].1.shape)
    }
}

/// One set of network parameters over a shared layout.
#[derive(Debug, Clone)]
pub struct ParamStore {
    pub layout: Rc<ParamLayout>,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn zeros(layout: Rc<ParamLayout>) -> Self {
        let data = vec![0.0; layout.total_len()];
        Self { layout, data }
    }

    /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per tensor.
    pub fn init_uniform<R: Rng>(layout: Rc<ParamLayout>, rng: &mut R) -> Self {
        let mut data = vec![0.0; layout.total_len()];
        for (_, e) in &layout.entries {
            let bound = 1.0 / (e.fan_in.max(1) as f64).sqrt();
            for slot in &mut data[e.offset..e.offset + e.shape.0 * e.shape.1] {
                *slot = rng.gen_range(-bound..bound);
            }
        }
        Self { layout, data }
    }

    fn entry(&self, name: &str) -> &Entry {
        let i = *self
            .layout
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.layout.entries[i].1
    }

    /// Creates a tape leaf for the named tensor.
    pub fn leaf(&self, tape: &mut Tape, name: &str, trainable: bool) -> NodeId {
        let e = self.entry(name);
        tape.param(&self.data, e.offset, e.shape, trainable)
    }

    pub fn offset_of(&self, name: &str) -> usize {
        self.entry(name).offset
    }

    /// Hard copy of another store's values (target-network sync).
    pub fn copy_from(&mut self, other: &ParamStore) {
        assert_eq!(self.data.len(), other.data.len());
        self.data.copy_from_slice(&other.data);
    }
}

/// RMSprop with the standard squared-gradient accumulator; no momentum,
/// no weight decay.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    sq: Vec<f64>,
}

impl RmsProp {
    pub fn new(lr: f64, alpha: f64, eps: f64, n_params: usize) -> Self {
        Self {
            lr,
            alpha,
            eps,
            sq: vec![0.0; n_params],
        }
    }

    /// Accumulator snapshot for checkpointing.
    pub fn sq_state(&self) -> &[f64] {
        &self.sq
    }

    pub fn set_sq_state(&mut self, sq: &[f64]) -> Result<()> {
        if sq.len() != self.sq.len() {
            return Err(OptError::Checkpoint(
                "optimizer state length mismatch".into(),
            ));
        }
        self.sq.copy_from_slice(sq);
        Ok(())
    }

    /// Clips the global gradient norm to `clip`, then applies one update.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut [f64], clip: f64) -> Result<f64> {
        if grads.len() != params.data.len() || grads.len() != self.sq.len() {
            return Err(OptError::InvalidInput("gradient length mismatch".into()));
        }
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(OptError::InvalidState("non-finite gradient".into()));
        }
        if clip > 0.0 && norm > clip {
            let scale = clip / norm;
            for g in grads.iter_mut() {
                *g *= scale;
            }
        }
        for i in 0..grads.len() {
            let g = grads[i];
            self.sq[i] = self.alpha * self.sq[i] + (1.0 - self.alpha) * g * g;
            params.data[i] -= self.lr * g / (self.sq[i].sqrt() + self.eps);
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy_layout() -> Rc<ParamLayout> {
        let mut l = ParamLayout::new();
        l.add("w", 2, 3, 2);
        l.add("b", 1, 3, 2);
        Rc::new(l)
    }

    #[test]
    fn layout_offsets_and_shapes() {
        let l = toy_layout();
        assert_eq!(l.total_len(), 9);
        assert_eq!(l.shape_of("b"), Some((1, 3)));
        let store = ParamStore::zeros(l);
        assert_eq!(store.offset_of("b"), 6);
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let l = toy_layout();
        let mut r1 = ChaCha20Rng::seed_from_u64(7);
        let mut r2 = ChaCha20Rng::seed_from_u64(7);
        let a = ParamStore::init_uniform(l.clone(), &mut r1);
        let b = ParamStore::init_uniform(l, &mut r2);
        assert_eq!(a.data, b.data);
        let bound = 1.0 / (2f64).sqrt();
        assert!(a.data.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn rmsprop_descends_a_quadratic() {
        let mut l = ParamLayout::new();
        l.add("x", 1, 1, 1);
        let mut store = ParamStore::zeros(Rc::new(l));
        store.data[0] = 3.0;
        let mut opt = RmsProp::new(0.05, 0.99, 1e-5, 1);
        for _ in 0..500 {
            let mut g = vec![2.0 * store.data[0]];
            opt.step(&mut store, &mut g, 10.0).unwrap();
        }
        assert!(store.data[0].abs() < 0.1);
    }

    #[test]
    fn grad_clip_scales_to_norm() {
        let mut l = ParamLayout::new();
        l.add("x", 1, 2, 1);
        let mut store = ParamStore::zeros(Rc::new(l));
        let before = store.data.clone();
        let mut opt = RmsProp::new(0.1, 0.99, 1e-5, 2);
        let mut g = vec![30.0, 40.0];
        let norm = opt.step(&mut store, &mut g, 10.0).unwrap();
        assert_eq!(norm, 50.0);
        let clipped: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((clipped - 10.0).abs() < 1e-12);
        assert_ne!(store.data, before);
    }
}
