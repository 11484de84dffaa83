//! Named parameter store with checkpoint round-trips.
//!
//! Parameters live as shared buffers; each training step hands out one leaf
//! tensor per parameter (memoized, so every use in a step shares one gradient
//! accumulator) and the optimizer swaps in updated buffers afterwards.
//! Checkpoints are a single JSON document `name -> {shape, values}`, floats
//! at 17 significant digits, loaded back strictly against the registered
//! schema.

use crate::jsonfmt::JsonValue;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("unknown parameter {0:?}")]
    Unknown(String),
    #[error("duplicate parameter {0:?}")]
    Duplicate(String),
    #[error("checkpoint missing parameter {0:?}")]
    Missing(String),
    #[error("checkpoint has unexpected parameter {0:?}")]
    Unexpected(String),
    #[error("parameter {name:?}: shape mismatch, registered {want:?} vs checkpoint {got:?}")]
    ShapeMismatch { name: String, want: Vec<usize>, got: Vec<usize> },
    #[error("checkpoint parse: {0}")]
    Parse(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ParamError>;

struct Slot {
    shape: Vec<usize>,
    values: RefCell<Rc<Vec<f64>>>,
    live: RefCell<Option<Tensor>>,
}

#[derive(Default)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "parameter {name}: shape/value mismatch"
        );
        if self.slots.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        self.slots.insert(
            name.to_string(),
            Slot {
                shape,
                values: RefCell::new(Rc::new(values)),
                live: RefCell::new(None),
            },
        );
        Ok(())
    }

    pub fn register_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        let n = shape.iter().product();
        self.register(name, shape, vec![0.0; n])
    }

    pub fn register_normal(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let n = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("finite std");
        let values: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        self.register(name, shape, values)
    }

    /// The leaf tensor for this step. Repeated calls before
    /// [`ParamStore::end_step`] return the same handle, so gradients from
    /// every use accumulate in one place.
    pub fn leaf(&self, name: &str) -> Result<Tensor> {
        let slot = self.slots.get(name).ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        let mut live = slot.live.borrow_mut();
        if live.is_none() {
            let t = Tensor::from_shared(
                slot.shape.clone(),
                Rc::clone(&slot.values.borrow()),
                true,
            )
            .expect("registered shape is consistent");
            *live = Some(t);
        }
        Ok(live.as_ref().unwrap().clone())
    }

    /// Gradient accumulated in this step's leaf, or None when the parameter
    /// never entered the graph.
    pub fn step_grad(&self, name: &str) -> Result<Option<Vec<f64>>> {
        let slot = self.slots.get(name).ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        let live = slot.live.borrow();
        Ok(live.as_ref().and_then(|t| t.grad()))
    }

    /// Swap in updated values for the next step.
    pub fn set_values(&self, name: &str, values: Vec<f64>) -> Result<()> {
        let slot = self.slots.get(name).ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        assert_eq!(values.len(), slot.values.borrow().len());
        *slot.values.borrow_mut() = Rc::new(values);
        Ok(())
    }

    /// Drop the step's live leaves; the next [`ParamStore::leaf`] call sees
    /// current values and a clean gradient.
    pub fn end_step(&self) {
        for slot in self.slots.values() {
            *slot.live.borrow_mut() = None;
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.slots.keys().cloned().collect()
    }

    pub fn shape(&self, name: &str) -> Result<Vec<usize>> {
        self.slots
            .get(name)
            .map(|s| s.shape.clone())
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn values(&self, name: &str) -> Result<Rc<Vec<f64>>> {
        self.slots
            .get(name)
            .map(|s| Rc::clone(&s.values.borrow()))
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn n_scalars(&self) -> usize {
        self.slots.values().map(|s| s.values.borrow().len()).sum()
    }

    pub fn checkpoint_json(&self) -> JsonValue {
        let mut doc = JsonValue::object();
        for (name, slot) in &self.slots {
            let mut entry = JsonValue::object();
            entry.push("shape", JsonValue::ints(&slot.shape));
            entry.push("values", JsonValue::floats(&slot.values.borrow()));
            doc.push(name, entry);
        }
        doc
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint_json().write_atomic(path)?;
        Ok(())
    }

    /// Load values into an already-registered store; names and shapes must
    /// match exactly.
    pub fn load_checkpoint(&self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let doc: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ParamError::Parse(e.to_string()))?;
        let map = doc
            .as_object()
            .ok_or_else(|| ParamError::Parse("checkpoint root must be an object".into()))?;
        for name in map.keys() {
            if !self.slots.contains_key(name) {
                return Err(ParamError::Unexpected(name.clone()));
            }
        }
        for (name, slot) in &self.slots {
            let entry = map
                .get(name)
                .ok_or_else(|| ParamError::Missing(name.clone()))?;
            let shape: Vec<usize> = entry
                .get("shape")
                .and_then(|v| v.as_array())
                .ok_or_else(|| ParamError::Parse(format!("{name}: missing shape")))?
                .iter()
                .map(|v| v.as_u64().map(|u| u as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| ParamError::Parse(format!("{name}: bad shape entry")))?;
            if shape != slot.shape {
                return Err(ParamError::ShapeMismatch {
                    name: name.clone(),
                    want: slot.shape.clone(),
                    got: shape,
                });
            }
            let values: Vec<f64> = entry
                .get("values")
                .and_then(|v| v.as_array())
                .ok_or_else(|| ParamError::Parse(format!("{name}: missing values")))?
                .iter()
                .map(|v| v.as_f64())
                .collect::<Option<_>>()
                .ok_or_else(|| ParamError::Parse(format!("{name}: non-numeric value")))?;
            if values.len() != slot.values.borrow().len() {
                return Err(ParamError::ShapeMismatch {
                    name: name.clone(),
                    want: slot.shape.clone(),
                    got: vec![values.len()],
                });
            }
            *slot.values.borrow_mut() = Rc::new(values);
            *slot.live.borrow_mut() = None;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;

    #[test]
    fn leaf_is_memoized_within_step() {
        let mut store = ParamStore::new();
        store.register("w", vec![2], vec![1.0, 2.0]).unwrap();
        let a = store.leaf("w").unwrap();
        let b = store.leaf("w").unwrap();
        assert!(a.same_node(&b), "one gradient accumulator per step");
        store.end_step();
        let c = store.leaf("w").unwrap();
        assert!(!a.same_node(&c), "next step gets a fresh accumulator");
        assert!(a.same_storage(&c), "unchanged values stay zero-copy");
    }

    #[test]
    fn grads_accumulate_through_shared_leaf() {
        let mut store = ParamStore::new();
        store.register("w", vec![2], vec![3.0, 4.0]).unwrap();
        let tape = Tape::new();
        let w1 = store.leaf("w").unwrap();
        let w2 = store.leaf("w").unwrap();
        let y = tape.sum(&tape.mul(&w1, &w2).unwrap(), None).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(store.step_grad("w").unwrap().unwrap(), vec![6.0, 8.0]);
    }

    #[test]
    fn set_values_visible_next_step_only() {
        let mut store = ParamStore::new();
        store.register("w", vec![1], vec![1.0]).unwrap();
        let old = store.leaf("w").unwrap();
        store.set_values("w", vec![9.0]).unwrap();
        assert_eq!(old.values(), &[1.0], "live leaf keeps its snapshot");
        store.end_step();
        assert_eq!(store.leaf("w").unwrap().values(), &[9.0]);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.register_normal("emb.item", vec![4, 3], 0.37, &mut rng).unwrap();
        store.register("head.b", vec![2], vec![0.1 + 0.2, -1.0 / 3.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        store.save_checkpoint(&path).unwrap();

        let mut other = ParamStore::new();
        other.register_zeros("emb.item", vec![4, 3]).unwrap();
        other.register_zeros("head.b", vec![2]).unwrap();
        other.load_checkpoint(&path).unwrap();
        for name in store.names() {
            let a = store.values(&name).unwrap();
            let b = other.values(&name).unwrap();
            let same = a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{name} must round-trip bit-exactly");
        }
        // A second save from the reloaded store is byte-identical.
        let path2 = dir.path().join("checkpoint2.json");
        other.save_checkpoint(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn strict_checkpoint_schema() {
        let mut store = ParamStore::new();
        store.register_zeros("a", vec![2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        store.save_checkpoint(&path).unwrap();

        let mut missing = ParamStore::new();
        missing.register_zeros("a", vec![2]).unwrap();
        missing.register_zeros("b", vec![1]).unwrap();
        assert!(matches!(missing.load_checkpoint(&path), Err(ParamError::Missing(_))));

        let extra = ParamStore::new();
        assert!(matches!(extra.load_checkpoint(&path), Err(ParamError::Unexpected(_))));

        let mut shaped = ParamStore::new();
        shaped.register_zeros("a", vec![3]).unwrap();
        assert!(matches!(
            shaped.load_checkpoint(&path),
            Err(ParamError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut store = ParamStore::new();
        store.register_zeros("a", vec![1]).unwrap();
        assert!(matches!(
            store.register_zeros("a", vec![1]),
            Err(ParamError::Duplicate(_))
        ));
    }
}
