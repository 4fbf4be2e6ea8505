//! Named parameter storage. Parameters live outside any tape as plain f32
//! buffers; each forward pass binds them to tape leaves on demand, so the
//! same store serves training tapes, inference tapes, and finite-difference
//! probes that mutate one scalar at a time.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// U(-scale, scale).
    Uniform(f32),
    /// U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub frozen: bool,
}

impl ParamEntry {
    /// FNV-1a over the exact bit patterns; equal iff bitwise-identical data.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for &x in &self.data {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Deterministically initialized, name-keyed parameter set. Iteration order
/// is the lexicographic name order of the underlying map, so checksums,
/// serialization, and optimizer sweeps are reproducible.
pub struct ParamStore {
    seed: u64,
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            entries: BTreeMap::new(),
        }
    }

    /// Creates a parameter. The random stream is derived from the store seed
    /// and the name alone, so registration order never changes values.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::invalid(
                "param_store",
                format!("parameter '{name}' registered twice"),
            ));
        }
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Uniform(scale) => {
                let mut rng = Rng::derive(self.seed, name);
                (0..numel).map(|_| rng.uniform(-scale, scale)).collect()
            }
            Init::Xavier { fan_in, fan_out } => {
                let a = math::sqrt64(6.0 / (fan_in + fan_out) as f64) as f32;
                let mut rng = Rng::derive(self.seed, name);
                (0..numel).map(|_| rng.uniform(-a, a)).collect()
            }
        };
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                shape: shape.to_vec(),
                data,
                frozen: false,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid("param_store", format!("unknown parameter '{name}'")))
    }

    pub fn data_mut(&mut self, name: &str) -> Result<&mut Vec<f32>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.data)
            .ok_or_else(|| Error::invalid("param_store", format!("unknown parameter '{name}'")))
    }

    /// Replaces a parameter's data, keeping shape and frozen flag.
    pub fn load(&mut self, name: &str, data: Vec<f32>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid("param_store", format!("unknown parameter '{name}'")))?;
        let numel: usize = e.shape.iter().product();
        if data.len() != numel {
            return Err(Error::invalid(
                "param_store",
                format!(
                    "'{name}' holds {numel} elements, load supplied {}",
                    data.len()
                ),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("param_store.load"));
        }
        e.data = data;
        Ok(())
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|e| e.frozen = frozen)
            .ok_or_else(|| Error::invalid("param_store", format!("unknown parameter '{name}'")))
    }

    /// Freezes or thaws every parameter whose name starts with `prefix`.
    /// Returns how many entries matched.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_params(&self, trainable_only: bool) -> usize {
        self.entries
            .values()
            .filter(|e| !trainable_only || !e.frozen)
            .map(|e| e.data.len())
            .sum()
    }

    /// Checksum over every parameter matching `prefix` (empty prefix: all),
    /// order-independent-safe because iteration is name-sorted.
    pub fn checksum_prefix(&self, prefix: &str) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for (name, e) in self.entries.iter() {
            if name.starts_with(prefix) {
                h ^= e.checksum();
                h = h.wrapping_mul(0x100000001b3);
                h ^= name.len() as u64;
            }
        }
        h
    }
}

/// One forward pass: binds store parameters to leaves of a single tape,
/// caching by name so a parameter reused across steps maps to one node and
/// its gradient accumulates.
pub struct Forward<'a> {
    tape: &'a Tape,
    store: &'a ParamStore,
    leaves: RefCell<BTreeMap<String, Tensor>>,
    training: bool,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore, training: bool) -> Self {
        Forward {
            tape,
            store,
            leaves: RefCell::new(BTreeMap::new()),
            training,
        }
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// The tape leaf for parameter `name`; frozen parameters become constant
    /// leaves so backward never touches them.
    pub fn p(&self, name: &str) -> Result<Tensor> {
        if let Some(t) = self.leaves.borrow().get(name) {
            return Ok(t.clone());
        }
        let entry = self.store.get(name)?;
        let t = self
            .tape
            .leaf(&entry.shape, entry.data.clone(), !entry.frozen)?;
        self.leaves.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Overrides the binding for `name` with a caller-supplied leaf. Probes
    /// use this to make one parameter the differentiated input while the
    /// store supplies the rest.
    pub fn bind(&self, name: &str, t: Tensor) {
        self.leaves.borrow_mut().insert(name.to_string(), t);
    }

    /// Gradients of every trainable bound parameter, by name. Call after
    /// `tape.backward`. Parameters bound but unreached by the loss get zeros.
    pub fn grads(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        let mut out = BTreeMap::new();
        for (name, leaf) in self.leaves.borrow().iter() {
            if !leaf.requires_grad() {
                continue;
            }
            let g = match self.tape.grad_opt(leaf)? {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; leaf.numel()],
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Names bound so far (sorted).
    pub fn bound_names(&self) -> Vec<String> {
        self.leaves.borrow().keys().cloned().collect()
    }
}
