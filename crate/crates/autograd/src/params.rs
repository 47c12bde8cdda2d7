use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Named parameter arrays, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Scalar> {
    arrays: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { arrays: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.arrays.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<T>)> {
        self.arrays.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    /// Element-wise conversion, e.g. to an `f64` shadow for gradient checks.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| <U as Scalar>::from_f64(x.as_f64()))))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian values of every array
    /// whose name satisfies `filter`.
    pub fn digest(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, a) in self.arrays.iter().filter(|(n, _)| filter(n)) {
            h.update(name.as_bytes());
            for d in a.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in a.iter() {
                h.update(v.to_le_bytes_vec());
            }
        }
        hex_lower(&h.finalize())
    }
}

fn hex_lower(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Lazily places parameters of a [`ParamStore`] on a [`Tape`].
///
/// Each parameter is recorded at most once per tape; those matching the
/// trainability predicate become gradient-carrying leaves, the rest constants.
pub struct Binding<'t, 's, T: Scalar> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    trainable: Box<dyn Fn(&str) -> bool + 's>,
    cache: RefCell<HashMap<String, Var<'t, T>>>,
}

impl<'t, 's, T: Scalar> Binding<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, trainable: impl Fn(&str) -> bool + 's) -> Self {
        Self { tape, store, trainable: Box::new(trainable), cache: RefCell::new(HashMap::new()) }
    }

    /// Binding in which nothing is trainable.
    pub fn frozen(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self::new(tape, store, |_| false)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// # Panics
    /// If `name` is not in the store; stores are validated against the model
    /// layout when loaded.
    pub fn get(&self, name: &str) -> Var<'t, T> {
        if let Some(v) = self.cache.borrow().get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
            .clone();
        let v = self.tape.param(name, value, (self.trainable)(name));
        self.cache.borrow_mut().insert(name.to_string(), v);
        v
    }
}
