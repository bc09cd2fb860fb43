//! Named parameter storage shared by all encoders and heads.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Glorot-uniform over `(fan_in, fan_out)` = `(rows, cols)`.
    XavierUniform,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn init(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        decay: bool,
        rng: &mut Rng,
    ) -> ParamId {
        let value = match init {
            Init::Zeros => Tensor::zeros(rows, cols),
            Init::Ones => Tensor::full(rows, cols, T::one()),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                let data = (0..rows * cols).map(|_| T::of(dist.sample(rng))).collect();
                Tensor::from_vec(rows, cols, data).expect("sized")
            }
            Init::XavierUniform => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let data = (0..rows * cols)
                    .map(|_| T::of(rng.random_range(-bound..bound)))
                    .collect();
                Tensor::from_vec(rows, cols, data).expect("sized")
            }
        };
        self.add(name, value, decay)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    decay: e.decay,
                })
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }

    /// Checksum restricted to parameters whose name satisfies `keep`.
    pub fn checksum_where(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| keep(&e.name)) {
            h.update(e.name.as_bytes());
            h.update((e.value.rows() as u64).to_le_bytes());
            h.update((e.value.cols() as u64).to_le_bytes());
            for &v in e.value.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
