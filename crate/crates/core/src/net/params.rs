use rand::Rng;

use crate::scalar::Real;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered, named collection of parameter arrays.
///
/// Gradients and optimizer moments use stores of identical layout, built with
/// [`ParamStore::zeros_like`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
}

pub(crate) enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub(crate) fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect()
            }
        };
        self.entries.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![T::zero(); p.data.len()],
                })
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].data
    }

    pub fn entries(&self) -> &[Param<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param<T>] {
        &mut self.entries
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.iter_mut().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }

    /// Scalar at a flat index across all entries, in declaration order.
    pub fn flat(&self, mut index: usize) -> T {
        for p in &self.entries {
            if index < p.data.len() {
                return p.data[index];
            }
            index -= p.data.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn flat_mut(&mut self, mut index: usize) -> &mut T {
        for p in &mut self.entries {
            if index < p.data.len() {
                return &mut p.data[index];
            }
            index -= p.data.len();
        }
        panic!("flat parameter index out of range");
    }

    /// `self += other`, entry by entry.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn fill(&mut self, value: T) {
        for p in &mut self.entries {
            p.data.iter_mut().for_each(|x| *x = value);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Converts every entry to another scalar type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
        }
    }

    pub(crate) fn from_entries(entries: Vec<Param<T>>) -> Self {
        Self { entries }
    }
}
