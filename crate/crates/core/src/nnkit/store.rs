use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

/// Handle to one parameter array inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Uniform in +-1/sqrt(fan_in), fan_in = rows.
    FanIn,
    /// Uniform in +-scale.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Named parameter arrays with deterministic initialisation.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new(), seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId, NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let n = rows * cols;
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
            Init::FanIn => {
                let s = 1.0 / (rows.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.gen_range(-s..s)).collect()
            }
            Init::Uniform(s) => (0..n).map(|_| self.rng.gen_range(-s..=s)).collect(),
        };
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(Tensor { rows, cols, data });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NnError> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    /// All ids whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|t| t.is_finite())
    }

    pub fn export(&self) -> Vec<NamedArray> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, t)| NamedArray { name: n.clone(), shape: [t.rows, t.cols], data: t.data.clone() })
            .collect()
    }

    /// Overwrite values from named arrays. Every stored parameter must be
    /// present with its exact shape, and no extra names are allowed.
    pub fn import(&mut self, arrays: &[NamedArray]) -> Result<(), NnError> {
        if arrays.len() != self.values.len() {
            return Err(NnError::Data(format!("expected {} arrays, found {}", self.values.len(), arrays.len())));
        }
        for a in arrays {
            let id = self.id(&a.name)?;
            let t = &mut self.values[id.0];
            if [t.rows, t.cols] != a.shape || a.data.len() != t.len() {
                return Err(NnError::Shape {
                    op: "import",
                    detail: format!("{}: stored {}x{}, file {:?}", a.name, t.rows, t.cols, a.shape),
                });
            }
            if a.data.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite(a.name.clone()));
            }
            t.data.copy_from_slice(&a.data);
        }
        Ok(())
    }

    /// Copy values of the listed parameters from another store with the same layout.
    pub fn copy_from(&mut self, other: &ParamStore, ids: &[ParamId]) {
        for &id in ids {
            self.values[id.0].data.copy_from_slice(&other.values[id.0].data);
        }
    }
}
