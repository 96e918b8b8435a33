use rand::Rng;

use crate::error::{Error, Result};

/// One named tensor: row-major values plus a gradient of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    /// Buffers such as batch-norm running statistics are stored alongside the
    /// weights but never touched by the optimizer or the L2 penalty.
    pub trainable: bool,
}

impl Param {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Index of an entry in a [`ParamStore`]. Ids are assigned in name order and
/// are only valid once all entries have been inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::dim(format!("parameter {name}"), expected, values.len()));
        }
        match self.names.binary_search(&name) {
            Ok(_) => Err(Error::Config(format!("duplicate parameter name {name}"))),
            Err(pos) => {
                let grad = vec![0.0; values.len()];
                self.names.insert(pos, name);
                self.params.insert(
                    pos,
                    Param {
                        shape: shape.to_vec(),
                        values,
                        grad,
                        trainable: true,
                    },
                );
                Ok(())
            }
        }
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        let n = shape.iter().product();
        self.insert(name, shape, vec![0.0; n])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok().map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].values
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Entries in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.names.iter().map(String::as_str).zip(self.params.iter())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// A zeroed gradient buffer laid out like this store.
    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            bufs: self.params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn set_grads(&mut self, grads: &Gradients) -> Result<()> {
        if grads.bufs.len() != self.params.len() {
            return Err(Error::dim("gradient buffer count", self.params.len(), grads.bufs.len()));
        }
        for (p, g) in self.params.iter_mut().zip(&grads.bufs) {
            if g.len() != p.len() {
                return Err(Error::dim("gradient buffer length", p.len(), g.len()));
            }
            p.grad.copy_from_slice(g);
        }
        Ok(())
    }

    /// Σ‖W‖² over trainable matrices; biases and buffers are excluded.
    pub fn l2_penalty(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable && p.is_matrix())
            .map(|p| p.values.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Adds the gradient of `lambda · l2_penalty()` into `grads`.
    pub fn add_l2_grad(&self, lambda: f64, grads: &mut Gradients) {
        if lambda == 0.0 {
            return;
        }
        for (p, g) in self.params.iter().zip(grads.bufs.iter_mut()) {
            if p.trainable && p.is_matrix() {
                for (gi, vi) in g.iter_mut().zip(&p.values) {
                    *gi += 2.0 * lambda * vi;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.values.iter().all(|v| v.is_finite()))
    }

    /// Overwrites values of entries present in `other`, checking shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, src) in other.iter() {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Config(format!("checkpoint has unknown parameter {name}")))?;
            let dst = self.get_mut(id);
            if dst.shape != src.shape {
                return Err(Error::Config(format!(
                    "parameter {name}: checkpoint shape {:?} does not match model shape {:?}",
                    src.shape, dst.shape
                )));
            }
            dst.values.copy_from_slice(&src.values);
        }
        for (name, _) in self.iter() {
            if other.id(name).is_none() {
                return Err(Error::Config(format!("checkpoint is missing parameter {name}")));
            }
        }
        Ok(())
    }
}

/// Glorot/Xavier uniform half-width sqrt(6 / (fan_in + fan_out)).
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl ParamStore {
    /// Inserts a `rows × cols` matrix drawn uniformly from ±glorot_limit.
    pub fn insert_glorot<R: Rng + ?Sized>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> Result<()> {
        let s = glorot_limit(cols, rows);
        let values = (0..rows * cols).map(|_| rng.random_range(-s..=s)).collect();
        self.insert(name, &[rows, cols], values)
    }
}

/// Gradient buffers indexed by [`ParamId`], one per store entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    bufs: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.bufs[id.0]
    }

    /// Several distinct buffers mutably at once. Panics on repeated ids.
    pub fn many_mut<const N: usize>(&mut self, ids: [ParamId; N]) -> [&mut [f64]; N] {
        self.bufs
            .get_disjoint_mut(ids.map(|id| id.0))
            .expect("distinct parameter ids")
            .map(|v| v.as_mut_slice())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.bufs.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

/// Scalar training objective split into its data and penalty parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub l2_penalty: f64,
    pub lambda_l2: f64,
}

impl LossValue {
    pub fn total(&self) -> f64 {
        self.loss + self.lambda_l2 * self.l2_penalty
    }
}
