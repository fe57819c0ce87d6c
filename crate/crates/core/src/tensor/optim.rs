use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::{Scalar, Tensor, TensorError};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters plus Adam moment buffers. Only the learner mutates a
/// store; workers read immutable [`ParamSnapshot`]s.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
    step: u64,
}

/// Immutable, cheaply clonable copy of parameter values.
pub type ParamSnapshot<T> = Arc<Vec<Tensor<T>>>;

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId, TensorError> {
        if self.names.iter().any(|n| n == name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        self.first_moment.push(vec![T::zero(); value.len()]);
        self.second_moment.push(vec![T::zero(); value.len()]);
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn moments(&self, id: ParamId) -> (&[T], &[T]) {
        (&self.first_moment[id.0], &self.second_moment[id.0])
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn snapshot(&self) -> ParamSnapshot<T> {
        Arc::new(self.values.clone())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Overwrites values from another store with identical names and shapes.
    pub fn load_values(&mut self, values: Vec<(String, Tensor<T>)>) -> Result<(), TensorError> {
        if values.len() != self.values.len() {
            return Err(TensorError::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.values.len(),
                values.len()
            )));
        }
        for (i, (name, t)) in values.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.values[i].shape() {
                return Err(TensorError::Checkpoint(format!(
                    "parameter {i}: expected `{}` {:?}, found `{name}` {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    t.shape()
                )));
            }
            self.values[i] = t;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Linear decay from `initial` to zero over `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub total: u64,
    pub current: u64,
}

impl LrSchedule {
    pub fn linear(initial: f64, total: u64) -> Self {
        Self {
            initial,
            total,
            current: 0,
        }
    }

    /// A schedule that never decays.
    pub fn constant(rate: f64) -> Self {
        Self {
            initial: rate,
            total: 0,
            current: 0,
        }
    }

    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            return self.initial;
        }
        let frac = 1.0 - self.current as f64 / self.total as f64;
        self.initial * frac.max(0.0)
    }

    pub fn advance(&mut self) {
        self.current = self.current.saturating_add(1);
    }
}

/// One Adam update of every parameter in `store` at the schedule's rate.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    schedule: &LrSchedule,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    for (i, name) in store.names.iter().enumerate() {
        if grads.params.get(i).and_then(|g| g.as_ref()).is_none() {
            return Err(TensorError::MissingGradient(name.clone()));
        }
    }
    store.step += 1;
    let t = store.step as f64;
    let lr = schedule.rate();
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let step_size = T::from_f64(lr / bc1);
    let bc2_sqrt = T::from_f64(bc2.sqrt());
    let eps = T::from_f64(cfg.eps);
    for i in 0..store.values.len() {
        let g = grads.params[i].as_ref().expect("checked above").data();
        let m = &mut store.first_moment[i];
        let v = &mut store.second_moment[i];
        let p = store.values[i].data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            p[j] -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

/// L2 norm of all parameter gradients taken together.
pub fn global_norm<T: Scalar>(grads: &Gradients<T>) -> f64 {
    grads
        .params_iter()
        .flat_map(|t| t.data().iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `threshold`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut Gradients<T>, threshold: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > threshold {
        let scale = T::from_f64(threshold / norm);
        for t in grads.params_iter_mut() {
            for x in t.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}
