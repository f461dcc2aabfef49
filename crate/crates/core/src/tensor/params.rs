//! Named parameter storage and the per-forward-pass session that binds
//! parameters onto a tape.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::dense::Tensor;
use super::tape::{Gradients, Mode, Tape, Var};
use super::Rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Learnable tensors plus non-learnable buffers (running statistics), each
/// with a unique name. Insertion order is stable and defines iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<(String, Tensor)>,
    buffers: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|(n, _)| *n != name), "duplicate param {name}");
        self.params.push((name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffers.push((name.into(), value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].1
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].1
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.params[id.0].0
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffers.iter().position(|(n, _)| n == name).map(BufferId)
    }

    /// Copies every param and buffer of `other` into the same-named slot here.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in &other.params {
            let id = self
                .find_param(name)
                .ok_or_else(|| Error::Data(format!("unknown parameter {name}")))?;
            replace_same_shape(name, self.param_mut(id), t)?;
        }
        for (name, t) in &other.buffers {
            let id = self
                .find_buffer(name)
                .ok_or_else(|| Error::Data(format!("unknown buffer {name}")))?;
            replace_same_shape(name, self.buffer_mut(id), t)?;
        }
        Ok(())
    }

    pub fn apply_updates(&mut self, updates: BufferUpdates) {
        for (id, data) in updates.0 {
            self.buffer_mut(id).data_mut().copy_from_slice(&data);
        }
    }
}

fn replace_same_shape(name: &str, dst: &mut Tensor, src: &Tensor) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(Error::Data(format!(
            "{name}: expected shape {:?}, found {:?}",
            dst.shape(),
            src.shape()
        )));
    }
    *dst = src.clone();
    Ok(())
}

/// Buffer writes queued during a forward pass (running statistics).
#[derive(Debug, Default)]
pub struct BufferUpdates(Vec<(BufferId, Vec<f64>)>);

impl BufferUpdates {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One forward pass: a fresh tape, read-only parameters bound lazily as
/// tape leaves, the caller's RNG, and queued buffer updates.
pub struct Session<'a> {
    pub tape: Tape,
    pub rng: &'a mut Rng,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    updates: BufferUpdates,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, rng: &'a mut Rng) -> Self {
        Self {
            tape: Tape::new(mode),
            rng,
            store,
            bound: vec![None; store.num_params()],
            updates: BufferUpdates::default(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.tape.mode()
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape variable for a parameter, recording it on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.param(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        self.store.buffer(id)
    }

    pub fn queue_buffer(&mut self, id: BufferId, data: Vec<f64>) {
        self.updates.0.push((id, data));
    }

    /// Gradient for every parameter in store order; unused parameters get `None`.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }

    pub fn into_updates(self) -> BufferUpdates {
        self.updates
    }
}

/// Learnable affine parameters and running statistics of one batch-norm layer.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormState {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_param(format!("{prefix}.gamma"), Tensor::ones(&[channels])),
            beta: store.add_param(format!("{prefix}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::ones(&[channels])),
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let rm = s.buffer(self.running_mean).data().to_vec();
        let rv = s.buffer(self.running_var).data().to_vec();
        let (y, stats) = s.tape.batchnorm2d(x, gamma, beta, &rm, &rv, self.eps)?;
        if let Some(stats) = stats {
            let m = self.momentum;
            let mean = rm.iter().zip(&stats.mean).map(|(r, b)| (1.0 - m) * r + m * b).collect();
            let var = rv.iter().zip(&stats.var).map(|(r, b)| (1.0 - m) * r + m * b).collect();
            s.queue_buffer(self.running_mean, mean);
            s.queue_buffer(self.running_var, var);
        }
        Ok(y)
    }
}

/// He-uniform initialisation: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Square matrix with orthonormal columns from modified Gram-Schmidt (the Q
/// factor of a QR decomposition) of a standard-normal matrix.
pub fn orthogonal(n: usize, rng: &mut Rng) -> Tensor {
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for j in 0..n {
        for k in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let dot: f64 = done[k].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
            for (v, q) in rest[0].iter_mut().zip(&done[k]) {
                *v -= dot * q;
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::from_fn(&[n, n], |i| cols[i % n][i / n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    #[test]
    fn orthogonal_columns() {
        let mut rng = seeded_rng(4);
        let q = orthogonal(5, &mut rng);
        for a in 0..5 {
            for b in 0..5 {
                let dot: f64 = (0..5).map(|r| q.at(&[r, a]) * q.at(&[r, b])).sum();
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn running_stats_are_queued_in_training_only() {
        let mut store = ParamStore::new();
        let bn = BatchNormState::new(&mut store, "bn", 2);
        let mut rng = seeded_rng(0);
        let x = Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64);
        let mut s = Session::new(&store, Mode::Train, &mut rng);
        let xv = s.input(x.clone());
        bn.forward(&mut s, xv).unwrap();
        let updates = s.into_updates();
        assert!(!updates.is_empty());
        store.apply_updates(updates);
        assert!(store.buffer(bn.running_mean).data()[0] > 0.0);

        let mut s = Session::new(&store, Mode::Eval, &mut rng);
        let xv = s.input(x);
        bn.forward(&mut s, xv).unwrap();
        assert!(s.into_updates().is_empty());
    }
}
