//! Dense differentiable building blocks: affine layers, batch
//! normalization with train/eval modes, activations, the L2 distance,
//! parameter stores, and the SGD update rule.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Result, SymNetError};
use crate::tensor::{self, Mat, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully-connected layer `y = x W^T + b` with `w: out x in`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub w: Mat<T>,
    pub b: Mat<T>,
}

impl<T: Scalar> DenseLayer<T> {
    /// Uniform init in +-sqrt(6 / (fan_in + fan_out)), zero biases.
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut data = Vec::with_capacity(out_dim * in_dim);
        for _ in 0..out_dim * in_dim {
            data.push(T::lit(rng.gen_range(-bound..bound)));
        }
        DenseLayer {
            w: Mat::from_vec(out_dim, in_dim, data),
            b: Mat::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }
}

/// `y = x W^T + b` for a single row vector or a batch of rows.
pub fn affine_forward<T: Scalar>(x: &Mat<T>, layer: &DenseLayer<T>) -> Result<Mat<T>> {
    if x.cols() != layer.in_dim() {
        return Err(SymNetError::ShapeMismatch {
            op: "affine_forward".into(),
            detail: format!("input dim {} != layer in_dim {}", x.cols(), layer.in_dim()),
        });
    }
    Ok(tensor::affine(x, &layer.w, &layer.b))
}

/// Batch normalization state: learnable scale/shift plus running
/// statistics for eval mode. Train-mode normalization uses the population
/// (biased) variance of the batch, and the running variance stores the
/// same quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Mat<T>,
    pub beta: Mat<T>,
    pub running_mean: Mat<T>,
    pub running_var: Mat<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(dim: usize) -> Self {
        BatchNormState {
            gamma: Mat::filled(1, dim, T::one()),
            beta: Mat::zeros(1, dim),
            running_mean: Mat::zeros(1, dim),
            running_var: Mat::filled(1, dim, T::one()),
            eps: T::lit(1e-5),
            momentum: T::lit(0.1),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.cols()
    }

    /// Blends batch statistics into the running statistics:
    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&mut self, mean: &[T], var: &[T]) {
        let keep = T::one() - self.momentum;
        for (c, (&m, &v)) in mean.iter().zip(var).enumerate() {
            let rm = self.running_mean.at(0, c);
            let rv = self.running_var.at(0, c);
            self.running_mean.set(0, c, keep * rm + self.momentum * m);
            self.running_var.set(0, c, keep * rv + self.momentum * v);
        }
    }
}

/// Train mode normalizes by the batch mean and population variance and
/// folds the batch statistics into the running statistics; eval mode uses
/// only the running statistics.
pub fn batchnorm_forward<T: Scalar>(
    x: &Mat<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<Mat<T>> {
    if x.cols() != state.dim() {
        return Err(SymNetError::ShapeMismatch {
            op: "batchnorm_forward".into(),
            detail: format!("input dim {} != state dim {}", x.cols(), state.dim()),
        });
    }
    match mode {
        Mode::Train => {
            if x.rows() < 2 {
                return Err(SymNetError::DegenerateBatch { rows: x.rows() });
            }
            let (mean, var) = tensor::batch_mean_var(x);
            let (y, _, _) = tensor::bn_apply(x, &mean, &var, &state.gamma, &state.beta, state.eps);
            state.update_running(&mean, &var);
            Ok(y)
        }
        Mode::Eval => {
            let mean = state.running_mean.data().to_vec();
            let var = state.running_var.data().to_vec();
            let (y, _, _) = tensor::bn_apply(x, &mean, &var, &state.gamma, &state.beta, state.eps);
            Ok(y)
        }
    }
}

pub fn relu<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    tensor::relu(x)
}

pub fn sigmoid<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    tensor::sigmoid(x)
}

/// Max-shifted softmax of a single vector.
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    tensor::softmax_rows(&Mat::row_vec(x)).row(0).to_vec()
}

pub fn l2_distance<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(SymNetError::ShapeMismatch {
            op: "l2_distance".into(),
            detail: format!("lengths {} vs {}", u.len(), v.len()),
        });
    }
    Ok(tensor::l2_distance_slices(u, v))
}

/// Named map from parameter path to tensor; iteration order is the sorted
/// name order, which makes updates and serialization deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore<T>(pub BTreeMap<String, Mat<T>>);

/// Gradients keyed like a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientMap<T>(pub BTreeMap<String, Mat<T>>);

impl<T: Scalar> ParameterStore<T> {
    pub fn insert(&mut self, name: &str, m: Mat<T>) {
        let prev = self.0.insert(name.to_string(), m);
        assert!(prev.is_none(), "parameter {name} registered twice");
    }

    pub fn get(&self, name: &str) -> Option<&Mat<T>> {
        self.0.get(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.0.keys().cloned().collect()
    }
}

impl<T: Scalar> GradientMap<T> {
    pub fn from_named(map: BTreeMap<String, Mat<T>>) -> Self {
        GradientMap(map)
    }

    pub fn get(&self, name: &str) -> Option<&Mat<T>> {
        self.0.get(name)
    }

    /// Errors with the offending name if any entry is non-finite.
    pub fn check_finite(&self) -> Result<()> {
        for (name, g) in &self.0 {
            if !g.is_finite() {
                return Err(SymNetError::NonFiniteGradient { name: name.clone() });
            }
        }
        Ok(())
    }
}

/// Runs the reverse sweep from a scalar loss node and collects gradients
/// keyed like the store. Parameters the graph never touched get zero
/// gradients; a graph parameter missing from the store is an error, as is
/// any non-finite gradient.
pub fn backward<T: Scalar>(
    graph: &mut crate::graph::Graph<T>,
    loss: crate::graph::NodeId,
    store: &ParameterStore<T>,
) -> Result<GradientMap<T>> {
    graph.backward(loss);
    let mut named = graph.named_grads();
    for name in named.keys() {
        if store.get(name).is_none() {
            return Err(SymNetError::UnregisteredParameter { name: name.clone() });
        }
    }
    for (name, p) in &store.0 {
        named
            .entry(name.clone())
            .or_insert_with(|| Mat::zeros(p.rows(), p.cols()));
    }
    let grads = GradientMap(named);
    grads.check_finite()?;
    Ok(grads)
}

/// Plain SGD: `p <- p - lr * g` for every parameter. The key sets of the
/// store and the gradient map must match exactly.
pub fn sgd_step<T: Scalar>(
    store: &mut ParameterStore<T>,
    grads: &GradientMap<T>,
    lr: T,
) -> Result<()> {
    if store.0.len() != grads.0.len() || !store.0.keys().eq(grads.0.keys()) {
        let only_store: Vec<_> = store
            .0
            .keys()
            .filter(|k| !grads.0.contains_key(*k))
            .collect();
        let only_grads: Vec<_> = grads
            .0
            .keys()
            .filter(|k| !store.0.contains_key(*k))
            .collect();
        return Err(SymNetError::KeyMismatch {
            detail: format!("store-only {only_store:?}, grads-only {only_grads:?}"),
        });
    }
    for (name, p) in store.0.iter_mut() {
        let g = &grads.0[name];
        if (g.rows(), g.cols()) != (p.rows(), p.cols()) {
            return Err(SymNetError::ShapeMismatch {
                op: "sgd_step".into(),
                detail: format!("gradient shape mismatch for {name}"),
            });
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * *gv;
        }
    }
    Ok(())
}
