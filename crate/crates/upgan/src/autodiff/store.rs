//! Named parameter arrays with gradient slots and Adam state.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::AutodiffError;

/// Dense row-major array of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn vector(n: usize) -> Self {
        Tensor { dims: vec![n], data: vec![0.0; n] }
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Tensor { dims: vec![rows, cols], data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(dims: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(
            !dims.is_empty() && dims.len() <= 2,
            "tensor rank must be 1 or 2, got {}",
            dims.len()
        );
        assert_eq!(dims.iter().product::<usize>(), data.len(), "dims do not match data length");
        Tensor { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows (rank-1 tensors count as a single row).
    pub fn rows(&self) -> usize {
        if self.dims.len() == 2 {
            self.dims[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Row `i` of a rank-2 tensor (or the whole data for rank 1 and i == 0).
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, x: f64) {
        self.data.iter_mut().for_each(|v| *v = x);
    }

    pub fn zeros_like(&self) -> Self {
        Tensor { dims: self.dims.clone(), data: vec![0.0; self.data.len()] }
    }
}

/// One named parameter: value, gradient slot, and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
    steps: u64,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let grad = value.zeros_like();
        let m = value.zeros_like();
        let v = value.zeros_like();
        Param { value, grad, m, v, steps: 0 }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Named dense parameter arrays. Iteration order is always the sorted name
/// order, which makes every serialization and update pass deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name).map(|p| p.value)
    }

    /// Panics if the parameter does not exist; missing names are a
    /// programming error, not a runtime condition.
    pub fn get(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.get(name).value
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self.get(name).grad
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    pub fn zero_grads(&mut self, prefix: &str) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.grad.fill(0.0);
            }
        }
    }

    /// Sum of squared values over every parameter whose name starts with
    /// `prefix`.
    pub fn l2_norm_sq(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .flat_map(|(_, p)| p.value.data().iter())
            .map(|x| x * x)
            .sum()
    }

    /// One Adam update with bias correction over every parameter whose name
    /// starts with `prefix`. Gradients are zeroed after a successful step.
    /// A non-finite gradient aborts the step before any value is touched.
    pub fn adam_step(&mut self, prefix: &str, cfg: &AdamConfig) -> Result<(), AutodiffError> {
        for (name, p) in self.params.iter() {
            if !name.starts_with(prefix) {
                continue;
            }
            if let Some(pos) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(AutodiffError::NonFiniteGradient { name: name.clone(), index: pos });
            }
        }
        for (name, p) in self.params.iter_mut() {
            if !name.starts_with(prefix) {
                continue;
            }
            p.steps += 1;
            let t = p.steps as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for i in 0..p.value.len() {
                let g = p.grad.data()[i];
                let m = cfg.beta1 * p.m.data()[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.v.data()[i] + (1.0 - cfg.beta2) * g * g;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                p.value.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }

    /// Applies [`project_min_norm`] to every row of the named parameter.
    pub fn project_rows_min_norm(&mut self, name: &str, min_norm: f64) {
        let p = self.get_mut(name);
        for i in 0..p.value.rows() {
            project_min_norm(p.value.row_mut(i), min_norm);
        }
    }

    /// Minimum row L2 norm of the named parameter.
    pub fn min_row_norm(&self, name: &str) -> f64 {
        let t = self.value(name);
        (0..t.rows())
            .map(|i| t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Seed for the replacement direction of exactly-zero vectors. Fixed so that
/// projection is a pure function of its input.
const ZERO_DIRECTION_SEED: u64 = 0x7570_6761_6e5f_7631;

/// Scales `v` up to L2 norm `min_norm` when it is shorter; longer vectors are
/// left untouched. A zero vector is replaced by a fixed seeded direction so
/// the result is still deterministic.
pub fn project_min_norm(v: &mut [f64], min_norm: f64) {
    assert!(min_norm > 0.0, "min_norm must be positive");
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // The slack keeps projection idempotent: rescaling can land an ulp short
    // of the target norm.
    if norm >= min_norm * (1.0 - 1e-12) {
        return;
    }
    if norm == 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(ZERO_DIRECTION_SEED);
        for x in v.iter_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x *= min_norm / n;
        }
        return;
    }
    let scale = min_norm / norm;
    for x in v.iter_mut() {
        *x *= scale;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::from_vec(vec![2], vec![1.0, -2.0]));
        store.get_mut("w").grad.data_mut().copy_from_slice(&[0.3, -0.7]);
        let cfg = AdamConfig::with_lr(0.01);
        store.adam_step("w", &cfg).unwrap();
        let v = store.value("w").data();
        // First-step Adam moves by about -lr * sign(g).
        assert!((v[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((v[1] - (-2.0 + 0.01)).abs() < 1e-6);
        // Gradients zeroed afterwards.
        assert!(store.grad("w").data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adam_zero_grad_leaves_values_unchanged() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::from_vec(vec![3], vec![0.5, -0.25, 4.0]));
        let before = store.value("w").data().to_vec();
        store.adam_step("w", &AdamConfig::default()).unwrap();
        assert_eq!(store.value("w").data(), &before[..]);
    }

    #[test]
    fn adam_constant_grad_moves_monotonically() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::from_vec(vec![1], vec![0.0]));
        let cfg = AdamConfig::with_lr(0.1);
        let mut prev = 0.0;
        for _ in 0..2 {
            store.get_mut("w").grad.data_mut()[0] = 2.5;
            store.adam_step("w", &cfg).unwrap();
            let now = store.value("w").data()[0];
            assert!(now < prev, "positive gradient must keep decreasing the value");
            prev = now;
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::from_vec(vec![2], vec![1.0, 1.0]));
        store.get_mut("w").grad.data_mut()[1] = f64::NAN;
        let before = store.value("w").data().to_vec();
        let err = store.adam_step("w", &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFiniteGradient { .. }));
        assert_eq!(store.value("w").data(), &before[..]);
    }

    #[test]
    fn adam_step_only_touches_prefix() {
        let mut store = ParameterStore::new();
        store.insert("a.w", Tensor::from_vec(vec![1], vec![1.0]));
        store.insert("b.w", Tensor::from_vec(vec![1], vec![1.0]));
        store.get_mut("a.w").grad.data_mut()[0] = 1.0;
        store.get_mut("b.w").grad.data_mut()[0] = 1.0;
        store.adam_step("a.", &AdamConfig::with_lr(0.5)).unwrap();
        assert!(store.value("a.w").data()[0] < 1.0);
        assert_eq!(store.value("b.w").data()[0], 1.0);
        assert_eq!(store.grad("b.w").data()[0], 1.0);
    }

    #[test]
    fn project_scales_short_vectors() {
        let mut v = [0.3, 0.4];
        project_min_norm(&mut v, 1.0);
        assert!((v[0] - 0.6).abs() < 1e-12);
        assert!((v[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn project_keeps_long_vectors() {
        let mut v = [3.0, 4.0];
        project_min_norm(&mut v, 1.0);
        assert_eq!(v, [3.0, 4.0]);
    }

    #[test]
    fn project_zero_vector_is_deterministic() {
        let mut a = [0.0; 4];
        let mut b = [0.0; 4];
        project_min_norm(&mut a, 1.0);
        project_min_norm(&mut b, 1.0);
        assert_eq!(a, b);
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn project_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut v: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
            project_min_norm(&mut v, 1.0);
            let once = v.clone();
            project_min_norm(&mut v, 1.0);
            assert_eq!(v, once);
        }
    }
}
