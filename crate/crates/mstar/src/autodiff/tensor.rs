//! Dense row-major f32 tensors and the named parameter store.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A dense row-major tensor. The gradient buffer, when present, always has
/// the same length as `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape {shape:?} does not match buffer length {}",
            values.len()
        );
        Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::new(vec![], vec![v])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Rows/cols view: the last dimension is the column count, everything
    /// before it is flattened into rows. Scalars are 1x1.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product::<usize>().max(1)
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// One trainable parameter: a tensor plus its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered collection of named parameters. Iteration order is registration
/// order, which keeps optimizer updates and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    grads_populated: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let mut tensor = tensor.with_grad();
        tensor.grad = Some(vec![0.0; tensor.numel()]);
        self.params.push(Param { name, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].tensor.values
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.params[id.0].tensor.shape
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f32]) {
        let g = self.params[id.0]
            .tensor
            .grad
            .as_mut()
            .expect("parameters always carry a grad buffer");
        assert_eq!(g.len(), grad.len());
        for (a, b) in g.iter_mut().zip(grad.iter()) {
            *a += b;
        }
        self.grads_populated = true;
    }

    /// Scale every accumulated gradient, e.g. by 1/batch for a mean loss.
    pub fn scale_grads(&mut self, factor: f32) {
        for p in &mut self.params {
            for g in p.tensor.grad.as_mut().unwrap() {
                *g *= factor;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.tensor.grad.as_mut().unwrap() {
                *g = 0.0;
            }
        }
        self.grads_populated = false;
    }

    pub fn grads_populated(&self) -> bool {
        self.grads_populated
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

/// Gaussian init, deterministic in the provided stream.
pub fn randn_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f32) -> Tensor {
    let n: usize = shape.iter().product();
    // Box-Muller on uniform draws keeps us independent of distribution crates.
    let mut values = Vec::with_capacity(n);
    while values.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        values.push((r * theta.cos()) as f32 * std);
        if values.len() < n {
            values.push((r * theta.sin()) as f32 * std);
        }
    }
    Tensor::new(shape, values)
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    #[should_panic(expected = "does not match buffer length")]
    fn shape_mismatch_rejected() {
        Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn store_accumulates_and_clears() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::zeros(vec![2]));
        assert!(!ps.grads_populated());
        ps.accumulate_grad(id, &[1.0, 2.0]);
        ps.accumulate_grad(id, &[1.0, 2.0]);
        assert_eq!(ps.get(id).tensor.grad.as_deref(), Some(&[2.0, 4.0][..]));
        ps.zero_grads();
        assert!(!ps.grads_populated());
        assert_eq!(ps.get(id).tensor.grad.as_deref(), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn randn_deterministic_in_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(
            randn_tensor(&mut a, vec![4, 4], 0.02).values,
            randn_tensor(&mut b, vec![4, 4], 0.02).values
        );
    }
}
