//! Minimal CPU neural-network engine: named parameter sets, an activation
//! buffer type, a row-major GEMM wrapper and layers with explicit backward
//! passes.

mod backbone;
mod layers;
mod optim;

pub use backbone::{Architecture, Backbone, Tape};
pub use layers::{BnMode, Pass};
pub use optim::{cosine_lr, Sgd, SgdConfig};

use serde::{Deserialize, Serialize};

/// A dense NCHW activation buffer. Feature vectors use `h = w = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Act {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "activation buffer size");
        Self { n, c, h, w, data }
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self::new(n, c, h, w, vec![0.0; n * c * h * w])
    }

    pub fn features(n: usize, d: usize, data: Vec<f32>) -> Self {
        Self::new(n, d, 1, 1, data)
    }

    /// Elements per example.
    pub fn per_example(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn same_shape(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.per_example();
        &self.data[i * d..(i + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; len],
        }
    }
}

/// Ordered collection of named tensors. Gradients use the same order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    pub entries: Vec<NamedTensor>,
}

/// Per-tensor gradient buffers aligned with a [`ParamSet`].
pub type Grads = Vec<Vec<f32>>;

impl ParamSet {
    pub fn push(&mut self, tensor: NamedTensor) -> usize {
        self.entries.push(tensor);
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|t| t.data.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|t| t.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.entries.iter().find(|t| t.name == name)
    }

    pub fn data(&self, i: usize) -> &[f32] {
        &self.entries[i].data
    }

    pub fn zero_grads(&self) -> Grads {
        self.entries.iter().map(|t| vec![0.0; t.data.len()]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * delta`, tensor by tensor.
    pub fn add_scaled(&mut self, delta: &Grads, scale: f32) {
        for (t, d) in self.entries.iter_mut().zip(delta) {
            for (p, g) in t.data.iter_mut().zip(d) {
                *p += scale * g;
            }
        }
    }
}

pub fn grads_add(acc: &mut Grads, other: &Grads) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// Global L2 norm over every gradient tensor, accumulated in f64.
pub fn grads_norm(grads: &Grads) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Row-major `C = alpha * op(A) * op(B) + beta * C` with `op(A)` of shape
/// `m x k` and `op(B)` of shape `k x n`. `trans_a` means `A` is stored as
/// `k x m`; `trans_b` means `B` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand sizes");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
