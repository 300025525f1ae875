//! Dense data/kernel tensors and the direct convolution reference.
//!
//! Every tensor is stored depth-minor and row-major over the spatial
//! coordinates: element `(r, c, i)` of an `n×n×d` tensor lives at
//! `(r * n + c) * d + i`. Kernels use the same layout with side `k`, and a
//! [`KernelBank`] stores its `o` kernels back to back. With this layout the
//! depth fibre `D[r, c, :]` and any horizontal run `D[r, c..c+w, :]` are
//! contiguous, which is what the lowering code copies.
//!
//! Indices are 0-based throughout, including the channel index.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Problem shape of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerConfig {
    /// Input side.
    pub n: usize,
    /// Kernel side.
    pub k: usize,
    /// Input channels.
    pub d: usize,
    /// Output channels (number of kernels).
    pub o: usize,
    /// Batch size.
    pub b: usize,
}

impl LayerConfig {
    pub fn new(n: usize, k: usize, d: usize, o: usize, b: usize) -> Result<Self> {
        let layer = LayerConfig { n, k, d, o, b };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.n {
            return Err(Error::Config(format!(
                "kernel side k={} must satisfy 1 <= k <= n={}",
                self.k, self.n
            )));
        }
        if self.d == 0 || self.o == 0 || self.b == 0 {
            return Err(Error::Config(format!(
                "d, o and b must be >= 1 (got d={}, o={}, b={})",
                self.d, self.o, self.b
            )));
        }
        Ok(())
    }

    /// Output side, `n - k + 1`.
    pub fn m(&self) -> usize {
        self.n - self.k + 1
    }

    pub fn with_batch(self, b: usize) -> Self {
        LayerConfig { b, ..self }
    }

    /// Derives the layer shape from a batch and a kernel bank, checking
    /// that they can be convolved.
    pub fn of(batch: &DataBatch, bank: &KernelBank) -> Result<Self> {
        check_compatible(batch.n(), batch.depth(), bank)?;
        LayerConfig::new(batch.n(), bank.k(), bank.depth(), bank.count(), batch.len())
    }
}

fn check_compatible(n: usize, depth: usize, bank: &KernelBank) -> Result<()> {
    if bank.depth() != depth || bank.k() > n {
        return Err(Error::Shape(format!(
            "data {n}x{n}x{depth} is incompatible with kernels {k}x{k}x{kd}",
            k = bank.k(),
            kd = bank.depth()
        )));
    }
    Ok(())
}

/// Square order-3 tensor `D ∈ R^{n×n×d}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    n: usize,
    depth: usize,
    values: Vec<f32>,
}

impl Tensor3 {
    pub fn new(n: usize, depth: usize, values: Vec<f32>) -> Result<Self> {
        if n == 0 || depth == 0 {
            return Err(Error::Shape(format!("empty tensor {n}x{n}x{depth}")));
        }
        if values.len() != n * n * depth {
            return Err(Error::Shape(format!(
                "tensor {n}x{n}x{depth} needs {} values, got {}",
                n * n * depth,
                values.len()
            )));
        }
        Ok(Tensor3 { n, depth, values })
    }

    pub fn zeros(n: usize, depth: usize) -> Self {
        Tensor3 { n, depth, values: vec![0.0; n * n * depth] }
    }

    /// Entries drawn uniformly from `[-1, 1)`.
    pub fn random<R: Rng + ?Sized>(n: usize, depth: usize, rng: &mut R) -> Self {
        let values = (0..n * n * depth).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor3 { n, depth, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    #[inline]
    pub fn index(&self, r: usize, c: usize, i: usize) -> usize {
        debug_assert!(r < self.n && c < self.n && i < self.depth);
        (r * self.n + c) * self.depth + i
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, i: usize) -> f32 {
        self.values[self.index(r, c, i)]
    }

    pub fn set(&mut self, r: usize, c: usize, i: usize, v: f32) {
        let idx = self.index(r, c, i);
        self.values[idx] = v;
    }

    pub fn scaled(&self, alpha: f32) -> Self {
        Tensor3 {
            n: self.n,
            depth: self.depth,
            values: self.values.iter().map(|v| v * alpha).collect(),
        }
    }
}

/// The kernel set `{K_j}`: `o` kernels of shape `k×k×d`, stored kernel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    k: usize,
    depth: usize,
    count: usize,
    values: Vec<f32>,
}

/// Borrowed view of one kernel in a bank.
#[derive(Clone, Copy, Debug)]
pub struct KernelView<'a> {
    pub k: usize,
    pub depth: usize,
    pub values: &'a [f32],
}

impl KernelView<'_> {
    #[inline]
    pub fn get(&self, r: usize, c: usize, i: usize) -> f32 {
        self.values[(r * self.k + c) * self.depth + i]
    }
}

impl KernelBank {
    pub fn new(k: usize, depth: usize, count: usize, values: Vec<f32>) -> Result<Self> {
        if k == 0 || depth == 0 || count == 0 {
            return Err(Error::Shape(format!("empty kernel bank {count} x {k}x{k}x{depth}")));
        }
        if values.len() != k * k * depth * count {
            return Err(Error::Shape(format!(
                "kernel bank {count} x {k}x{k}x{depth} needs {} values, got {}",
                k * k * depth * count,
                values.len()
            )));
        }
        Ok(KernelBank { k, depth, count, values })
    }

    pub fn random<R: Rng + ?Sized>(k: usize, depth: usize, count: usize, rng: &mut R) -> Self {
        let values = (0..k * k * depth * count).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        KernelBank { k, depth, count, values }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Number of kernels (`o`).
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn kernel_len(&self) -> usize {
        self.k * self.k * self.depth
    }

    pub fn kernel(&self, j: usize) -> KernelView<'_> {
        let len = self.kernel_len();
        KernelView { k: self.k, depth: self.depth, values: &self.values[j * len..(j + 1) * len] }
    }

    /// Elementwise sum of two banks of the same shape.
    pub fn add(&self, other: &KernelBank) -> Result<KernelBank> {
        if (self.k, self.depth, self.count) != (other.k, other.depth, other.count) {
            return Err(Error::Shape("kernel banks differ in shape".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(KernelBank { values, ..*self })
    }
}

/// Mini-batch `{D_i}` of equally shaped tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct DataBatch {
    members: Vec<Tensor3>,
}

impl DataBatch {
    pub fn new(members: Vec<Tensor3>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (n, depth) = (first.n, first.depth);
        if let Some(bad) = members.iter().find(|t| t.n != n || t.depth != depth) {
            return Err(Error::Shape(format!(
                "batch mixes {n}x{n}x{depth} with {m}x{m}x{bd}",
                m = bad.n,
                bd = bad.depth
            )));
        }
        Ok(DataBatch { members })
    }

    pub fn random<R: Rng + ?Sized>(b: usize, n: usize, depth: usize, rng: &mut R) -> Self {
        DataBatch { members: (0..b).map(|_| Tensor3::random(n, depth, rng)).collect() }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn n(&self) -> usize {
        self.members[0].n
    }

    pub fn depth(&self) -> usize {
        self.members[0].depth
    }

    pub fn members(&self) -> &[Tensor3] {
        &self.members
    }
}

/// Output planes for a batch: `b × o` planes of `m×m`, image-major.
///
/// Plane `(i, j)` is image `i` convolved with kernel `j`; element `(r, c)`
/// of that plane is at `((i * o + j) * m + r) * m + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputBatch {
    b: usize,
    o: usize,
    m: usize,
    values: Vec<f32>,
}

impl OutputBatch {
    pub fn zeros(b: usize, o: usize, m: usize) -> Self {
        OutputBatch { b, o, m, values: vec![0.0; b * o * m * m] }
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn o(&self) -> usize {
        self.o
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn plane(&self, i: usize, j: usize) -> &[f32] {
        let len = self.m * self.m;
        let start = (i * self.o + j) * len;
        &self.values[start..start + len]
    }

    pub fn plane_mut(&mut self, i: usize, j: usize) -> &mut [f32] {
        let len = self.m * self.m;
        let start = (i * self.o + j) * len;
        &mut self.values[start..start + len]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, r: usize, c: usize) -> f32 {
        self.values[((i * self.o + j) * self.m + r) * self.m + c]
    }

    /// Concatenates batches along the image axis.
    pub fn concat(parts: Vec<OutputBatch>) -> Result<OutputBatch> {
        let first = parts.first().ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let (o, m) = (first.o, first.m);
        if parts.iter().any(|p| p.o != o || p.m != m) {
            return Err(Error::Shape("output batches differ in plane shape".into()));
        }
        let b = parts.iter().map(|p| p.b).sum();
        let mut values = Vec::with_capacity(b * o * m * m);
        for p in parts {
            values.extend_from_slice(&p.values);
        }
        Ok(OutputBatch { b, o, m, values })
    }

    /// Largest absolute difference divided by the largest absolute value of
    /// `reference` (norm-wise relative error). Zero when both are all-zero.
    pub fn max_relative_error(&self, reference: &OutputBatch) -> f64 {
        assert_eq!(
            (self.b, self.o, self.m),
            (reference.b, reference.o, reference.m),
            "comparing output batches of different shapes"
        );
        max_relative_error(&self.values, &reference.values)
    }
}

/// Norm-wise relative error `max|a - b| / max|b|` computed in `f64`.
pub fn max_relative_error(actual: &[f32], reference: &[f32]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&a, &r) in actual.iter().zip(reference) {
        diff = diff.max((a as f64 - r as f64).abs());
        scale = scale.max((r as f64).abs());
    }
    if scale == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / scale
    }
}

/// One output plane `R ∈ R^{m×m}`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputPlane {
    pub m: usize,
    pub values: Vec<f32>,
}

impl OutputPlane {
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.m + c]
    }
}

/// Direct evaluation of the convolution triple sum
/// `R[r,c] = Σ_i Σ_c' Σ_r' D[r+r', c+c', i] · K[r', c', i]`.
///
/// The sum is accumulated in `f64` in the loop order above and rounded
/// once, so the result is independent of any blocking choice.
pub fn direct_convolve(data: &Tensor3, kernel: KernelView<'_>) -> Result<OutputPlane> {
    if kernel.depth != data.depth || kernel.k > data.n {
        return Err(Error::Shape(format!(
            "data {n}x{n}x{d} is incompatible with kernel {k}x{k}x{kd}",
            n = data.n,
            d = data.depth,
            k = kernel.k,
            kd = kernel.depth
        )));
    }
    let k = kernel.k;
    let m = data.n - k + 1;
    let mut values = vec![0.0f32; m * m];
    for r in 0..m {
        for c in 0..m {
            let mut acc = 0.0f64;
            for i in 0..data.depth {
                for cc in 0..k {
                    for rr in 0..k {
                        acc += data.get(r + rr, c + cc, i) as f64 * kernel.get(rr, cc, i) as f64;
                    }
                }
            }
            values[r * m + c] = acc as f32;
        }
    }
    Ok(OutputPlane { m, values })
}

/// Convolves every image with every kernel; planes are stored image-major.
pub fn direct_convolve_batch(batch: &DataBatch, bank: &KernelBank) -> Result<OutputBatch> {
    let layer = LayerConfig::of(batch, bank)?;
    let m = layer.m();
    let mut out = OutputBatch::zeros(layer.b, layer.o, m);
    for (i, image) in batch.members().iter().enumerate() {
        for j in 0..layer.o {
            let plane = direct_convolve(image, bank.kernel(j))?;
            out.plane_mut(i, j).copy_from_slice(&plane.values);
        }
    }
    Ok(out)
}
