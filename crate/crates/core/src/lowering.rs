//! Lower → multiply → lift.
//!
//! The three strategies group the convolution sum differently:
//!
//! | strategy | `D̂` (per image)  | `K̂`           | lifting per output        |
//! |----------|------------------|---------------|---------------------------|
//! | Type1    | `m² × k²d`       | `k²d × o`     | reshape                   |
//! | Type2    | `n² × kd`        | `kd × ko`     | sum of `k` entries        |
//! | Type3    | `n² × d`         | `d × k²o`     | sum of `k²` entries       |
//!
//! Rows of `D̂` are indexed column-major over pixels (`c * m + r` for Type1,
//! `c * n + r` for Types 2 and 3). Images are stacked as contiguous row
//! blocks, so a row range of `D̂` is the lowering of a sub-batch. Kernels are
//! stacked as column blocks of `K̂` in kernel order.
//!
//! Each row of `D̂` and each column of `K̂` is a flattening of a tensor slice
//! in the tensor layout (row, column, channel; channel fastest), so the
//! dot product of a row with a column is a partial sum of the convolution.
//!
//! For Type2, rows whose horizontal window `c..c+k` would run past the
//! right edge (`c >= m`) are never read by lifting and are zero-filled.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::{multiply, GemmConfig, Mat};
use crate::tensor::{DataBatch, KernelBank, LayerConfig, OutputBatch, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LoweringStrategy {
    /// Expensive lowering: every `k×k×d` patch becomes a row, lifting is a
    /// reshape.
    Type1,
    /// Balanced: horizontal `k`-wide strips become rows, lifting sums `k`
    /// partial results.
    Type2,
    /// Expensive lifting: each depth fibre is a row, lifting sums `k²`
    /// partial results.
    Type3,
}

impl LoweringStrategy {
    pub const ALL: [LoweringStrategy; 3] =
        [LoweringStrategy::Type1, LoweringStrategy::Type2, LoweringStrategy::Type3];

    pub fn number(self) -> u8 {
        match self {
            LoweringStrategy::Type1 => 1,
            LoweringStrategy::Type2 => 2,
            LoweringStrategy::Type3 => 3,
        }
    }

    /// Shape of `D̂` for a layer (whole batch).
    pub fn dhat_shape(self, layer: &LayerConfig) -> (usize, usize) {
        let LayerConfig { n, k, d, b, .. } = *layer;
        let m = layer.m();
        match self {
            LoweringStrategy::Type1 => (b * m * m, k * k * d),
            LoweringStrategy::Type2 => (b * n * n, k * d),
            LoweringStrategy::Type3 => (b * n * n, d),
        }
    }

    pub fn khat_shape(self, layer: &LayerConfig) -> (usize, usize) {
        let LayerConfig { k, d, o, .. } = *layer;
        match self {
            LoweringStrategy::Type1 => (k * k * d, o),
            LoweringStrategy::Type2 => (k * d, k * o),
            LoweringStrategy::Type3 => (d, k * k * o),
        }
    }

    /// Shape of the product `R̂ = D̂ K̂`.
    pub fn rhat_shape(self, layer: &LayerConfig) -> (usize, usize) {
        (self.dhat_shape(layer).0, self.khat_shape(layer).1)
    }

    /// Additions performed by lifting for each output element.
    pub fn lift_adds_per_output(self, k: usize) -> usize {
        match self {
            LoweringStrategy::Type1 => 0,
            LoweringStrategy::Type2 => k - 1,
            LoweringStrategy::Type3 => k * k - 1,
        }
    }
}

impl fmt::Display for LoweringStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "type{}", self.number())
    }
}

impl FromStr for LoweringStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "type1" => Ok(LoweringStrategy::Type1),
            "2" | "type2" => Ok(LoweringStrategy::Type2),
            "3" | "type3" => Ok(LoweringStrategy::Type3),
            other => Err(Error::Config(format!("unknown lowering strategy '{other}'"))),
        }
    }
}

/// `(D̂, K̂)` for a batch, tagged with the strategy and problem shape.
#[derive(Clone, Debug)]
pub struct LoweredMatrices {
    pub strategy: LoweringStrategy,
    pub dhat: Mat,
    pub khat: Mat,
    pub layer: LayerConfig,
    /// Elements stored into `D̂` by the lowering loops, zero fill included.
    pub elements_written: u64,
}

/// Lowers a batch and a kernel bank.
pub fn lower(
    batch: &DataBatch,
    bank: &KernelBank,
    strategy: LoweringStrategy,
) -> Result<LoweredMatrices> {
    let layer = LayerConfig::of(batch, bank)?;
    let (dhat, elements_written) = lower_data(batch.members(), bank.k(), strategy)?;
    let khat = lower_kernels(bank, strategy);
    Ok(LoweredMatrices { strategy, dhat, khat, layer, elements_written })
}

/// Builds `D̂` for a run of images; also returns the number of elements
/// written.
pub fn lower_data(images: &[Tensor3], k: usize, strategy: LoweringStrategy) -> Result<(Mat, u64)> {
    let first = images.first().ok_or_else(|| Error::Shape("cannot lower an empty batch".into()))?;
    let (n, d) = (first.n(), first.depth());
    if k == 0 || k > n {
        return Err(Error::Shape(format!("kernel side {k} does not fit input side {n}")));
    }
    if images.iter().any(|t| t.n() != n || t.depth() != d) {
        return Err(Error::Shape("images in one lowering must share a shape".into()));
    }
    let m = n - k + 1;
    let layer = LayerConfig { n, k, d, o: 1, b: images.len() };
    let (rows, cols) = strategy.dhat_shape(&layer);
    let mut dhat = Mat::zeros(rows, cols);
    let out = dhat.values_mut();
    let mut written = 0u64;

    match strategy {
        LoweringStrategy::Type1 => {
            let strip = k * d;
            for (img, t) in images.iter().enumerate() {
                let src = t.values();
                for c in 0..m {
                    for r in 0..m {
                        let row = (img * m * m + c * m + r) * cols;
                        for dr in 0..k {
                            let from = t.index(r + dr, c, 0);
                            out[row + dr * strip..row + (dr + 1) * strip]
                                .copy_from_slice(&src[from..from + strip]);
                            written += strip as u64;
                        }
                    }
                }
            }
        }
        LoweringStrategy::Type2 => {
            for (img, t) in images.iter().enumerate() {
                let src = t.values();
                for c in 0..n {
                    for r in 0..n {
                        let row = (img * n * n + c * n + r) * cols;
                        let dst = &mut out[row..row + cols];
                        if c + k <= n {
                            let from = t.index(r, c, 0);
                            dst.copy_from_slice(&src[from..from + cols]);
                        } else {
                            dst.fill(0.0);
                        }
                        written += cols as u64;
                    }
                }
            }
        }
        LoweringStrategy::Type3 => {
            for (img, t) in images.iter().enumerate() {
                let src = t.values();
                for c in 0..n {
                    for r in 0..n {
                        let row = (img * n * n + c * n + r) * d;
                        let from = t.index(r, c, 0);
                        out[row..row + d].copy_from_slice(&src[from..from + d]);
                        written += d as u64;
                    }
                }
            }
        }
    }
    Ok((dhat, written))
}

/// Builds `K̂`: one column block per kernel, in kernel order.
pub fn lower_kernels(bank: &KernelBank, strategy: LoweringStrategy) -> Mat {
    let (k, d, o) = (bank.k(), bank.depth(), bank.count());
    match strategy {
        // column j = vec(K_j)
        LoweringStrategy::Type1 => Mat::from_fn(k * k * d, o, |t, j| bank.kernel(j).values[t]),
        // column j*k + i = vec(K_j[i, :, :])
        LoweringStrategy::Type2 => Mat::from_fn(k * d, k * o, |t, col| {
            let (j, i) = (col / k, col % k);
            bank.kernel(j).values[i * k * d + t]
        }),
        // column j*k² + i*k + jj = vec(K_j[i, jj, :])
        LoweringStrategy::Type3 => Mat::from_fn(d, k * k * o, |ch, col| {
            let (j, ij) = (col / (k * k), col % (k * k));
            bank.kernel(j).values[ij * d + ch]
        }),
    }
}

/// Maps `R̂` back to output planes.
pub fn lift(rhat: &Mat, strategy: LoweringStrategy, layer: &LayerConfig) -> Result<OutputBatch> {
    lift_counted(rhat, strategy, layer).map(|(out, _)| out)
}

/// [`lift`], also returning the number of additions performed.
pub fn lift_counted(
    rhat: &Mat,
    strategy: LoweringStrategy,
    layer: &LayerConfig,
) -> Result<(OutputBatch, u64)> {
    layer.validate()?;
    let expected = strategy.rhat_shape(layer);
    if rhat.shape() != expected {
        return Err(Error::Shape(format!(
            "{strategy} lifting of {layer:?} expects R̂ {}x{}, got {}x{}",
            expected.0,
            expected.1,
            rhat.rows(),
            rhat.cols()
        )));
    }
    let LayerConfig { n, k, o, b, .. } = *layer;
    let m = layer.m();
    let mut out = OutputBatch::zeros(b, o, m);
    let mut adds = 0u64;
    // One image's outputs, pixel-major: `pixels[(c·m + r)·o + j]`.
    let mut pixels = vec![0.0f32; m * m * o];

    for img in 0..b {
        match strategy {
            LoweringStrategy::Type1 => {
                let rows = img * m * m..(img + 1) * m * m;
                pixels.copy_from_slice(&rhat.values()[rows.start * o..rows.end * o]);
            }
            // Each R̂ row is read once, in order; the row holding an output's
            // (0, 0) offset comes first, so it initialises the sum.
            LoweringStrategy::Type2 => {
                for q in 0..n * n {
                    let (c, rq) = (q / n, q % n);
                    if c >= m {
                        break;
                    }
                    let row = rhat.row(img * n * n + q);
                    for i in 0..k.min(rq + 1) {
                        let r = rq - i;
                        if r >= m {
                            continue;
                        }
                        let dst = &mut pixels[(c * m + r) * o..][..o];
                        let src = row.chunks_exact(k).map(|kernel| kernel[i]);
                        if i == 0 {
                            dst.iter_mut().zip(src).for_each(|(v, s)| *v = s);
                        } else {
                            dst.iter_mut().zip(src).for_each(|(v, s)| *v += s);
                            adds += o as u64;
                        }
                    }
                }
            }
            LoweringStrategy::Type3 => {
                let kk = k * k;
                for q in 0..n * n {
                    let (cq, rq) = (q / n, q % n);
                    let row = rhat.row(img * n * n + q);
                    for jj in 0..k.min(cq + 1) {
                        let c = cq - jj;
                        if c >= m {
                            continue;
                        }
                        for i in 0..k.min(rq + 1) {
                            let r = rq - i;
                            if r >= m {
                                continue;
                            }
                            let col = i * k + jj;
                            let dst = &mut pixels[(c * m + r) * o..][..o];
                            let src = row.chunks_exact(kk).map(|kernel| kernel[col]);
                            if col == 0 {
                                dst.iter_mut().zip(src).for_each(|(v, s)| *v = s);
                            } else {
                                dst.iter_mut().zip(src).for_each(|(v, s)| *v += s);
                                adds += o as u64;
                            }
                        }
                    }
                }
            }
        }
        scatter_planes(&pixels, &mut out, img);
    }
    Ok((out, adds))
}

/// Copies pixel-major outputs of image `img` into its `o` planes.
fn scatter_planes(pixels: &[f32], out: &mut OutputBatch, img: usize) {
    let (o, m) = (out.o(), out.m());
    let planes = &mut out.values_mut()[img * o * m * m..][..o * m * m];
    for (j, plane) in planes.chunks_exact_mut(m * m).enumerate() {
        for (r, line) in plane.chunks_exact_mut(m).enumerate() {
            for (c, v) in line.iter_mut().enumerate() {
                *v = pixels[(c * m + r) * o + j];
            }
        }
    }
}

/// Wall time of each phase of one lowered convolution, in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub lower: f64,
    pub multiply: f64,
    pub lift: f64,
}

impl PhaseTimings {
    pub fn total(&self) -> f64 {
        self.lower + self.multiply + self.lift
    }
}

/// Convolution through `lift(multiply(lower(..)))` using `gemm_threads`
/// workers in the multiply phase.
pub fn convolve_lowered(
    batch: &DataBatch,
    bank: &KernelBank,
    strategy: LoweringStrategy,
    gemm_threads: usize,
) -> Result<(OutputBatch, PhaseTimings)> {
    convolve_lowered_with(batch, bank, strategy, &GemmConfig::with_threads(gemm_threads))
}

pub fn convolve_lowered_with(
    batch: &DataBatch,
    bank: &KernelBank,
    strategy: LoweringStrategy,
    gemm: &GemmConfig,
) -> Result<(OutputBatch, PhaseTimings)> {
    let khat = lower_kernels(bank, strategy);
    convolve_images(batch.members(), bank, &khat, strategy, gemm)
}

/// Runs the three phases on a run of images with a pre-lowered `K̂`.
pub(crate) fn convolve_images(
    images: &[Tensor3],
    bank: &KernelBank,
    khat: &Mat,
    strategy: LoweringStrategy,
    gemm: &GemmConfig,
) -> Result<(OutputBatch, PhaseTimings)> {
    let first = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    if first.depth() != bank.depth() || bank.k() > first.n() {
        return Err(Error::Shape(format!(
            "data {n}x{n}x{d} is incompatible with kernels {k}x{k}x{kd}",
            n = first.n(),
            d = first.depth(),
            k = bank.k(),
            kd = bank.depth()
        )));
    }
    let layer = LayerConfig::new(first.n(), bank.k(), bank.depth(), bank.count(), images.len())?;

    let t0 = Instant::now();
    let (dhat, _) = lower_data(images, bank.k(), strategy)?;
    let t1 = Instant::now();
    let rhat = multiply(&dhat, khat, gemm)?;
    drop(dhat);
    let t2 = Instant::now();
    let out = lift(&rhat, strategy, &layer)?;
    let t3 = Instant::now();

    let timings = PhaseTimings {
        lower: (t1 - t0).as_secs_f64(),
        multiply: (t2 - t1).as_secs_f64(),
        lift: (t3 - t2).as_secs_f64(),
    };
    Ok((out, timings))
}
