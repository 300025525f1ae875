//! Blocked, thread-partitioned single-precision matrix multiply.
//!
//! `multiply` follows the usual three-level blocking: the output is walked
//! in `nc`-wide column panels, the inner dimension in `kc`-deep slabs and
//! the rows in `mc`-tall blocks. Each `kc × nc` slab of `B` and `mc × kc`
//! block of `A` is packed into micro-panels that feed an `MR × NR`
//! register-tile kernel.
//!
//! Parallelism splits the columns of `B` (and so of `C`) into
//! `threads` contiguous partitions with one worker each. When `B` has fewer
//! columns than there are workers the rows of `A` are split instead.
//!
//! Every output element is accumulated as a single running `f32` sum over
//! the inner index in increasing order, starting from zero. Blocking and
//! partitioning only decide *when* each step runs, never the order of the
//! additions, so results are bit-identical for every thread count and
//! block size.

use std::thread;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::timing::Summary;

/// Register tile height.
const MR: usize = 6;
/// Register tile width.
const NR: usize = 16;

/// Upper bound on `GemmConfig::threads`.
pub const MAX_THREADS: usize = 256;

/// Dense row-major `f32` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Mat { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        Mat { rows, cols, values }
    }

    /// Entries uniform in `[-1, 1)`.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let values = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Mat { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Size of the value buffer in bytes.
    pub fn bytes(&self) -> usize {
        self.values.len() * std::mem::size_of::<f32>()
    }
}

/// Thread count and cache-blocking parameters for [`multiply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GemmConfig {
    pub threads: usize,
    /// Rows of `A` per packed block.
    pub mc: usize,
    /// Inner-dimension depth per packed slab.
    pub kc: usize,
    /// Columns of `B` per packed panel.
    pub nc: usize,
}

impl Default for GemmConfig {
    fn default() -> Self {
        GemmConfig { threads: 1, mc: 96, kc: 256, nc: 256 }
    }
}

impl GemmConfig {
    pub fn with_threads(threads: usize) -> Self {
        GemmConfig { threads, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 || self.threads > MAX_THREADS {
            return Err(Error::Config(format!(
                "gemm threads must be in 1..={MAX_THREADS}, got {}",
                self.threads
            )));
        }
        if self.mc == 0 || self.kc == 0 || self.nc == 0 {
            return Err(Error::Config(format!(
                "gemm block sizes must be >= 1, got mc={} kc={} nc={}",
                self.mc, self.kc, self.nc
            )));
        }
        Ok(())
    }
}

/// Which dimension the workers of one `multiply` call divide between them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionAxis {
    Columns,
    Rows,
}

/// Axis used by [`multiply`] for an `_ × cols` right operand.
pub fn partition_axis(cols: usize, threads: usize) -> PartitionAxis {
    if cols >= threads {
        PartitionAxis::Columns
    } else {
        PartitionAxis::Rows
    }
}

/// Splits `0..len` into `parts` contiguous ranges whose lengths differ by at
/// most one, longer ranges first.
pub(crate) fn split_even(len: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let base = len / parts;
    let extra = len % parts;
    let mut start = 0;
    (0..parts)
        .map(|p| {
            let size = base + usize::from(p < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

/// Raw view of the output buffer shared by all workers.
///
/// Workers only ever write elements inside their own row/column range, and
/// the ranges of one call are pairwise disjoint.
#[derive(Clone, Copy)]
struct OutPtr {
    ptr: *mut f32,
    ld: usize,
}

unsafe impl Send for OutPtr {}
unsafe impl Sync for OutPtr {}

/// `C = A · B`.
pub fn multiply(a: &Mat, b: &Mat, cfg: &GemmConfig) -> Result<Mat> {
    cfg.validate()?;
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, n) = (a.rows, b.cols);
    let mut c = Mat::zeros(m, n);
    if m == 0 || n == 0 {
        return Ok(c);
    }

    let axis = partition_axis(n, cfg.threads);
    let ranges = match axis {
        PartitionAxis::Columns => split_even(n, cfg.threads),
        PartitionAxis::Rows => split_even(m, cfg.threads.min(m)),
    };
    let out = OutPtr { ptr: c.values.as_mut_ptr(), ld: n };

    let run = |range: std::ops::Range<usize>| {
        let (rows, cols) = match axis {
            PartitionAxis::Columns => (0..m, range),
            PartitionAxis::Rows => (range, 0..n),
        };
        // Safety: `rows × cols` ranges are disjoint between workers and in
        // bounds of `c`, which outlives the scope below.
        unsafe { gemm_block(a, b, cfg, rows, cols, out) };
    };

    let mut ranges = ranges.into_iter().filter(|r| !r.is_empty()).collect::<Vec<_>>();
    let last = ranges.pop().expect("at least one non-empty partition");
    thread::scope(|s| {
        for r in ranges {
            s.spawn(|| run(r));
        }
        // The calling thread takes the last partition, so exactly
        // `threads` threads are busy.
        run(last);
    });
    Ok(c)
}

/// Computes `C[rows, cols] = A[rows, :] · B[:, cols]`.
///
/// # Safety
///
/// `out` must point to a live row-major buffer with leading dimension
/// `out.ld` covering `rows × cols`, and no other thread may access those
/// elements during the call.
unsafe fn gemm_block(
    a: &Mat,
    b: &Mat,
    cfg: &GemmConfig,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    out: OutPtr,
) {
    let inner = a.cols;
    let kc_max = cfg.kc.min(inner.max(1));
    let nc_max = cfg.nc.min(cols.len());
    let mc_max = cfg.mc.min(rows.len());
    let mut packed_b = vec![0.0f32; nc_max.div_ceil(NR) * NR * kc_max];
    let mut packed_a = vec![0.0f32; mc_max.div_ceil(MR) * MR * kc_max];

    let mut jc = cols.start;
    while jc < cols.end {
        let nc = cfg.nc.min(cols.end - jc);
        let mut pc = 0;
        while pc < inner {
            let kc = cfg.kc.min(inner - pc);
            let first_slab = pc == 0;
            pack_b(b, pc, kc, jc, nc, &mut packed_b);
            let mut ic = rows.start;
            while ic < rows.end {
                let mc = cfg.mc.min(rows.end - ic);
                pack_a(a, ic, mc, pc, kc, &mut packed_a);
                for jr in (0..nc).step_by(NR) {
                    let nr = NR.min(nc - jr);
                    let bp = &packed_b[jr * kc..(jr + NR) * kc];
                    for ir in (0..mc).step_by(MR) {
                        let mr = MR.min(mc - ir);
                        let ap = &packed_a[ir * kc..(ir + MR) * kc];
                        let mut acc = [[0.0f32; NR]; MR];
                        let base = out.ptr.add((ic + ir) * out.ld + jc + jr);
                        if !first_slab {
                            for (i, acc_row) in acc.iter_mut().enumerate().take(mr) {
                                let row = base.add(i * out.ld);
                                for (j, v) in acc_row.iter_mut().enumerate().take(nr) {
                                    *v = *row.add(j);
                                }
                            }
                        }
                        micro_kernel(kc, ap, bp, &mut acc);
                        for (i, acc_row) in acc.iter().enumerate().take(mr) {
                            let row = base.add(i * out.ld);
                            for (j, &v) in acc_row.iter().enumerate().take(nr) {
                                *row.add(j) = v;
                            }
                        }
                    }
                }
                ic += mc;
            }
            pc += kc;
        }
        jc += nc;
    }
}

/// Packs `B[pc..pc+kc, jc..jc+nc]` into `NR`-wide strips, each stored
/// inner-index-major and zero-padded to full width.
fn pack_b(b: &Mat, pc: usize, kc: usize, jc: usize, nc: usize, dst: &mut [f32]) {
    for (strip, j0) in (0..nc).step_by(NR).enumerate() {
        let nr = NR.min(nc - j0);
        let panel = &mut dst[strip * NR * kc..(strip + 1) * NR * kc];
        for t in 0..kc {
            let src = &b.values[(pc + t) * b.cols + jc + j0..][..nr];
            let row = &mut panel[t * NR..(t + 1) * NR];
            row[..nr].copy_from_slice(src);
            row[nr..].fill(0.0);
        }
    }
}

/// Packs `A[ic..ic+mc, pc..pc+kc]` into `MR`-tall strips, each stored
/// inner-index-major and zero-padded to full height.
fn pack_a(a: &Mat, ic: usize, mc: usize, pc: usize, kc: usize, dst: &mut [f32]) {
    for (strip, i0) in (0..mc).step_by(MR).enumerate() {
        let mr = MR.min(mc - i0);
        let panel = &mut dst[strip * MR * kc..(strip + 1) * MR * kc];
        for i in 0..MR {
            if i < mr {
                let src = &a.values[(ic + i0 + i) * a.cols + pc..][..kc];
                for (t, &v) in src.iter().enumerate() {
                    panel[t * MR + i] = v;
                }
            } else {
                for t in 0..kc {
                    panel[t * MR + i] = 0.0;
                }
            }
        }
    }
}

#[inline(always)]
fn micro_kernel(kc: usize, a: &[f32], b: &[f32], acc: &mut [[f32; NR]; MR]) {
    let a = &a[..kc * MR];
    let b = &b[..kc * NR];
    let mut regs = *acc;
    for (av, bv) in a.chunks_exact(MR).zip(b.chunks_exact(NR)) {
        let av: &[f32; MR] = av.try_into().unwrap();
        let bv: &[f32; NR] = bv.try_into().unwrap();
        for i in 0..MR {
            let x = av[i];
            for j in 0..NR {
                regs[i][j] += x * bv[j];
            }
        }
    }
    *acc = regs;
}

/// Naive triple loop with an `f64` accumulator; the ground truth for
/// [`multiply`].
pub fn multiply_reference(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0f64;
            for t in 0..a.cols {
                acc += a.get(i, t) as f64 * b.get(t, j) as f64;
            }
            c.values[i * b.cols + j] = acc as f32;
        }
    }
    Ok(c)
}

/// Floating-point operations of one `rows × inner × cols` product.
pub fn gemm_flops(rows: usize, inner: usize, cols: usize) -> u64 {
    2 * rows as u64 * inner as u64 * cols as u64
}

/// Result of [`gemm_throughput_probe`].
#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub flops: u64,
    /// Wall time per repetition, seconds.
    pub seconds: Summary,
    /// `flops / median seconds`.
    pub flops_per_second: f64,
}

/// Bytes the probe allocates for a shape; probes beyond this are refused.
pub const PROBE_MEMORY_BUDGET: usize = 1 << 30;

/// Times repeated products of random `rows × inner` and `inner × cols`
/// operands (one warm-up run, then `reps` timed runs) and reports the
/// median throughput.
pub fn gemm_throughput_probe(
    shape: (usize, usize, usize),
    cfg: &GemmConfig,
    reps: usize,
) -> Result<ProbeResult> {
    cfg.validate()?;
    let (rows, inner, cols) = shape;
    let bytes = (rows * inner + inner * cols + rows * cols) * std::mem::size_of::<f32>();
    if bytes > PROBE_MEMORY_BUDGET {
        return Err(Error::Resource(format!(
            "probe shape {rows}x{inner}x{cols} needs {bytes} bytes, budget is {PROBE_MEMORY_BUDGET}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let a = Mat::random(rows, inner, &mut rng);
    let b = Mat::random(inner, cols, &mut rng);
    multiply(&a, &b, cfg)?;
    let mut samples = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        let c = multiply(&a, &b, cfg)?;
        samples.push(start.elapsed().as_secs_f64());
        std::hint::black_box(c);
    }
    let seconds = Summary::from_samples(&samples);
    let flops = gemm_flops(rows, inner, cols);
    Ok(ProbeResult { flops, flops_per_second: flops as f64 / seconds.median, seconds })
}
