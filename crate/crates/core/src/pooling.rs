//! Frustum lifting and height-sliced BEV pooling.
//!
//! `lift` turns an image feature map and a per-pixel depth distribution into
//! frustum features (the outer product over depth). Pooling scatter-sums
//! frustum features into BEV grid cells, restricted to a height slice.
//!
//! Two pooling kernels are provided. [`pool_slice_reference`] is the plain
//! one-slice-at-a-time operation; running it once per slice repeats the full
//! traversal, index math included, S times. [`pool_multislice_fused`]
//! traverses the frustum cells once and accumulates each cell into every
//! slice containing its height. Per slice, both kernels perform the same
//! additions in the same order (cameras in index order, then (d, i, j)
//! lexicographic), so their outputs are bitwise identical — the reference
//! kernel is the oracle for the fused one.

use crate::geometry::{BevGridSpec, HeightSlice};
use crate::tensor::Tensor;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("frustum values must be rank 4 (C x D x Hf x Wf), got {0:?}")]
    BadValuesShape(Vec<usize>),
    #[error("coords length {coords} does not match D*Hf*Wf = {cells}")]
    CoordCount { coords: usize, cells: usize },
    #[error("camera {camera} has {got} channels, expected {expected}")]
    ChannelMismatch {
        camera: usize,
        expected: usize,
        got: usize,
    },
    #[error("feature/depth spatial extents differ: {feat:?} vs {depth:?}")]
    SpatialMismatch { feat: Vec<usize>, depth: Vec<usize> },
    #[error("depth column at pixel ({i}, {j}) is not a distribution (sum {sum})")]
    BadDepthDistribution { i: usize, j: usize, sum: f64 },
    #[error("gradient stack shape {got:?} does not match {expected:?}")]
    GradExtent {
        got: Vec<usize>,
        expected: Vec<usize>,
    },
}

/// Per-camera frustum features: values V (C x D x Hf x Wf) plus the ego-frame
/// location of every (d, i, j) cell. Coordinates depend only on camera
/// geometry, so callers compute them once per camera and reuse them.
#[derive(Debug, Clone)]
pub struct FrustumFeatures {
    values: Tensor,
    coords: Vec<[f64; 3]>,
}

impl FrustumFeatures {
    pub fn new(values: Tensor, coords: Vec<[f64; 3]>) -> Result<Self, PoolError> {
        if values.rank() != 4 {
            return Err(PoolError::BadValuesShape(values.shape().to_vec()));
        }
        let cells = values.shape()[1] * values.shape()[2] * values.shape()[3];
        if coords.len() != cells {
            return Err(PoolError::CoordCount {
                coords: coords.len(),
                cells,
            });
        }
        Ok(FrustumFeatures { values, coords })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cells(&self) -> usize {
        self.coords.len()
    }
}

/// Stack of per-slice BEV grids, S x C x He x We, in `slices` order.
#[derive(Debug, Clone)]
pub struct SliceBevFeatures {
    pub slices: Vec<HeightSlice>,
    pub stacked: Tensor,
}

impl SliceBevFeatures {
    /// View of slice `s` as a C x He x We tensor.
    pub fn slice_grid(&self, s: usize) -> Tensor {
        let shape = self.stacked.shape();
        let (c, he, we) = (shape[1], shape[2], shape[3]);
        let plane = c * he * we;
        Tensor::from_vec(
            self.stacked.data()[s * plane..(s + 1) * plane].to_vec(),
            &[c, he, we],
        )
        .expect("slice grid shape")
    }
}

/// Whether `lift` enforces that every depth column is a distribution.
/// Learned distributions drift off exact normalization, so the check can be
/// relaxed to counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthValidation {
    Strict,
    Lenient,
}

/// Outer product of an image feature map F (C x Hf x Wf) with a per-pixel
/// depth distribution D (D x Hf x Wf): V[c, d, i, j] = F[c, i, j] * D[d, i, j].
/// Under `Strict`, each depth column must be nonnegative and sum to 1 within
/// 1e-6.
pub fn lift(
    feat: &Tensor,
    depth: &Tensor,
    validation: DepthValidation,
) -> Result<Tensor, PoolError> {
    if feat.rank() != 3 || depth.rank() != 3 || feat.shape()[1..] != depth.shape()[1..] {
        return Err(PoolError::SpatialMismatch {
            feat: feat.shape().to_vec(),
            depth: depth.shape().to_vec(),
        });
    }
    let (c, hf, wf) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let nd = depth.shape()[0];
    let spatial = hf * wf;

    if validation == DepthValidation::Strict {
        for i in 0..hf {
            for j in 0..wf {
                let mut sum = 0.0;
                let mut nonneg = true;
                for d in 0..nd {
                    let v = depth.data()[d * spatial + i * wf + j];
                    nonneg &= v >= 0.0;
                    sum += v;
                }
                if !nonneg || (sum - 1.0).abs() > 1e-6 {
                    return Err(PoolError::BadDepthDistribution { i, j, sum });
                }
            }
        }
    }

    let mut out = vec![0.0; c * nd * spatial];
    for ch in 0..c {
        for d in 0..nd {
            let f_base = ch * spatial;
            let d_base = d * spatial;
            let o_base = (ch * nd + d) * spatial;
            for s in 0..spatial {
                out[o_base + s] = feat.data()[f_base + s] * depth.data()[d_base + s];
            }
        }
    }
    Ok(Tensor::from_vec(out, &[c, nd, hf, wf]).expect("lift shape"))
}

/// Gradient of `lift` with respect to the feature map:
/// dF[c, i, j] = sum_d dV[c, d, i, j] * D[d, i, j].
pub fn lift_backward_features(grad_v: &Tensor, depth: &Tensor) -> Tensor {
    let shape = grad_v.shape();
    let (c, nd, hf, wf) = (shape[0], shape[1], shape[2], shape[3]);
    let spatial = hf * wf;
    let mut out = vec![0.0; c * spatial];
    for ch in 0..c {
        for d in 0..nd {
            for s in 0..spatial {
                out[ch * spatial + s] +=
                    grad_v.data()[(ch * nd + d) * spatial + s] * depth.data()[d * spatial + s];
            }
        }
    }
    Tensor::from_vec(out, &[c, hf, wf]).expect("lift grad shape")
}

/// Gradient of `lift` with respect to the depth distribution:
/// dD[d, i, j] = sum_c dV[c, d, i, j] * F[c, i, j].
pub fn lift_backward_depth(grad_v: &Tensor, feat: &Tensor) -> Tensor {
    let shape = grad_v.shape();
    let (c, nd, hf, wf) = (shape[0], shape[1], shape[2], shape[3]);
    let spatial = hf * wf;
    let mut out = vec![0.0; nd * spatial];
    for ch in 0..c {
        for d in 0..nd {
            for s in 0..spatial {
                out[d * spatial + s] +=
                    grad_v.data()[(ch * nd + d) * spatial + s] * feat.data()[ch * spatial + s];
            }
        }
    }
    Tensor::from_vec(out, &[nd, hf, wf]).expect("lift grad shape")
}

/// BEV cell lookup used by all pooling kernels; identical formula to
/// [`crate::geometry::bev_cell_index`], with the cell sizes hoisted out of
/// the inner loop.
struct GridIndexer {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    cell_w: f64,
    cell_h: f64,
    he: usize,
    we: usize,
}

impl GridIndexer {
    fn new(grid: &BevGridSpec) -> Self {
        GridIndexer {
            x_min: grid.x_min,
            x_max: grid.x_max,
            y_min: grid.y_min,
            y_max: grid.y_max,
            cell_w: grid.cell_width(),
            cell_h: grid.cell_height(),
            he: grid.he,
            we: grid.we,
        }
    }

    #[inline(always)]
    fn index(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if x < self.x_min || x >= self.x_max || y < self.y_min || y >= self.y_max {
            return None;
        }
        let ix = ((x - self.x_min) / self.cell_w).floor() as usize;
        let iy = ((y - self.y_min) / self.cell_h).floor() as usize;
        Some((ix.min(self.we - 1), iy.min(self.he - 1)))
    }
}

#[inline(always)]
fn slice_holds(lower: f64, upper: f64, h_max: f64, z: f64) -> bool {
    z >= lower && (z < upper || (upper == h_max && z == upper))
}

fn check_channels(frustums: &[FrustumFeatures], channels: usize) -> Result<(), PoolError> {
    for (camera, f) in frustums.iter().enumerate() {
        if f.channels() != channels {
            return Err(PoolError::ChannelMismatch {
                camera,
                expected: channels,
                got: f.channels(),
            });
        }
    }
    Ok(())
}

/// Pool every frustum cell whose height falls inside `slice` into the BEV
/// grid: B[c, iy, ix] += V[c, d, i, j]. Cameras are accumulated in index
/// order, cells in (d, i, j) lexicographic order. Out-of-grid and
/// out-of-slice cells are dropped silently.
pub fn pool_slice_reference(
    frustums: &[FrustumFeatures],
    grid: &BevGridSpec,
    slice: &HeightSlice,
    channels: usize,
) -> Result<Tensor, PoolError> {
    check_channels(frustums, channels)?;
    let indexer = GridIndexer::new(grid);
    let (he, we) = (grid.he, grid.we);
    let plane = he * we;
    let mut out = vec![0.0; channels * plane];
    let (lower, upper, h_max) = (slice.lower, slice.upper, grid.h_max);

    for f in frustums {
        let cells = f.cells();
        let values = f.values.data();
        for (cell, p) in f.coords.iter().enumerate() {
            let Some((ix, iy)) = indexer.index(p[0], p[1]) else {
                continue;
            };
            if !slice_holds(lower, upper, h_max, p[2]) {
                continue;
            }
            let dst = iy * we + ix;
            for c in 0..channels {
                out[c * plane + dst] += values[c * cells + cell];
            }
        }
    }
    Ok(Tensor::from_vec(out, &[channels, he, we]).expect("pool shape"))
}

/// Pool all slices in a single traversal of the frustum cells. Per slice the
/// accumulation order matches [`pool_slice_reference`], so the stacked
/// output equals the per-slice reference outputs bitwise.
pub fn pool_multislice_fused(
    frustums: &[FrustumFeatures],
    grid: &BevGridSpec,
    slices: &[HeightSlice],
    channels: usize,
) -> Result<SliceBevFeatures, PoolError> {
    check_channels(frustums, channels)?;
    let indexer = GridIndexer::new(grid);
    let (he, we) = (grid.he, grid.we);
    let plane = he * we;
    let n_slices = slices.len();
    let block = channels * plane;
    let mut out = vec![0.0; n_slices * block];
    let h_max = grid.h_max;
    let lowers: Vec<f64> = slices.iter().map(|s| s.lower).collect();
    let uppers: Vec<f64> = slices.iter().map(|s| s.upper).collect();

    for f in frustums {
        let cells = f.cells();
        let values = f.values.data();
        for (cell, p) in f.coords.iter().enumerate() {
            let Some((ix, iy)) = indexer.index(p[0], p[1]) else {
                continue;
            };
            let z = p[2];
            let dst = iy * we + ix;
            for s in 0..n_slices {
                if slice_holds(lowers[s], uppers[s], h_max, z) {
                    let base = s * block + dst;
                    for c in 0..channels {
                        out[base + c * plane] += values[c * cells + cell];
                    }
                }
            }
        }
    }
    Ok(SliceBevFeatures {
        slices: slices.to_vec(),
        stacked: Tensor::from_vec(out, &[n_slices, channels, he, we]).expect("stack shape"),
    })
}

/// Gradient of the fused pooling: the scatter-sum's adjoint is a gather.
/// grad_V[c, d, i, j] = sum over slices containing z of
/// grad_stack[s, c, cell(d, i, j)]; dropped cells get zero.
pub fn pool_backward(
    grad_stack: &Tensor,
    frustums: &[FrustumFeatures],
    grid: &BevGridSpec,
    slices: &[HeightSlice],
    channels: usize,
) -> Result<Vec<Tensor>, PoolError> {
    check_channels(frustums, channels)?;
    let expected = vec![slices.len(), channels, grid.he, grid.we];
    if grad_stack.shape() != expected.as_slice() {
        return Err(PoolError::GradExtent {
            got: grad_stack.shape().to_vec(),
            expected,
        });
    }
    let indexer = GridIndexer::new(grid);
    let plane = grid.he * grid.we;
    let block = channels * plane;
    let h_max = grid.h_max;
    let grad = grad_stack.data();

    let mut out = Vec::with_capacity(frustums.len());
    for f in frustums {
        let cells = f.cells();
        let mut g = vec![0.0; channels * cells];
        for (cell, p) in f.coords.iter().enumerate() {
            let Some((ix, iy)) = indexer.index(p[0], p[1]) else {
                continue;
            };
            let z = p[2];
            let src = iy * grid.we + ix;
            for (s, slice) in slices.iter().enumerate() {
                if slice_holds(slice.lower, slice.upper, h_max, z) {
                    let base = s * block + src;
                    for c in 0..channels {
                        g[c * cells + cell] += grad[base + c * plane];
                    }
                }
            }
        }
        let shape = f.values.shape();
        out.push(Tensor::from_vec(g, shape).expect("grad shape"));
    }
    Ok(out)
}

// ── Benchmark ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub cameras: usize,
    pub channels: usize,
    pub depth_bins: usize,
    pub hf: usize,
    pub wf: usize,
    pub grid: BevGridSpec,
    /// Slice counts to benchmark; 1, 3, 6 and 9 map to the canonical
    /// full-range / global / local / global+local sets.
    pub slice_counts: Vec<usize>,
    pub runs: usize,
    pub warmups: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            cameras: 6,
            channels: 4,
            depth_bins: 32,
            hf: 16,
            wf: 44,
            grid: BevGridSpec {
                x_min: -48.0,
                x_max: 48.0,
                y_min: -48.0,
                y_max: 48.0,
                he: 64,
                we: 64,
                h_min: -6.0,
                h_max: 4.0,
            },
            slice_counts: vec![1, 3, 6, 9],
            runs: 20,
            warmups: 3,
            seed: 7,
        }
    }
}

/// Canonical slice set for a benchmark slice count.
pub fn slices_for_count(n: usize, grid: &BevGridSpec) -> Vec<HeightSlice> {
    let set = crate::lidar::SliceSet::paper_nuscenes();
    match n {
        1 => vec![grid.full_slice()],
        3 => set.globals,
        6 => set.locals,
        9 => set.all(),
        _ => {
            let step = (grid.h_max - grid.h_min) / n as f64;
            (0..n)
                .map(|i| {
                    HeightSlice::new(
                        grid.h_min + i as f64 * step,
                        if i + 1 == n {
                            grid.h_max
                        } else {
                            grid.h_min + (i + 1) as f64 * step
                        },
                    )
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub kernel: &'static str,
    pub slices: usize,
    pub run: usize,
    pub wall_ns: u128,
}

#[derive(Debug, Clone)]
pub struct BenchSummary {
    pub kernel: &'static str,
    pub slices: usize,
    pub median_ns: u128,
    pub p10_ns: u128,
    pub p90_ns: u128,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub summaries: Vec<BenchSummary>,
}

impl BenchReport {
    pub fn median_ns(&self, kernel: &str, slices: usize) -> Option<u128> {
        self.summaries
            .iter()
            .find(|s| s.kernel == kernel && s.slices == slices)
            .map(|s| s.median_ns)
    }

    /// fused(S) / reference(S) median wall-time ratio.
    pub fn fused_over_reference(&self, slices: usize) -> Option<f64> {
        let f = self.median_ns("fused", slices)? as f64;
        let r = self.median_ns("reference", slices)? as f64;
        Some(f / r)
    }

    /// reference(S) / reference(1) median wall-time ratio.
    pub fn reference_scaling(&self, slices: usize) -> Option<f64> {
        let s = self.median_ns("reference", slices)? as f64;
        let one = self.median_ns("reference", 1)? as f64;
        Some(s / one)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kernel,slices,run,wall_ns\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.kernel, r.slices, r.run, r.wall_ns));
        }
        out
    }
}

fn percentile(sorted: &[u128], q: f64) -> u128 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Time repeated-reference pooling against the fused kernel on a fixed
/// random problem. Each configured slice count gets `warmups` untimed and
/// `runs` timed executions of both kernels.
pub fn pool_benchmark(config: &BenchConfig) -> Result<BenchReport, PoolError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let cells = config.depth_bins * config.hf * config.wf;
    let mut frustums = Vec::with_capacity(config.cameras);
    for _ in 0..config.cameras {
        let values: Vec<f64> = (0..config.channels * cells)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let coords: Vec<[f64; 3]> = (0..cells)
            .map(|_| {
                [
                    rng.gen_range(config.grid.x_min - 5.0..config.grid.x_max + 5.0),
                    rng.gen_range(config.grid.y_min - 5.0..config.grid.y_max + 5.0),
                    rng.gen_range(config.grid.h_min - 1.0..config.grid.h_max + 1.0),
                ]
            })
            .collect();
        frustums.push(FrustumFeatures::new(
            Tensor::from_vec(
                values,
                &[config.channels, config.depth_bins, config.hf, config.wf],
            )
            .expect("bench values"),
            coords,
        )?);
    }

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &n in &config.slice_counts {
        let slices = slices_for_count(n, &config.grid);
        let mut timings: Vec<(&'static str, Vec<u128>)> =
            vec![("reference", Vec::new()), ("fused", Vec::new())];
        for run in 0..config.warmups + config.runs {
            // Repeated reference: one full pass per slice.
            let start = Instant::now();
            let mut sink = 0.0;
            for s in &slices {
                let b = pool_slice_reference(&frustums, &config.grid, s, config.channels)?;
                sink += b.data()[0];
            }
            let ref_ns = start.elapsed().as_nanos();
            std::hint::black_box(sink);

            let start = Instant::now();
            let fused = pool_multislice_fused(&frustums, &config.grid, &slices, config.channels)?;
            let fused_ns = start.elapsed().as_nanos();
            std::hint::black_box(fused.stacked.data()[0]);

            if run >= config.warmups {
                let timed_run = run - config.warmups;
                rows.push(BenchRow {
                    kernel: "reference",
                    slices: n,
                    run: timed_run,
                    wall_ns: ref_ns,
                });
                rows.push(BenchRow {
                    kernel: "fused",
                    slices: n,
                    run: timed_run,
                    wall_ns: fused_ns,
                });
                timings[0].1.push(ref_ns);
                timings[1].1.push(fused_ns);
            }
        }
        for (kernel, mut t) in timings {
            t.sort_unstable();
            summaries.push(BenchSummary {
                kernel,
                slices: n,
                median_ns: percentile(&t, 0.5),
                p10_ns: percentile(&t, 0.1),
                p90_ns: percentile(&t, 0.9),
            });
        }
    }
    Ok(BenchReport { rows, summaries })
}
