//! LiDAR height histograms and slice derivation.
//!
//! The local slices emphasize informative heights: we histogram LiDAR point
//! heights, accumulate the histogram, and place slice boundaries at
//! equal-mass quantiles of the accumulated distribution (with linear
//! interpolation inside bins). The published six local bins and three global
//! ranges are available as the `paper-nuscenes` preset.

use crate::geometry::{BevGridSpec, HeightSlice};
use crate::scenes::{PointCloud, Scene};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LidarError {
    #[error("bin width must be positive, got {0}")]
    BadBinWidth(f64),
    #[error("invalid height range [{0}, {1}]")]
    BadRange(f64, f64),
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("need at least {need} slices, got {got}")]
    TooFewSlices { need: usize, got: usize },
    #[error("unknown class id {0}")]
    UnknownClass(u32),
    #[error("no scenes given")]
    NoScenes,
}

/// Binned counts of point heights over a fixed range. Bins are half-open,
/// lower-inclusive; the last bin is closed above. Out-of-range points are
/// tallied in `discarded`, not binned.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightHistogram {
    /// n + 1 strictly ascending edges in meters.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    pub discarded: u64,
}

impl HeightHistogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_edges[1] - self.bin_edges[0]
    }

    pub fn range(&self) -> (f64, f64) {
        (self.bin_edges[0], *self.bin_edges.last().unwrap())
    }

    /// Merge counts from another histogram with identical edges.
    pub fn merge(&mut self, other: &HeightHistogram) {
        debug_assert_eq!(self.bin_edges, other.bin_edges);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        self.discarded += other.discarded;
    }
}

/// Histogram of `points`' heights over `range` with the given bin width.
/// The bin count is ceil(range / bin_width); the last edge is pinned to the
/// range top so the edges tile the range exactly.
pub fn height_histogram(
    points: &PointCloud,
    bin_width: f64,
    range: (f64, f64),
) -> Result<HeightHistogram, LidarError> {
    let (h_min, h_max) = range;
    if !(bin_width > 0.0) {
        return Err(LidarError::BadBinWidth(bin_width));
    }
    if !(h_min < h_max) {
        return Err(LidarError::BadRange(h_min, h_max));
    }
    let n = ((h_max - h_min) / bin_width).ceil().max(1.0) as usize;
    let mut edges = Vec::with_capacity(n + 1);
    for i in 0..n {
        edges.push(h_min + i as f64 * bin_width);
    }
    edges.push(h_max);

    let mut counts = vec![0u64; n];
    let mut discarded = 0u64;
    let mut total = 0u64;
    for p in &points.points {
        let z = p[2];
        if z < h_min || z > h_max {
            discarded += 1;
            continue;
        }
        let mut bin = ((z - h_min) / bin_width).floor() as usize;
        if bin >= n {
            bin = n - 1; // z == h_max lands in the closed last bin
        }
        counts[bin] += 1;
        total += 1;
    }
    Ok(HeightHistogram {
        bin_edges: edges,
        counts,
        total,
        discarded,
    })
}

/// Cumulative mass at each bin's right edge, ending at 1.0.
pub fn accumulate(hist: &HeightHistogram) -> Result<Vec<f64>, LidarError> {
    if hist.total == 0 {
        return Err(LidarError::EmptyHistogram);
    }
    let total = hist.total as f64;
    let mut acc = Vec::with_capacity(hist.bins());
    let mut running = 0u64;
    for &c in &hist.counts {
        running += c;
        acc.push(running as f64 / total);
    }
    Ok(acc)
}

/// Slices derived from a histogram, with a count of quantile collisions that
/// had to be widened to the next bin edge.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedSlices {
    pub slices: Vec<HeightSlice>,
    pub degeneracy_warnings: usize,
}

/// Place J slices so each holds an equal share of the histogram mass.
/// Boundaries are the q = k/J quantiles, linearly interpolated inside bins;
/// the outer boundaries are pinned to the histogram range. Quantiles that
/// collide (a bin holding more than total/J mass) are widened to the next
/// bin edge and counted as degeneracy warnings.
pub fn derive_local_slices(
    hist: &HeightHistogram,
    j: usize,
) -> Result<DerivedSlices, LidarError> {
    if j < 1 {
        return Err(LidarError::TooFewSlices { need: 1, got: j });
    }
    if hist.total == 0 {
        return Err(LidarError::EmptyHistogram);
    }
    let (h_min, h_max) = hist.range();
    if j == 1 {
        return Ok(DerivedSlices {
            slices: vec![HeightSlice::new(h_min, h_max)],
            degeneracy_warnings: 0,
        });
    }

    let acc = accumulate(hist)?;
    let total = hist.total as f64;
    let mut bounds = Vec::with_capacity(j + 1);
    bounds.push(h_min);
    let mut warnings = 0usize;
    for k in 1..j {
        let q = k as f64 / j as f64;
        // first bin whose right-edge cumulative mass reaches q
        let bin = acc.partition_point(|&a| a < q).min(hist.bins() - 1);
        let below = if bin == 0 { 0.0 } else { acc[bin - 1] };
        let inside = hist.counts[bin] as f64 / total;
        let lo = hist.bin_edges[bin];
        let hi = hist.bin_edges[bin + 1];
        let mut boundary = if inside > 0.0 {
            lo + (q - below) / inside * (hi - lo)
        } else {
            hi
        };
        let prev = *bounds.last().unwrap();
        if boundary <= prev {
            // quantile collision: widen to the next bin edge above prev
            boundary = hist
                .bin_edges
                .iter()
                .copied()
                .find(|&e| e > prev)
                .unwrap_or(h_max);
            warnings += 1;
        }
        bounds.push(boundary.min(h_max));
    }
    bounds.push(h_max);
    // Degenerate tail bounds can still collide after widening; force strict
    // ascent by nudging to following edges.
    for i in 1..bounds.len() {
        if bounds[i] <= bounds[i - 1] {
            let next = hist
                .bin_edges
                .iter()
                .copied()
                .find(|&e| e > bounds[i - 1])
                .unwrap_or(h_max);
            bounds[i] = next;
            warnings += 1;
        }
    }
    let slices = bounds
        .windows(2)
        .map(|w| HeightSlice::new(w[0], w[1]))
        .collect();
    Ok(DerivedSlices {
        slices,
        degeneracy_warnings: warnings,
    })
}

/// Global plus local height slices.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSet {
    pub globals: Vec<HeightSlice>,
    pub locals: Vec<HeightSlice>,
}

impl SliceSet {
    /// The published preset: three nested global ranges and six local bins
    /// over [-6, 4].
    pub fn paper_nuscenes() -> Self {
        SliceSet {
            globals: vec![
                HeightSlice::new(-6.0, 4.0),
                HeightSlice::new(-5.0, 3.0),
                HeightSlice::new(-4.0, 2.0),
            ],
            locals: vec![
                HeightSlice::new(-6.0, -3.0),
                HeightSlice::new(-3.0, -2.0),
                HeightSlice::new(-2.0, -1.0),
                HeightSlice::new(-1.0, 0.0),
                HeightSlice::new(0.0, 2.0),
                HeightSlice::new(2.0, 4.0),
            ],
        }
    }

    /// Preset globals with locals derived from a LiDAR histogram.
    pub fn with_derived_locals(hist: &HeightHistogram, j: usize) -> Result<Self, LidarError> {
        let derived = derive_local_slices(hist, j)?;
        Ok(SliceSet {
            globals: SliceSet::paper_nuscenes().globals,
            locals: derived.slices,
        })
    }

    /// Globals followed by locals, the stacking order used by pooling.
    pub fn all(&self) -> Vec<HeightSlice> {
        self.globals.iter().chain(&self.locals).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.globals.len() + self.locals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.globals.is_empty() && self.locals.is_empty()
    }
}

impl Default for SliceSet {
    fn default() -> Self {
        SliceSet::paper_nuscenes()
    }
}

/// Height statistics of one class's boxes over a set of scenes.
#[derive(Debug, Clone)]
pub struct ClassHeightStats {
    pub class_id: u32,
    /// Histogram of box-center heights.
    pub center_hist: HeightHistogram,
    /// Histogram of box vertical extents (sizes along z).
    pub extent_hist: HeightHistogram,
    pub count: usize,
    pub center_mean: f64,
    pub center_std: f64,
    pub extent_mean: f64,
    pub extent_std: f64,
    /// True when the class never occurred.
    pub absent: bool,
}

/// Per-class histograms of box-center heights and vertical extents over the
/// grid's height range. Scenes may only contain class ids from `classes`.
pub fn class_height_stats(
    scenes: &[Scene],
    classes: &[u32],
    grid: &BevGridSpec,
    bin_width: f64,
) -> Result<Vec<ClassHeightStats>, LidarError> {
    if scenes.is_empty() {
        return Err(LidarError::NoScenes);
    }
    for s in scenes {
        for b in &s.boxes {
            if !classes.contains(&b.class_id) {
                return Err(LidarError::UnknownClass(b.class_id));
            }
        }
    }
    let mut out = Vec::with_capacity(classes.len());
    for &class_id in classes {
        let mut centers = Vec::new();
        let mut extents = Vec::new();
        for s in scenes {
            for b in &s.boxes {
                if b.class_id == class_id {
                    centers.push([0.0, 0.0, b.center[2]]);
                    extents.push([0.0, 0.0, b.size[2]]);
                }
            }
        }
        let center_hist = height_histogram(
            &PointCloud {
                points: centers.clone(),
            },
            bin_width,
            (grid.h_min, grid.h_max),
        )?;
        let extent_hist = height_histogram(
            &PointCloud {
                points: extents.clone(),
            },
            bin_width,
            (0.0, grid.h_max - grid.h_min),
        )?;
        let (center_mean, center_std) = mean_std(centers.iter().map(|p| p[2]));
        let (extent_mean, extent_std) = mean_std(extents.iter().map(|p| p[2]));
        out.push(ClassHeightStats {
            class_id,
            center_hist,
            extent_hist,
            count: centers.len(),
            center_mean,
            center_std,
            extent_mean,
            extent_std,
            absent: centers.is_empty(),
        });
    }
    Ok(out)
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let values: Vec<f64> = values.collect();
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{default_profiles, generate_dataset, Box3D, SceneGenOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(zs: &[f64]) -> PointCloud {
        PointCloud {
            points: zs.iter().map(|&z| [0.0, 0.0, z]).collect(),
        }
    }

    #[test]
    fn histogram_hand_count() {
        let h = height_histogram(&cloud(&[-1.0, -1.0, 0.0, 1.0]), 1.0, (-2.0, 2.0)).unwrap();
        assert_eq!(h.counts, vec![0, 2, 1, 1]);
        assert_eq!(h.total, 4);
        assert_eq!(h.discarded, 0);
        assert_eq!(h.bin_edges, vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn histogram_empty_cloud_and_discards() {
        let h = height_histogram(&cloud(&[]), 0.5, (-1.0, 1.0)).unwrap();
        assert!(h.counts.iter().all(|&c| c == 0));
        assert_eq!(h.total, 0);

        let h = height_histogram(&cloud(&[-5.0, 0.0, 5.0]), 0.5, (-1.0, 1.0)).unwrap();
        assert_eq!(h.total, 1);
        assert_eq!(h.discarded, 2);
        // top of range lands in the closed last bin
        let h = height_histogram(&cloud(&[1.0]), 0.5, (-1.0, 1.0)).unwrap();
        assert_eq!(*h.counts.last().unwrap(), 1);
    }

    #[test]
    fn histogram_matches_two_gaussian_mixture_density() {
        // Mixture with modes at -2 and 0, mirroring where LiDAR mass sits.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 200_000;
        let mut zs = Vec::with_capacity(n);
        for _ in 0..n {
            let (mu, sigma) = if rng.gen_bool(0.5) { (-2.0, 0.15) } else { (0.0, 0.6) };
            let g: f64 = rng.sample(rand_distr::StandardNormal);
            zs.push(mu + sigma * g);
        }
        let h = height_histogram(&cloud(&zs), 0.1, (-6.0, 4.0)).unwrap();
        let density = |z: f64| {
            0.5 * gauss_pdf(z, -2.0, 0.15) + 0.5 * gauss_pdf(z, 0.0, 0.6)
        };
        for (i, &c) in h.counts.iter().enumerate() {
            let (lo, hi) = (h.bin_edges[i], h.bin_edges[i + 1]);
            let p = simpson(density, lo, hi, 64);
            let expect = p * h.total as f64;
            let sigma = (h.total as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (c as f64 - expect).abs() <= 3.0 * sigma + 1.0,
                "bin {i} [{lo},{hi}): count {c}, expected {expect:.1} sigma {sigma:.1}"
            );
        }
    }

    fn gauss_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
        let d = (x - mu) / sigma;
        (-0.5 * d * d).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn accumulate_uniform_and_delta() {
        let h = height_histogram(&cloud(&[-1.5, -0.5, 0.5, 1.5]), 1.0, (-2.0, 2.0)).unwrap();
        assert_eq!(accumulate(&h).unwrap(), vec![0.25, 0.5, 0.75, 1.0]);

        let h = height_histogram(&cloud(&[0.5, 0.5]), 1.0, (-2.0, 2.0)).unwrap();
        assert_eq!(accumulate(&h).unwrap(), vec![0.0, 0.0, 1.0, 1.0]);

        let empty = height_histogram(&cloud(&[]), 1.0, (-2.0, 2.0)).unwrap();
        assert!(matches!(
            accumulate(&empty),
            Err(LidarError::EmptyHistogram)
        ));
    }

    #[test]
    fn accumulate_matches_prefix_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let zs: Vec<f64> = (0..500).map(|_| rng.gen_range(-6.0..4.0)).collect();
        let h = height_histogram(&cloud(&zs), 0.25, (-6.0, 4.0)).unwrap();
        let acc = accumulate(&h).unwrap();
        let mut prefix = 0u64;
        for (i, &c) in h.counts.iter().enumerate() {
            prefix += c;
            assert_eq!(acc[i] * h.total as f64, prefix as f64);
        }
        assert!((acc.last().unwrap() - 1.0).abs() <= 1e-12);
        assert!(acc.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn uniform_histogram_midpoint_split() {
        // exactly uniform counts over [-6, 4]
        let h = HeightHistogram {
            bin_edges: (0..=100).map(|i| -6.0 + 0.1 * i as f64).collect(),
            counts: vec![5; 100],
            total: 500,
            discarded: 0,
        };
        let d = derive_local_slices(&h, 2).unwrap();
        assert_eq!(d.degeneracy_warnings, 0);
        assert_eq!(d.slices.len(), 2);
        assert!((d.slices[0].lower + 6.0).abs() <= 1e-9);
        assert!((d.slices[0].upper + 1.0).abs() <= 1e-9);
        assert!((d.slices[1].lower + 1.0).abs() <= 1e-9);
        assert!((d.slices[1].upper - 4.0).abs() <= 1e-9);
    }

    #[test]
    fn single_slice_covers_range() {
        let h = height_histogram(&cloud(&[0.0]), 0.1, (-6.0, 4.0)).unwrap();
        let d = derive_local_slices(&h, 1).unwrap();
        assert_eq!(d.slices, vec![HeightSlice::new(-6.0, 4.0)]);
    }

    #[test]
    fn derived_boundaries_match_cdf_inversion() {
        // two-Gaussian mixture; oracle inverts the analytic CDF numerically
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 200_000;
        let mut zs = Vec::with_capacity(n);
        for _ in 0..n {
            let (mu, sigma) = if rng.gen_bool(0.5) { (-2.0, 0.15) } else { (0.0, 0.6) };
            let g: f64 = rng.sample(rand_distr::StandardNormal);
            zs.push(mu + sigma * g);
        }
        let h = height_histogram(&cloud(&zs), 0.1, (-6.0, 4.0)).unwrap();
        let density =
            |z: f64| 0.5 * gauss_pdf(z, -2.0, 0.15) + 0.5 * gauss_pdf(z, 0.0, 0.6);
        // truncated to the histogram range, like the histogram itself
        let mass = simpson(&density, -6.0, 4.0, 4096);
        let cdf = |z: f64| simpson(&density, -6.0, z, 4096) / mass;
        for j in [2usize, 6] {
            let d = derive_local_slices(&h, j).unwrap();
            for k in 1..j {
                let q = k as f64 / j as f64;
                let (mut lo, mut hi) = (-6.0, 4.0);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if cdf(mid) < q {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let oracle = 0.5 * (lo + hi);
                let got = d.slices[k].lower;
                assert!(
                    (got - oracle).abs() <= 0.1,
                    "J={j} q={q}: derived {got} vs oracle {oracle}"
                );
            }
        }
    }

    #[test]
    fn derived_slices_tile_range_and_balance_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let zs: Vec<f64> = (0..20_000)
            .map(|_| {
                let g: f64 = rng.sample(rand_distr::StandardNormal);
                -1.0 + 1.2 * g
            })
            .collect();
        let h = height_histogram(&cloud(&zs), 0.1, (-6.0, 4.0)).unwrap();
        for j in [2usize, 3, 6, 9] {
            let d = derive_local_slices(&h, j).unwrap();
            assert_eq!(d.slices.len(), j);
            assert_eq!(d.slices[0].lower, -6.0);
            assert_eq!(d.slices[j - 1].upper, 4.0);
            for w in d.slices.windows(2) {
                assert_eq!(w[0].upper, w[1].lower);
            }
            // each slice holds total/J points, within the largest bin count
            let max_bin = *h.counts.iter().max().unwrap() as f64;
            let grid = BevGridSpec::default();
            for s in &d.slices {
                let inside = zs
                    .iter()
                    .filter(|&&z| crate::geometry::slice_contains(s, z, &grid))
                    .count() as f64;
                let share = h.total as f64 / j as f64;
                assert!(
                    (inside - share).abs() <= max_bin + 1.0,
                    "J={j} slice [{}, {}): {inside} vs {share}",
                    s.lower,
                    s.upper
                );
            }
        }
    }

    #[test]
    fn concentrated_histogram_stays_ordered_and_non_degenerate() {
        // All mass in one bin. Interpolation spreads the quantile boundaries
        // inside the hot bin, so the result stays strictly ordered and the
        // collision-widening guard is never needed.
        let h = height_histogram(&cloud(&[0.05; 50]), 0.1, (-6.0, 4.0)).unwrap();
        let d = derive_local_slices(&h, 4).unwrap();
        assert_eq!(d.degeneracy_warnings, 0);
        assert_eq!(d.slices.len(), 4);
        for w in d.slices.windows(2) {
            assert!(w[0].upper == w[1].lower && w[0].lower < w[0].upper);
        }
        assert_eq!(d.slices[0].lower, -6.0);
        assert_eq!(d.slices[3].upper, 4.0);
        // interior boundaries sit inside the hot bin
        for s in &d.slices[1..3] {
            assert!(s.lower >= 0.0 && s.lower <= 0.1);
        }
    }

    #[test]
    fn points_above_range_do_not_move_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let zs: Vec<f64> = (0..5000).map(|_| rng.gen_range(-5.0..3.0)).collect();
        let h1 = height_histogram(&cloud(&zs), 0.1, (-6.0, 4.0)).unwrap();
        let mut with_outliers = zs.clone();
        with_outliers.extend((0..500).map(|_| rng.gen_range(4.1..20.0)));
        let h2 = height_histogram(&cloud(&with_outliers), 0.1, (-6.0, 4.0)).unwrap();
        assert_eq!(h2.discarded, 500);
        let d1 = derive_local_slices(&h1, 6).unwrap();
        let d2 = derive_local_slices(&h2, 6).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn paper_preset_bins() {
        let set = SliceSet::paper_nuscenes();
        assert_eq!(set.globals.len(), 3);
        assert_eq!(set.locals.len(), 6);
        assert_eq!(set.globals[0], HeightSlice::new(-6.0, 4.0));
        assert_eq!(set.globals[1], HeightSlice::new(-5.0, 3.0));
        assert_eq!(set.globals[2], HeightSlice::new(-4.0, 2.0));
        let expect = [
            (-6.0, -3.0),
            (-3.0, -2.0),
            (-2.0, -1.0),
            (-1.0, 0.0),
            (0.0, 2.0),
            (2.0, 4.0),
        ];
        for (s, (lo, hi)) in set.locals.iter().zip(expect) {
            assert_eq!((s.lower, s.upper), (lo, hi));
        }
        // locals tile the full range
        assert_eq!(set.locals[0].lower, -6.0);
        assert_eq!(set.locals[5].upper, 4.0);
        for w in set.locals.windows(2) {
            assert_eq!(w[0].upper, w[1].lower);
        }
    }

    #[test]
    fn class_stats_single_box_and_absent_class() {
        let grid = BevGridSpec::default();
        let opts = SceneGenOptions::default();
        let (mut scene, _) = crate::scenes::generate_scene(1, &[], &grid, &opts);
        scene.boxes = vec![Box3D {
            center: [3.0, 2.0, -1.4],
            size: [1.0, 1.0, 1.0],
            yaw: 0.0,
            class_id: 0,
        }];
        let stats = class_height_stats(&[scene], &[0, 1], &grid, 0.1).unwrap();
        let cone = &stats[0];
        assert_eq!(cone.count, 1);
        assert!(!cone.absent);
        assert_eq!(cone.center_hist.total, 1);
        // exactly one count in the bin containing -1.4
        let bin = ((-1.4 - grid.h_min) / 0.1).floor() as usize;
        assert_eq!(cone.center_hist.counts[bin], 1);
        let bus = &stats[1];
        assert!(bus.absent);
        assert_eq!(bus.center_hist.total, 0);
    }

    #[test]
    fn class_stats_match_generator_priors() {
        let grid = BevGridSpec::default();
        let profiles = default_profiles();
        let opts = SceneGenOptions {
            rays_per_box: 0,
            ground_points: 0,
            ..SceneGenOptions::default()
        };
        let (scenes, _) = generate_dataset(500, 500, &profiles, &grid, &opts);
        let stats = class_height_stats(&scenes, &[0, 1], &grid, 0.1).unwrap();
        for (profile, stat) in profiles.iter().zip(&stats) {
            let se = profile.height_std / (stat.count as f64).sqrt();
            assert!(
                (stat.center_mean - profile.height_mean).abs() <= 3.0 * se,
                "{}: mean {} vs prior {} (se {se})",
                profile.name,
                stat.center_mean,
                profile.height_mean
            );
        }
    }

    #[test]
    fn class_stats_rejects_unknown_class() {
        let grid = BevGridSpec::default();
        let opts = SceneGenOptions::default();
        let (mut scene, _) = crate::scenes::generate_scene(1, &[], &grid, &opts);
        scene.boxes = vec![Box3D {
            center: [0.0, 6.0, 0.0],
            size: [1.0, 1.0, 1.0],
            yaw: 0.0,
            class_id: 7,
        }];
        assert!(matches!(
            class_height_stats(&[scene], &[0, 1], &grid, 0.1),
            Err(LidarError::UnknownClass(7))
        ));
    }
}
