//! Self-check suites: geometry round-trips, pooling oracle equivalence, and
//! gradient verification, runnable from the CLI with one report line per
//! check. A fault-injection hook exists so the failure path itself is
//! testable.

use crate::fusion::{
    cross_attention, dual_branch_fuse, se_fuse, AttentionParams, DualBranchParams, SeFusionParams,
};
use crate::geometry::{
    bev_cell_index, frustum_points, project_ego_to_image, slice_contains, BevGridSpec,
    CameraModel, FrustumSpec, HeightSlice,
};
use crate::pooling::{
    lift, lift_backward_features, pool_backward, pool_multislice_fused, pool_slice_reference,
    slices_for_count, DepthValidation, FrustumFeatures,
};
use crate::tensor::{finite_diff_check_multi, max_rel_error, numeric_gradient, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Geometry,
    Pooling,
    Gradients,
    All,
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "geometry" => Ok(Suite::Geometry),
            "pooling" => Ok(Suite::Pooling),
            "gradients" => Ok(Suite::Gradients),
            "all" => Ok(Suite::All),
            other => Err(format!("unknown suite {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn pass(name: &str, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed: true,
            detail,
        }
    }

    fn fail(name: &str, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed: false,
            detail,
        }
    }

    fn bounded(name: &str, worst: f64, bound: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            passed: worst <= bound,
            detail: format!("worst {worst:.3e}, bound {bound:.1e}"),
        }
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let (a, b, c): (f64, f64, f64) = (
        rng.gen_range(-3.0..3.0),
        rng.gen_range(-3.0..3.0),
        rng.gen_range(-3.0..3.0),
    );
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    // R = Rz(a) Ry(b) Rx(c)
    [
        [ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc],
        [sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc],
        [-sb, cb * sc, cb * cc],
    ]
}

pub fn random_camera(rng: &mut ChaCha8Rng) -> CameraModel {
    CameraModel::new(
        rng.gen_range(40.0..300.0),
        rng.gen_range(40.0..300.0),
        rng.gen_range(5.0..50.0),
        rng.gen_range(5.0..50.0),
        random_rotation(rng),
        [
            rng.gen_range(-8.0..8.0),
            rng.gen_range(-8.0..8.0),
            rng.gen_range(-8.0..8.0),
        ],
    )
    .expect("random pose is valid")
}

/// Frustum points of `poses` random cameras must reproject to their source
/// pixel and bin-center depth within `tol`.
pub fn check_frustum_round_trip(poses: usize, tol: f64, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..poses {
        let cam = random_camera(&mut rng);
        let fs = FrustumSpec::new(4, 5, rng.gen_range(0.5..3.0), rng.gen_range(10.0..60.0), 3)
            .expect("valid spec");
        let pts = frustum_points(&cam, &fs);
        for t in 0..fs.depth_bins {
            for i in 0..fs.hf {
                for j in 0..fs.wf {
                    let p = pts[(t * fs.hf + i) * fs.wf + j];
                    match project_ego_to_image(p, &cam).visible() {
                        Some((u, v, d)) => {
                            worst = worst
                                .max((u - j as f64).abs())
                                .max((v - i as f64).abs())
                                .max((d - fs.bin_center(t)).abs());
                        }
                        None => {
                            return CheckResult::fail(
                                "geometry/round-trip",
                                "frustum point projected behind camera".to_string(),
                            )
                        }
                    }
                }
            }
        }
    }
    CheckResult::bounded("geometry/round-trip", worst, tol)
}

fn check_slice_partition(seed: u64) -> CheckResult {
    let grid = BevGridSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..200 {
        // random partition of the height range
        let mut cuts: Vec<f64> = (0..rng.gen_range(1..6))
            .map(|_| rng.gen_range(grid.h_min + 0.1..grid.h_max - 0.1))
            .collect();
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup();
        let mut bounds = vec![grid.h_min];
        bounds.extend(cuts);
        bounds.push(grid.h_max);
        let slices: Vec<HeightSlice> = bounds
            .windows(2)
            .map(|w| HeightSlice::new(w[0], w[1]))
            .collect();
        for _ in 0..50 {
            let z = rng.gen_range(grid.h_min..=grid.h_max);
            let owners = slices
                .iter()
                .filter(|s| slice_contains(s, z, &grid))
                .count();
            if owners != 1 {
                return CheckResult::fail(
                    "geometry/partition",
                    format!("height {z} owned by {owners} slices"),
                );
            }
        }
        for &z in &bounds {
            let owners = slices
                .iter()
                .filter(|s| slice_contains(s, z, &grid))
                .count();
            if owners != 1 {
                return CheckResult::fail(
                    "geometry/partition",
                    format!("boundary {z} owned by {owners} slices"),
                );
            }
        }
    }
    CheckResult::pass(
        "geometry/partition",
        "every height owned by exactly one slice".to_string(),
    )
}

fn check_cell_translation(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..500 {
        let lo = rng.gen_range(-60.0..-10.0);
        let w = rng.gen_range(10.0..90.0);
        let grid = BevGridSpec::new(lo, lo + w, lo, lo + w, 16, 16, -6.0, 4.0).expect("grid");
        let delta = rng.gen_range(-40.0..40.0);
        let shifted =
            BevGridSpec::new(lo + delta, lo + w + delta, lo + delta, lo + w + delta, 16, 16, -6.0, 4.0)
                .expect("grid");
        let p = [rng.gen_range(lo..lo + w), rng.gen_range(lo..lo + w), 0.0];
        let q = [p[0] + delta, p[1] + delta, 0.0];
        if bev_cell_index(p, &grid) != bev_cell_index(q, &shifted) {
            return CheckResult::fail(
                "geometry/translation",
                format!("index changed under shift {delta} at {p:?}"),
            );
        }
    }
    CheckResult::pass(
        "geometry/translation",
        "cell index invariant under joint shifts".to_string(),
    )
}

fn random_frustums(
    rng: &mut ChaCha8Rng,
    cameras: usize,
    channels: usize,
) -> Vec<FrustumFeatures> {
    (0..cameras)
        .map(|_| {
            let (d, h, w) = (3usize, 4usize, 5usize);
            let cells = d * h * w;
            let values: Vec<f64> = (0..channels * cells).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let coords: Vec<[f64; 3]> = (0..cells)
                .map(|_| {
                    [
                        rng.gen_range(-30.0..30.0),
                        rng.gen_range(-30.0..30.0),
                        rng.gen_range(-7.5..5.5),
                    ]
                })
                .collect();
            FrustumFeatures::new(
                Tensor::from_vec(values, &[channels, d, h, w]).expect("values"),
                coords,
            )
            .expect("frustum")
        })
        .collect()
}

/// Fused pooling must equal per-slice reference pooling bitwise across
/// `cases` random configurations. `inject_fault` flips one output value to
/// prove the comparison has teeth.
pub fn check_pool_oracle(cases: usize, seed: u64, inject_fault: bool) -> CheckResult {
    let grid = BevGridSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let cameras = if case % 2 == 0 { 1 } else { 6 };
        let channels = rng.gen_range(1..=4);
        let frustums = random_frustums(&mut rng, cameras, channels);
        let n_slices = [1usize, 3, 6, 9][case % 4];
        let slices: Vec<HeightSlice> = if rng.gen_bool(0.5) {
            slices_for_count(n_slices, &grid)
        } else {
            (0..n_slices)
                .map(|_| {
                    let lo = rng.gen_range(-6.0..3.0);
                    HeightSlice::new(lo, rng.gen_range(lo + 0.2..4.0))
                })
                .collect()
        };
        let fused = pool_multislice_fused(&frustums, &grid, &slices, channels).expect("fused");
        let mut fused_data = fused.stacked.data().to_vec();
        if inject_fault && case == cases / 2 {
            fused_data[0] += 1.0;
        }
        let plane = channels * grid.he * grid.we;
        for (i, s) in slices.iter().enumerate() {
            let reference = pool_slice_reference(&frustums, &grid, s, channels).expect("reference");
            if fused_data[i * plane..(i + 1) * plane] != *reference.data() {
                return CheckResult::fail(
                    "pooling/oracle-equivalence",
                    format!("case {case}, slice {i}: fused differs from reference"),
                );
            }
        }
    }
    CheckResult::pass(
        "pooling/oracle-equivalence",
        format!("{cases} random configs bitwise equal"),
    )
}

/// Disjoint slices tiling the height range must sum to full-range pooling.
pub fn check_pool_partition_additivity(cases: usize, seed: u64) -> CheckResult {
    let grid = BevGridSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let channels = rng.gen_range(1..=3);
        let frustums = random_frustums(&mut rng, rng.gen_range(1..=3), channels);
        let mut cuts: Vec<f64> = (0..rng.gen_range(1..7))
            .map(|_| rng.gen_range(-5.9..3.9))
            .collect();
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup();
        let mut bounds = vec![grid.h_min];
        bounds.extend(cuts);
        bounds.push(grid.h_max);
        let slices: Vec<HeightSlice> = bounds
            .windows(2)
            .map(|w| HeightSlice::new(w[0], w[1]))
            .collect();
        let fused = pool_multislice_fused(&frustums, &grid, &slices, channels).expect("fused");
        let full =
            pool_slice_reference(&frustums, &grid, &grid.full_slice(), channels).expect("full");
        let plane = channels * grid.he * grid.we;
        for i in 0..plane {
            let sum: f64 = (0..slices.len())
                .map(|s| fused.stacked.data()[s * plane + i])
                .sum();
            let expect = full.data()[i];
            worst = worst.max((sum - expect).abs() / expect.abs().max(1e-9));
        }
    }
    CheckResult::bounded("pooling/partition-additivity", worst, 1e-9)
}

fn check_pool_linearity(seed: u64) -> CheckResult {
    let grid = BevGridSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = 2;
    let f1 = &random_frustums(&mut rng, 1, channels)[0];
    let shape = f1.values().shape().to_vec();
    let coords = f1.coords().to_vec();
    let v2: Vec<f64> = (0..f1.values().numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f2 = FrustumFeatures::new(
        Tensor::from_vec(v2.clone(), &shape).expect("values"),
        coords.clone(),
    )
    .expect("frustum");
    let (alpha, beta) = (1.75, -0.6);
    let mixed: Vec<f64> = f1
        .values()
        .data()
        .iter()
        .zip(&v2)
        .map(|(a, b)| alpha * a + beta * b)
        .collect();
    let fm = FrustumFeatures::new(Tensor::from_vec(mixed, &shape).expect("values"), coords)
        .expect("frustum");
    let slices = slices_for_count(9, &grid);
    let pa = pool_multislice_fused(std::slice::from_ref(f1), &grid, &slices, channels).expect("pool");
    let pb = pool_multislice_fused(&[f2], &grid, &slices, channels).expect("pool");
    let pm = pool_multislice_fused(&[fm], &grid, &slices, channels).expect("pool");
    let mut worst: f64 = 0.0;
    for i in 0..pm.stacked.numel() {
        let expect = alpha * pa.stacked.data()[i] + beta * pb.stacked.data()[i];
        worst = worst.max((pm.stacked.data()[i] - expect).abs() / expect.abs().max(1.0));
    }
    CheckResult::bounded("pooling/linearity", worst, 1e-9)
}

/// Finite-difference check through lift then fused pooling, differentiating
/// the image features and backpropagating with the explicit adjoints.
pub fn check_lift_pool_gradient(seeds: u64, tol: f64) -> CheckResult {
    let grid = BevGridSpec::default();
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (c, nd, hf, wf) = (2usize, 3usize, 2usize, 3usize);
        let spatial = hf * wf;
        let feat = Tensor::from_vec(
            (0..c * spatial).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[c, hf, wf],
        )
        .expect("feat");
        let mut depth = vec![0.0; nd * spatial];
        for s in 0..spatial {
            let col: Vec<f64> = (0..nd).map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = col.iter().sum();
            for (d, v) in col.iter().enumerate() {
                depth[d * spatial + s] = v / total;
            }
        }
        let depth = Tensor::from_vec(depth, &[nd, hf, wf]).expect("depth");
        let coords: Vec<[f64; 3]> = (0..nd * spatial)
            .map(|_| {
                [
                    rng.gen_range(-22.0..22.0),
                    rng.gen_range(-22.0..22.0),
                    rng.gen_range(-6.5..4.5),
                ]
            })
            .collect();
        let slices = vec![HeightSlice::new(-6.0, -0.5), HeightSlice::new(-2.0, 4.0)];
        let weights: Vec<f64> = (0..slices.len() * c * grid.he * grid.we)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();

        let grad_stack = Tensor::from_vec(weights.clone(), &[slices.len(), c, grid.he, grid.we])
            .expect("grad stack");
        let v = lift(&feat, &depth, DepthValidation::Strict).expect("lift");
        let fr = FrustumFeatures::new(v, coords.clone()).expect("frustum");
        let grad_v = pool_backward(&grad_stack, &[fr], &grid, &slices, c).expect("backward");
        let analytic = lift_backward_features(&grad_v[0], &depth);

        let depth_ref = depth.clone();
        let coords_ref = coords.clone();
        let weights_ref = weights.clone();
        let grid_ref = grid.clone();
        let slices_ref = slices.clone();
        let numeric = numeric_gradient(
            move |_tape, xs| {
                let v = lift(&xs[0], &depth_ref, DepthValidation::Strict)
                    .expect("lift in probe");
                let fr = FrustumFeatures::new(v, coords_ref.clone()).expect("frustum");
                let pooled = pool_multislice_fused(&[fr], &grid_ref, &slices_ref, c)
                    .expect("pool in probe");
                let loss: f64 = pooled
                    .stacked
                    .data()
                    .iter()
                    .zip(&weights_ref)
                    .map(|(a, b)| a * b)
                    .sum();
                Ok(Tensor::scalar(loss))
            },
            std::slice::from_ref(&feat),
            1e-5,
        )
        .expect("numeric gradient");
        worst = worst.max(max_rel_error(analytic.data(), &numeric[0]));
    }
    CheckResult::bounded("gradients/lift-pool", worst, tol)
}

pub fn check_se_gradient(seeds: u64, tol: f64) -> CheckResult {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (j, c) = (2usize, 3usize);
        let p = SeFusionParams::init(j, c, &mut rng);
        let stack = Tensor::from_vec(
            (0..j * c * 9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[j, c, 3, 3],
        )
        .expect("stack");
        let err = finite_diff_check_multi(
            |tape, xs| {
                let params = SeFusionParams {
                    w1: xs[1].clone(),
                    b1: p.b1.clone(),
                    w_gate: xs[2].clone(),
                    b_gate: p.b_gate.clone(),
                    w2: xs[3].clone(),
                    b2: p.b2.clone(),
                };
                let out = se_fuse(tape, &xs[0], &params).expect("se fuse");
                let sq = tape.mul(&out, &out)?;
                Ok(tape.sum(&sq))
            },
            &[stack, p.w1.clone(), p.w_gate.clone(), p.w2.clone()],
            1e-5,
        )
        .expect("fd check");
        worst = worst.max(err);
    }
    CheckResult::bounded("gradients/se-block", worst, tol)
}

pub fn check_attention_gradient(seeds: u64, tol: f64) -> CheckResult {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let c = 3usize;
        let p = AttentionParams::init(c, &mut rng);
        let q = Tensor::from_vec(
            (0..c * 9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[c, 3, 3],
        )
        .expect("q");
        let kv = Tensor::from_vec(
            (0..c * 9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[c, 3, 3],
        )
        .expect("kv");
        let err = finite_diff_check_multi(
            |tape, xs| {
                let params = AttentionParams {
                    wq: xs[2].clone(),
                    wv: xs[3].clone(),
                    ..p.clone()
                };
                let out = cross_attention(tape, &xs[0], &xs[1], &params).expect("attention");
                let sq = tape.mul(&out, &out)?;
                Ok(tape.sum(&sq))
            },
            &[q, kv, p.wq.clone(), p.wv.clone()],
            1e-5,
        )
        .expect("fd check");
        worst = worst.max(err);
    }
    CheckResult::bounded("gradients/cross-attention", worst, tol)
}

pub fn check_dual_branch_gradient(seeds: u64, tol: f64) -> CheckResult {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let c = 2usize;
        let p = DualBranchParams::init(c, &mut rng);
        let a = Tensor::from_vec(
            (0..c * 9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[c, 3, 3],
        )
        .expect("a");
        let b = Tensor::from_vec(
            (0..c * 9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[c, 3, 3],
        )
        .expect("b");
        let err = finite_diff_check_multi(
            |tape, xs| {
                let params = DualBranchParams {
                    g2l: AttentionParams {
                        wk: xs[2].clone(),
                        ..p.g2l.clone()
                    },
                    l2g: AttentionParams {
                        wo: xs[3].clone(),
                        ..p.l2g.clone()
                    },
                };
                let out = dual_branch_fuse(tape, &xs[0], &xs[1], &params).expect("dual branch");
                let sq = tape.mul(&out, &out)?;
                Ok(tape.sum(&sq))
            },
            &[a, b, p.g2l.wk.clone(), p.l2g.wo.clone()],
            1e-5,
        )
        .expect("fd check");
        worst = worst.max(err);
    }
    CheckResult::bounded("gradients/dual-branch", worst, tol)
}

pub fn check_head_gradient(seeds: u64, tol: f64) -> CheckResult {
    use crate::detector::{head_forward, DetectionHead};
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let (c, k) = (3usize, 2usize);
        let head = DetectionHead::init(c, k, &mut rng);
        let bev = Tensor::from_vec(
            (0..c * 16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[c, 4, 4],
        )
        .expect("bev");
        let err = finite_diff_check_multi(
            |tape, xs| {
                let h = DetectionHead {
                    w1: xs[1].clone(),
                    b1: head.b1.clone(),
                    w2: xs[2].clone(),
                    b2: head.b2.clone(),
                };
                let logits = head_forward(tape, &xs[0], &h)?;
                let sq = tape.mul(&logits, &logits)?;
                Ok(tape.sum(&sq))
            },
            &[bev, head.w1.clone(), head.w2.clone()],
            1e-5,
        )
        .expect("fd check");
        worst = worst.max(err);
    }
    CheckResult::bounded("gradients/detection-head", worst, tol)
}

/// A corrupted gradient rule must be flagged; this guards the checker
/// itself.
pub fn check_negative_control() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let x = Tensor::from_vec((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[6])
        .expect("x");
    let f = |tape: &mut Tape, xs: &[Tensor]| {
        let s = tape.sigmoid(&xs[0]);
        Ok(tape.sum(&s))
    };
    let mut tape = Tape::new();
    let leaf = tape.leaf(&x);
    let loss = f(&mut tape, std::slice::from_ref(&leaf)).expect("forward");
    let grads = tape.backward(&loss).expect("backward");
    let mut corrupted = grads.grad(&leaf).expect("grad").data().to_vec();
    for g in &mut corrupted {
        *g *= 1.1;
    }
    let numeric = numeric_gradient(f, std::slice::from_ref(&x), 1e-5).expect("numeric");
    let err = max_rel_error(&corrupted, &numeric[0]);
    if err > 1e-2 {
        CheckResult::pass(
            "gradients/negative-control",
            format!("corrupted rule detected (error {err:.3e})"),
        )
    } else {
        CheckResult::fail(
            "gradients/negative-control",
            format!("corrupted rule slipped through (error {err:.3e})"),
        )
    }
}

/// Run a suite. `inject_fault` corrupts one pooling comparison so callers
/// can exercise the nonzero exit path.
pub fn run_suite(suite: Suite, inject_fault: bool) -> Vec<CheckResult> {
    let mut results = Vec::new();
    if matches!(suite, Suite::Geometry | Suite::All) {
        results.push(check_frustum_round_trip(1000, 1e-9, 1));
        results.push(check_slice_partition(2));
        results.push(check_cell_translation(3));
    }
    if matches!(suite, Suite::Pooling | Suite::All) {
        results.push(check_pool_oracle(40, 4, inject_fault));
        results.push(check_pool_partition_additivity(20, 5));
        results.push(check_pool_linearity(6));
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        results.push(check_lift_pool_gradient(5, 1e-4));
        results.push(check_se_gradient(5, 1e-4));
        results.push(check_attention_gradient(5, 1e-4));
        results.push(check_dual_branch_gradient(3, 1e-4));
        results.push(check_head_gradient(5, 1e-4));
        results.push(check_negative_control());
    }
    results
}
