//! Pinhole projection, frustum-point generation, and BEV-grid / height-slice
//! indexing.
//!
//! Conventions used throughout the crate:
//! - the ego frame has z = height in meters;
//! - camera frames are x-right, y-down, z-forward, and depth means
//!   camera-frame z;
//! - BEV cells and height slices are half-open intervals, lower-inclusive,
//!   with the topmost / outermost boundary closed so partitions are exact.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with determinant +1 (max deviation {0:.3e})")]
    InvalidRotation(f64),
    #[error("focal lengths must be positive, got fx={fx}, fy={fy}")]
    InvalidFocal { fx: f64, fy: f64 },
    #[error("invalid frustum spec: need 0 < d_min < d_max and D >= 2")]
    InvalidFrustum,
    #[error("invalid grid bounds")]
    InvalidGrid,
    #[error("invalid slice [{lower}, {upper}) for height range [{h_min}, {h_max}]")]
    InvalidSlice {
        lower: f64,
        upper: f64,
        h_min: f64,
        h_max: f64,
    },
}

/// Pinhole camera: intrinsics in pixels plus an ego-from-camera rigid pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Ego-from-camera rotation, row major.
    pub rotation: [[f64; 3]; 3],
    /// Camera origin in ego coordinates, meters.
    pub translation: [f64; 3],
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
    ) -> Result<Self, GeometryError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidFocal { fx, fy });
        }
        let dev = orthonormality_deviation(&rotation);
        if dev > 1e-9 {
            return Err(GeometryError::InvalidRotation(dev));
        }
        Ok(CameraModel {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        })
    }

    /// Camera with identity extrinsics (camera frame == ego frame).
    pub fn identity(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        CameraModel::new(fx, fy, cx, cy, IDENTITY3, [0.0; 3]).expect("identity pose is valid")
    }

    fn ego_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        // R^T d: R maps camera to ego, so its transpose maps back.
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    pub(crate) fn camera_to_ego(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }
}

pub const IDENTITY3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn orthonormality_deviation(r: &[[f64; 3]; 3]) -> f64 {
    // max |R^T R - I| plus |det - 1|
    let mut dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let mut dot = 0.0;
            for k in 0..3 {
                dot += r[k][i] * r[k][j];
            }
            let expect = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((dot - expect).abs());
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    dev.max((det - 1.0).abs())
}

/// Result of projecting an ego point into a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    /// Pixel coordinates and camera-frame depth in meters.
    Visible { u: f64, v: f64, depth: f64 },
    /// The point sits at or behind the image plane.
    BehindCamera,
}

impl Projection {
    pub fn visible(&self) -> Option<(f64, f64, f64)> {
        match *self {
            Projection::Visible { u, v, depth } => Some((u, v, depth)),
            Projection::BehindCamera => None,
        }
    }
}

/// Project an ego-frame point through a pinhole camera. Depth is the
/// camera-frame z of the point; non-positive depth yields the
/// behind-camera marker rather than an error.
pub fn project_ego_to_image(p: [f64; 3], cam: &CameraModel) -> Projection {
    let c = cam.ego_to_camera(p);
    if c[2] <= 1e-9 {
        return Projection::BehindCamera;
    }
    Projection::Visible {
        u: cam.cx + cam.fx * c[0] / c[2],
        v: cam.cy + cam.fy * c[1] / c[2],
        depth: c[2],
    }
}

/// Feature-map extents plus the discrete depth-bin layout of a frustum.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumSpec {
    pub hf: usize,
    pub wf: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub depth_bins: usize,
}

impl FrustumSpec {
    pub fn new(
        hf: usize,
        wf: usize,
        d_min: f64,
        d_max: f64,
        depth_bins: usize,
    ) -> Result<Self, GeometryError> {
        if !(0.0 < d_min && d_min < d_max) || depth_bins < 2 || hf == 0 || wf == 0 {
            return Err(GeometryError::InvalidFrustum);
        }
        Ok(FrustumSpec {
            hf,
            wf,
            d_min,
            d_max,
            depth_bins,
        })
    }

    /// Center of depth bin `t`: d_min + (t + 0.5) * (d_max - d_min) / D.
    pub fn bin_center(&self, t: usize) -> f64 {
        self.d_min + (t as f64 + 0.5) * (self.d_max - self.d_min) / self.depth_bins as f64
    }

    pub fn bin_width(&self) -> f64 {
        (self.d_max - self.d_min) / self.depth_bins as f64
    }

    pub fn cells(&self) -> usize {
        self.depth_bins * self.hf * self.wf
    }
}

/// Ego-frame locations of every (depth bin, feature pixel) cell, laid out
/// (d, i, j) row-major. Pixel (i, j) unprojects through image point
/// (u, v) = (j, i) to the bin-center depth.
pub fn frustum_points(cam: &CameraModel, fs: &FrustumSpec) -> Vec<[f64; 3]> {
    let mut points = Vec::with_capacity(fs.cells());
    for t in 0..fs.depth_bins {
        let depth = fs.bin_center(t);
        for i in 0..fs.hf {
            let y = (i as f64 - cam.cy) / cam.fy;
            for j in 0..fs.wf {
                let x = (j as f64 - cam.cx) / cam.fx;
                points.push(cam.camera_to_ego([x * depth, y * depth, depth]));
            }
        }
    }
    points
}

/// BEV grid bounds in ego meters, cell counts, and the governing height
/// range. The full height range defaults to [-6, 4].
#[derive(Debug, Clone, PartialEq)]
pub struct BevGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub he: usize,
    pub we: usize,
    pub h_min: f64,
    pub h_max: f64,
}

impl BevGridSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        he: usize,
        we: usize,
        h_min: f64,
        h_max: f64,
    ) -> Result<Self, GeometryError> {
        if !(x_min < x_max && y_min < y_max && h_min < h_max) || he == 0 || we == 0 {
            return Err(GeometryError::InvalidGrid);
        }
        Ok(BevGridSpec {
            x_min,
            x_max,
            y_min,
            y_max,
            he,
            we,
            h_min,
            h_max,
        })
    }

    pub fn cell_width(&self) -> f64 {
        (self.x_max - self.x_min) / self.we as f64
    }

    pub fn cell_height(&self) -> f64 {
        (self.y_max - self.y_min) / self.he as f64
    }

    /// Full-range height slice for this grid.
    pub fn full_slice(&self) -> HeightSlice {
        HeightSlice {
            lower: self.h_min,
            upper: self.h_max,
        }
    }
}

impl Default for BevGridSpec {
    fn default() -> Self {
        BevGridSpec {
            x_min: -24.0,
            x_max: 24.0,
            y_min: -24.0,
            y_max: 24.0,
            he: 16,
            we: 16,
            h_min: -6.0,
            h_max: 4.0,
        }
    }
}

/// Index of the grid cell containing an ego point, or `None` when the point
/// falls outside [x_min, x_max) x [y_min, y_max). Cells are half-open and
/// lower-inclusive.
pub fn bev_cell_index(p: [f64; 3], grid: &BevGridSpec) -> Option<(usize, usize)> {
    let (x, y) = (p[0], p[1]);
    if x < grid.x_min || x >= grid.x_max || y < grid.y_min || y >= grid.y_max {
        return None;
    }
    let ix = ((x - grid.x_min) / grid.cell_width()).floor() as usize;
    let iy = ((y - grid.y_min) / grid.cell_height()).floor() as usize;
    // Floating division may round exactly onto the upper edge.
    Some((ix.min(grid.we - 1), iy.min(grid.he - 1)))
}

/// A height interval [lower, upper) in ego meters. The interval containing
/// the governing grid's h_max is closed above.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightSlice {
    pub lower: f64,
    pub upper: f64,
}

impl HeightSlice {
    pub fn new(lower: f64, upper: f64) -> Self {
        debug_assert!(lower < upper, "degenerate slice [{lower}, {upper})");
        HeightSlice { lower, upper }
    }

    /// Validate the slice against the grid's height range.
    pub fn validate(&self, grid: &BevGridSpec) -> Result<(), GeometryError> {
        if self.lower < self.upper && self.lower >= grid.h_min && self.upper <= grid.h_max {
            Ok(())
        } else {
            Err(GeometryError::InvalidSlice {
                lower: self.lower,
                upper: self.upper,
                h_min: grid.h_min,
                h_max: grid.h_max,
            })
        }
    }
}

/// True iff lower <= z < upper, except that a slice whose upper bound is the
/// grid's h_max also contains z == upper.
pub fn slice_contains(s: &HeightSlice, z: f64, grid: &BevGridSpec) -> bool {
    if z < s.lower {
        return false;
    }
    if z < s.upper {
        return true;
    }
    s.upper == grid.h_max && z == s.upper
}
