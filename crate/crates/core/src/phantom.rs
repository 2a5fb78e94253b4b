//! Voxel phantoms, exact ray traversal and monochromatic Beer-Lambert projection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Vec3, ViewCandidate, Voi};

/// Regular voxel grid. `origin_m` is the centre of voxel `(0, 0, 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub voxel_size_m: f64,
    pub origin_m: Vec3,
}

impl Grid {
    pub fn new(dims: [usize; 3], voxel_size_m: f64, origin_m: Vec3) -> Result<Self> {
        let g = Grid { dims, voxel_size_m, origin_m };
        g.validate()?;
        Ok(g)
    }

    /// Grid of `dims` voxels centred on the world origin.
    pub fn centered(dims: [usize; 3], voxel_size_m: f64) -> Result<Self> {
        let half = |n: usize| -0.5 * (n as f64 - 1.0) * voxel_size_m;
        Grid::new(dims, voxel_size_m, Vec3::new(half(dims[0]), half(dims[1]), half(dims[2])))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size_m > 0.0) || !self.voxel_size_m.is_finite() {
            return Err(Error::InvalidArgument(format!("voxel size must be positive, got {}", self.voxel_size_m)));
        }
        if self.dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("grid dims must be ≥ 1, got {:?}", self.dims)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin_m + Vec3::new(i as f64, j as f64, k as f64) * self.voxel_size_m
    }

    /// Voxel centres in storage order (x fastest).
    pub fn centers(&self) -> impl Iterator<Item = Vec3> + '_ {
        let [nx, ny, nz] = self.dims;
        (0..nz).flat_map(move |k| (0..ny).flat_map(move |j| (0..nx).map(move |i| self.voxel_center(i, j, k))))
    }

    pub fn min_corner(&self) -> Vec3 {
        self.origin_m - Vec3::new(0.5, 0.5, 0.5) * self.voxel_size_m
    }

    pub fn max_corner(&self) -> Vec3 {
        let [nx, ny, nz] = self.dims;
        self.min_corner() + Vec3::new(nx as f64, ny as f64, nz as f64) * self.voxel_size_m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeSpec {
    Box {
        center: Vec3,
        half_extents: Vec3,
        mu: f64,
    },
    Sphere {
        center: Vec3,
        radius: f64,
        mu: f64,
    },
    /// `height` is the full length along `axis`.
    Cylinder {
        center: Vec3,
        axis: Vec3,
        radius: f64,
        height: f64,
        mu: f64,
    },
}

impl ShapeSpec {
    pub fn mu(&self) -> f64 {
        match *self {
            ShapeSpec::Box { mu, .. } | ShapeSpec::Sphere { mu, .. } | ShapeSpec::Cylinder { mu, .. } => mu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ShapeSpec::Box { half_extents: h, .. } => h.x > 0.0 && h.y > 0.0 && h.z > 0.0,
            ShapeSpec::Sphere { radius, .. } => radius > 0.0,
            ShapeSpec::Cylinder { axis, radius, height, .. } => radius > 0.0 && height > 0.0 && axis.norm() > 0.0,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!("shape needs positive extents: {self:?}")));
        }
        if !(self.mu() >= 0.0) || !self.mu().is_finite() {
            return Err(Error::InvalidArgument(format!("attenuation must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }

    pub fn contains(&self, p: Vec3) -> bool {
        match *self {
            ShapeSpec::Box { center, half_extents: h, .. } => {
                let d = p - center;
                d.x.abs() <= h.x && d.y.abs() <= h.y && d.z.abs() <= h.z
            }
            ShapeSpec::Sphere { center, radius, .. } => (p - center).norm() <= radius,
            ShapeSpec::Cylinder { center, axis, radius, height, .. } => {
                let a = axis * (1.0 / axis.norm());
                let d = p - center;
                let along = d.dot(a);
                along.abs() <= 0.5 * height && (d - a * along).norm() <= radius
            }
        }
    }
}

/// Linear attenuation coefficients (1/m) on a voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub grid: Grid,
    pub mu: Vec<f64>,
}

impl Phantom {
    pub fn from_values(grid: Grid, mu: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if mu.len() != grid.len() {
            return Err(Error::InvalidArgument(format!("expected {} values, got {}", grid.len(), mu.len())));
        }
        if mu.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(Error::InvalidArgument("attenuation values must be finite and ≥ 0".into()));
        }
        Ok(Phantom { grid, mu })
    }
}

/// Rasterizes shapes at voxel centres; where shapes overlap the last one wins.
pub fn build_phantom(dims: [usize; 3], voxel_size_m: f64, origin_m: Vec3, shapes: &[ShapeSpec]) -> Result<Phantom> {
    let grid = Grid::new(dims, voxel_size_m, origin_m)?;
    for s in shapes {
        s.validate()?;
    }
    let mu = grid.centers().map(|c| shapes.iter().rev().find(|s| s.contains(c)).map_or(0.0, ShapeSpec::mu)).collect();
    Ok(Phantom { grid, mu })
}

/// Walks the segment `p0 → p1` through `grid`, calling `visit(voxel, length_m)` for
/// every voxel with a non-empty intersection, in order from `p0`.
///
/// Each step ends at the nearest grid plane; the voxel of a step is taken from its
/// midpoint so plane-coincident rays do not need special cases.
pub fn trace_segment(grid: &Grid, p0: Vec3, p1: Vec3, mut visit: impl FnMut(usize, f64)) {
    let d = p1 - p0;
    let len = d.norm();
    if !(len > 0.0) {
        return;
    }
    let lo = grid.min_corner().to_array();
    let hi = grid.max_corner().to_array();
    let o = p0.to_array();
    let dv = d.to_array();
    let vs = grid.voxel_size_m;

    let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
    for a in 0..3 {
        if dv[a] == 0.0 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return;
            }
        } else {
            let ta = (lo[a] - o[a]) / dv[a];
            let tb = (hi[a] - o[a]) / dv[a];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if !(t0 < t1) {
        return;
    }

    let dims = grid.dims;
    let inv: [f64; 3] = std::array::from_fn(|a| if dv[a] == 0.0 { f64::INFINITY } else { 1.0 / dv[a] });
    let cell = |a: usize, t: f64| -> usize {
        let x = ((o[a] + t * dv[a] - lo[a]) / vs).floor();
        x.clamp(0.0, (dims[a] - 1) as f64) as usize
    };

    // Parameter of the first grid plane along axis `a` strictly beyond `t`.
    let next_plane = |a: usize, t: f64| -> f64 {
        if dv[a] == 0.0 {
            return f64::INFINITY;
        }
        let x = (o[a] + t * dv[a] - lo[a]) / vs;
        let mut plane = if dv[a] > 0.0 { x.floor() + 1.0 } else { x.ceil() - 1.0 };
        let step = dv[a].signum();
        let mut tp = (lo[a] + plane * vs - o[a]) * inv[a];
        while tp <= t {
            plane += step;
            tp = (lo[a] + plane * vs - o[a]) * inv[a];
        }
        tp
    };

    let mut t = t0;
    while t < t1 {
        let end = (0..3).map(|a| next_plane(a, t)).fold(t1, f64::min);
        let m = 0.5 * (t + end);
        let seg = (end - t) * len;
        if seg > 0.0 {
            visit(grid.index(cell(0, m), cell(1, m), cell(2, m)), seg);
        }
        t = end;
    }
}

/// Optical depth `∫ mu dl` along the segment `p0 → p1`.
pub fn line_integral(phantom: &Phantom, p0: Vec3, p1: Vec3) -> f64 {
    let mut acc = 0.0;
    trace_segment(&phantom.grid, p0, p1, |i, l| acc += phantom.mu[i] * l);
    acc
}

/// Detector transmission image `I / I0`, row-major with `u` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionImage {
    pub view_id: usize,
    pub pixels_u: usize,
    pub pixels_v: usize,
    pub values: Vec<f64>,
}

impl ProjectionImage {
    pub fn get(&self, iu: usize, iv: usize) -> f64 {
        self.values[iv * self.pixels_u + iu]
    }
}

pub fn simulate_projection(phantom: &Phantom, view: &ViewCandidate) -> Result<ProjectionImage> {
    view.validate()?;
    let (pu, pv) = (view.detector.pixels_u, view.detector.pixels_v);
    let values = (0..pu * pv)
        .into_par_iter()
        .map(|p| {
            let q = view.pixel_center(p % pu, p / pu);
            (-line_integral(phantom, view.source_pos, q)).exp()
        })
        .collect();
    Ok(ProjectionImage { view_id: view.id, pixels_u: pu, pixels_v: pv, values })
}

/// Inclusive pixel rectangle `[u0, u1] × [v0, v1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub u0: usize,
    pub u1: usize,
    pub v0: usize,
    pub v1: usize,
}

impl PixelRect {
    pub fn n_pixels(&self) -> usize {
        (self.u1 + 1 - self.u0) * (self.v1 + 1 - self.v0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.u0 + self.u1) as f64, 0.5 * (self.v0 + self.v1) as f64)
    }
}

/// Bounding pixel box of the projected VOI sphere (its six axis-extreme points).
pub fn project_voi_roi(view: &ViewCandidate, voi: &Voi) -> Result<PixelRect> {
    let det = &view.detector;
    let to_pixel = |a: f64, b: f64| -> (usize, usize) {
        let iu = ((a + 0.5 * det.width_m) / det.pixel_width()).floor();
        let iv = ((b + 0.5 * det.height_m) / det.pixel_height()).floor();
        (iu.clamp(0.0, (det.pixels_u - 1) as f64) as usize, iv.clamp(0.0, (det.pixels_v - 1) as f64) as usize)
    };
    let (a, b) = view.project_to_plane(voi.center).ok_or_else(|| Error::RoiNotVisible {
        view: view.id,
        reason: format!("VOI {} lies behind the source", voi.id),
    })?;
    if a.abs() > 0.5 * det.width_m || b.abs() > 0.5 * det.height_m {
        return Err(Error::RoiNotVisible {
            view: view.id,
            reason: format!("VOI {} projects off the detector", voi.id),
        });
    }
    let (cu, cv) = to_pixel(a, b);
    let mut rect = PixelRect { u0: cu, u1: cu, v0: cv, v1: cv };
    let r = voi.roi_radius_m;
    for off in [
        Vec3::new(r, 0.0, 0.0),
        Vec3::new(-r, 0.0, 0.0),
        Vec3::new(0.0, r, 0.0),
        Vec3::new(0.0, -r, 0.0),
        Vec3::new(0.0, 0.0, r),
        Vec3::new(0.0, 0.0, -r),
    ] {
        if let Some((a, b)) = view.project_to_plane(voi.center + off) {
            let (iu, iv) = to_pixel(a, b);
            rect.u0 = rect.u0.min(iu);
            rect.u1 = rect.u1.max(iu);
            rect.v0 = rect.v0.min(iv);
            rect.v1 = rect.v1.max(iv);
        }
    }
    Ok(rect)
}

/// Absorbed fraction `1 − mean(transmission)` over the ROI.
pub fn absorption_metric(projection: &ProjectionImage, roi: &PixelRect) -> Result<f64> {
    absorption_metric_union(projection, std::slice::from_ref(roi))
}

/// [`absorption_metric`] over the union of several ROIs (each pixel counted once).
pub fn absorption_metric_union(projection: &ProjectionImage, rois: &[PixelRect]) -> Result<f64> {
    if rois.is_empty() {
        return Err(Error::InvalidArgument("empty ROI".into()));
    }
    let mut mask = vec![false; projection.values.len()];
    for r in rois {
        if r.u0 > r.u1 || r.v0 > r.v1 || r.u1 >= projection.pixels_u || r.v1 >= projection.pixels_v {
            return Err(Error::InvalidArgument(format!("ROI {r:?} is empty or outside the image")));
        }
        for iv in r.v0..=r.v1 {
            for iu in r.u0..=r.u1 {
                mask[iv * projection.pixels_u + iu] = true;
            }
        }
    }
    let (sum, n) =
        projection.values.iter().zip(&mask).filter(|(_, &m)| m).fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    Ok((1.0 - sum / n as f64).clamp(0.0, 1.0))
}
