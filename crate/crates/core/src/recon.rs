//! SART reconstruction with the phantom module's ray tracer, and ROI image metrics.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Vec3, ViewCandidate};
use crate::phantom::{trace_segment, Grid, ProjectionImage};

/// Floor applied to transmissions before taking logs.
pub const TRANSMISSION_FLOOR: f64 = 1e-12;

/// Side length of the cubic SSIM window, in voxels.
pub const SSIM_WINDOW: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl Volume {
    pub fn zeros(grid: Grid) -> Self {
        Volume { grid, values: vec![0.0; grid.len()] }
    }

    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidArgument(format!("{} values for {} voxels", values.len(), grid.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("volume values must be finite".into()));
        }
        Ok(Volume { grid, values })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiMask {
    pub grid: Grid,
    pub mask: Vec<bool>,
}

impl RoiMask {
    pub fn from_fn(grid: Grid, f: impl Fn(Vec3) -> bool) -> Self {
        RoiMask { grid, mask: grid.centers().map(f).collect() }
    }

    /// Voxels whose centres lie within `radius` of `center`.
    pub fn sphere(grid: Grid, center: Vec3, radius: f64) -> Self {
        RoiMask::from_fn(grid, |c| (c - center).norm() <= radius)
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn values<'a>(&'a self, v: &'a Volume) -> impl Iterator<Item = f64> + 'a {
        v.values.iter().zip(&self.mask).filter(|(_, &m)| m).map(|(&x, _)| x)
    }

    /// Inclusive voxel bounding box `[lo, hi]` of the true voxels.
    fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let [nx, ny, _] = self.grid.dims;
        let mut bb: Option<([usize; 3], [usize; 3])> = None;
        for (idx, _) in self.mask.iter().enumerate().filter(|(_, &m)| m) {
            let p = [idx % nx, (idx / nx) % ny, idx / (nx * ny)];
            bb = Some(match bb {
                None => (p, p),
                Some((lo, hi)) => (std::array::from_fn(|a| lo[a].min(p[a])), std::array::from_fn(|a| hi[a].max(p[a]))),
            });
        }
        bb
    }
}

fn check_same(a: &Volume, b: &Volume, roi: &RoiMask) -> Result<()> {
    if a.grid != b.grid || a.grid != roi.grid || roi.mask.len() != a.values.len() || b.values.len() != a.values.len() {
        return Err(Error::InvalidArgument("volumes and ROI must share one geometry".into()));
    }
    if roi.count() == 0 {
        return Err(Error::InvalidArgument("ROI is empty".into()));
    }
    Ok(())
}

/// Reconstruction output with the data residual `‖p − A x‖₂` before the first
/// sweep and after each sweep.
#[derive(Clone, Debug)]
pub struct SartResult {
    pub volume: Volume,
    pub residual_norms: Vec<f64>,
}

struct Ray {
    segments: Vec<(usize, f64)>,
    measured: f64,
}

fn view_rays(grid: &Grid, view: &ViewCandidate, image: &ProjectionImage) -> Vec<Ray> {
    let pu = view.detector.pixels_u;
    (0..image.values.len())
        .into_par_iter()
        .map(|p| {
            let q = view.pixel_center(p % pu, p / pu);
            let mut segments = Vec::new();
            trace_segment(grid, view.source_pos, q, |i, l| segments.push((i, l)));
            Ray { segments, measured: -image.values[p].max(TRANSMISSION_FLOOR).ln() }
        })
        .collect()
}

fn forward(ray: &Ray, x: &[f64]) -> f64 {
    ray.segments.iter().map(|&(i, l)| x[i] * l).sum()
}

/// Pairs each view with its projection, ordered by ascending view id.
fn align<'a>(
    projections: &'a [ProjectionImage],
    views: &'a [ViewCandidate],
) -> Result<Vec<(&'a ViewCandidate, &'a ProjectionImage)>> {
    if projections.len() != views.len() {
        return Err(Error::InvalidArgument(format!("{} projections for {} views", projections.len(), views.len())));
    }
    let mut pairs = views
        .iter()
        .map(|v| {
            let img = projections
                .iter()
                .find(|p| p.view_id == v.id)
                .ok_or_else(|| Error::InvalidArgument(format!("no projection for view {}", v.id)))?;
            if img.pixels_u != v.detector.pixels_u || img.pixels_v != v.detector.pixels_v {
                return Err(Error::InvalidArgument(format!("projection {} does not match its detector", v.id)));
            }
            Ok((v, img))
        })
        .collect::<Result<Vec<_>>>()?;
    pairs.sort_by_key(|(v, _)| v.id);
    if pairs.windows(2).any(|w| w[0].0.id == w[1].0.id) {
        return Err(Error::InvalidArgument("duplicate view ids".into()));
    }
    Ok(pairs)
}

pub fn sart_reconstruct(
    projections: &[ProjectionImage],
    views: &[ViewCandidate],
    grid: &Grid,
    n_iters: usize,
    relaxation: f64,
) -> Result<Volume> {
    sart_reconstruct_traced(projections, views, grid, n_iters, relaxation).map(|r| r.volume)
}

/// SART: each sweep visits views in ascending id and applies one simultaneous
/// update per view, `x_j += λ Σ_i a_ij r_i / Σ_i a_ij` with `r_i` the row-normalized
/// residual of ray `i`; negatives are clamped to zero after each sweep.
pub fn sart_reconstruct_traced(
    projections: &[ProjectionImage],
    views: &[ViewCandidate],
    grid: &Grid,
    n_iters: usize,
    relaxation: f64,
) -> Result<SartResult> {
    grid.validate()?;
    if n_iters == 0 {
        return Err(Error::InvalidArgument("need at least one SART sweep".into()));
    }
    if !(relaxation > 0.0 && relaxation <= 1.0) {
        return Err(Error::InvalidArgument(format!("relaxation must be in (0, 1], got {relaxation}")));
    }
    let pairs = align(projections, views)?;

    // Rays are re-traced per view and sweep to keep memory flat in the view count.
    let residual = |x: &[f64]| -> f64 {
        pairs
            .iter()
            .map(|(v, img)| view_rays(grid, v, img).iter().map(|r| (r.measured - forward(r, x)).powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    };

    let mut x = vec![0.0; grid.len()];
    let mut residual_norms = vec![residual(&x)];
    let mut num = vec![0.0; grid.len()];
    let mut den = vec![0.0; grid.len()];
    for sweep in 0..n_iters {
        for (view, img) in &pairs {
            let view_rays = view_rays(grid, view, img);
            let corrections: Vec<f64> = view_rays
                .par_iter()
                .map(|r| {
                    let len: f64 = r.segments.iter().map(|s| s.1).sum();
                    if len > 0.0 {
                        (r.measured - forward(r, &x)) / len
                    } else {
                        0.0
                    }
                })
                .collect();
            num.iter_mut().for_each(|v| *v = 0.0);
            den.iter_mut().for_each(|v| *v = 0.0);
            for (r, c) in view_rays.iter().zip(&corrections) {
                for &(i, l) in &r.segments {
                    num[i] += l * c;
                    den[i] += l;
                }
            }
            for ((xj, n), d) in x.iter_mut().zip(&num).zip(&den) {
                if *d > 0.0 {
                    *xj += relaxation * n / d;
                }
            }
        }
        x.iter_mut().for_each(|v| *v = v.max(0.0));
        residual_norms.push(residual(&x));
        log::debug!("SART sweep {} residual {:.6e}", sweep + 1, residual_norms.last().unwrap());
    }
    Ok(SartResult { volume: Volume { grid: *grid, values: x }, residual_norms })
}

/// PSNR in dB over the ROI, peak = max |reference| there; `+∞` when identical.
pub fn psnr(reference: &Volume, test: &Volume, roi: &RoiMask) -> Result<f64> {
    check_same(reference, test, roi)?;
    let peak = roi.values(reference).fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::InvalidArgument("reference is zero over the ROI".into()));
    }
    let n = roi.count() as f64;
    let mse = roi.values(reference).zip(roi.values(test)).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean SSIM over all `8³` windows inside the ROI bounding box.
///
/// Statistics are population moments over each window. `L` is the reference
/// range over the ROI; a constant reference falls back to its magnitude (or 1).
pub fn ssim(reference: &Volume, test: &Volume, roi: &RoiMask) -> Result<f64> {
    check_same(reference, test, roi)?;
    let (lo, hi) = roi.bounding_box().expect("non-empty ROI");
    if (0..3).any(|a| hi[a] + 1 - lo[a] < SSIM_WINDOW) {
        return Err(Error::InvalidArgument(format!(
            "ROI bounding box {:?} is smaller than the {SSIM_WINDOW}³ window",
            std::array::from_fn::<usize, 3, _>(|a| hi[a] + 1 - lo[a])
        )));
    }
    let (mn, mx) = roi.values(reference).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let mut range = mx - mn;
    if range == 0.0 {
        range = if mx.abs() > 0.0 { mx.abs() } else { 1.0 };
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);

    let g = reference.grid;
    let w = SSIM_WINDOW;
    let n = (w * w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for k0 in lo[2]..=hi[2] + 1 - w {
        for j0 in lo[1]..=hi[1] + 1 - w {
            for i0 in lo[0]..=hi[0] + 1 - w {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for k in k0..k0 + w {
                    for j in j0..j0 + w {
                        for i in i0..i0 + w {
                            let idx = g.index(i, j, k);
                            let (a, b) = (reference.values[idx], test.values[idx]);
                            sa += a;
                            sb += b;
                            saa += a * a;
                            sbb += b * b;
                            sab += a * b;
                        }
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cnr {
    /// `|mean(roi) − mean(background)| / std(background)`; `+∞` for a constant background.
    pub value: f64,
    pub constant_background: bool,
}

pub fn cnr(volume: &Volume, roi: &RoiMask, background: &RoiMask) -> Result<Cnr> {
    check_same(volume, volume, roi)?;
    check_same(volume, volume, background)?;
    if roi.mask.iter().zip(&background.mask).any(|(a, b)| *a && *b) {
        return Err(Error::InvalidArgument("ROI and background overlap".into()));
    }
    let mean = |m: &RoiMask| m.values(volume).sum::<f64>() / m.count() as f64;
    let (mr, mb) = (mean(roi), mean(background));
    let var = background.values(volume).map(|v| (v - mb).powi(2)).sum::<f64>() / background.count() as f64;
    let contrast = (mr - mb).abs();
    if var == 0.0 {
        log::warn!("CNR background is constant");
        return Ok(Cnr { value: if contrast == 0.0 { 0.0 } else { f64::INFINITY }, constant_background: true });
    }
    Ok(Cnr { value: contrast / var.sqrt(), constant_background: false })
}
