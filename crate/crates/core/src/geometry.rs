//! Vector math, half-sphere sampling, candidate trajectories and detector hit tests.
//!
//! Conventions: the world origin is the scan isocenter, `z` is up, and a tilted
//! circle is the horizontal (`xy`) circle rotated about the world `x` axis.
//! A detector is a closed rectangle centred on `detector_center`, spanned by
//! `detector_u_axis` and `v = normal × u`, with its normal pointing at the source.

use std::fmt::Write as _;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Golden angle `π (3 − √5)` in radians.
const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(self.y * o.z - self.z * o.y, self.z * o.x - self.x * o.z, self.x * o.y - self.y * o.x)
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    /// Rotation about the world x axis by `angle` radians (right-handed).
    pub fn rotate_x(self, angle: f64) -> Vec3 {
        let (s, c) = angle.sin_cos();
        Vec3::new(self.x, c * self.y - s * self.z, s * self.y + c * self.z)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// A vector of unit Euclidean norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec3", into = "Vec3")]
pub struct UnitVec(Vec3);

impl UnitVec {
    /// Normalizes `v`; fails on (near) zero vectors.
    pub fn new(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || n < 1e-300 {
            return Err(Error::DegenerateGeometry(format!("cannot normalize {v:?}")));
        }
        Ok(UnitVec(v * (1.0 / n)))
    }

    pub const X: UnitVec = UnitVec(Vec3::new(1.0, 0.0, 0.0));
    pub const Y: UnitVec = UnitVec(Vec3::new(0.0, 1.0, 0.0));
    pub const Z: UnitVec = UnitVec(Vec3::new(0.0, 0.0, 1.0));

    pub fn x(self) -> f64 {
        self.0.x
    }
    pub fn y(self) -> f64 {
        self.0.y
    }
    pub fn z(self) -> f64 {
        self.0.z
    }

    pub fn vec(self) -> Vec3 {
        self.0
    }

    pub fn dot(self, o: UnitVec) -> f64 {
        self.0.dot(o.0)
    }
}

impl Neg for UnitVec {
    type Output = UnitVec;
    fn neg(self) -> UnitVec {
        UnitVec(-self.0)
    }
}

impl TryFrom<Vec3> for UnitVec {
    type Error = String;
    fn try_from(v: Vec3) -> std::result::Result<Self, String> {
        let n = v.norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(format!("vector {v:?} is not unit length (norm {n})"));
        }
        UnitVec::new(v).map_err(|e| e.to_string())
    }
}

impl From<UnitVec> for Vec3 {
    fn from(u: UnitVec) -> Vec3 {
        u.0
    }
}

/// Discretized upper half of the unit sphere for one VOI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereSampling {
    pub voi_id: String,
    pub points: Vec<UnitVec>,
}

impl SphereSampling {
    pub fn count(&self) -> usize {
        self.points.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub width_m: f64,
    pub height_m: f64,
    pub pixels_u: usize,
    pub pixels_v: usize,
}

impl DetectorSpec {
    pub fn new(width_m: f64, height_m: f64, pixels_u: usize, pixels_v: usize) -> Result<Self> {
        let d = DetectorSpec { width_m, height_m, pixels_u, pixels_v };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_m > 0.0 && self.height_m > 0.0) || !self.width_m.is_finite() || !self.height_m.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "detector extent must be positive, got {} x {} m",
                self.width_m, self.height_m
            )));
        }
        if self.pixels_u == 0 || self.pixels_v == 0 {
            return Err(Error::InvalidArgument("detector needs at least one pixel per axis".into()));
        }
        Ok(())
    }

    pub fn pixel_width(&self) -> f64 {
        self.width_m / self.pixels_u as f64
    }

    pub fn pixel_height(&self) -> f64 {
        self.height_m / self.pixels_v as f64
    }

    pub fn n_pixels(&self) -> usize {
        self.pixels_u * self.pixels_v
    }
}

/// Membership of a candidate in a generator circle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircleTag {
    pub id: usize,
    pub tilt_deg: f64,
}

/// One realizable source/detector pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewCandidate {
    pub id: usize,
    pub source_pos: Vec3,
    pub detector_center: Vec3,
    pub detector_normal: UnitVec,
    pub detector_u_axis: UnitVec,
    pub detector: DetectorSpec,
    #[serde(default)]
    pub circle: Option<CircleTag>,
}

impl ViewCandidate {
    /// Builds a pose with the detector facing the source at `source_pos`.
    pub fn facing(
        id: usize,
        source_pos: Vec3,
        detector_center: Vec3,
        u_hint: Vec3,
        detector: DetectorSpec,
    ) -> Result<Self> {
        let normal = UnitVec::new(source_pos - detector_center)?;
        // Gram-Schmidt the hint against the normal.
        let n = normal.vec();
        let u = UnitVec::new(u_hint - n * u_hint.dot(n))?;
        let view = ViewCandidate {
            id,
            source_pos,
            detector_center,
            detector_normal: normal,
            detector_u_axis: u,
            detector,
            circle: None,
        };
        view.validate()?;
        Ok(view)
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        if self.detector_normal.dot(self.detector_u_axis).abs() > 1e-9 {
            return Err(Error::DegenerateGeometry(format!("view {}: detector axes not orthogonal", self.id)));
        }
        if (self.source_pos - self.detector_center).norm() == 0.0 {
            return Err(Error::DegenerateGeometry(format!("view {}: source on detector center", self.id)));
        }
        Ok(())
    }

    pub fn detector_v_axis(&self) -> Vec3 {
        self.detector_normal.vec().cross(self.detector_u_axis.vec())
    }

    /// World position of the centre of pixel `(iu, iv)`.
    pub fn pixel_center(&self, iu: usize, iv: usize) -> Vec3 {
        let d = &self.detector;
        let a = (iu as f64 + 0.5) * d.pixel_width() - 0.5 * d.width_m;
        let b = (iv as f64 + 0.5) * d.pixel_height() - 0.5 * d.height_m;
        self.detector_center + self.detector_u_axis.vec() * a + self.detector_v_axis() * b
    }

    /// Intersects the ray source → `point` with the detector plane and returns the
    /// in-plane `(u, v)` coordinates relative to the detector centre, for `t > 0`.
    pub fn project_to_plane(&self, point: Vec3) -> Option<(f64, f64)> {
        let n = self.detector_normal.vec();
        let dir = point - self.source_pos;
        let denom = dir.dot(n);
        if denom.abs() < 1e-300 {
            return None;
        }
        let t = (self.detector_center - self.source_pos).dot(n) / denom;
        if !(t > 0.0) || !t.is_finite() {
            return None;
        }
        let local = self.source_pos + dir * t - self.detector_center;
        Some((local.dot(self.detector_u_axis.vec()), local.dot(self.detector_v_axis())))
    }
}

/// Voxel of interest with the radius of its reconstruction / projection ROI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Voi {
    pub id: String,
    pub center: Vec3,
    pub roi_radius_m: f64,
}

impl Voi {
    pub fn new(id: impl Into<String>, center: Vec3, roi_radius_m: f64) -> Result<Self> {
        if !(roi_radius_m > 0.0) {
            return Err(Error::InvalidArgument(format!("roi radius must be positive, got {roi_radius_m}")));
        }
        Ok(Voi { id: id.into(), center, roi_radius_m })
    }
}

/// Full-sphere Fibonacci lattice with `n` points, `z_i = 1 − (2i+1)/n`.
fn fibonacci_sphere(n: usize) -> impl Iterator<Item = Vec3> {
    (0..n).map(move |i| {
        let z = 1.0 - (2 * i + 1) as f64 / n as f64;
        let r = (1.0 - z * z).max(0.0).sqrt();
        let (s, c) = (i as f64 * GOLDEN_ANGLE).sin_cos();
        Vec3::new(r * c, r * s, z)
    })
}

/// `n` near-uniform points on the upper half sphere (`z ≥ 0`).
pub fn fibonacci_half_sphere(n: usize, voi_id: &str) -> Result<SphereSampling> {
    if n == 0 {
        return Err(Error::InvalidArgument("sphere sampling needs n ≥ 1".into()));
    }
    let mut nominal = 2 * n;
    loop {
        let kept: Vec<Vec3> = fibonacci_sphere(nominal).filter(|p| p.z >= 0.0).collect();
        match kept.len().cmp(&n) {
            std::cmp::Ordering::Equal => {
                let points = kept.into_iter().map(UnitVec::new).collect::<Result<Vec<_>>>()?;
                return Ok(SphereSampling { voi_id: voi_id.to_string(), points });
            }
            std::cmp::Ordering::Less => nominal += 1,
            std::cmp::Ordering::Greater => nominal -= 1,
        }
    }
}

fn check_distances(sod_m: f64, sdd_m: f64) -> Result<()> {
    if !(sod_m > 0.0 && sod_m < sdd_m) || !sdd_m.is_finite() {
        return Err(Error::InvalidArgument(format!("need 0 < sod < sdd, got sod = {sod_m} m, sdd = {sdd_m} m")));
    }
    Ok(())
}

/// Circles of equiangular views, one per tilt about the x axis.
///
/// Tilts are spread evenly over `tilt_range_deg` (inclusive). A full 360° circle
/// uses a step of `360 / n`; a partial arc includes both end points.
pub fn tilted_circle_candidates(
    n_tilts: usize,
    tilt_range_deg: [f64; 2],
    n_per_circle: usize,
    arc_deg: f64,
    sdd_m: f64,
    sod_m: f64,
    detector: DetectorSpec,
) -> Result<Vec<ViewCandidate>> {
    if n_tilts == 0 || n_per_circle == 0 {
        return Err(Error::InvalidArgument("need at least one tilt and one view per circle".into()));
    }
    if !(arc_deg > 0.0 && arc_deg <= 360.0) {
        return Err(Error::InvalidArgument(format!("arc must be in (0, 360], got {arc_deg}")));
    }
    if !(tilt_range_deg[0] <= tilt_range_deg[1]) {
        return Err(Error::InvalidArgument(format!("bad tilt range {tilt_range_deg:?}")));
    }
    check_distances(sod_m, sdd_m)?;
    detector.validate()?;

    let step_deg = if arc_deg >= 360.0 || n_per_circle == 1 {
        arc_deg / n_per_circle as f64
    } else {
        arc_deg / (n_per_circle - 1) as f64
    };
    let mut out = Vec::with_capacity(n_tilts * n_per_circle);
    for t in 0..n_tilts {
        let tilt_deg = if n_tilts == 1 {
            tilt_range_deg[0]
        } else {
            tilt_range_deg[0] + (tilt_range_deg[1] - tilt_range_deg[0]) * t as f64 / (n_tilts - 1) as f64
        };
        let tilt = tilt_deg.to_radians();
        for j in 0..n_per_circle {
            let (s, c) = (j as f64 * step_deg).to_radians().sin_cos();
            let dir = Vec3::new(c, s, 0.0).rotate_x(tilt);
            let tangent = Vec3::new(-s, c, 0.0).rotate_x(tilt);
            let mut view = ViewCandidate::facing(out.len(), dir * sod_m, dir * -(sdd_m - sod_m), tangent, detector)?;
            view.circle = Some(CircleTag { id: t, tilt_deg });
            out.push(view);
        }
    }
    Ok(out)
}

/// Sources on a full-sphere Fibonacci lattice of radius `sod_m`.
pub fn full_sphere_candidates(n: usize, sod_m: f64, sdd_m: f64, detector: DetectorSpec) -> Result<Vec<ViewCandidate>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need n ≥ 1 candidates".into()));
    }
    check_distances(sod_m, sdd_m)?;
    detector.validate()?;
    fibonacci_sphere(n)
        .enumerate()
        .map(|(id, p)| {
            let p = UnitVec::new(p)?.vec();
            let mut hint = Vec3::new(0.0, 0.0, 1.0).cross(p);
            if hint.norm() < 1e-6 {
                hint = Vec3::new(0.0, 1.0, 0.0);
            }
            ViewCandidate::facing(id, p * sod_m, p * -(sdd_m - sod_m), hint, detector)
        })
        .collect()
}

/// Unit direction from the source to the VOI centre.
pub fn view_direction(view: &ViewCandidate, voi: &Voi) -> Result<UnitVec> {
    let diff = voi.center - view.source_pos;
    if diff.norm() < 1e-12 {
        return Err(Error::DegenerateGeometry(format!("VOI {} coincides with source of view {}", voi.id, view.id)));
    }
    UnitVec::new(diff)
}

/// Whether the ray from the source through `point` lands on the detector.
pub fn detector_hit(view: &ViewCandidate, point: Vec3) -> bool {
    let Some((a, b)) = view.project_to_plane(point) else {
        return false;
    };
    // Closed rectangle, with a rounding allowance for analytically placed edge points.
    let half_w = 0.5 * view.detector.width_m * (1.0 + 1e-12);
    let half_h = 0.5 * view.detector.height_m * (1.0 + 1e-12);
    a.abs() <= half_w && b.abs() <= half_h
}

/// Candidate table: id, source xyz, detector-centre xyz, normal xyz, u-axis xyz.
pub fn candidates_to_csv(views: &[ViewCandidate]) -> String {
    let mut s = String::from(
        "id,source_x,source_y,source_z,center_x,center_y,center_z,normal_x,normal_y,normal_z,u_x,u_y,u_z\n",
    );
    for v in views {
        let _ = write!(s, "{}", v.id);
        for p in [v.source_pos, v.detector_center, v.detector_normal.vec(), v.detector_u_axis.vec()] {
            for c in p.to_array() {
                let _ = write!(s, ",{c:.8e}");
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det() -> DetectorSpec {
        DetectorSpec::new(0.2, 0.1, 20, 10).unwrap()
    }

    fn angle(a: Vec3, b: Vec3) -> f64 {
        (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn half_sphere_single_point() {
        let s = fibonacci_half_sphere(1, "v").unwrap();
        assert_eq!(s.count(), 1);
        assert!(s.points[0].z() >= 0.0);
        assert!((s.points[0].vec().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_sphere_rejects_zero() {
        assert!(matches!(fibonacci_half_sphere(0, "v"), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn half_sphere_1500_points() {
        let s = fibonacci_half_sphere(1500, "cyl").unwrap();
        assert_eq!(s.count(), 1500);
        for p in &s.points {
            assert!(p.z() >= 0.0);
            assert!((p.vec().norm() - 1.0).abs() < 1e-12);
        }
        let mut zs: Vec<f64> = s.points.iter().map(|p| p.z()).collect();
        zs.sort_by(f64::total_cmp);
        zs.dedup();
        assert_eq!(zs.len(), 1500, "points must be distinct");
    }

    #[test]
    fn half_sphere_nearest_neighbour_uniformity() {
        let s = fibonacci_half_sphere(200, "v").unwrap();
        let nn: Vec<f64> = s
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                s.points
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, q)| angle(p.vec(), q.vec()))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let mean = nn.iter().sum::<f64>() / nn.len() as f64;
        let var = nn.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / nn.len() as f64;
        assert!(var.sqrt() / mean < 0.5, "cv = {}", var.sqrt() / mean);
    }

    #[test]
    fn horizontal_circle_of_four() {
        let v = tilted_circle_candidates(1, [0.0, 0.0], 4, 360.0, 1.0, 0.5, det()).unwrap();
        let expected = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)];
        for (view, (x, y)) in v.iter().zip(expected) {
            let s = view.source_pos;
            assert!((s.x - 0.5 * x).abs() < 1e-12 && (s.y - 0.5 * y).abs() < 1e-12 && s.z.abs() < 1e-12);
            assert!((view.detector_center + s * 1.0).norm() < 1e-12);
            assert!(view.detector_normal.dot(UnitVec::new(s).unwrap()) > 1.0 - 1e-12);
        }
    }

    #[test]
    fn tilted_grid_count() {
        let v = tilted_circle_candidates(51, [-90.0, 90.0], 61, 216.0, 0.9, 0.3, det()).unwrap();
        assert_eq!(v.len(), 3111);
        assert!(v.iter().enumerate().all(|(i, c)| c.id == i));
    }

    #[test]
    fn tilted_sources_on_orbit() {
        let v = tilted_circle_candidates(3, [-45.0, 45.0], 5, 216.0, 0.9, 0.3, det()).unwrap();
        assert_eq!(v.len(), 15);
        for c in &v {
            assert!((c.source_pos.norm() - 0.3).abs() < 1e-9);
            assert!((c.detector_center.norm() - 0.6).abs() < 1e-9);
            assert!(c.detector_normal.dot(c.detector_u_axis).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(tilted_circle_candidates(0, [0.0, 0.0], 4, 360.0, 1.0, 0.5, det()).is_err());
        assert!(tilted_circle_candidates(1, [0.0, 0.0], 4, 0.0, 1.0, 0.5, det()).is_err());
        assert!(tilted_circle_candidates(1, [0.0, 0.0], 4, 400.0, 1.0, 0.5, det()).is_err());
        assert!(tilted_circle_candidates(1, [0.0, 0.0], 4, 360.0, 0.5, 0.5, det()).is_err());
        assert!(full_sphere_candidates(0, 0.5, 1.0, det()).is_err());
        assert!(full_sphere_candidates(3, 1.5, 1.0, det()).is_err());
    }

    #[test]
    fn two_sphere_candidates() {
        let v = full_sphere_candidates(2, 0.4, 1.0, det()).unwrap();
        assert_eq!(v.len(), 2);
        for c in &v {
            assert!((c.source_pos.norm() - 0.4).abs() < 1e-12);
        }
        assert!(angle(v[0].source_pos, v[1].source_pos) > std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn thousand_sphere_candidates() {
        let v = full_sphere_candidates(1000, 0.4, 1.0, det()).unwrap();
        assert_eq!(v.len(), 1000);
        assert!(v.iter().all(|c| c.validate().is_ok()));
    }

    #[test]
    fn sphere_candidates_spacing() {
        let v = full_sphere_candidates(100, 0.4, 1.0, det()).unwrap();
        // Uniform spacing on the unit sphere: sqrt(4π / n).
        let expected = (4.0 * std::f64::consts::PI / 100.0).sqrt();
        let mut min_sep = f64::INFINITY;
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                min_sep = min_sep.min(angle(v[i].source_pos, v[j].source_pos));
            }
        }
        assert!(min_sep > 0.7 * expected, "{min_sep} vs {expected}");
    }

    #[test]
    fn generators_are_deterministic() {
        let a = tilted_circle_candidates(5, [-90.0, 90.0], 7, 216.0, 0.9, 0.3, det()).unwrap();
        let b = tilted_circle_candidates(5, [-90.0, 90.0], 7, 216.0, 0.9, 0.3, det()).unwrap();
        assert_eq!(a, b);
        assert_eq!(candidates_to_csv(&a), candidates_to_csv(&b));
        let a = full_sphere_candidates(77, 0.3, 0.9, det()).unwrap();
        let b = full_sphere_candidates(77, 0.3, 0.9, det()).unwrap();
        assert_eq!(a, b);
    }

    fn view_at(source: Vec3) -> ViewCandidate {
        ViewCandidate::facing(0, source, source * -1.0, Vec3::new(0.0, 0.0, 1.0).cross(source), det()).unwrap()
    }

    #[test]
    fn view_direction_axes() {
        let voi = Voi::new("o", Vec3::ZERO, 0.01).unwrap();
        let d = view_direction(&view_at(Vec3::new(-1.0, 0.0, 0.0)), &voi).unwrap();
        assert!((d.vec() - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        let d = view_direction(&view_at(Vec3::new(0.0, -2.0, 0.0)), &voi).unwrap();
        assert!((d.vec() - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn view_direction_random_and_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.3..1.0));
            let c = Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
            let voi = Voi::new("r", c, 0.01).unwrap();
            let d = view_direction(&view_at(s), &voi).unwrap().vec();
            let diff = c - s;
            let expected = diff * (1.0 / diff.norm());
            assert!((d.norm() - 1.0).abs() < 1e-12);
            assert!((d - expected).norm() < 1e-12);
        }
        let view = view_at(Vec3::new(1.0, 0.0, 0.0));
        let voi = Voi::new("s", view.source_pos, 0.01).unwrap();
        assert!(matches!(view_direction(&view, &voi), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn hit_on_axis_and_behind() {
        let view = view_at(Vec3::new(1.0, 0.0, 0.0));
        assert!(detector_hit(&view, Vec3::ZERO));
        assert!(detector_hit(&view, Vec3::new(0.5, 0.0, 0.0)));
        assert!(!detector_hit(&view, Vec3::new(2.0, 0.0, 0.0)));
    }

    #[test]
    fn hit_exact_edge() {
        let view = view_at(Vec3::new(1.0, 0.0, 0.0));
        // detector plane at x = -1, two units from the source; a point at x = 0
        // projects with magnification 2.
        let u = view.detector_u_axis.vec();
        let v = view.detector_v_axis();
        let edge_u = u * (0.5 * view.detector.width_m / 2.0);
        let edge_v = v * (0.5 * view.detector.height_m / 2.0);
        assert!(detector_hit(&view, edge_u));
        assert!(detector_hit(&view, edge_v));
        assert!(detector_hit(&view, edge_u + edge_v));
        assert!(!detector_hit(&view, edge_u * 1.001));
        // parallel to the plane
        assert!(!detector_hit(&view, view.source_pos + u));
    }

    fn rotate(p: Vec3, axis: Vec3, ang: f64) -> Vec3 {
        let k = axis * (1.0 / axis.norm());
        let (s, c) = ang.sin_cos();
        p * c + k.cross(p) * s + k * (k.dot(p) * (1.0 - c))
    }

    #[test]
    fn hit_invariant_under_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = view_at(Vec3::new(0.7, 0.2, 0.3));
        for _ in 0..200 {
            let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let ang = rng.gen_range(0.0..std::f64::consts::TAU);
            let shift = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let point = Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
            let tf = |p: Vec3| rotate(p, axis, ang) + shift;
            let moved = ViewCandidate {
                source_pos: tf(base.source_pos),
                detector_center: tf(base.detector_center),
                detector_normal: UnitVec::new(rotate(base.detector_normal.vec(), axis, ang)).unwrap(),
                detector_u_axis: UnitVec::new(rotate(base.detector_u_axis.vec(), axis, ang)).unwrap(),
                ..base.clone()
            };
            let (a0, b0) = base.project_to_plane(point).unwrap();
            let (a1, b1) = moved.project_to_plane(tf(point)).unwrap();
            assert!((a0 - a1).abs() < 1e-9 && (b0 - b1).abs() < 1e-9);
            // away from the edge the predicate must agree exactly
            let margin = (0.1 - a0.abs()).abs().min((0.05 - b0.abs()).abs());
            if margin > 1e-9 {
                assert_eq!(detector_hit(&base, point), detector_hit(&moved, tf(point)));
            }
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let v = tilted_circle_candidates(1, [0.0, 0.0], 3, 360.0, 1.0, 0.5, det()).unwrap();
        let csv = candidates_to_csv(&v);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1].split(',').count(), 13);
        assert!(lines[1].starts_with("0,5.00000000e-1,"));
    }
}
