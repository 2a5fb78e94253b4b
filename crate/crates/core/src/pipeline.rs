//! End-to-end experiment runner: phantom → candidates → projections → coverage
//! → selection → reconstruction → evaluation.
//!
//! Every stage writes its outputs under the output directory together with a
//! `<stage>.stage.json` record holding a content key (SHA-256 over the stage's config
//! slice and upstream keys) and the digests of the files it produced. A stage
//! whose key and files still match is skipped. Downstream stages always read
//! their inputs back from disk, so cached and fresh runs see identical data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::completeness::{build_coverage_matrix_per_voi, CompletenessConfig, CoverageMatrix};
use crate::error::{Error, Result};
use crate::geometry::{
    candidates_to_csv, fibonacci_half_sphere, full_sphere_candidates, tilted_circle_candidates, DetectorSpec,
    SphereSampling, Vec3, ViewCandidate, Voi,
};
use crate::io::{
    file_digest, read_json, read_projections, read_volume, sha256_hex, write_atomic, write_json, write_projections,
    write_volume,
};
use crate::phantom::{
    absorption_metric_union, build_phantom, project_voi_roi, simulate_projection, Grid, Phantom, ShapeSpec,
};
use crate::recon::{cnr, psnr, sart_reconstruct, ssim, RoiMask, Volume, SSIM_WINDOW};
use crate::select::{
    assemble_problem, bnb_select, brute_force_select, circular_select, greedy_select, SelectionProblem,
    SolutionDocument, SolverLimits,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub name: String,
    pub phantom: PhantomConfig,
    pub candidates: CandidateConfig,
    pub vois: Vec<VoiConfig>,
    pub selection: SelectionConfig,
    pub recon: ReconConfig,
    /// Also write the coverage matrix as dense CSV.
    #[serde(default)]
    pub export_coverage_csv: bool,
    /// Output directory used when none is given on the command line.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Reserved; every stage is deterministic and ignores it.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub voxel_size_m: f64,
    /// Centre of voxel (0, 0, 0); the grid is centred on the origin when absent.
    #[serde(default)]
    pub origin_m: Option<[f64; 3]>,
    pub shapes: Vec<ShapeSpec>,
}

impl PhantomConfig {
    pub fn grid(&self) -> Result<Grid> {
        match self.origin_m {
            Some(o) => Grid::new(self.dims, self.voxel_size_m, Vec3::from_array(o)),
            None => Grid::centered(self.dims, self.voxel_size_m),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateConfig {
    pub generator: Generator,
    pub sod_m: f64,
    pub sdd_m: f64,
    pub detector: DetectorSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    TiltedCircles {
        n_tilts: usize,
        tilt_range_deg: [f64; 2],
        n_per_circle: usize,
        arc_deg: f64,
    },
    FullSphere {
        n: usize,
        /// Untilted circle appended after the pool for the circular baseline only.
        #[serde(default)]
        reference_circle: Option<ReferenceCircle>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceCircle {
    pub n_views: usize,
    pub arc_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoiConfig {
    pub id: String,
    pub center_m: [f64; 3],
    pub roi_radius_m: f64,
    pub n_samples: usize,
    pub delta_gamma_rad: f64,
}

impl VoiConfig {
    pub fn voi(&self) -> Result<Voi> {
        Voi::new(self.id.clone(), Vec3::from_array(self.center_m), self.roi_radius_m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Circular,
    Greedy,
    Ip,
    Oracle,
}

impl SolverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SolverKind::Circular => "circular",
            SolverKind::Greedy => "greedy",
            SolverKind::Ip => "ip",
            SolverKind::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for SolverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circular" => Ok(SolverKind::Circular),
            "greedy" => Ok(SolverKind::Greedy),
            "ip" => Ok(SolverKind::Ip),
            "oracle" => Ok(SolverKind::Oracle),
            other => Err(Error::Config(format!("unknown solver `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub k: usize,
    pub alpha: f64,
    pub solvers: Vec<SolverKind>,
    #[serde(default)]
    pub limits: SolverLimits,
    /// Circle used by the circular baseline; defaults to the untilted one.
    #[serde(default)]
    pub circle_id: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// SART from every pool view with the same settings.
    #[default]
    AllViews,
    /// The ground-truth phantom.
    Phantom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    pub iterations: usize,
    pub relaxation: f64,
    #[serde(default)]
    pub reference: ReferenceKind,
}

impl PipelineConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        PipelineConfig::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    fn pool_size(&self) -> usize {
        match &self.candidates.generator {
            Generator::TiltedCircles { n_tilts, n_per_circle, .. } => n_tilts * n_per_circle,
            Generator::FullSphere { n, .. } => *n,
        }
    }

    /// Checks everything that can be checked without running a stage.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        let grid = self.phantom.grid().map_err(cfg_err)?;
        for s in &self.phantom.shapes {
            s.validate().map_err(cfg_err)?;
        }
        let c = &self.candidates;
        c.detector.validate().map_err(cfg_err)?;
        if !(c.sod_m > 0.0 && c.sdd_m > c.sod_m) {
            return Err(Error::Config(format!("need 0 < sod_m < sdd_m, got {} and {}", c.sod_m, c.sdd_m)));
        }
        match &c.generator {
            Generator::TiltedCircles { n_tilts, tilt_range_deg, n_per_circle, arc_deg } => {
                if *n_tilts == 0 || *n_per_circle == 0 || !(*arc_deg > 0.0 && *arc_deg <= 360.0) {
                    return Err(Error::Config(
                        "tilted circles need n_tilts, n_per_circle ≥ 1 and arc in (0, 360]".into(),
                    ));
                }
                if !(tilt_range_deg[0] <= tilt_range_deg[1]) {
                    return Err(Error::Config(format!("bad tilt range {tilt_range_deg:?}")));
                }
            }
            Generator::FullSphere { n, reference_circle } => {
                if *n == 0 {
                    return Err(Error::Config("full sphere needs n ≥ 1".into()));
                }
                if let Some(r) = reference_circle {
                    if r.n_views == 0 || !(r.arc_deg > 0.0 && r.arc_deg <= 360.0) {
                        return Err(Error::Config("reference circle needs n_views ≥ 1 and arc in (0, 360]".into()));
                    }
                }
            }
        }
        if self.vois.is_empty() {
            return Err(Error::Config("at least one VOI is required".into()));
        }
        let mut ids: Vec<&str> = self.vois.iter().map(|v| v.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("VOI ids must be unique".into()));
        }
        for v in &self.vois {
            v.voi().map_err(cfg_err)?;
            CompletenessConfig::new(v.delta_gamma_rad).map_err(cfg_err)?;
            if v.n_samples == 0 {
                return Err(Error::Config(format!("VOI `{}` needs n_samples ≥ 1", v.id)));
            }
        }
        let s = &self.selection;
        if s.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&s.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", s.alpha)));
        }
        if s.solvers.is_empty() {
            return Err(Error::Config("no solvers requested".into()));
        }
        if s.k > self.pool_size() {
            return Err(Error::Config(format!("k = {} exceeds the {} candidates", s.k, self.pool_size())));
        }
        s.limits.validate().map_err(cfg_err)?;
        let r = &self.recon;
        if r.iterations == 0 || !(r.relaxation > 0.0 && r.relaxation <= 2.0) {
            return Err(Error::Config("recon needs iterations ≥ 1 and relaxation in (0, 2]".into()));
        }
        let roi = roi_mask(grid, &self.vois)?;
        let extent = mask_extent(&roi);
        if extent.iter().any(|&e| e < SSIM_WINDOW) {
            return Err(Error::Config(format!(
                "the ROI spans {extent:?} voxels; every axis needs at least {SSIM_WINDOW} for SSIM"
            )));
        }
        Ok(())
    }
}

fn roi_mask(grid: Grid, vois: &[VoiConfig]) -> Result<RoiMask> {
    let vois = vois.iter().map(VoiConfig::voi).collect::<Result<Vec<_>>>()?;
    Ok(RoiMask::from_fn(grid, |c| vois.iter().any(|v| (c - v.center).norm() <= v.roi_radius_m)))
}

fn mask_extent(mask: &RoiMask) -> [usize; 3] {
    let [nx, ny, _] = mask.grid.dims;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0; 3];
    for (idx, _) in mask.mask.iter().enumerate().filter(|(_, &m)| m) {
        let ijk = [idx % nx, (idx / nx) % ny, idx / (nx * ny)];
        for a in 0..3 {
            lo[a] = lo[a].min(ijk[a]);
            hi[a] = hi[a].max(ijk[a]);
        }
    }
    std::array::from_fn(|a| if lo[a] == usize::MAX { 0 } else { hi[a] - lo[a] + 1 })
}

/// Stages in execution order; a run can stop after any of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageKind {
    Phantom,
    Candidates,
    Project,
    Coverage,
    Select,
    Recon,
    Evaluate,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Last stage to run; everything when `None`.
    pub until: Option<StageKind>,
    /// Replaces the configured solver list.
    pub solvers: Option<Vec<SolverKind>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub key: String,
    pub cache_hit: bool,
    pub wall_time_s: f64,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_digest: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StageFile {
    stage: String,
    key: String,
    outputs: Vec<Artifact>,
}

/// Candidate list written by the candidates stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    /// The first `pool_size` views are eligible for selection.
    pub pool_size: usize,
    /// Circle used by the circular baseline, if any.
    pub baseline_circle: Option<usize>,
    pub views: Vec<ViewCandidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionFile {
    pub absorption: Vec<f64>,
    /// Views from which some VOI does not project onto the detector.
    pub not_visible: Vec<usize>,
}

/// One line of `comparison.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub approach: String,
    pub ssim: f64,
    pub psnr_db: f64,
    pub cnr: Option<f64>,
    pub coverage_fraction: f64,
    pub gap: f64,
    pub wall_time_s: f64,
}

pub const COMPARISON_HEADER: &str = "approach,ssim,psnr_db,cnr,coverage_fraction,gap,wall_time_s";

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        let cnr = r.cnr.map_or(String::new(), |c| c.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.approach, r.ssim, r.psnr_db, cnr, r.coverage_fraction, r.gap, r.wall_time_s
        );
    }
    s
}

fn key_of(parts: &[&Value]) -> String {
    let text = serde_json::to_string(parts).expect("key parts serialize");
    sha256_hex(text.as_bytes())
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// JSON number, `"inf"`/`"-inf"` for infinities, `null` for NaN.
fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x.is_nan() {
        Value::Null
    } else if x > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
    stages: Vec<StageRecord>,
    artifacts: Vec<Artifact>,
}

impl Runner<'_> {
    fn cached(&self, record: &Path, key: &str) -> Option<Vec<Artifact>> {
        let rec: StageFile = read_json(record).ok()?;
        if rec.key != key {
            return None;
        }
        for a in &rec.outputs {
            if file_digest(&self.out.join(&a.path)).ok()? != a.sha256 {
                return None;
            }
        }
        Some(rec.outputs)
    }

    /// Runs `body` unless `dir` already holds outputs for `key`.
    fn stage(
        &mut self,
        name: &str,
        dir: &str,
        key: String,
        body: impl FnOnce(&Path) -> Result<Vec<PathBuf>>,
    ) -> Result<()> {
        let start = Instant::now();
        let dir = self.out.join(dir);
        let record = dir.join(format!("{}.stage.json", name.replace(':', "-")));
        let wrap = |e: Error| Error::Stage { stage: name.to_string(), source: Box::new(e) };
        let (outputs, hit) = match self.cached(&record, &key) {
            Some(outputs) => {
                info!("{name}: cached ({})", &key[..12]);
                (outputs, true)
            }
            None => {
                info!("{name}: running");
                fs::create_dir_all(&dir).map_err(|e| wrap(Error::io(&dir, e)))?;
                let result = body(&dir).and_then(|paths| {
                    paths
                        .iter()
                        .map(|p| {
                            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                            Ok(Artifact {
                                path: rel(&self.out, p),
                                sha256: sha256_hex(&bytes),
                                bytes: bytes.len() as u64,
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                });
                match result {
                    Ok(outputs) => {
                        let rec = StageFile { stage: name.to_string(), key: key.clone(), outputs: outputs.clone() };
                        write_json(&record, &rec).map_err(wrap)?;
                        (outputs, false)
                    }
                    Err(e) => {
                        self.stages.push(StageRecord {
                            name: name.to_string(),
                            key,
                            cache_hit: false,
                            wall_time_s: start.elapsed().as_secs_f64(),
                            status: "failed".into(),
                        });
                        return Err(wrap(e));
                    }
                }
            }
        };
        self.artifacts.extend(outputs);
        let digest = file_digest(&record).map_err(wrap)?;
        let bytes = fs::metadata(&record).map_err(|e| wrap(Error::io(&record, e)))?.len();
        self.artifacts.push(Artifact { path: rel(&self.out, &record), sha256: digest, bytes });
        self.stages.push(StageRecord {
            name: name.to_string(),
            key,
            cache_hit: hit,
            wall_time_s: start.elapsed().as_secs_f64(),
            status: "ok".into(),
        });
        Ok(())
    }

    fn path(&self, p: &str) -> PathBuf {
        self.out.join(p)
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config values serialize")
}

fn generate_candidates(c: &CandidateConfig) -> Result<CandidateSet> {
    match &c.generator {
        Generator::TiltedCircles { n_tilts, tilt_range_deg, n_per_circle, arc_deg } => {
            let views = tilted_circle_candidates(
                *n_tilts,
                *tilt_range_deg,
                *n_per_circle,
                *arc_deg,
                c.sdd_m,
                c.sod_m,
                c.detector,
            )?;
            let baseline = views
                .iter()
                .filter_map(|v| v.circle)
                .min_by(|a, b| a.tilt_deg.abs().total_cmp(&b.tilt_deg.abs()).then(a.id.cmp(&b.id)))
                .map(|c| c.id);
            Ok(CandidateSet { pool_size: views.len(), baseline_circle: baseline, views })
        }
        Generator::FullSphere { n, reference_circle } => {
            let mut views = full_sphere_candidates(*n, c.sod_m, c.sdd_m, c.detector)?;
            let pool_size = views.len();
            let mut baseline = None;
            if let Some(r) = reference_circle {
                let ring = tilted_circle_candidates(1, [0.0, 0.0], r.n_views, r.arc_deg, c.sdd_m, c.sod_m, c.detector)?;
                for mut v in ring {
                    v.id = views.len();
                    views.push(v);
                }
                baseline = Some(0);
            }
            Ok(CandidateSet { pool_size, baseline_circle: baseline, views })
        }
    }
}

fn read_matrix(path: &Path) -> Result<CoverageMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    CoverageMatrix::from_bytes(&bytes, path)
}

fn read_phantom(base: &Path) -> Result<Phantom> {
    let (grid, mu) = read_volume(base)?;
    Phantom::from_values(grid, mu)
}

/// Runs the pipeline into `out` and writes `manifest.json`, also on failure.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path, opts: &RunOptions) -> Result<Manifest> {
    cfg.validate()?;
    let mut runner = Runner { cfg, out: out.to_path_buf(), stages: Vec::new(), artifacts: Vec::new() };
    let result = run_stages(&mut runner, opts);
    let manifest = Manifest {
        name: cfg.name.clone(),
        config_digest: cfg.digest(),
        status: if result.is_ok() { "ok".into() } else { "failed".into() },
        error: result.as_ref().err().map(|e| e.to_string()),
        stages: runner.stages,
        artifacts: runner.artifacts,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    result.map(|_| manifest)
}

fn run_stages(r: &mut Runner, opts: &RunOptions) -> Result<()> {
    let cfg = r.cfg;
    let until = opts.until.unwrap_or(StageKind::Evaluate);
    let mut solvers = opts.solvers.clone().unwrap_or_else(|| cfg.selection.solvers.clone());
    solvers.sort_unstable();
    solvers.dedup();

    let phantom_key = key_of(&[&json!("phantom"), &to_value(&cfg.phantom)]);
    r.stage("phantom", "phantom", phantom_key.clone(), |dir| {
        let grid = cfg.phantom.grid()?;
        let ph = build_phantom(grid.dims, grid.voxel_size_m, grid.origin_m, &cfg.phantom.shapes)?;
        write_volume(&dir.join("phantom"), &ph.grid, &ph.mu)
    })?;
    if until == StageKind::Phantom {
        return Ok(());
    }

    let cand_key = key_of(&[&json!("candidates"), &to_value(&cfg.candidates)]);
    r.stage("candidates", "candidates", cand_key.clone(), |dir| {
        let set = generate_candidates(&cfg.candidates)?;
        let json_path = dir.join("candidates.json");
        let csv_path = dir.join("candidates.csv");
        write_json(&json_path, &set)?;
        write_atomic(&csv_path, candidates_to_csv(&set.views).as_bytes())?;
        Ok(vec![json_path, csv_path])
    })?;
    if until == StageKind::Candidates {
        return Ok(());
    }
    let set: CandidateSet = read_json(&r.path("candidates/candidates.json"))?;

    let proj_key = key_of(&[&json!("project"), &json!(phantom_key), &json!(cand_key)]);
    r.stage("project", "projections", proj_key.clone(), |dir| {
        let ph = read_phantom(&r_path(dir, "../phantom/phantom"))?;
        let images = set.views.iter().map(|v| simulate_projection(&ph, v)).collect::<Result<Vec<_>>>()?;
        write_projections(&dir.join("projections"), &images)
    })?;
    if until == StageKind::Project {
        return Ok(());
    }

    let cov_key =
        key_of(&[&json!("coverage"), &json!(proj_key), &to_value(&cfg.vois), &json!(cfg.export_coverage_csv)]);
    r.stage("coverage", "coverage", cov_key.clone(), |dir| {
        let vois = cfg.vois.iter().map(VoiConfig::voi).collect::<Result<Vec<_>>>()?;
        let samplings = cfg
            .vois
            .iter()
            .map(|v| fibonacci_half_sphere(v.n_samples, &v.id))
            .collect::<Result<Vec<SphereSampling>>>()?;
        let cfgs = cfg.vois.iter().map(|v| CompletenessConfig::new(v.delta_gamma_rad)).collect::<Result<Vec<_>>>()?;
        let matrix = build_coverage_matrix_per_voi(&set.views, &vois, &samplings, &cfgs)?;
        let images = read_projections(&r_path(dir, "../projections/projections"))?;
        let mut absorption = Vec::with_capacity(set.views.len());
        let mut not_visible = Vec::new();
        for (view, img) in set.views.iter().zip(&images) {
            let mut rects = Vec::with_capacity(vois.len());
            for voi in &vois {
                match project_voi_roi(view, voi) {
                    Ok(rect) => rects.push(rect),
                    Err(Error::RoiNotVisible { .. }) => break,
                    Err(e) => return Err(e),
                }
            }
            if rects.len() < vois.len() {
                not_visible.push(view.id);
                absorption.push(1.0);
            } else {
                absorption.push(absorption_metric_union(img, &rects)?);
            }
        }
        if !not_visible.is_empty() {
            warn!("{} views do not see every VOI; their absorption is set to 1", not_visible.len());
        }
        let mut paths = vec![dir.join("samplings.json"), dir.join("coverage.bin"), dir.join("absorption.json")];
        write_json(&paths[0], &samplings)?;
        write_atomic(&paths[1], &matrix.to_bytes())?;
        write_json(&paths[2], &AbsorptionFile { absorption, not_visible })?;
        if cfg.export_coverage_csv {
            let p = dir.join("coverage.csv");
            write_atomic(&p, matrix.to_csv().as_bytes())?;
            paths.push(p);
        }
        Ok(paths)
    })?;
    if until == StageKind::Coverage {
        return Ok(());
    }

    let matrix = read_matrix(&r.path("coverage/coverage.bin"))?;
    let absorption: AbsorptionFile = read_json(&r.path("coverage/absorption.json"))?;
    if matrix.n_candidates() != set.views.len() || absorption.absorption.len() != set.views.len() {
        return Err(Error::Invariant("coverage outputs do not match the candidate list".into()));
    }
    let sel = &cfg.selection;
    let mut select_keys = BTreeMap::new();
    for &solver in &solvers {
        let name = format!("select:{}", solver.as_str());
        let mut parts = vec![json!("select"), json!(cov_key), json!(solver), json!(sel.k), json!(sel.alpha)];
        match solver {
            SolverKind::Ip => parts.push(to_value(&sel.limits)),
            SolverKind::Circular => parts.push(json!(sel.circle_id)),
            _ => {}
        }
        let key = key_of(&parts.iter().collect::<Vec<_>>());
        select_keys.insert(solver, key.clone());
        r.stage(&name, "select", key, |dir| {
            let problem = assemble_problem(
                matrix.head(set.pool_size),
                absorption.absorption[..set.pool_size].to_vec(),
                sel.alpha,
                sel.k,
            )?;
            let doc = solve(solver, &problem, &set, &matrix, cfg)?;
            let p = dir.join(format!("{}.json", solver.as_str()));
            write_json(&p, &doc)?;
            Ok(vec![p])
        })?;
    }
    if until == StageKind::Select {
        return Ok(());
    }

    let grid = cfg.phantom.grid()?;
    let recon_cfg = to_value(&cfg.recon);
    let mut recon_keys = BTreeMap::new();
    let mut jobs: Vec<(String, Option<SolverKind>)> =
        solvers.iter().map(|s| (s.as_str().to_string(), Some(*s))).collect();
    if cfg.recon.reference == ReferenceKind::AllViews {
        jobs.push(("reference".into(), None));
    }
    for (label, solver) in jobs {
        let upstream = solver.map_or_else(|| json!(cand_key), |s| json!(select_keys[&s]));
        let key = key_of(&[&json!("recon"), &json!(label), &json!(proj_key), &upstream, &recon_cfg]);
        recon_keys.insert(label.clone(), key.clone());
        r.stage(&format!("recon:{label}"), "recon", key, |dir| {
            let ids: Vec<usize> = match solver {
                Some(s) => {
                    read_json::<SolutionDocument>(&r_path(dir, &format!("../select/{}.json", s.as_str())))?.selected
                }
                None => (0..set.pool_size).collect(),
            };
            let views: Vec<ViewCandidate> = ids.iter().map(|&i| set.views[i].clone()).collect();
            let images: Vec<_> = read_projections(&r_path(dir, "../projections/projections"))?
                .into_iter()
                .filter(|img| ids.binary_search(&img.view_id).is_ok())
                .collect();
            let vol = sart_reconstruct(&images, &views, &grid, cfg.recon.iterations, cfg.recon.relaxation)?;
            write_volume(&dir.join(&label), &grid, &vol.values)
        })?;
    }
    if until == StageKind::Recon {
        return Ok(());
    }

    let recon_key_list: Vec<Value> = recon_keys.values().map(|k| json!(k)).collect();
    let select_key_list: Vec<Value> = select_keys.values().map(|k| json!(k)).collect();
    let eval_key = key_of(&[
        &json!("evaluate"),
        &json!(phantom_key),
        &json!(recon_key_list),
        &json!(select_key_list),
        &to_value(&cfg.vois),
        &json!(cfg.recon.reference),
    ]);
    r.stage("evaluate", "reports", eval_key, |dir| {
        let truth = read_phantom(&r_path(dir, "../phantom/phantom"))?;
        let truth_vol = Volume::new(truth.grid, truth.mu.clone())?;
        let reference = match cfg.recon.reference {
            ReferenceKind::Phantom => truth_vol.clone(),
            ReferenceKind::AllViews => {
                let (g, v) = read_volume(&r_path(dir, "../recon/reference"))?;
                Volume::new(g, v)?
            }
        };
        let roi = roi_mask(grid, &cfg.vois)?;
        let (feature, background) = contrast_masks(&truth_vol, &roi);
        let mut rows = Vec::new();
        let mut paths = Vec::new();
        for &solver in &solvers {
            let mut doc: SolutionDocument = read_json(&r_path(dir, &format!("../select/{}.json", solver.as_str())))?;
            let (g, v) = read_volume(&r_path(dir, &format!("../recon/{}", solver.as_str())))?;
            let vol = Volume::new(g, v)?;
            let s = ssim(&reference, &vol, &roi)?;
            let p = psnr(&reference, &vol, &roi)?;
            let c = match (&feature, &background) {
                (Some(f), Some(b)) => Some(cnr(&vol, f, b)?),
                _ => None,
            };
            doc.evaluation = Some(json!({
                "reference": cfg.recon.reference,
                "roi_voxels": roi.count(),
                "ssim": num(s),
                "psnr_db": num(p),
                "cnr": c.map_or(Value::Null, |c| num(c.value)),
                "cnr_constant_background": c.is_some_and(|c| c.constant_background),
            }));
            rows.push(ComparisonRow {
                approach: solver.as_str().to_string(),
                ssim: s,
                psnr_db: p,
                cnr: c.map(|c| c.value),
                coverage_fraction: doc.fraction,
                gap: doc.gap,
                wall_time_s: doc.wall_time_s,
            });
            let path = dir.join(format!("{}.json", solver.as_str()));
            write_json(&path, &doc)?;
            paths.push(path);
        }
        let csv = dir.join("comparison.csv");
        write_atomic(&csv, comparison_csv(&rows).as_bytes())?;
        paths.push(csv);
        Ok(paths)
    })
}

fn r_path(dir: &Path, rel: &str) -> PathBuf {
    let mut p = dir.to_path_buf();
    for part in rel.split('/') {
        if part == ".." {
            p.pop();
        } else {
            p.push(part);
        }
    }
    p
}

/// ROI voxels above / at-or-below the midpoint of the true ROI value range.
fn contrast_masks(truth: &Volume, roi: &RoiMask) -> (Option<RoiMask>, Option<RoiMask>) {
    let vals: Vec<f64> = truth.values.iter().zip(&roi.mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !(hi > lo) {
        return (None, None);
    }
    let mid = 0.5 * (lo + hi);
    let pick = |above: bool| {
        let mask: Vec<bool> = truth.values.iter().zip(&roi.mask).map(|(&v, &m)| m && ((v > mid) == above)).collect();
        let m = RoiMask { grid: roi.grid, mask };
        (m.count() > 0).then_some(m)
    };
    (pick(true), pick(false))
}

fn solve(
    solver: SolverKind,
    problem: &SelectionProblem,
    set: &CandidateSet,
    matrix: &CoverageMatrix,
    cfg: &PipelineConfig,
) -> Result<SolutionDocument> {
    let digest = problem.digest();
    let (sol, limits) = match solver {
        SolverKind::Greedy => (greedy_select(problem)?, None),
        SolverKind::Ip => (bnb_select(problem, &cfg.selection.limits)?, Some(cfg.selection.limits)),
        SolverKind::Oracle => (brute_force_select(problem)?, None),
        SolverKind::Circular => {
            let circle = cfg.selection.circle_id.or(set.baseline_circle).ok_or_else(|| {
                Error::Config("the circular baseline needs a circle: set circle_id or add a reference circle".into())
            })?;
            (circular_select(&set.views, matrix, problem.k(), circle)?, None)
        }
    };
    info!(
        "{}: covered {}/{} (bound {}, gap {:.4}, {:?})",
        sol.solver, sol.covered_count, sol.n_samples, sol.upper_bound, sol.gap, sol.status
    );
    Ok(SolutionDocument::new(&sol, limits, digest))
}

/// Runs the full pipeline and returns the per-solver comparison table.
pub fn compare_solvers(cfg: &PipelineConfig, out: &Path, opts: &RunOptions) -> Result<Vec<ComparisonRow>> {
    let opts = RunOptions { until: None, solvers: opts.solvers.clone() };
    run_pipeline(cfg, out, &opts)?;
    read_comparison(&out.join("reports/comparison.csv"))
}

pub fn read_comparison(path: &Path) -> Result<Vec<ComparisonRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(COMPARISON_HEADER) {
        return Err(Error::format(path, "unexpected header"));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::format(path, format!("bad row `{line}`")));
            }
            let p = |s: &str| s.parse::<f64>().map_err(|e| Error::format(path, format!("`{s}`: {e}")));
            Ok(ComparisonRow {
                approach: f[0].to_string(),
                ssim: p(f[1])?,
                psnr_db: p(f[2])?,
                cnr: if f[3].is_empty() { None } else { Some(p(f[3])?) },
                coverage_fraction: p(f[4])?,
                gap: p(f[5])?,
                wall_time_s: p(f[6])?,
            })
        })
        .collect()
}

/// Process exit code for a failed run: 2 configuration, 3 infeasible, 4 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Config(_) => 2,
        Error::Infeasible { .. } => 3,
        _ => 4,
    }
}
