//! Discrete data-completeness coverage matrix.
//!
//! A view with viewing direction `d` (source → VOI centre) covers the sphere
//! sample `u` when `|d · u| < sin(Δγ)`, i.e. `u` is within `Δγ` of being a plane
//! normal perpendicular to the ray. Views whose VOI ray misses the detector
//! cover nothing.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::bitset::Bitset;
use crate::error::{Error, Result};
use crate::geometry::{detector_hit, view_direction, SphereSampling, ViewCandidate, Voi};

const MATRIX_MAGIC: &[u8; 4] = b"TJCM";
const MATRIX_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompletenessConfig {
    delta_gamma_rad: f64,
    sin_delta_gamma: f64,
}

impl CompletenessConfig {
    pub fn new(delta_gamma_rad: f64) -> Result<Self> {
        if !(delta_gamma_rad > 0.0 && delta_gamma_rad < std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidArgument(format!("Δγ must lie in (0, π/2) rad, got {delta_gamma_rad}")));
        }
        Ok(CompletenessConfig { delta_gamma_rad, sin_delta_gamma: delta_gamma_rad.sin() })
    }

    pub fn delta_gamma_rad(&self) -> f64 {
        self.delta_gamma_rad
    }

    pub fn sin_delta_gamma(&self) -> f64 {
        self.sin_delta_gamma
    }
}

/// Binary candidate × sample matrix stored as one bitset per candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageMatrix {
    n_samples: usize,
    rows: Vec<Bitset>,
    voi_offsets: Vec<usize>,
}

impl CoverageMatrix {
    pub fn new(n_samples: usize, rows: Vec<Bitset>, voi_offsets: Vec<usize>) -> Result<Self> {
        if rows.iter().any(|r| r.len() != n_samples) {
            return Err(Error::InvalidArgument(format!("every row must have {n_samples} bits")));
        }
        let ok = voi_offsets.first() == Some(&0)
            && voi_offsets.windows(2).all(|w| w[0] < w[1])
            && voi_offsets.last().is_some_and(|&l| l < n_samples || (n_samples == 0 && l == 0));
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "VOI offsets {voi_offsets:?} must start at 0 and increase strictly below {n_samples}"
            )));
        }
        Ok(CoverageMatrix { n_samples, rows, voi_offsets })
    }

    /// Builds a single-VOI matrix from 0/1 rows; handy for tests and small tools.
    pub fn from_bools(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        let rows = rows
            .iter()
            .map(|r| {
                if r.len() != n {
                    return Err(Error::InvalidArgument("ragged rows".into()));
                }
                let mut b = Bitset::new(n);
                for (i, &on) in r.iter().enumerate() {
                    b.set(i, on);
                }
                Ok(b)
            })
            .collect::<Result<Vec<_>>>()?;
        CoverageMatrix::new(n, rows, vec![0])
    }

    /// Parses rows written as strings of `0`/`1`, e.g. `["1100", "0110"]`.
    pub fn from_strs(rows: &[&str]) -> Result<Self> {
        let bools: Vec<Vec<bool>> = rows.iter().map(|r| r.chars().map(|c| c == '1').collect()).collect();
        CoverageMatrix::from_bools(&bools)
    }

    pub fn n_candidates(&self) -> usize {
        self.rows.len()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn rows(&self) -> &[Bitset] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &Bitset {
        &self.rows[i]
    }

    pub fn voi_offsets(&self) -> &[usize] {
        &self.voi_offsets
    }

    pub fn get(&self, candidate: usize, sample: usize) -> bool {
        self.rows[candidate].get(sample)
    }

    /// The matrix restricted to its first `n` candidates.
    pub fn head(&self, n: usize) -> CoverageMatrix {
        CoverageMatrix {
            n_samples: self.n_samples,
            rows: self.rows[..n.min(self.rows.len())].to_vec(),
            voi_offsets: self.voi_offsets.clone(),
        }
    }

    /// Little-endian binary form: magic, version, counts, offsets, row words.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MATRIX_MAGIC);
        out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
        for v in [self.rows.len(), self.n_samples, self.voi_offsets.len()] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for &o in &self.voi_offsets {
            out.extend_from_slice(&(o as u64).to_le_bytes());
        }
        for r in &self.rows {
            for w in r.words() {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |why: &str| Error::format(origin, why.to_string());
        let mut words = bytes
            .get(8..)
            .ok_or_else(|| bad("truncated header"))?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")));
        if &bytes[..4] != MATRIX_MAGIC {
            return Err(bad("bad magic"));
        }
        if u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) != MATRIX_VERSION {
            return Err(bad("unsupported version"));
        }
        let mut next = || words.next().ok_or_else(|| bad("truncated"));
        let n_candidates = next()? as usize;
        let n_samples = next()? as usize;
        let n_vois = next()? as usize;
        let offsets = (0..n_vois).map(|_| next().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let per_row = n_samples.div_ceil(64);
        let mut rows = Vec::with_capacity(n_candidates);
        for _ in 0..n_candidates {
            let ws = (0..per_row).map(|_| next()).collect::<Result<Vec<_>>>()?;
            rows.push(Bitset::from_words(n_samples, ws).ok_or_else(|| bad("row width"))?);
        }
        if next().is_ok() {
            return Err(bad("trailing data"));
        }
        CoverageMatrix::new(n_samples, rows, offsets)
    }

    /// Dense CSV, one row per candidate.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("candidate");
        for j in 0..self.n_samples {
            let _ = write!(s, ",s{j}");
        }
        s.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(s, "{i}");
            for j in 0..self.n_samples {
                s.push_str(if r.get(j) { ",1" } else { ",0" });
            }
            s.push('\n');
        }
        s
    }
}

/// Coverage bits of one view for one VOI sampling.
pub fn coverage_row(
    view: &ViewCandidate,
    voi: &Voi,
    sampling: &SphereSampling,
    cfg: &CompletenessConfig,
) -> Result<Bitset> {
    if sampling.points.is_empty() {
        return Err(Error::InvalidArgument(format!("empty sampling for VOI {}", voi.id)));
    }
    let d = view_direction(view, voi)?;
    let mut row = Bitset::new(sampling.count());
    if !detector_hit(view, voi.center) {
        return Ok(row);
    }
    for (i, u) in sampling.points.iter().enumerate() {
        if d.dot(*u).abs() < cfg.sin_delta_gamma() {
            row.set(i, true);
        }
    }
    Ok(row)
}

/// Stacks per-VOI coverage rows; columns are the VOI samplings concatenated in order.
pub fn build_coverage_matrix(
    views: &[ViewCandidate],
    vois: &[Voi],
    samplings: &[SphereSampling],
    cfg: &CompletenessConfig,
) -> Result<CoverageMatrix> {
    build_coverage_matrix_per_voi(views, vois, samplings, &vec![*cfg; vois.len()])
}

/// [`build_coverage_matrix`] with a separate Δγ for each VOI.
pub fn build_coverage_matrix_per_voi(
    views: &[ViewCandidate],
    vois: &[Voi],
    samplings: &[SphereSampling],
    cfgs: &[CompletenessConfig],
) -> Result<CoverageMatrix> {
    if vois.is_empty() || vois.len() != samplings.len() || vois.len() != cfgs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} VOIs, {} samplings, {} configs",
            vois.len(),
            samplings.len(),
            cfgs.len()
        )));
    }
    for (v, s) in vois.iter().zip(samplings) {
        if v.id != s.voi_id {
            return Err(Error::InvalidArgument(format!("sampling for `{}` paired with VOI `{}`", s.voi_id, v.id)));
        }
    }
    let mut offsets = Vec::with_capacity(vois.len());
    let mut n_samples = 0;
    for s in samplings {
        offsets.push(n_samples);
        n_samples += s.count();
    }
    let rows = views
        .par_iter()
        .map(|view| {
            let mut row = Bitset::new(n_samples);
            for (((voi, sampling), cfg), &off) in vois.iter().zip(samplings).zip(cfgs).zip(&offsets) {
                for i in coverage_row(view, voi, sampling, cfg)?.iter_ones() {
                    row.set(off + i, true);
                }
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    CoverageMatrix::new(n_samples, rows, offsets)
}

/// Covered sample count and fraction of the union of the selected rows.
pub fn coverage_of(selected: &[usize], matrix: &CoverageMatrix) -> Result<(usize, f64)> {
    let mut acc = Bitset::new(matrix.n_samples());
    for &i in selected {
        if i >= matrix.n_candidates() {
            return Err(Error::InvalidArgument(format!("candidate {i} out of range {}", matrix.n_candidates())));
        }
        acc.union_with(matrix.row(i));
    }
    let c = acc.count_ones();
    let frac = if matrix.n_samples() == 0 { 0.0 } else { c as f64 / matrix.n_samples() as f64 };
    Ok((c, frac))
}
