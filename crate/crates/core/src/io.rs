//! File formats: raw little-endian `f32` volumes and projection stacks with JSON
//! sidecars, plus atomic (write-temp-then-rename) file output.
//!
//! A volume `name` is stored as `name.raw` and `name.json`; the sidecar records
//! `dims`, `voxel_size_m` and `origin_m`. A projection stack stores all views in
//! one raw file, view-major, rows of `pixels_u` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::phantom::{Grid, ProjectionImage};

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * expected {
        return Err(Error::format(path, format!("expected {} bytes, found {}", 4 * expected, bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeSidecar {
    dims: [usize; 3],
    voxel_size_m: f64,
    origin_m: [f64; 3],
    dtype: String,
}

/// Writes `base.raw` + `base.json`; returns both paths.
pub fn write_volume(base: &Path, grid: &Grid, values: &[f64]) -> Result<Vec<PathBuf>> {
    if values.len() != grid.len() {
        return Err(Error::InvalidArgument(format!("volume has {} values for {} voxels", values.len(), grid.len())));
    }
    let raw = with_ext(base, "raw");
    let side = with_ext(base, "json");
    write_atomic(&raw, &f32_bytes(values))?;
    write_json(
        &side,
        &VolumeSidecar {
            dims: grid.dims,
            voxel_size_m: grid.voxel_size_m,
            origin_m: grid.origin_m.to_array(),
            dtype: "f32le".into(),
        },
    )?;
    Ok(vec![raw, side])
}

pub fn read_volume(base: &Path) -> Result<(Grid, Vec<f64>)> {
    let side_path = with_ext(base, "json");
    let side: VolumeSidecar = read_json(&side_path)?;
    if side.dtype != "f32le" {
        return Err(Error::format(&side_path, format!("unsupported dtype {}", side.dtype)));
    }
    let grid = Grid::new(side.dims, side.voxel_size_m, Vec3::from_array(side.origin_m))?;
    let values = read_f32(&with_ext(base, "raw"), grid.len())?;
    Ok((grid, values))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StackSidecar {
    n_views: usize,
    pixels_u: usize,
    pixels_v: usize,
    view_ids: Vec<usize>,
    dtype: String,
}

/// Stacked projections; all images must share one detector size.
pub fn write_projections(base: &Path, images: &[ProjectionImage]) -> Result<Vec<PathBuf>> {
    let (pu, pv) = images.first().map_or((0, 0), |i| (i.pixels_u, i.pixels_v));
    if images.iter().any(|i| i.pixels_u != pu || i.pixels_v != pv || i.values.len() != pu * pv) {
        return Err(Error::InvalidArgument("projection stack needs a uniform detector size".into()));
    }
    let raw = with_ext(base, "raw");
    let side = with_ext(base, "json");
    let bytes: Vec<u8> = images.iter().flat_map(|i| f32_bytes(&i.values)).collect();
    write_atomic(&raw, &bytes)?;
    write_json(
        &side,
        &StackSidecar {
            n_views: images.len(),
            pixels_u: pu,
            pixels_v: pv,
            view_ids: images.iter().map(|i| i.view_id).collect(),
            dtype: "f32le".into(),
        },
    )?;
    Ok(vec![raw, side])
}

pub fn read_projections(base: &Path) -> Result<Vec<ProjectionImage>> {
    let side_path = with_ext(base, "json");
    let side: StackSidecar = read_json(&side_path)?;
    if side.view_ids.len() != side.n_views {
        return Err(Error::format(&side_path, "view id count does not match n_views"));
    }
    let per = side.pixels_u * side.pixels_v;
    let values = read_f32(&with_ext(base, "raw"), per * side.n_views)?;
    Ok(side
        .view_ids
        .iter()
        .enumerate()
        .map(|(k, &id)| ProjectionImage {
            view_id: id,
            pixels_u: side.pixels_u,
            pixels_v: side.pixels_v,
            values: values[k * per..(k + 1) * per].to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::centered([2, 3, 4], 0.5).unwrap();
        let values: Vec<f64> = (0..24).map(|i| i as f64 * 0.25).collect();
        let paths = write_volume(&dir.path().join("vol"), &grid, &values).unwrap();
        assert!(paths.iter().all(|p| p.exists()));
        let (g, v) = read_volume(&dir.path().join("vol")).unwrap();
        assert_eq!(g, grid);
        assert_eq!(v, values);
        let raw = fs::read(dir.path().join("vol.raw")).unwrap();
        assert_eq!(&raw[4..8], &0.25f32.to_le_bytes());
    }

    #[test]
    fn projection_stack_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<ProjectionImage> = (0..3)
            .map(|k| ProjectionImage {
                view_id: 10 + k,
                pixels_u: 2,
                pixels_v: 2,
                values: vec![0.5, 1.0, 0.25, k as f64],
            })
            .collect();
        write_projections(&dir.path().join("p"), &imgs).unwrap();
        assert_eq!(read_projections(&dir.path().join("p")).unwrap(), imgs);
    }

    #[test]
    fn truncated_raw_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::centered([2, 2, 2], 1.0).unwrap();
        write_volume(&dir.path().join("v"), &grid, &[1.0; 8]).unwrap();
        fs::write(dir.path().join("v.raw"), [0u8; 7]).unwrap();
        assert!(matches!(read_volume(&dir.path().join("v")), Err(Error::Format { .. })));
    }
}
