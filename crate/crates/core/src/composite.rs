//! Per-epoch median compositing of masked scenes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{self, RasterError, RasterGrid, CANONICAL_PIXEL_SIZE};

/// The twelve bands kept for modelling, in canonical order. The cirrus band
/// b10 is never used.
pub const BAND_NAMES: [&str; 12] = [
    "b1", "b2", "b3", "b4", "b5", "b6", "b7", "b8", "b8A", "b9", "b11", "b12",
];

/// Native Sentinel-2 resolution of each band in [`BAND_NAMES`] order.
pub const NATIVE_RESOLUTION: [f64; 12] = [
    60.0, 10.0, 10.0, 10.0, 20.0, 20.0, 20.0, 10.0, 20.0, 60.0, 20.0, 20.0,
];

pub fn band_position(name: &str) -> Option<usize> {
    BAND_NAMES.iter().position(|b| *b == name)
}

#[derive(Debug, Error)]
pub enum CompositeError {
    #[error("unsupported native resolution {0} m (expected 10, 20 or 60)")]
    UnsupportedResolution(f64),
    #[error("no scenes dated within epoch {0}")]
    NoScenesInEpoch(Epoch),
    #[error("extent mismatch: {0}")]
    ExtentMismatch(String),
    #[error("unknown band {0:?}")]
    UnknownBand(String),
    #[error("unknown epoch {0:?}")]
    UnknownEpoch(String),
    #[error("composite for {epoch} is malformed: {reason}")]
    Malformed { epoch: Epoch, reason: String },
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T, E = CompositeError> = std::result::Result<T, E>;

/// Two-year compositing windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Epoch {
    #[serde(rename = "2015-2016")]
    Y2015_2016,
    #[serde(rename = "2017-2018")]
    Y2017_2018,
    #[serde(rename = "2019-2020")]
    Y2019_2020,
}

impl Epoch {
    pub const ALL: [Epoch; 3] = [Epoch::Y2015_2016, Epoch::Y2017_2018, Epoch::Y2019_2020];

    pub fn first_year(self) -> i32 {
        match self {
            Epoch::Y2015_2016 => 2015,
            Epoch::Y2017_2018 => 2017,
            Epoch::Y2019_2020 => 2019,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Epoch::Y2015_2016 => "2015-2016",
            Epoch::Y2017_2018 => "2017-2018",
            Epoch::Y2019_2020 => "2019-2020",
        }
    }

    pub fn contains(self, date: NaiveDate) -> bool {
        let y = date.year();
        y == self.first_year() || y == self.first_year() + 1
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Epoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Epoch {
    type Err = CompositeError;

    fn from_str(s: &str) -> Result<Self> {
        Epoch::ALL
            .into_iter()
            .find(|e| e.label() == s)
            .ok_or_else(|| CompositeError::UnknownEpoch(s.to_string()))
    }
}

/// A dated acquisition: one single-band grid per available band plus a
/// validity mask (1 = usable).
#[derive(Debug, Clone)]
pub struct Scene {
    pub acquired: NaiveDate,
    pub bands: Vec<RasterGrid>,
    pub valid_mask: RasterGrid,
}

/// A twelve-band 10 m median composite.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochComposite {
    pub epoch: Epoch,
    pub bands: RasterGrid,
}

impl EpochComposite {
    pub fn new(epoch: Epoch, bands: RasterGrid) -> Result<Self> {
        let malformed = |reason: String| CompositeError::Malformed { epoch, reason };
        if bands.band_names.iter().map(String::as_str).ne(BAND_NAMES) {
            return Err(malformed(format!("band order {:?}", bands.band_names)));
        }
        if (bands.pixel_width() - CANONICAL_PIXEL_SIZE).abs() > 1e-9 {
            return Err(malformed(format!("pixel size {} m", bands.pixel_width())));
        }
        Ok(Self { epoch, bands })
    }

    pub fn file_name(&self) -> String {
        format!("{}.bsqr", self.epoch)
    }

    pub fn read(path: impl AsRef<Path>, epoch: Epoch) -> Result<Self> {
        Self::new(epoch, raster::read_raster(path)?)
    }
}

/// Nearest-neighbour upsampling of a 10, 20 or 60 m grid to 10 m.
pub fn resample_to_10m(band: &RasterGrid) -> Result<RasterGrid> {
    let size = band.pixel_width();
    let factor = [10.0, 20.0, 60.0]
        .iter()
        .find(|&&s| (size - s).abs() < 1e-9 && (band.pixel_height() - s).abs() < 1e-9)
        .map(|s| (s / CANONICAL_PIXEL_SIZE) as usize)
        .ok_or(CompositeError::UnsupportedResolution(size))?;
    if factor == 1 {
        return Ok(band.clone());
    }
    let (w, h) = (band.width * factor, band.height * factor);
    let mut pixels = vec![0.0f32; w * h * band.band_count()];
    for b in 0..band.band_count() {
        let src = band.band(b);
        let dst = &mut pixels[b * w * h..(b + 1) * w * h];
        for (r, row) in dst.chunks_exact_mut(w).enumerate() {
            let src_row = &src[(r / factor) * band.width..(r / factor + 1) * band.width];
            for (c, v) in row.iter_mut().enumerate() {
                *v = src_row[c / factor];
            }
        }
    }
    let mut gt = band.geotransform;
    gt[1] = CANONICAL_PIXEL_SIZE;
    gt[5] = -CANONICAL_PIXEL_SIZE;
    Ok(RasterGrid::new(
        w,
        h,
        band.band_names.clone(),
        gt,
        band.crs.clone(),
        band.nodata,
        pixels,
    )?)
}

/// Median of `values`, reordering them. Even counts average the two middle
/// order statistics; `None` when empty.
pub fn median_in_place(values: &mut [f32]) -> Option<f32> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let (_, upper, _) = values.select_nth_unstable_by(n / 2, f32::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        return Some(upper);
    }
    let lower = values[..n / 2]
        .iter()
        .copied()
        .max_by(f32::total_cmp)
        .expect("non-empty lower half");
    Some(((lower as f64 + upper as f64) / 2.0) as f32)
}

struct AlignedScene<'a> {
    /// Per canonical band: the 10 m grid, if the scene carries it.
    bands: [Option<std::borrow::Cow<'a, RasterGrid>>; 12],
    mask: std::borrow::Cow<'a, RasterGrid>,
}

fn align<'a>(scene: &'a Scene) -> Result<AlignedScene<'a>> {
    use std::borrow::Cow;
    let to_10m = |g: &'a RasterGrid| -> Result<Cow<'a, RasterGrid>> {
        if (g.pixel_width() - CANONICAL_PIXEL_SIZE).abs() < 1e-9 {
            Ok(Cow::Borrowed(g))
        } else {
            Ok(Cow::Owned(resample_to_10m(g)?))
        }
    };
    let mut bands: [Option<Cow<'a, RasterGrid>>; 12] = Default::default();
    for grid in &scene.bands {
        for (b, name) in grid.band_names.iter().enumerate() {
            let pos = band_position(name).ok_or_else(|| CompositeError::UnknownBand(name.clone()))?;
            let g = to_10m(grid)?;
            bands[pos] = Some(if grid.band_count() == 1 {
                g
            } else {
                let n = g.pixel_count();
                Cow::Owned(RasterGrid::new(
                    g.width,
                    g.height,
                    vec![name.clone()],
                    g.geotransform,
                    g.crs.clone(),
                    g.nodata,
                    g.pixels[b * n..(b + 1) * n].to_vec(),
                )?)
            });
        }
    }
    Ok(AlignedScene {
        bands,
        mask: to_10m(&scene.valid_mask)?,
    })
}

/// Median composite of all valid observations of the scenes dated within
/// `epoch`. Pixels without any valid observation are set to `nodata`.
pub fn median_composite(scenes: &[Scene], epoch: Epoch, nodata: f32) -> Result<EpochComposite> {
    let in_epoch: Vec<&Scene> = scenes.iter().filter(|s| epoch.contains(s.acquired)).collect();
    if in_epoch.is_empty() {
        return Err(CompositeError::NoScenesInEpoch(epoch));
    }
    let aligned = in_epoch.iter().map(|s| align(s)).collect::<Result<Vec<_>>>()?;
    let reference = aligned[0].mask.as_ref();
    for (i, a) in aligned.iter().enumerate() {
        let grids = a.bands.iter().flatten().map(|g| g.as_ref()).chain([a.mask.as_ref()]);
        for g in grids {
            if !g.same_extent(reference) {
                return Err(CompositeError::ExtentMismatch(format!(
                    "scene {} ({}x{} at {:?}) differs from scene 0 ({}x{} at {:?})",
                    in_epoch[i].acquired,
                    g.width,
                    g.height,
                    &g.geotransform[..],
                    reference.width,
                    reference.height,
                    &reference.geotransform[..]
                )));
            }
        }
    }

    let (w, h) = (reference.width, reference.height);
    let n = w * h;
    let mut pixels = vec![nodata; n * BAND_NAMES.len()];
    for (b, out) in pixels.chunks_exact_mut(n).enumerate() {
        let sources: Vec<(&[f32], f32, &[f32])> = aligned
            .iter()
            .filter_map(|a| {
                a.bands[b]
                    .as_ref()
                    .map(|g| (g.band(0), g.nodata, a.mask.band(0)))
            })
            .collect();
        out.par_chunks_mut(w).enumerate().for_each(|(row, out_row)| {
            let mut stack = Vec::with_capacity(sources.len());
            for (col, px) in out_row.iter_mut().enumerate() {
                let i = row * w + col;
                stack.clear();
                stack.extend(
                    sources
                        .iter()
                        .filter(|(v, nd, m)| m[i] == 1.0 && v[i] != *nd)
                        .map(|(v, _, _)| v[i]),
                );
                if let Some(m) = median_in_place(&mut stack) {
                    *px = m;
                }
            }
        });
    }
    let bands = RasterGrid::new(
        w,
        h,
        BAND_NAMES.iter().map(|s| s.to_string()).collect(),
        reference.geotransform,
        reference.crs.clone(),
        nodata,
        pixels,
    )?;
    EpochComposite::new(epoch, bands)
}

/// One entry of a scene manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub date: String,
    pub band_paths: BTreeMap<String, PathBuf>,
    pub mask_path: PathBuf,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(RasterError::from)?;
    serde_json::from_str(&text).map_err(|e| CompositeError::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Every file a manifest references, resolved against the manifest's directory.
pub fn manifest_inputs(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(read_manifest(path)?
        .into_iter()
        .flat_map(|e| {
            e.band_paths
                .into_values()
                .chain([e.mask_path])
                .map(|p| base.join(p))
                .collect::<Vec<_>>()
        })
        .collect())
}

/// Loads the scenes of a manifest. Band values are multiplied by `scale`
/// (digital numbers to reflectance); nodata values are left untouched.
pub fn load_manifest(path: impl AsRef<Path>, scale: f64) -> Result<Vec<Scene>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let manifest_err = |reason: String| CompositeError::Manifest {
        path: path.to_path_buf(),
        reason,
    };
    read_manifest(path)?
        .into_iter()
        .map(|entry| {
            let acquired = NaiveDate::parse_from_str(&entry.date, "%Y-%m-%d")
                .map_err(|e| manifest_err(format!("date {:?}: {e}", entry.date)))?;
            let mut bands = Vec::with_capacity(entry.band_paths.len());
            for (name, rel) in &entry.band_paths {
                if band_position(name).is_none() {
                    return Err(CompositeError::UnknownBand(name.clone()));
                }
                let mut grid = raster::read_raster(base.join(rel))?;
                if grid.band_count() != 1 {
                    return Err(manifest_err(format!("band file for {name} has {} bands", grid.band_count())));
                }
                grid.band_names = vec![name.clone()];
                let nodata = grid.nodata;
                for v in grid.pixels.iter_mut().filter(|v| **v != nodata) {
                    *v = (*v as f64 * scale) as f32;
                }
                bands.push(grid);
            }
            let valid_mask = raster::read_raster(base.join(&entry.mask_path))?;
            Ok(Scene {
                acquired,
                bands,
                valid_mask,
            })
        })
        .collect()
}
