//! Derived spectral indices and the 66-value per-pixel feature vector.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composite::{Epoch, EpochComposite, BAND_NAMES};
use crate::raster::{RasterError, RasterGrid};

/// Features per epoch: 12 bands + 10 indices.
pub const FEATURES_PER_EPOCH: usize = 22;
/// Total features per pixel across the three epochs.
pub const N_FEATURES: usize = 3 * FEATURES_PER_EPOCH;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("unknown index {0:?}")]
    UnknownIndex(String),
    #[error("savi_l must lie in [0, 1], got {0}")]
    InvalidSaviL(f64),
    #[error("missing composite for epoch {0}")]
    MissingEpoch(Epoch),
    #[error("composite extents differ between {0} and {1}")]
    ExtentMismatch(Epoch, Epoch),
    #[error("pixel {0} lies outside the composites")]
    PixelOutOfRange(usize),
    #[error("feature vector must hold {N_FEATURES} finite values: {0}")]
    BadVector(String),
    #[error("duplicate pixel_id {0:?}")]
    DuplicatePixel(String),
    #[error("row {pixel_id:?}: {reason}")]
    BadRow { pixel_id: String, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum IndexKind {
    Ndvi,
    Savi,
    Mndwi,
    Ndbi,
    Ui,
    Nbi,
    Brba,
    Nbai,
    Mbi,
    Baei,
}

impl IndexKind {
    /// Canonical order within each epoch block.
    pub const ALL: [IndexKind; 10] = [
        IndexKind::Ndvi,
        IndexKind::Savi,
        IndexKind::Mndwi,
        IndexKind::Ndbi,
        IndexKind::Ui,
        IndexKind::Nbi,
        IndexKind::Brba,
        IndexKind::Nbai,
        IndexKind::Mbi,
        IndexKind::Baei,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IndexKind::Ndvi => "NDVI",
            IndexKind::Savi => "SAVI",
            IndexKind::Mndwi => "MNDWI",
            IndexKind::Ndbi => "NDBI",
            IndexKind::Ui => "UI",
            IndexKind::Nbi => "NBI",
            IndexKind::Brba => "BRBA",
            IndexKind::Nbai => "NBAI",
            IndexKind::Mbi => "MBI",
            IndexKind::Baei => "BAEI",
        }
    }
}

impl fmt::Display for IndexKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IndexKind {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self> {
        IndexKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| FeatureError::UnknownIndex(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexParams {
    /// SAVI soil adjustment factor.
    pub savi_l: f64,
    /// BAEI additive constant.
    pub baei_c: f64,
    /// Emitted when an index denominator is zero.
    pub epsilon_policy: f64,
}

impl Default for IndexParams {
    fn default() -> Self {
        Self {
            savi_l: 0.5,
            baei_c: 0.3,
            epsilon_policy: 0.0,
        }
    }
}

impl IndexParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.savi_l) {
            return Err(FeatureError::InvalidSaviL(self.savi_l));
        }
        Ok(())
    }
}

/// One pixel's twelve band values in [`BAND_NAMES`] order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandValues(pub [f64; 12]);

impl BandValues {
    pub fn b1(&self) -> f64 { self.0[0] }
    pub fn b2(&self) -> f64 { self.0[1] }
    pub fn b3(&self) -> f64 { self.0[2] }
    pub fn b4(&self) -> f64 { self.0[3] }
    pub fn b5(&self) -> f64 { self.0[4] }
    pub fn b6(&self) -> f64 { self.0[5] }
    pub fn b7(&self) -> f64 { self.0[6] }
    pub fn b8(&self) -> f64 { self.0[7] }
    pub fn b8a(&self) -> f64 { self.0[8] }
    pub fn b9(&self) -> f64 { self.0[9] }
    pub fn b11(&self) -> f64 { self.0[10] }
    pub fn b12(&self) -> f64 { self.0[11] }
}

#[inline]
fn ratio(num: f64, den: f64, policy: f64) -> f64 {
    if den == 0.0 {
        return policy;
    }
    let v = num / den;
    if v.is_finite() {
        v
    } else {
        policy
    }
}

#[inline]
fn normalized_difference(a: f64, b: f64, policy: f64) -> f64 {
    ratio(a - b, a + b, policy)
}

/// Evaluates one derived index on a pixel's band values.
pub fn compute_index(kind: IndexKind, bands: &BandValues, params: &IndexParams) -> f64 {
    let p = params.epsilon_policy;
    let b = bands;
    match kind {
        IndexKind::Ndvi => normalized_difference(b.b8(), b.b4(), p),
        IndexKind::Savi => {
            let l = params.savi_l;
            ratio((b.b8a() - b.b4()) * (1.0 + l), b.b8a() + b.b4() + l, p)
        }
        IndexKind::Mndwi => normalized_difference(b.b3(), b.b11(), p),
        IndexKind::Ndbi => normalized_difference(b.b11(), b.b8(), p),
        IndexKind::Ui => normalized_difference(b.b7(), b.b5(), p),
        IndexKind::Nbi => ratio(b.b4() * b.b11(), b.b8a(), p),
        IndexKind::Brba => ratio(b.b4(), b.b11(), p),
        IndexKind::Nbai => {
            if b.b3() == 0.0 {
                return p;
            }
            let swir_green = b.b12() / b.b3();
            ratio(b.b11() - swir_green, b.b11() + swir_green, p)
        }
        IndexKind::Mbi => ratio(
            b.b12() * b.b4() - b.b8a() * b.b8a(),
            b.b4() + b.b8a() + b.b12(),
            p,
        ),
        IndexKind::Baei => ratio(b.b4() + params.baei_c, b.b3() + b.b11(), p),
    }
}

/// Name-based entry point; rejects unknown index names.
pub fn compute_index_named(kind: &str, bands: &BandValues, params: &IndexParams) -> Result<f64> {
    Ok(compute_index(kind.parse()?, bands, params))
}

#[inline]
fn pixel_bands(grid: &RasterGrid, pixel: usize) -> Option<BandValues> {
    let n = grid.pixel_count();
    let mut out = [0.0f64; 12];
    for (b, slot) in out.iter_mut().enumerate() {
        let v = grid.pixels[b * n + pixel];
        if v == grid.nodata {
            return None;
        }
        *slot = v as f64;
    }
    Some(BandValues(out))
}

/// Single-band raster of one index. Pixels with nodata in any band stay nodata.
pub fn compute_index_raster(
    kind: IndexKind,
    composite: &EpochComposite,
    params: &IndexParams,
) -> RasterGrid {
    let grid = &composite.bands;
    let mut values = vec![grid.nodata; grid.pixel_count()];
    values
        .par_chunks_mut(grid.width)
        .enumerate()
        .for_each(|(row, out)| {
            for (col, v) in out.iter_mut().enumerate() {
                if let Some(b) = pixel_bands(grid, row * grid.width + col) {
                    *v = compute_index(kind, &b, params) as f32;
                }
            }
        });
    RasterGrid {
        width: grid.width,
        height: grid.height,
        band_names: vec![kind.name().to_string()],
        geotransform: grid.geotransform,
        crs: grid.crs.clone(),
        nodata: grid.nodata,
        pixels: values,
    }
}

/// All ten indices as one 10-band raster, in canonical order.
pub fn index_stack(composite: &EpochComposite, params: &IndexParams) -> RasterGrid {
    let grid = &composite.bands;
    let n = grid.pixel_count();
    let mut pixels = Vec::with_capacity(n * IndexKind::ALL.len());
    for kind in IndexKind::ALL {
        pixels.extend(compute_index_raster(kind, composite, params).pixels);
    }
    RasterGrid {
        width: grid.width,
        height: grid.height,
        band_names: IndexKind::ALL.iter().map(|k| k.name().to_string()).collect(),
        geotransform: grid.geotransform,
        crs: grid.crs.clone(),
        nodata: grid.nodata,
        pixels,
    }
}

/// The 66 canonical feature labels, e.g. `2015_2016_b8A`, `2019_2020_NDBI`.
pub fn feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(N_FEATURES);
    for epoch in Epoch::ALL {
        let prefix = epoch.label().replace('-', "_");
        names.extend(BAND_NAMES.iter().map(|b| format!("{prefix}_{b}")));
        names.extend(IndexKind::ALL.iter().map(|k| format!("{prefix}_{}", k.name())));
    }
    names
}

/// The three composites ordered by epoch, with extents checked.
#[derive(Debug, Clone, Copy)]
pub struct EpochStack<'a> {
    composites: [&'a EpochComposite; 3],
}

impl<'a> EpochStack<'a> {
    pub fn new(composites: &'a [EpochComposite]) -> Result<Self> {
        let find = |e: Epoch| {
            composites
                .iter()
                .find(|c| c.epoch == e)
                .ok_or(FeatureError::MissingEpoch(e))
        };
        let ordered = [
            find(Epoch::Y2015_2016)?,
            find(Epoch::Y2017_2018)?,
            find(Epoch::Y2019_2020)?,
        ];
        for c in &ordered[1..] {
            if !c.bands.same_extent(&ordered[0].bands) {
                return Err(FeatureError::ExtentMismatch(ordered[0].epoch, c.epoch));
            }
        }
        Ok(Self { composites: ordered })
    }

    pub fn width(&self) -> usize {
        self.composites[0].bands.width
    }

    pub fn height(&self) -> usize {
        self.composites[0].bands.height
    }

    pub fn grid(&self) -> &'a RasterGrid {
        &self.composites[0].bands
    }

    /// The 66-value vector of one pixel, or `None` if any epoch has nodata there.
    pub fn pixel_features(&self, pixel: usize, params: &IndexParams) -> Option<[f64; N_FEATURES]> {
        let mut out = [0.0f64; N_FEATURES];
        for (e, composite) in self.composites.iter().enumerate() {
            let bands = pixel_bands(&composite.bands, pixel)?;
            let block = &mut out[e * FEATURES_PER_EPOCH..(e + 1) * FEATURES_PER_EPOCH];
            block[..12].copy_from_slice(&bands.0);
            for (slot, kind) in block[12..].iter_mut().zip(IndexKind::ALL) {
                *slot = compute_index(kind, &bands, params);
            }
        }
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledFeatures {
    /// `(pixel index, features)` in input order, nodata pixels removed.
    pub rows: Vec<(usize, [f64; N_FEATURES])>,
    pub skipped: usize,
}

/// Feature vectors for the given pixel indices. Pixels with nodata in any
/// epoch are skipped and counted.
pub fn assemble_features(
    composites: &[EpochComposite],
    params: &IndexParams,
    pixels: &[usize],
) -> Result<AssembledFeatures> {
    params.validate()?;
    let stack = EpochStack::new(composites)?;
    let n = stack.width() * stack.height();
    if let Some(&p) = pixels.iter().find(|&&p| p >= n) {
        return Err(FeatureError::PixelOutOfRange(p));
    }
    let computed: Vec<Option<[f64; N_FEATURES]>> = pixels
        .par_iter()
        .map(|&p| stack.pixel_features(p, params))
        .collect();
    let mut rows = Vec::with_capacity(pixels.len());
    let mut skipped = 0;
    for (&p, f) in pixels.iter().zip(computed) {
        match f {
            Some(f) => rows.push((p, f)),
            None => skipped += 1,
        }
    }
    Ok(AssembledFeatures { rows, skipped })
}

/// Exactly [`N_FEATURES`] finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != N_FEATURES {
            return Err(FeatureError::BadVector(format!("got {} values", values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::BadVector(format!("value {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<[f64; N_FEATURES]> for FeatureVector {
    fn from(v: [f64; N_FEATURES]) -> Self {
        Self(v.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub pixel_id: String,
    pub municipality: String,
    pub settlement_id: Option<String>,
    pub grid_id: Option<String>,
    pub label: u8,
    pub features: FeatureVector,
}

impl FeatureRow {
    /// Settlement for positives, negative grid for negatives.
    pub fn group_id(&self) -> Option<&str> {
        if self.label == 1 {
            self.settlement_id.as_deref()
        } else {
            self.grid_id.as_deref()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTable {
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    /// Builds a table, enforcing pixel_id uniqueness and label/group tags.
    pub fn new(rows: Vec<FeatureRow>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(rows.len());
        for row in &rows {
            if !seen.insert(row.pixel_id.as_str()) {
                return Err(FeatureError::DuplicatePixel(row.pixel_id.clone()));
            }
            let bad = |reason: &str| FeatureError::BadRow {
                pixel_id: row.pixel_id.clone(),
                reason: reason.to_string(),
            };
            match row.label {
                1 if row.settlement_id.is_none() => return Err(bad("positive row without settlement_id")),
                0 if row.grid_id.is_none() => return Err(bad("negative row without grid_id")),
                0 | 1 => {}
                _ => return Err(bad("label must be 0 or 1")),
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn concat(tables: impl IntoIterator<Item = FeatureTable>) -> Result<Self> {
        Self::new(tables.into_iter().flat_map(|t| t.rows).collect())
    }

    pub fn municipalities(&self) -> Vec<String> {
        let mut m: Vec<String> = self.rows.iter().map(|r| r.municipality.clone()).collect();
        m.sort();
        m.dedup();
        m
    }

    pub fn positives(&self) -> usize {
        self.rows.iter().filter(|r| r.label == 1).count()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            "pixel_id".to_string(),
            "municipality".into(),
            "settlement_id".into(),
            "grid_id".into(),
            "label".into(),
        ];
        header.extend((0..N_FEATURES).map(|i| format!("f{i:02}")));
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for row in &self.rows {
            record.clear();
            record.push(row.pixel_id.clone());
            record.push(row.municipality.clone());
            record.push(row.settlement_id.clone().unwrap_or_default());
            record.push(row.grid_id.clone().unwrap_or_default());
            record.push(row.label.to_string());
            record.extend(row.features.as_slice().iter().map(|&v| format_sig9(v)));
            w.write_record(&record)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.len() != 5 + N_FEATURES || &header[0] != "pixel_id" {
            return Err(FeatureError::BadVector(format!(
                "unexpected header with {} columns",
                header.len()
            )));
        }
        let mut rows = Vec::new();
        for record in r.records() {
            let record = record?;
            let pixel_id = record[0].to_string();
            let bad = |reason: String| FeatureError::BadRow {
                pixel_id: pixel_id.clone(),
                reason,
            };
            let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
            let label: u8 = record[4].parse().map_err(|e| bad(format!("label: {e}")))?;
            let values = record
                .iter()
                .skip(5)
                .map(|s| s.parse::<f64>().map_err(|e| bad(format!("feature {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(FeatureRow {
                municipality: record[1].to_string(),
                settlement_id: opt(&record[2]),
                grid_id: opt(&record[3]),
                label,
                features: FeatureVector::new(values)?,
                pixel_id,
            });
        }
        Self::new(rows)
    }
}

/// Formats like C's `%.9g`: nine significant digits, trailing zeros trimmed.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
