//! Georeferenced rasters, the BSQR container, polygon rasterization and
//! grid-cell tiling.
//!
//! Pixel `(row, col)` of a north-up raster covers the square whose top-left
//! corner is `(origin_x + col * pixel_width, origin_y + row * pixel_height)`,
//! where `pixel_height` is the (negative) sixth geotransform entry.

use std::fs;
use std::io::{self, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

/// Canonical pixel size (meters) that all bands are resampled to.
pub const CANONICAL_PIXEL_SIZE: f64 = 10.0;

/// Default nodata sentinel for rasters produced by this crate.
pub const DEFAULT_NODATA: f32 = -9999.0;

const MAGIC: &[u8; 4] = b"BSQR";

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("bad magic {0:?}, expected \"BSQR\"")]
    BadMagic([u8; 4]),
    #[error("file ends inside the header ({0})")]
    TruncatedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("payload length mismatch: header implies {expected} bytes, file carries {found}")]
    PayloadLengthMismatch { expected: usize, found: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("NaN in payload at sample {0}")]
    NanInPayload(usize),
    #[error("invalid raster: {0}")]
    Invalid(String),
    #[error("degenerate ring in polygon {polygon}: {vertices} vertices (need at least 4, closed)")]
    DegenerateRing { polygon: usize, vertices: usize },
    #[error("cell size {cell_size} m is not a positive integer multiple of pixel size {pixel_size} m")]
    CellSizeNotMultiple { cell_size: f64, pixel_size: f64 },
    #[error("invalid GeoJSON: {0}")]
    GeoJson(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = RasterError> = std::result::Result<T, E>;

/// A north-up, band-sequential, georeferenced float raster.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    pub width: usize,
    pub height: usize,
    pub band_names: Vec<String>,
    /// `[origin_x, pixel_width, 0, origin_y, 0, -pixel_height]`
    pub geotransform: [f64; 6],
    pub crs: String,
    pub nodata: f32,
    /// Band-sequential, row-major: `band * width * height + row * width + col`.
    pub pixels: Vec<f32>,
}

impl RasterGrid {
    pub fn new(
        width: usize,
        height: usize,
        band_names: Vec<String>,
        geotransform: [f64; 6],
        crs: impl Into<String>,
        nodata: f32,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        let grid = Self {
            width,
            height,
            band_names,
            geotransform,
            crs: crs.into(),
            nodata,
            pixels,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// A grid with every pixel of every band set to `fill`.
    pub fn filled(
        width: usize,
        height: usize,
        band_names: Vec<String>,
        geotransform: [f64; 6],
        crs: impl Into<String>,
        nodata: f32,
        fill: f32,
    ) -> Result<Self> {
        let len = width * height * band_names.len();
        Self::new(width, height, band_names, geotransform, crs, nodata, vec![fill; len])
    }

    pub fn validate(&self) -> Result<()> {
        if self.band_names.is_empty() {
            return Err(RasterError::Invalid("band list is empty".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(RasterError::Invalid(format!(
                "zero-sized raster {}x{}",
                self.width, self.height
            )));
        }
        let gt = &self.geotransform;
        if !gt.iter().all(|v| v.is_finite()) {
            return Err(RasterError::Invalid("non-finite geotransform".into()));
        }
        if gt[1] <= 0.0 || gt[5] >= 0.0 {
            return Err(RasterError::Invalid(format!(
                "geotransform is not north-up (pixel width {}, pixel height {})",
                gt[1], gt[5]
            )));
        }
        if gt[2] != 0.0 || gt[4] != 0.0 {
            return Err(RasterError::Invalid("rotated geotransforms are not supported".into()));
        }
        if !self.nodata.is_finite() {
            return Err(RasterError::Invalid("nodata sentinel must be finite".into()));
        }
        let expected = self.width * self.height * self.band_names.len();
        if self.pixels.len() != expected {
            return Err(RasterError::Invalid(format!(
                "pixel buffer holds {} values, {}x{}x{} needs {}",
                self.pixels.len(),
                self.width,
                self.height,
                self.band_names.len(),
                expected
            )));
        }
        if let Some(i) = self.pixels.iter().position(|v| !v.is_finite()) {
            return Err(RasterError::Invalid(format!("non-finite value at sample {i}")));
        }
        Ok(())
    }

    #[inline]
    pub fn band_count(&self) -> usize {
        self.band_names.len()
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel_width(&self) -> f64 {
        self.geotransform[1]
    }

    pub fn pixel_height(&self) -> f64 {
        -self.geotransform[5]
    }

    pub fn band(&self, band: usize) -> &[f32] {
        let n = self.pixel_count();
        &self.pixels[band * n..(band + 1) * n]
    }

    pub fn band_mut(&mut self, band: usize) -> &mut [f32] {
        let n = self.pixel_count();
        &mut self.pixels[band * n..(band + 1) * n]
    }

    pub fn band_index(&self, name: &str) -> Option<usize> {
        self.band_names.iter().position(|b| b == name)
    }

    #[inline]
    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.pixels[band * self.pixel_count() + row * self.width + col]
    }

    #[inline]
    pub fn is_nodata(&self, value: f32) -> bool {
        value == self.nodata
    }

    /// CRS coordinates of the center of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let gt = &self.geotransform;
        (
            gt[0] + (col as f64 + 0.5) * gt[1],
            gt[3] + (row as f64 + 0.5) * gt[5],
        )
    }

    /// CRS coordinates of the top-left corner of pixel `(row, col)`.
    pub fn pixel_corner(&self, row: usize, col: usize) -> (f64, f64) {
        let gt = &self.geotransform;
        (gt[0] + col as f64 * gt[1], gt[3] + row as f64 * gt[5])
    }

    /// Same dimensions and georeferencing (band layout may differ).
    pub fn same_extent(&self, other: &RasterGrid) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.geotransform == other.geotransform
    }
}

#[derive(Serialize, Deserialize)]
struct BsqrHeader {
    width: usize,
    height: usize,
    bands: usize,
    band_names: Vec<String>,
    geotransform: [f64; 6],
    crs: String,
    nodata: f32,
    dtype: String,
}

/// Encodes a grid in the BSQR container.
pub fn encode_raster(grid: &RasterGrid) -> Result<Vec<u8>> {
    grid.validate()?;
    let header = BsqrHeader {
        width: grid.width,
        height: grid.height,
        bands: grid.band_count(),
        band_names: grid.band_names.clone(),
        geotransform: grid.geotransform,
        crs: grid.crs.clone(),
        nodata: grid.nodata,
        dtype: "float32".to_string(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| RasterError::InvalidHeader(e.to_string()))?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| RasterError::InvalidHeader("header longer than 4 GiB".into()))?;
    let mut out = Vec::with_capacity(8 + header.len() + grid.pixels.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for v in &grid.pixels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raster(bytes: &[u8]) -> Result<RasterGrid> {
    if bytes.len() < 4 {
        return Err(RasterError::TruncatedHeader("missing magic".into()));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(RasterError::BadMagic(magic));
    }
    if bytes.len() < 8 {
        return Err(RasterError::TruncatedHeader("missing header length".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .ok_or_else(|| RasterError::TruncatedHeader("header length overflows".into()))?;
    if bytes.len() < header_end {
        return Err(RasterError::TruncatedHeader(format!(
            "header declares {header_len} bytes, {} available",
            bytes.len() - 8
        )));
    }
    let header: BsqrHeader = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| RasterError::InvalidHeader(e.to_string()))?;
    if header.dtype != "float32" {
        return Err(RasterError::InvalidHeader(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.bands != header.band_names.len() {
        return Err(RasterError::InvalidHeader(format!(
            "bands = {} but {} band names",
            header.bands,
            header.band_names.len()
        )));
    }
    let expected = header
        .width
        .checked_mul(header.height)
        .and_then(|n| n.checked_mul(header.bands))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| RasterError::InvalidHeader("dimensions overflow".into()))?;
    let payload = &bytes[header_end..];
    if payload.len() < expected {
        return Err(RasterError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(RasterError::PayloadLengthMismatch {
            expected,
            found: payload.len(),
        });
    }
    let mut pixels = Vec::with_capacity(expected / 4);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if v.is_nan() {
            return Err(RasterError::NanInPayload(i));
        }
        pixels.push(v);
    }
    RasterGrid::new(
        header.width,
        header.height,
        header.band_names,
        header.geotransform,
        header.crs,
        header.nodata,
        pixels,
    )
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<RasterGrid> {
    decode_raster(&fs::read(path)?)
}

pub fn write_raster(grid: &RasterGrid, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_raster(grid)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// One polygon: an exterior ring and optional holes, all closed.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub rings: Vec<Vec<(f64, f64)>>,
    pub label: Option<String>,
}

impl Polygon {
    pub fn new(ring: Vec<(f64, f64)>, label: Option<String>) -> Self {
        Self {
            rings: vec![ring],
            label,
        }
    }

    /// Even-odd containment over all rings.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        for ring in &self.rings {
            for w in ring.windows(2) {
                let (xi, yi) = w[0];
                let (xj, yj) = w[1];
                if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// `(min_x, min_y, max_x, max_y)`
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in self.rings.iter().flatten() {
            b.0 = b.0.min(x);
            b.1 = b.1.min(y);
            b.2 = b.2.max(x);
            b.3 = b.3.max(y);
        }
        b
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolygonSet {
    pub polygons: Vec<Polygon>,
}

impl PolygonSet {
    pub fn new(polygons: Vec<Polygon>) -> Self {
        Self { polygons }
    }

    pub fn len(&self) -> usize {
        self.polygons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polygons.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.polygons.iter().enumerate() {
            if p.rings.is_empty() {
                return Err(RasterError::DegenerateRing { polygon: i, vertices: 0 });
            }
            for ring in &p.rings {
                if ring.len() < 4 || ring.first() != ring.last() {
                    return Err(RasterError::DegenerateRing {
                        polygon: i,
                        vertices: ring.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Parses a GeoJSON FeatureCollection of Polygons. The polygon label is
    /// taken from the `settlement_id`, `id` or `name` property, in that order.
    pub fn from_geojson(value: &Value) -> Result<Self> {
        let bad = |m: &str| RasterError::GeoJson(m.to_string());
        if value.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
            return Err(bad("expected a FeatureCollection"));
        }
        let features = value
            .get("features")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing features array"))?;
        let mut polygons = Vec::with_capacity(features.len());
        for feature in features {
            let geometry = feature.get("geometry").ok_or_else(|| bad("feature without geometry"))?;
            if geometry.get("type").and_then(Value::as_str) != Some("Polygon") {
                return Err(bad("only Polygon geometries are supported"));
            }
            let rings = geometry
                .get("coordinates")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("polygon without coordinates"))?
                .iter()
                .map(|ring| {
                    ring.as_array()
                        .ok_or_else(|| bad("ring is not an array"))?
                        .iter()
                        .map(|pt| match pt.as_array().map(Vec::as_slice) {
                            Some([x, y, ..]) => match (x.as_f64(), y.as_f64()) {
                                (Some(x), Some(y)) => Ok((x, y)),
                                _ => Err(bad("non-numeric coordinate")),
                            },
                            _ => Err(bad("position needs two numbers")),
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let props = feature.get("properties");
            let label = ["settlement_id", "id", "name"].iter().find_map(|key| {
                props.and_then(|p| p.get(*key)).and_then(|v| match v {
                    Value::String(s) => Some(s.clone()),
                    Value::Number(n) => Some(n.to_string()),
                    _ => None,
                })
            });
            polygons.push(Polygon { rings, label });
        }
        let set = Self { polygons };
        set.validate()?;
        Ok(set)
    }

    pub fn to_geojson(&self) -> Value {
        let features: Vec<Value> = self
            .polygons
            .iter()
            .map(|p| {
                let coords: Vec<Vec<[f64; 2]>> = p
                    .rings
                    .iter()
                    .map(|r| r.iter().map(|&(x, y)| [x, y]).collect())
                    .collect();
                let properties = match &p.label {
                    Some(l) => json!({ "settlement_id": l }),
                    None => json!({}),
                };
                json!({
                    "type": "Feature",
                    "properties": properties,
                    "geometry": { "type": "Polygon", "coordinates": coords },
                })
            })
            .collect();
        json!({ "type": "FeatureCollection", "features": features })
    }

    pub fn read_geojson(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| RasterError::GeoJson(e.to_string()))?;
        Self::from_geojson(&value)
    }

    pub fn write_geojson(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_geojson())
            .map_err(|e| RasterError::GeoJson(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}

/// Per-pixel polygon membership: the index of the first polygon (input
/// order) whose interior holds the pixel center.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<Option<u32>>,
}

impl LabelMask {
    pub fn to_binary(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.is_some() as u8).collect()
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Rasterizes polygons by pixel-center containment, keeping the first
/// polygon that claims each pixel.
pub fn rasterize_labels(polys: &PolygonSet, grid: &RasterGrid) -> Result<LabelMask> {
    polys.validate()?;
    let (w, h) = (grid.width, grid.height);
    let mut labels = vec![None; w * h];
    let gt = &grid.geotransform;
    for (idx, poly) in polys.polygons.iter().enumerate() {
        let (min_x, min_y, max_x, max_y) = poly.bounds();
        // Column/row windows whose centers can fall inside the bounding box.
        let col_lo = ((min_x - gt[0]) / gt[1] - 0.5).floor().max(0.0);
        let col_hi = ((max_x - gt[0]) / gt[1] - 0.5).ceil().min(w as f64 - 1.0);
        let row_lo = ((max_y - gt[3]) / gt[5] - 0.5).floor().max(0.0);
        let row_hi = ((min_y - gt[3]) / gt[5] - 0.5).ceil().min(h as f64 - 1.0);
        if col_hi < col_lo || row_hi < row_lo {
            continue;
        }
        for row in row_lo as usize..=row_hi as usize {
            for col in col_lo as usize..=col_hi as usize {
                let slot = &mut labels[row * w + col];
                if slot.is_some() {
                    continue;
                }
                let (x, y) = grid.pixel_center(row, col);
                if poly.contains(x, y) {
                    *slot = Some(idx as u32);
                }
            }
        }
    }
    Ok(LabelMask {
        width: w,
        height: h,
        labels,
    })
}

/// 0/1 mask of pixels whose centers lie inside any polygon.
pub fn rasterize_polygons(polys: &PolygonSet, grid: &RasterGrid) -> Result<Vec<u8>> {
    Ok(rasterize_labels(polys, grid)?.to_binary())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Cell edge length in CRS units (meters).
    pub cell_size: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { cell_size: 500.0 }
    }
}

impl GridSpec {
    /// Cell edge length in pixels for the given raster.
    pub fn cell_pixels(&self, grid: &RasterGrid) -> Result<usize> {
        let pixel = grid.pixel_width();
        let err = RasterError::CellSizeNotMultiple {
            cell_size: self.cell_size,
            pixel_size: pixel,
        };
        if !(self.cell_size > 0.0) || (grid.pixel_height() - pixel).abs() > 1e-9 * pixel {
            return Err(err);
        }
        let ratio = self.cell_size / pixel;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(err);
        }
        Ok(n as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridCell {
    /// Row-major cell index.
    pub id: usize,
    pub cell_row: usize,
    pub cell_col: usize,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl GridCell {
    pub fn pixel_count(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn pixels(&self, width: usize) -> impl Iterator<Item = usize> + '_ {
        self.rows
            .clone()
            .flat_map(move |r| self.cols.clone().map(move |c| r * width + c))
    }
}

/// Tiles the raster into cells anchored at its origin. Edge cells may be
/// partial.
pub fn make_grid_cells(grid: &RasterGrid, spec: &GridSpec) -> Result<Vec<GridCell>> {
    let n = spec.cell_pixels(grid)?;
    let cell_rows = grid.height.div_ceil(n);
    let cell_cols = grid.width.div_ceil(n);
    let mut cells = Vec::with_capacity(cell_rows * cell_cols);
    for cr in 0..cell_rows {
        for cc in 0..cell_cols {
            cells.push(GridCell {
                id: cr * cell_cols + cc,
                cell_row: cr,
                cell_col: cc,
                rows: cr * n..((cr + 1) * n).min(grid.height),
                cols: cc * n..((cc + 1) * n).min(grid.width),
            });
        }
    }
    Ok(cells)
}
