//! Full-raster inference, 500 m grid-cell ranking and candidate export.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::composite::EpochComposite;
use crate::evaluation::top_decile_mean;
use crate::features::{feature_names, EpochStack, FeatureError, IndexParams};
use crate::models::ModelArtifact;
use crate::raster::{make_grid_cells, GridSpec, RasterError, RasterGrid};

pub const PROBABILITY_BAND: &str = "p_informal";

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("model features do not match the canonical 66-feature layout")]
    FeatureMismatch,
    #[error("probability map must have exactly one band named {PROBABILITY_BAND:?}")]
    NotAProbabilityMap,
    #[error("no valid pixels in the probability map")]
    NoValidPixels,
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MappingError> = std::result::Result<T, E>;

/// Probability of every pixel; nodata wherever any epoch is nodata.
pub fn predict_raster(
    model: &ModelArtifact,
    composites: &[EpochComposite],
    params: &IndexParams,
) -> Result<RasterGrid> {
    if model.feature_names != feature_names() {
        return Err(MappingError::FeatureMismatch);
    }
    params.validate()?;
    let stack = EpochStack::new(composites)?;
    let grid = stack.grid();
    let width = grid.width;
    let mut pixels = vec![grid.nodata; grid.pixel_count()];
    pixels.par_chunks_mut(width).enumerate().for_each(|(row, out)| {
        for (col, v) in out.iter_mut().enumerate() {
            if let Some(f) = stack.pixel_features(row * width + col, params) {
                *v = model.score(&f) as f32;
            }
        }
    });
    Ok(RasterGrid::new(
        width,
        grid.height,
        vec![PROBABILITY_BAND.to_string()],
        grid.geotransform,
        grid.crs.clone(),
        grid.nodata,
        pixels,
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCellScore {
    pub cell_id: usize,
    pub cell_row: usize,
    pub cell_col: usize,
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
    pub score: f64,
    pub valid_pixel_count: usize,
}

/// Scores each cell by the mean of its top-10% valid pixel probabilities,
/// sorted by score descending then (row, col).
pub fn rank_grid_cells(map: &RasterGrid, spec: &GridSpec) -> Result<Vec<GridCellScore>> {
    if map.band_count() != 1 || map.band_names[0] != PROBABILITY_BAND {
        return Err(MappingError::NotAProbabilityMap);
    }
    let values = map.band(0);
    let mut scores: Vec<GridCellScore> = make_grid_cells(map, spec)?
        .into_iter()
        .filter_map(|cell| {
            let valid: Vec<f64> = cell
                .pixels(map.width)
                .map(|i| values[i])
                .filter(|&v| v != map.nodata)
                .map(f64::from)
                .collect();
            top_decile_mean(&valid).map(|score| GridCellScore {
                cell_id: cell.id,
                cell_row: cell.cell_row,
                cell_col: cell.cell_col,
                row0: cell.rows.start,
                col0: cell.cols.start,
                rows: cell.rows.len(),
                cols: cell.cols.len(),
                score,
                valid_pixel_count: valid.len(),
            })
        })
        .collect();
    if scores.is_empty() {
        return Err(MappingError::NoValidPixels);
    }
    scores.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| (a.cell_row, a.cell_col).cmp(&(b.cell_row, b.cell_col)))
    });
    Ok(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    TopK(usize),
    MinScore(f64),
}

/// GeoJSON FeatureCollection of the selected cells, in rank order.
pub fn candidates_geojson(cells: &[GridCellScore], selection: Selection, geotransform: &[f64; 6]) -> Value {
    let chosen: Box<dyn Iterator<Item = &GridCellScore>> = match selection {
        Selection::TopK(k) => Box::new(cells.iter().take(k)),
        Selection::MinScore(s) => Box::new(cells.iter().take_while(move |c| c.score >= s)),
    };
    let gt = geotransform;
    let features: Vec<Value> = chosen
        .enumerate()
        .map(|(rank, c)| {
            let x0 = gt[0] + c.col0 as f64 * gt[1];
            let x1 = gt[0] + (c.col0 + c.cols) as f64 * gt[1];
            let y_top = gt[3] + c.row0 as f64 * gt[5];
            let y_bottom = gt[3] + (c.row0 + c.rows) as f64 * gt[5];
            json!({
                "type": "Feature",
                "properties": { "cell_id": c.cell_id, "score": c.score, "rank": rank + 1 },
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[
                        [x0, y_bottom], [x1, y_bottom], [x1, y_top], [x0, y_top], [x0, y_bottom]
                    ]],
                },
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}

pub fn export_candidates(
    cells: &[GridCellScore],
    selection: Selection,
    geotransform: &[f64; 6],
    path: impl AsRef<Path>,
) -> Result<Value> {
    let collection = candidates_geojson(cells, selection, geotransform);
    let text = serde_json::to_string_pretty(&collection).expect("geojson serializes");
    fs::write(path, text)?;
    Ok(collection)
}

/// 8-bit binary PGM preview: `round_half_up(p * 255)`, nodata as 0.
pub fn probability_pgm(map: &RasterGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(map.band(0).iter().map(|&p| {
        if p == map.nodata {
            0
        } else {
            (p.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
        }
    }));
    out
}

pub fn write_pgm(map: &RasterGrid, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&probability_pgm(map))?;
    Ok(())
}
