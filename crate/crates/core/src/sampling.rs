//! Labelled pixel selection: every positive pixel inside settlement polygons,
//! and a fixed-size stratified draw of negatives from vetted grid blocks.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composite::EpochComposite;
use crate::features::{
    assemble_features, FeatureError, FeatureRow, FeatureTable, FeatureVector, IndexParams,
};
use crate::raster::LabelMask;

/// Positive pixels and polygons per municipality in the reference field
/// survey: `(municipality, positive pixels, positive polygons)`.
pub const REFERENCE_MUNICIPALITIES: [(&str, usize, usize); 9] = [
    ("Arauca", 2298, 7),
    ("Arauquita", 778, 2),
    ("Bogota", 2720, 6),
    ("Cucuta", 2485, 3),
    ("Maicao", 552, 7),
    ("Riohacha", 3501, 4),
    ("Soacha", 347, 1),
    ("Tibu", 730, 3),
    ("Uribia", 10345, 3),
];

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("invalid sampling plan: {0}")]
    InvalidPlan(String),
    #[error("municipality {0:?} has no registered negative grids")]
    UnknownMunicipality(String),
    #[error("{municipality}: {found} grids ({formal} formal), need {min_grids} grids with {min_urban} formal")]
    InsufficientGrids {
        municipality: String,
        found: usize,
        formal: usize,
        min_grids: usize,
        min_urban: usize,
    },
    #[error("{municipality}: {class:?} grids hold {available} pixels, {required} required")]
    InsufficientPixels {
        municipality: String,
        class: GridClass,
        available: usize,
        required: usize,
    },
    #[error("registry: {0}")]
    Registry(String),
    #[error("positive mask has {mask} polygons but {ids} settlement ids were given")]
    SettlementIds { mask: usize, ids: usize },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SamplingError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingPlan {
    pub negatives_per_municipality: usize,
    pub formal_fraction: f64,
    pub unoccupied_fraction: f64,
    pub min_grids: usize,
    pub min_urban_grids: usize,
    pub seed: u64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            negatives_per_municipality: 30_000,
            formal_fraction: 0.40,
            unoccupied_fraction: 0.60,
            min_grids: 30,
            min_urban_grids: 3,
            seed: 0,
        }
    }
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if (self.formal_fraction + self.unoccupied_fraction - 1.0).abs() > 1e-9 {
            problems.push(format!(
                "formal_fraction + unoccupied_fraction = {}, must be 1",
                self.formal_fraction + self.unoccupied_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.formal_fraction) {
            problems.push(format!("formal_fraction {} outside [0, 1]", self.formal_fraction));
        }
        if self.negatives_per_municipality == 0 {
            problems.push("negatives_per_municipality must be positive".into());
        }
        if self.min_grids == 0 || self.min_urban_grids == 0 {
            problems.push("min_grids and min_urban_grids must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SamplingError::InvalidPlan(problems.join("; ")))
        }
    }

    /// `(formal, unoccupied)` counts; formal rounds half up, unoccupied
    /// takes the remainder.
    pub fn class_counts(&self) -> (usize, usize) {
        let n = self.negatives_per_municipality;
        let formal = ((self.formal_fraction * n as f64) + 0.5).floor() as usize;
        let formal = formal.min(n);
        (formal, n - formal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridClass {
    Formal,
    Unoccupied,
}

/// A vetted negative block, in pixel coordinates of the municipality raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeGrid {
    pub grid_id: String,
    pub class: GridClass,
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl NegativeGrid {
    fn overlaps(&self, other: &NegativeGrid) -> bool {
        self.row0 < other.row0 + other.rows
            && other.row0 < self.row0 + self.rows
            && self.col0 < other.col0 + other.cols
            && other.col0 < self.col0 + self.cols
    }

    pub fn pixel_count(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NegativeGridRegistry {
    pub municipalities: BTreeMap<String, Vec<NegativeGrid>>,
}

impl NegativeGridRegistry {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for (m, grids) in &self.municipalities {
            for (i, g) in grids.iter().enumerate() {
                if g.rows == 0 || g.cols == 0 {
                    return Err(SamplingError::Registry(format!("{m}: grid {} is empty", g.grid_id)));
                }
                if !ids.insert(g.grid_id.as_str()) {
                    return Err(SamplingError::Registry(format!("duplicate grid_id {}", g.grid_id)));
                }
                if let Some(o) = grids[..i].iter().find(|o| o.overlaps(g)) {
                    return Err(SamplingError::Registry(format!(
                        "{m}: grids {} and {} overlap",
                        o.grid_id, g.grid_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let registry: Self =
            serde_json::from_str(&text).map_err(|e| SamplingError::Registry(e.to_string()))?;
        registry.validate()?;
        Ok(registry)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| SamplingError::Registry(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn grids(&self, municipality: &str) -> Option<&[NegativeGrid]> {
        self.municipalities.get(municipality).map(Vec::as_slice)
    }
}

/// A pixel chosen for the dataset, before features are attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPixel {
    pub municipality: String,
    pub row: usize,
    pub col: usize,
    pub label: u8,
    pub settlement_id: Option<String>,
    pub grid_id: Option<String>,
}

impl LabeledPixel {
    /// Zero-padded so lexical order follows (row, col).
    pub fn pixel_id(&self) -> String {
        format!("{}:{:05}:{:05}", self.municipality, self.row, self.col)
    }
}

/// One row per pixel claimed by a polygon, tagged with the settlement of the
/// first polygon (input order) containing it.
pub fn extract_positive_pixels(
    mask: &LabelMask,
    municipality: &str,
    settlement_ids: &[String],
) -> Result<Vec<LabeledPixel>> {
    let mut rows = Vec::new();
    for (i, label) in mask.labels.iter().enumerate() {
        let Some(poly) = label else { continue };
        let id = settlement_ids.get(*poly as usize).ok_or(SamplingError::SettlementIds {
            mask: *poly as usize + 1,
            ids: settlement_ids.len(),
        })?;
        rows.push(LabeledPixel {
            municipality: municipality.to_string(),
            row: i / mask.width,
            col: i % mask.width,
            label: 1,
            settlement_id: Some(id.clone()),
            grid_id: None,
        });
    }
    if rows.is_empty() {
        log::warn!("{municipality}: positive mask is empty");
    }
    Ok(rows)
}

/// FNV-1a, used to give each municipality its own reproducible stream.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Draws exactly `plan.negatives_per_municipality` distinct pixels, split
/// between formal and unoccupied grids, uniformly within each class.
pub fn sample_negative_pixels(
    registry: &NegativeGridRegistry,
    plan: &SamplingPlan,
    municipality: &str,
) -> Result<Vec<LabeledPixel>> {
    plan.validate()?;
    let grids = registry
        .grids(municipality)
        .ok_or_else(|| SamplingError::UnknownMunicipality(municipality.to_string()))?;
    let formal_grids = grids.iter().filter(|g| g.class == GridClass::Formal).count();
    if grids.len() < plan.min_grids || formal_grids < plan.min_urban_grids {
        return Err(SamplingError::InsufficientGrids {
            municipality: municipality.to_string(),
            found: grids.len(),
            formal: formal_grids,
            min_grids: plan.min_grids,
            min_urban: plan.min_urban_grids,
        });
    }
    let (n_formal, n_unoccupied) = plan.class_counts();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ name_hash(municipality));
    let mut out = Vec::with_capacity(plan.negatives_per_municipality);
    for (class, wanted) in [(GridClass::Formal, n_formal), (GridClass::Unoccupied, n_unoccupied)] {
        // Candidate pixels in registry order, row-major within each grid.
        let candidates: Vec<(&NegativeGrid, usize, usize)> = grids
            .iter()
            .filter(|g| g.class == class)
            .flat_map(|g| {
                (g.row0..g.row0 + g.rows)
                    .flat_map(move |r| (g.col0..g.col0 + g.cols).map(move |c| (g, r, c)))
            })
            .collect();
        if candidates.len() < wanted {
            return Err(SamplingError::InsufficientPixels {
                municipality: municipality.to_string(),
                class,
                available: candidates.len(),
                required: wanted,
            });
        }
        let mut picked = index::sample(&mut rng, candidates.len(), wanted).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| {
            let (g, row, col) = candidates[i];
            LabeledPixel {
                municipality: municipality.to_string(),
                row,
                col,
                label: 0,
                settlement_id: None,
                grid_id: Some(g.grid_id.clone()),
            }
        }));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MunicipalityCounts {
    pub municipality: String,
    pub positives: usize,
    pub negatives: usize,
    pub skipped_nodata: usize,
}

/// Attaches features to one municipality's labelled pixels.
pub fn build_dataset(
    positives: &[LabeledPixel],
    negatives: &[LabeledPixel],
    composites: &[EpochComposite],
    params: &IndexParams,
) -> Result<(FeatureTable, MunicipalityCounts)> {
    let labeled: Vec<&LabeledPixel> = positives.iter().chain(negatives).collect();
    let width = composites
        .first()
        .map(|c| c.bands.width)
        .ok_or(FeatureError::MissingEpoch(crate::composite::Epoch::Y2015_2016))?;
    let height = composites[0].bands.height;
    let mut indices = Vec::with_capacity(labeled.len());
    for p in &labeled {
        if p.row >= height || p.col >= width {
            return Err(FeatureError::PixelOutOfRange(p.row * width + p.col).into());
        }
        indices.push(p.row * width + p.col);
    }
    let assembled = assemble_features(composites, params, &indices)?;
    let mut by_pixel = assembled.rows.into_iter().peekable();
    let mut rows = Vec::with_capacity(labeled.len());
    let mut counts = MunicipalityCounts {
        municipality: labeled.first().map(|p| p.municipality.clone()).unwrap_or_default(),
        skipped_nodata: assembled.skipped,
        ..Default::default()
    };
    // assemble_features keeps input order, so walk both sequences together.
    for (p, &idx) in labeled.iter().zip(&indices) {
        let Some((_, f)) = by_pixel.next_if(|(i, _)| *i == idx) else {
            continue;
        };
        if p.label == 1 {
            counts.positives += 1;
        } else {
            counts.negatives += 1;
        }
        rows.push(FeatureRow {
            pixel_id: p.pixel_id(),
            municipality: p.municipality.clone(),
            settlement_id: p.settlement_id.clone(),
            grid_id: p.grid_id.clone(),
            label: p.label,
            features: FeatureVector::from(f),
        });
    }
    Ok((FeatureTable::new(rows)?, counts))
}
