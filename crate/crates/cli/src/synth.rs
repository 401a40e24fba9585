//! Synthetic fixture generator: multi-date band rasters with planted
//! settlements, look-alike confounders and clouds, plus the matching polygon
//! files, negative-grid registry and pipeline config.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use settlemap_core::composite::{Epoch, ManifestEntry, NATIVE_RESOLUTION};
use settlemap_core::models::{ForestParams, ModelParams};
use settlemap_core::raster::{write_raster, Polygon, RasterError, DEFAULT_NODATA};
use settlemap_core::sampling::{GridClass, NegativeGrid, REFERENCE_MUNICIPALITIES};
use settlemap_core::{ModelSpec, NegativeGridRegistry, PolygonSet, RasterGrid, SamplingPlan, BAND_NAMES};

use crate::config::{MunicipalityConfig, PipelineConfig};

/// Edge of a layout cell in pixels; matches the default 500 m ranking grid.
pub const CELL: usize = 50;
const PIXEL: f64 = 10.0;
const CRS: &str = "EPSG:32618";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("degenerate fixture: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub seed: u64,
    /// Raster edge in 10 m pixels.
    pub size: usize,
    pub municipalities: usize,
    pub settlements: usize,
    pub scenes_per_epoch: usize,
    /// Requested negatives per municipality; capped to what the grids hold.
    pub negatives: usize,
    pub trees: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 300,
            municipalities: 9,
            settlements: 5,
            scenes_per_epoch: 3,
            negatives: 30_000,
            trees: 100,
        }
    }
}

impl SynthOptions {
    fn validate(&self) -> Result<(), SynthError> {
        let cells = (self.size / CELL).pow(2);
        let mut problems = Vec::new();
        if self.size < 100 {
            problems.push(format!("size {} < 100 px", self.size));
        }
        if self.municipalities < 2 {
            problems.push("need at least 2 municipalities for spatial folds".into());
        }
        if self.settlements == 0 {
            problems.push("need at least one settlement per municipality".into());
        }
        if self.settlements + 4 > cells {
            problems.push(format!(
                "{} settlements do not fit with 4 negative grids in {cells} cells",
                self.settlements
            ));
        }
        if self.scenes_per_epoch == 0 || self.scenes_per_epoch > 12 {
            problems.push("scenes_per_epoch must be in 1..=12".into());
        }
        if self.negatives == 0 || self.trees == 0 {
            problems.push("negatives and trees must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SynthError::Degenerate(problems.join("; ")))
        }
    }
}

/// Endmember reflectances in band order b1..b12 (b8A before b9).
const VEGETATION: [f64; 12] = [0.035, 0.045, 0.075, 0.045, 0.11, 0.26, 0.31, 0.34, 0.36, 0.36, 0.19, 0.10];
const BARE: [f64; 12] = [0.09, 0.11, 0.15, 0.19, 0.22, 0.24, 0.26, 0.27, 0.28, 0.29, 0.36, 0.31];
const FORMAL: [f64; 12] = [0.11, 0.12, 0.13, 0.14, 0.16, 0.17, 0.18, 0.19, 0.20, 0.20, 0.23, 0.20];
const INFORMAL: [f64; 12] = [0.13, 0.16, 0.19, 0.21, 0.22, 0.22, 0.23, 0.23, 0.24, 0.24, 0.29, 0.25];
const ENDMEMBERS: [[f64; 12]; 4] = [VEGETATION, BARE, FORMAL, INFORMAL];
const CLOUD: f64 = 0.45;

/// Fractions of (vegetation, bare, formal, informal).
type Mix = [f64; 4];

fn blend(a: Mix, b: Mix, t: f64) -> Mix {
    std::array::from_fn(|i| a[i] * (1.0 - t) + b[i] * t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confounder {
    pub kind: String,
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSettlement {
    pub id: String,
    pub cell_row: usize,
    pub cell_col: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MunicipalityTruth {
    pub name: String,
    pub gain: f64,
    pub settlements: Vec<PlantedSettlement>,
    pub formal_grids: usize,
    pub unoccupied_grids: usize,
    pub confounders: Vec<Confounder>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub config: PathBuf,
    pub negatives_per_municipality: usize,
    pub municipalities: Vec<MunicipalityTruth>,
}

pub fn municipality_name(i: usize) -> String {
    REFERENCE_MUNICIPALITIES
        .get(i)
        .map(|m| m.0.to_string())
        .unwrap_or_else(|| format!("Synthetic{i:02}"))
}

/// Per-pixel cover mixtures for the three epochs plus municipality metadata.
struct Layout {
    mixes: Vec<[Mix; 3]>,
    polygons: PolygonSet,
    grids: Vec<NegativeGrid>,
    truth: MunicipalityTruth,
    origin: (f64, f64),
}

/// A rectangular patch inside `cell` that converts towards `target` by the
/// last epoch.
fn patch(
    mixes: &mut [[Mix; 3]],
    size: usize,
    rng: &mut ChaCha8Rng,
    cell: (usize, usize),
    kind: &str,
    target: Mix,
) -> Confounder {
    let rows = rng.gen_range(10..=25);
    let cols = rng.gen_range(10..=25);
    let row0 = cell.0 * CELL + rng.gen_range(0..=CELL - rows);
    let col0 = cell.1 * CELL + rng.gen_range(0..=CELL - cols);
    let midway = rng.gen_range(0.0..0.6);
    for r in row0..row0 + rows {
        for c in col0..col0 + cols {
            let px = &mut mixes[r * size + c];
            let amount = rng.gen_range(0.6..1.0);
            px[1] = blend(px[0], target, amount * midway);
            px[2] = blend(px[0], target, amount);
        }
    }
    Confounder { kind: kind.to_string(), row0, col0, rows, cols }
}

fn plan_layout(name: &str, index: usize, opts: &SynthOptions, rng: &mut ChaCha8Rng) -> Layout {
    let size = opts.size;
    let per_side = size / CELL;
    let origin = (400_000.0 + index as f64 * 50_000.0, 1_300_000.0);
    let mut cells: Vec<(usize, usize)> = (0..per_side).flat_map(|r| (0..per_side).map(move |c| (r, c))).collect();
    cells.shuffle(rng);
    let (settled, rest) = cells.split_at(opts.settlements);
    let n_formal = ((rest.len() as f64 * 0.25).round() as usize).clamp(3, rest.len() - 1);
    let mut formal: Vec<(usize, usize)> = rest[..n_formal].to_vec();
    let mut unoccupied: Vec<(usize, usize)> = rest[n_formal..].to_vec();
    formal.sort_unstable();
    unoccupied.sort_unstable();

    // Background: a vegetation/bare mix per cell with per-pixel jitter; the
    // partial strip beyond the last full cell reuses the nearest cell's mix.
    let cell_veg: Vec<f64> = (0..per_side * per_side).map(|_| rng.gen_range(0.45..1.0)).collect();
    let mut mixes: Vec<[Mix; 3]> = (0..size * size)
        .map(|i| {
            let (r, c) = ((i / size / CELL).min(per_side - 1), (i % size / CELL).min(per_side - 1));
            let v = (cell_veg[r * per_side + c] + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
            let m = [v, 1.0 - v, 0.0, 0.0];
            [m; 3]
        })
        .collect();

    let mut confounders = Vec::new();
    for &cell in &unoccupied {
        if rng.gen_bool(0.5) {
            confounders.push(patch(&mut mixes, size, rng, cell, "bare_conversion", [0.0, 1.0, 0.0, 0.0]));
        }
    }
    for &cell in &formal {
        // Established built-up area, static across epochs.
        let built = rng.gen_range(0.55..0.9);
        for r in cell.0 * CELL..(cell.0 + 1) * CELL {
            for c in cell.1 * CELL..(cell.1 + 1) * CELL {
                let m = blend(mixes[r * size + c][0], [0.0, 0.0, 1.0, 0.0], built);
                mixes[r * size + c] = [m; 3];
            }
        }
        if rng.gen_bool(0.5) {
            confounders.push(patch(&mut mixes, size, rng, cell, "formal_growth", [0.0, 0.0, 1.0, 0.0]));
        }
    }

    let mut polygons = Vec::new();
    let mut planted = Vec::new();
    let mut sorted_settled = settled.to_vec();
    sorted_settled.sort_unstable();
    for (k, &(cr, cc)) in sorted_settled.iter().enumerate() {
        let id = format!("{name}-s{k:02}");
        let radius = rng.gen_range(8.0..20.0);
        let slack = CELL as f64 / 2.0 - radius - 1.0;
        let cy = (cr * CELL) as f64 + CELL as f64 / 2.0 + rng.gen_range(-slack..=slack);
        let cx = (cc * CELL) as f64 + CELL as f64 / 2.0 + rng.gen_range(-slack..=slack);
        let n = rng.gen_range(6..=10);
        let ring: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let a = (i as f64 + rng.gen_range(-0.3..0.3)) * TAU / n as f64;
                let r = radius * rng.gen_range(0.65..1.0);
                let (px, py) = (cx + r * a.cos(), cy + r * a.sin());
                (origin.0 + px * PIXEL, origin.1 - py * PIXEL)
            })
            .collect();
        let mut ring = ring;
        ring.push(ring[0]);
        let poly = Polygon::new(ring, Some(id.clone()));
        let onset = rng.gen_range(0.0..0.6);
        for r in cr * CELL..(cr + 1) * CELL {
            for c in cc * CELL..(cc + 1) * CELL {
                let (x, y) = (origin.0 + (c as f64 + 0.5) * PIXEL, origin.1 - (r as f64 + 0.5) * PIXEL);
                if poly.contains(x, y) {
                    let px = &mut mixes[r * size + c];
                    let f = rng.gen_range(0.55..1.0);
                    px[1] = blend(px[0], [0.0, 0.0, 0.0, 1.0], f * onset);
                    px[2] = blend(px[0], [0.0, 0.0, 0.0, 1.0], f);
                }
            }
        }
        polygons.push(poly);
        planted.push(PlantedSettlement { id, cell_row: cr, cell_col: cc });
    }

    let grid_of = |&(r, c): &(usize, usize), class| NegativeGrid {
        grid_id: format!("{name}-g{:03}", r * per_side + c),
        class,
        row0: r * CELL,
        col0: c * CELL,
        rows: CELL,
        cols: CELL,
    };
    let mut grids: Vec<NegativeGrid> = formal
        .iter()
        .map(|c| grid_of(c, GridClass::Formal))
        .chain(unoccupied.iter().map(|c| grid_of(c, GridClass::Unoccupied)))
        .collect();
    grids.sort_by(|a, b| a.grid_id.cmp(&b.grid_id));

    Layout {
        mixes,
        polygons: PolygonSet::new(polygons),
        grids,
        truth: MunicipalityTruth {
            name: name.to_string(),
            gain: 0.0,
            settlements: planted,
            formal_grids: formal.len(),
            unoccupied_grids: unoccupied.len(),
            confounders,
        },
        origin,
    }
}

/// Coarsening factor for a band: its native factor when it divides the
/// raster edge, else the next finer one that does.
fn band_factor(band: usize, size: usize) -> usize {
    let native = (NATIVE_RESOLUTION[band] / PIXEL).round() as usize;
    [native, 2, 1].into_iter().find(|&f| f <= native && size.is_multiple_of(f)).unwrap_or(1)
}

fn scene_dates(epoch: Epoch, n: usize) -> Vec<NaiveDate> {
    (0..n)
        .map(|k| {
            let year = epoch.first_year() + (k % 2) as i32;
            let month = 1 + (k / 2 * 5 + k % 2 * 2) as u32 % 12;
            NaiveDate::from_ymd_opt(year, month, 10 + k as u32).expect("valid date")
        })
        .collect()
}

fn write_scenes(
    dir: &Path,
    layout: &Layout,
    opts: &SynthOptions,
    gain: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, PathBuf>, SynthError> {
    let size = opts.size;
    let n_px = size * size;
    let texture = Normal::new(0.0, 0.008).expect("finite sigma");
    let jitter = Normal::new(0.0, 0.004).expect("finite sigma");
    // Static per-pixel texture shared by every acquisition.
    let tex: Vec<[f64; 12]> = (0..n_px).map(|_| std::array::from_fn(|_| texture.sample(rng))).collect();
    let mut manifests = BTreeMap::new();
    for epoch in Epoch::ALL {
        let epoch_dir = dir.join("scenes").join(epoch.label());
        fs::create_dir_all(&epoch_dir)?;
        let mut entries = Vec::new();
        for date in scene_dates(epoch, opts.scenes_per_epoch) {
            let stamp = date.format("%Y-%m-%d").to_string();
            let phenology = rng.gen_range(0.85..1.1);
            let mut cloud = vec![false; n_px];
            for _ in 0..rng.gen_range(0..=2) {
                let (cy, cx) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
                let radius: f64 = rng.gen_range(8.0..30.0);
                for (i, flag) in cloud.iter_mut().enumerate() {
                    let (dy, dx) = ((i / size) as f64 - cy, (i % size) as f64 - cx);
                    if dy * dy + dx * dx <= radius * radius {
                        *flag = true;
                    }
                }
            }
            let mut band_paths = BTreeMap::new();
            for (b, name) in BAND_NAMES.iter().enumerate() {
                let fine: Vec<f64> = (0..n_px)
                    .map(|i| {
                        if cloud[i] {
                            return CLOUD + jitter.sample(rng);
                        }
                        let mix = layout.mixes[i][epoch.index()];
                        let mut v: f64 = (0..4).map(|k| mix[k] * ENDMEMBERS[k][b]).sum();
                        if b >= 5 {
                            v += mix[0] * VEGETATION[b] * (phenology - 1.0);
                        }
                        v * gain + tex[i][b] + jitter.sample(rng)
                    })
                    .collect();
                let factor = band_factor(b, size);
                let coarse = size / factor;
                let dn: Vec<f32> = (0..coarse * coarse)
                    .map(|j| {
                        let (r0, c0) = (j / coarse * factor, j % coarse * factor);
                        let sum: f64 = (r0..r0 + factor)
                            .flat_map(|r| (c0..c0 + factor).map(move |c| (r, c)))
                            .map(|(r, c)| fine[r * size + c])
                            .sum();
                        ((sum / (factor * factor) as f64).clamp(0.0, 1.2) * 10_000.0).round() as f32
                    })
                    .collect();
                let res = PIXEL * factor as f64;
                let grid = RasterGrid::new(
                    coarse,
                    coarse,
                    vec![name.to_string()],
                    [layout.origin.0, res, 0.0, layout.origin.1, 0.0, -res],
                    CRS,
                    DEFAULT_NODATA,
                    dn,
                )?;
                let file = format!("{stamp}_{name}.bsqr");
                write_raster(&grid, epoch_dir.join(&file))?;
                band_paths.insert(name.to_string(), PathBuf::from(file));
            }
            let mask = RasterGrid::new(
                size,
                size,
                vec!["valid".into()],
                [layout.origin.0, PIXEL, 0.0, layout.origin.1, 0.0, -PIXEL],
                CRS,
                DEFAULT_NODATA,
                cloud.iter().map(|&c| if c { 0.0 } else { 1.0 }).collect(),
            )?;
            let mask_file = format!("{stamp}_mask.bsqr");
            write_raster(&mask, epoch_dir.join(&mask_file))?;
            entries.push(ManifestEntry { date: stamp, band_paths, mask_path: PathBuf::from(mask_file) });
        }
        let manifest = epoch_dir.join("manifest.json");
        fs::write(&manifest, serde_json::to_string_pretty(&entries).expect("manifest serializes"))?;
        manifests.insert(epoch.label().to_string(), manifest);
    }
    Ok(manifests)
}

/// Largest negative count that both grid classes can supply under the
/// default 40/60 split.
fn feasible_negatives(requested: usize, grids: &[Vec<NegativeGrid>]) -> usize {
    let mut n = requested;
    for g in grids {
        let cap = |class| g.iter().filter(|x| x.class == class).map(NegativeGrid::pixel_count).sum::<usize>();
        let (formal, unoccupied) = (cap(GridClass::Formal), cap(GridClass::Unoccupied));
        while n > 0 {
            let plan = SamplingPlan { negatives_per_municipality: n, ..Default::default() };
            let (f, u) = plan.class_counts();
            if f <= formal && u <= unoccupied {
                break;
            }
            n -= 1;
        }
    }
    n
}

/// Writes a complete fixture under `out` and returns what was planted.
pub fn generate(out: &Path, opts: &SynthOptions) -> Result<SynthSummary, SynthError> {
    opts.validate()?;
    fs::create_dir_all(out)?;
    let mut municipalities = Vec::new();
    let mut registry = NegativeGridRegistry::default();
    let mut truths = Vec::new();
    for i in 0..opts.municipalities {
        let name = municipality_name(i);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (i as u64 + 1));
        let mut layout = plan_layout(&name, i, opts, &mut rng);
        let gain = rng.gen_range(0.92..1.08);
        layout.truth.gain = gain;
        let dir = out.join(&name);
        fs::create_dir_all(&dir)?;
        let epochs = write_scenes(&dir, &layout, opts, gain, &mut rng)?
            .into_iter()
            .map(|(k, p)| (k, p.strip_prefix(out).map(Path::to_path_buf).unwrap_or(p)))
            .collect();
        layout.polygons.write_geojson(dir.join("polygons.geojson"))?;
        registry.municipalities.insert(name.clone(), layout.grids);
        municipalities.push(MunicipalityConfig {
            name: name.clone(),
            polygons: PathBuf::from(&name).join("polygons.geojson"),
            epochs,
        });
        truths.push(layout.truth);
    }
    registry.write(out.join("registry.json")).map_err(|e| SynthError::Degenerate(e.to_string()))?;
    let grid_lists: Vec<Vec<NegativeGrid>> = registry.municipalities.values().cloned().collect();
    let negatives = feasible_negatives(opts.negatives, &grid_lists);
    if negatives == 0 {
        return Err(SynthError::Degenerate("grids cannot supply any negatives".into()));
    }
    let min_grids = grid_lists.iter().map(Vec::len).min().unwrap_or(0).min(30);
    let forest = ForestParams { n_trees: opts.trees, ..Default::default() };
    let config = PipelineConfig {
        output_dir: PathBuf::from("out"),
        municipalities,
        registry: PathBuf::from("registry.json"),
        index_params: Default::default(),
        sampling: SamplingPlan { negatives_per_municipality: negatives, min_grids, ..Default::default() },
        models: vec![
            ModelSpec::logistic(),
            ModelSpec::linear_svm(),
            ModelSpec::new(ModelParams::RandomForest(forest), 0),
        ],
        grid: Default::default(),
        reflectance_scale: 1e-4,
        seed: opts.seed,
        mapping: Default::default(),
    };
    let config_path = out.join("config.json");
    fs::write(&config_path, serde_json::to_string_pretty(&config).expect("config serializes"))?;
    let summary = SynthSummary {
        config: config_path,
        negatives_per_municipality: negatives,
        municipalities: truths,
    };
    fs::write(
        out.join("truth.json"),
        serde_json::to_string_pretty(&json!({ "options": opts, "summary": summary })).expect("truth serializes"),
    )?;
    Ok(summary)
}
