//! Stage runner. Every artifact lives under the configured output directory;
//! a stage is skipped when its outputs are newer than its inputs and were
//! produced under the same effective configuration.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use settlemap_core::composite::{load_manifest, manifest_inputs, median_composite, Epoch, EpochComposite};
use settlemap_core::features::{feature_names, index_stack};
use settlemap_core::mapping::{candidates_geojson, write_pgm, GridCellScore};
use settlemap_core::raster::{rasterize_labels, read_raster, write_raster, DEFAULT_NODATA};
use settlemap_core::sampling::MunicipalityCounts;
use settlemap_core::{
    build_dataset, evaluate, extract_positive_pixels, fit, predict_raster, rank_grid_cells, sample_negative_pixels,
    FeatureTable, ModelArtifact, NegativeGridRegistry, PolygonSet,
};

use crate::config::{MunicipalityConfig, PipelineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Composite,
    Features,
    Sample,
    Train,
    Evaluate,
    Predict,
    Rank,
    Export,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Composite,
        Stage::Features,
        Stage::Sample,
        Stage::Train,
        Stage::Evaluate,
        Stage::Predict,
        Stage::Rank,
        Stage::Export,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Composite => "composite",
            Stage::Features => "features",
            Stage::Sample => "sample",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Predict => "predict",
            Stage::Rank => "rank",
            Stage::Export => "export",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub skipped: bool,
    pub seconds: f64,
    pub outputs: usize,
}

/// Grid-cell ranking of one municipality, with the georeferencing needed to
/// export it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScores {
    pub municipality: String,
    pub geotransform: [f64; 6],
    pub crs: String,
    pub cells: Vec<GridCellScore>,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    force: bool,
    config_hash: String,
    records: Vec<StageRecord>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, force: bool) -> Self {
        // The output location itself does not change what a stage produces.
        let mut canonical = serde_json::to_value(&cfg).expect("config serializes");
        canonical["output_dir"] = serde_json::Value::Null;
        let canonical = serde_json::to_vec(&canonical).expect("config serializes");
        let config_hash = format!("{:x}", Sha256::digest(&canonical));
        Self {
            cfg,
            force,
            config_hash,
            records: Vec::new(),
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn records(&self) -> &[StageRecord] {
        &self.records
    }

    pub fn artifact(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.cfg.output_dir.join(rel)
    }

    pub fn composite_path(&self, muni: &str, epoch: Epoch) -> PathBuf {
        self.artifact(format!("composites/{muni}/{}.bsqr", epoch.label()))
    }

    pub fn feature_path(&self, muni: &str, epoch: Epoch) -> PathBuf {
        self.artifact(format!("features/{muni}/{}.bsqr", epoch.label()))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.artifact("dataset.csv")
    }

    pub fn model_path(&self, kind: impl std::fmt::Display) -> PathBuf {
        self.artifact(format!("models/{kind}.json"))
    }

    pub fn map_path(&self, muni: &str, file: &str) -> PathBuf {
        self.artifact(format!("maps/{muni}/{file}"))
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.artifact(format!(".stamps/{}", stage.name()))
    }

    fn munis(&self) -> impl Iterator<Item = &MunicipalityConfig> {
        self.cfg.municipalities.iter()
    }

    fn composites_of(&self, muni: &str) -> Vec<PathBuf> {
        Epoch::ALL.iter().map(|&e| self.composite_path(muni, e)).collect()
    }

    fn inputs(&self, stage: Stage) -> Result<Vec<PathBuf>> {
        let mut v = Vec::new();
        match stage {
            Stage::Composite => {
                for m in self.munis() {
                    for epoch in Epoch::ALL {
                        let manifest = self.cfg.manifest(m, epoch);
                        v.push(manifest.to_path_buf());
                        v.extend(manifest_inputs(manifest)?);
                    }
                }
            }
            Stage::Features | Stage::Sample => {
                for m in self.munis() {
                    v.extend(self.composites_of(&m.name));
                    if stage == Stage::Sample {
                        v.push(m.polygons.clone());
                    }
                }
                if stage == Stage::Sample {
                    v.push(self.cfg.registry.clone());
                }
            }
            Stage::Train | Stage::Evaluate => v.push(self.dataset_path()),
            Stage::Predict => {
                for m in self.munis() {
                    v.extend(self.composites_of(&m.name));
                }
                v.push(self.model_path(self.cfg.mapping.model));
            }
            Stage::Rank => v.extend(self.munis().map(|m| self.map_path(&m.name, "probmap.bsqr"))),
            Stage::Export => v.extend(self.munis().map(|m| self.map_path(&m.name, "grid_scores.json"))),
        }
        Ok(v)
    }

    fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        let mut v = Vec::new();
        match stage {
            Stage::Composite => {
                for m in self.munis() {
                    v.extend(self.composites_of(&m.name));
                }
            }
            Stage::Features => {
                for m in self.munis() {
                    v.extend(Epoch::ALL.iter().map(|&e| self.feature_path(&m.name, e)));
                }
                v.push(self.artifact("features/feature_names.txt"));
            }
            Stage::Sample => {
                v.push(self.dataset_path());
                v.push(self.artifact("sampling_summary.json"));
            }
            Stage::Train => v.extend(self.cfg.models.iter().map(|s| self.model_path(s.kind()))),
            Stage::Evaluate => {
                v.push(self.artifact("reports/evaluation.json"));
                v.push(self.artifact("reports/evaluation.csv"));
            }
            Stage::Predict => {
                for m in self.munis() {
                    v.push(self.map_path(&m.name, "probmap.bsqr"));
                    v.push(self.map_path(&m.name, "probmap.pgm"));
                }
            }
            Stage::Rank => v.extend(self.munis().map(|m| self.map_path(&m.name, "grid_scores.json"))),
            Stage::Export => v.extend(self.munis().map(|m| self.map_path(&m.name, "candidates.geojson"))),
        }
        v
    }

    fn up_to_date(&self, stage: Stage) -> Result<bool> {
        if self.force {
            return Ok(false);
        }
        match fs::read_to_string(self.stamp_path(stage)) {
            Ok(s) if s.trim() == self.config_hash => {}
            _ => return Ok(false),
        }
        let mtime = |p: &Path| fs::metadata(p).and_then(|m| m.modified()).ok();
        let mut oldest_output = SystemTime::now();
        for out in self.outputs(stage) {
            match mtime(&out) {
                Some(t) => oldest_output = oldest_output.min(t),
                None => return Ok(false),
            }
        }
        for input in self.inputs(stage)? {
            match mtime(&input) {
                Some(t) if t <= oldest_output => {}
                _ => return Ok(false),
            }
        }
        Ok(true)
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let started = Instant::now();
        let skipped = self.up_to_date(stage)?;
        if skipped {
            log::info!("{}: up to date, skipping", stage.name());
        } else {
            log::info!("{}: running", stage.name());
            match stage {
                Stage::Composite => self.composite(),
                Stage::Features => self.features(),
                Stage::Sample => self.sample(),
                Stage::Train => self.train(),
                Stage::Evaluate => self.evaluate(),
                Stage::Predict => self.predict(),
                Stage::Rank => self.rank(),
                Stage::Export => self.export(),
            }
            .with_context(|| format!("stage {} failed", stage.name()))?;
            let stamp = self.stamp_path(stage);
            create_parent(&stamp)?;
            fs::write(&stamp, &self.config_hash)?;
        }
        let seconds = started.elapsed().as_secs_f64();
        log::info!("{}: {:.2} s", stage.name(), seconds);
        self.records.push(StageRecord {
            stage,
            skipped,
            seconds,
            outputs: self.outputs(stage).len(),
        });
        Ok(())
    }

    pub fn run_all(&mut self) -> Result<()> {
        Stage::ALL.into_iter().try_for_each(|s| self.run_stage(s))
    }

    /// Timings of the stages run so far; not part of the reproducible output.
    pub fn write_summary(&self) -> Result<()> {
        fs::create_dir_all(&self.cfg.output_dir)?;
        let path = self.artifact("stage_summary.json");
        fs::write(&path, serde_json::to_string_pretty(&self.records)?)?;
        Ok(())
    }

    fn read_composites(&self, muni: &str) -> Result<Vec<EpochComposite>> {
        Epoch::ALL
            .iter()
            .map(|&e| {
                let path = self.composite_path(muni, e);
                EpochComposite::read(&path, e).with_context(|| format!("reading {}", path.display()))
            })
            .collect()
    }

    fn composite(&self) -> Result<()> {
        for m in self.munis() {
            for epoch in Epoch::ALL {
                let manifest = self.cfg.manifest(m, epoch);
                let scenes = load_manifest(manifest, self.cfg.reflectance_scale)
                    .with_context(|| format!("{}: loading {}", m.name, manifest.display()))?;
                let composite = median_composite(&scenes, epoch, DEFAULT_NODATA)
                    .with_context(|| format!("{}: compositing {epoch}", m.name))?;
                let path = self.composite_path(&m.name, epoch);
                create_parent(&path)?;
                write_raster(&composite.bands, &path)?;
            }
        }
        Ok(())
    }

    fn features(&self) -> Result<()> {
        for m in self.munis() {
            for composite in self.read_composites(&m.name)? {
                let stack = index_stack(&composite, &self.cfg.index_params);
                let path = self.feature_path(&m.name, composite.epoch);
                create_parent(&path)?;
                write_raster(&stack, &path)?;
            }
        }
        let names = self.artifact("features/feature_names.txt");
        fs::write(names, feature_names().join("\n") + "\n")?;
        Ok(())
    }

    fn sample(&self) -> Result<()> {
        let registry = NegativeGridRegistry::read(&self.cfg.registry)?;
        let mut tables = Vec::new();
        let mut counts: Vec<MunicipalityCounts> = Vec::new();
        for m in self.munis() {
            let composites = self.read_composites(&m.name)?;
            let polygons = PolygonSet::read_geojson(&m.polygons)?;
            let ids: Vec<String> = polygons
                .polygons
                .iter()
                .enumerate()
                .map(|(i, p)| p.label.clone().unwrap_or_else(|| format!("{}-p{i:03}", m.name)))
                .collect();
            let mask = rasterize_labels(&polygons, &composites[0].bands)?;
            let positives = extract_positive_pixels(&mask, &m.name, &ids)?;
            let negatives = sample_negative_pixels(&registry, &self.cfg.sampling, &m.name)?;
            let (table, mut c) = build_dataset(&positives, &negatives, &composites, &self.cfg.index_params)?;
            c.municipality = m.name.clone();
            log::info!(
                "{}: {} positives, {} negatives, {} skipped (nodata)",
                m.name,
                c.positives,
                c.negatives,
                c.skipped_nodata
            );
            tables.push(table);
            counts.push(c);
        }
        let table = FeatureTable::concat(tables)?;
        let path = self.dataset_path();
        create_parent(&path)?;
        let mut w = BufWriter::new(fs::File::create(&path)?);
        table.write_csv(&mut w)?;
        w.flush()?;
        let total = |f: fn(&MunicipalityCounts) -> usize| counts.iter().map(f).sum::<usize>();
        let summary = json!({
            "municipalities": counts,
            "positives": total(|c| c.positives),
            "negatives": total(|c| c.negatives),
            "rows": table.len(),
            "skipped_nodata": total(|c| c.skipped_nodata),
        });
        fs::write(self.artifact("sampling_summary.json"), serde_json::to_string_pretty(&summary)?)?;
        Ok(())
    }

    fn read_dataset(&self) -> Result<FeatureTable> {
        let path = self.dataset_path();
        let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        Ok(FeatureTable::read_csv(BufReader::new(file))?)
    }

    fn train(&self) -> Result<()> {
        let table = self.read_dataset()?;
        for spec in &self.cfg.models {
            let model = fit(spec, &table).with_context(|| format!("training {}", spec.kind()))?;
            let path = self.model_path(spec.kind());
            create_parent(&path)?;
            model.save(&path)?;
        }
        Ok(())
    }

    fn evaluate(&self) -> Result<()> {
        let table = self.read_dataset()?;
        let report = evaluate(&self.cfg.models, &table)?;
        let json_path = self.artifact("reports/evaluation.json");
        create_parent(&json_path)?;
        report.write_json(BufWriter::new(fs::File::create(&json_path)?))?;
        report.write_csv(BufWriter::new(fs::File::create(self.artifact("reports/evaluation.csv"))?))?;
        Ok(())
    }

    fn predict(&self) -> Result<()> {
        let model = ModelArtifact::load(self.model_path(self.cfg.mapping.model))?;
        for m in self.munis() {
            let composites = self.read_composites(&m.name)?;
            let map = predict_raster(&model, &composites, &self.cfg.index_params)?;
            let path = self.map_path(&m.name, "probmap.bsqr");
            create_parent(&path)?;
            write_raster(&map, &path)?;
            write_pgm(&map, self.map_path(&m.name, "probmap.pgm"))?;
        }
        Ok(())
    }

    fn rank(&self) -> Result<()> {
        for m in self.munis() {
            let map = read_raster(self.map_path(&m.name, "probmap.bsqr"))?;
            let scores = GridScores {
                municipality: m.name.clone(),
                cells: rank_grid_cells(&map, &self.cfg.grid)?,
                geotransform: map.geotransform,
                crs: map.crs,
            };
            fs::write(self.map_path(&m.name, "grid_scores.json"), serde_json::to_string_pretty(&scores)?)?;
        }
        Ok(())
    }

    fn export(&self) -> Result<()> {
        for m in self.munis() {
            let text = fs::read_to_string(self.map_path(&m.name, "grid_scores.json"))?;
            let scores: GridScores = serde_json::from_str(&text)?;
            let collection = candidates_geojson(&scores.cells, self.cfg.mapping.selection(), &scores.geotransform);
            fs::write(
                self.map_path(&m.name, "candidates.geojson"),
                serde_json::to_string_pretty(&collection)?,
            )?;
        }
        Ok(())
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}
