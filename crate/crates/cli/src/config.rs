//! The single JSON document that drives a pipeline run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use settlemap_core::composite::Epoch;
use settlemap_core::mapping::Selection;
use settlemap_core::models::{ModelKind, ModelSpec};
use settlemap_core::{GridSpec, IndexParams, SamplingPlan};

/// Every problem found while validating a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub Vec<String>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration ({} problem(s)):", self.0.len())?;
        for p in &self.0 {
            writeln!(f, "  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MunicipalityConfig {
    pub name: String,
    /// GeoJSON of ground-truth settlement polygons.
    pub polygons: PathBuf,
    /// Scene manifest per epoch label ("2015-2016", ...).
    pub epochs: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MappingConfig {
    /// Which trained model produces the probability maps.
    pub model: ModelKind,
    pub top_k: Option<usize>,
    pub min_score: Option<f64>,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::RandomForest,
            top_k: Some(10),
            min_score: None,
        }
    }
}

impl MappingConfig {
    pub fn selection(&self) -> Selection {
        match (self.top_k, self.min_score) {
            (_, Some(s)) => Selection::MinScore(s),
            (Some(k), None) => Selection::TopK(k),
            (None, None) => Selection::TopK(10),
        }
    }
}

fn default_models() -> Vec<ModelSpec> {
    vec![ModelSpec::logistic(), ModelSpec::linear_svm(), ModelSpec::random_forest()]
}

fn default_scale() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub municipalities: Vec<MunicipalityConfig>,
    pub registry: PathBuf,
    #[serde(default)]
    pub index_params: IndexParams,
    #[serde(default)]
    pub sampling: SamplingPlan,
    #[serde(default = "default_models")]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub grid: GridSpec,
    /// Multiplier from stored digital numbers to reflectance.
    #[serde(default = "default_scale")]
    pub reflectance_scale: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mapping: MappingConfig,
}

/// Offsets applied to the global seed.
pub const SAMPLING_SEED_OFFSET: u64 = 1;
pub const MODEL_SEED_OFFSET: u64 = 100;

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

impl PipelineConfig {
    /// Reads a config file and resolves relative input paths against its
    /// directory. Flags in `overrides` win over file values.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(vec![format!("cannot read config {}: {e}", path.display())]))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| ConfigError(vec![format!("config {}: {e}", path.display())]))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.registry);
        resolve(&mut cfg.output_dir);
        for m in &mut cfg.municipalities {
            resolve(&mut m.polygons);
            m.epochs.values_mut().for_each(resolve);
        }
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &overrides.output_dir {
            cfg.output_dir = out.clone();
        }
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fans the global seed out to sampling and model seeds.
    pub fn apply_seed(&mut self) {
        self.sampling.seed = self.seed.wrapping_add(SAMPLING_SEED_OFFSET);
        for (i, spec) in self.models.iter_mut().enumerate() {
            spec.seed = self.seed.wrapping_add(MODEL_SEED_OFFSET + i as u64);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if self.municipalities.is_empty() {
            problems.push("no municipalities configured".to_string());
        }
        let mut names = BTreeSet::new();
        for m in &self.municipalities {
            if !names.insert(m.name.as_str()) {
                problems.push(format!("municipality {} is listed twice", m.name));
            }
            if m.name.is_empty() || m.name.contains(['/', '\\', ':']) {
                problems.push(format!("municipality name {:?} is not a valid path component", m.name));
            }
            for epoch in Epoch::ALL {
                if !m.epochs.contains_key(epoch.label()) {
                    problems.push(format!("municipality {}: missing epoch {epoch}", m.name));
                }
            }
            for (label, path) in &m.epochs {
                if label.parse::<Epoch>().is_err() {
                    problems.push(format!("municipality {}: unknown epoch {label:?}", m.name));
                } else if !path.is_file() {
                    problems.push(format!(
                        "municipality {}: manifest for {label} not found: {}",
                        m.name,
                        path.display()
                    ));
                }
            }
            if !m.polygons.is_file() {
                problems.push(format!("municipality {}: polygons not found: {}", m.name, m.polygons.display()));
            }
        }
        if !self.registry.is_file() {
            problems.push(format!("registry not found: {}", self.registry.display()));
        }
        if let Err(e) = self.index_params.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.sampling.validate() {
            problems.push(e.to_string());
        }
        if self.models.is_empty() {
            problems.push("no models configured".into());
        }
        let mut kinds = BTreeSet::new();
        for spec in &self.models {
            if let Err(e) = spec.validate() {
                problems.push(e.to_string());
            }
            if !kinds.insert(spec.kind()) {
                problems.push(format!("model kind {} is listed twice", spec.kind()));
            }
        }
        if !kinds.contains(&self.mapping.model) {
            problems.push(format!("mapping model {} is not among the configured models", self.mapping.model));
        }
        if !(self.grid.cell_size > 0.0) {
            problems.push(format!("grid cell_size {} must be positive", self.grid.cell_size));
        }
        if !(self.reflectance_scale > 0.0 && self.reflectance_scale.is_finite()) {
            problems.push(format!("reflectance_scale {} must be positive", self.reflectance_scale));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(problems))
        }
    }

    pub fn manifest<'a>(&self, municipality: &'a MunicipalityConfig, epoch: Epoch) -> &'a Path {
        &municipality.epochs[epoch.label()]
    }
}
