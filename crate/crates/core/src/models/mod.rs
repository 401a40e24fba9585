//! The three pixel classifiers: logistic regression, linear SVM and random
//! forest, all emitting a probability in `[0, 1]`.

pub mod linear;
pub mod tree;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::features::{feature_names, FeatureTable, N_FEATURES};
pub use linear::{sigmoid, Standardization};
pub use tree::{find_best_split, gini_impurity, DecisionTree, Node, Split, TreeParams};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty input")]
    Empty,
    #[error("training data holds a single class")]
    SingleClass,
    #[error("non-finite feature at row {row}, column {feature}")]
    NonFinite { row: usize, feature: usize },
    #[error("expected {expected} features, got {found}")]
    FeatureCount { expected: usize, found: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("unknown model kind {0:?}")]
    UnknownKind(String),
    #[error("model format version {found:?}, this build reads {expected}")]
    VersionMismatch { found: Option<u64>, expected: u32 },
    #[error("corrupt model: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Dense column-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n_rows: usize,
    columns: Vec<Vec<f64>>,
}

impl Matrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map(Vec::len).ok_or(ModelError::Empty)?;
        let mut columns = vec![Vec::with_capacity(rows.len()); n_cols];
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(ModelError::FeatureCount {
                    expected: n_cols,
                    found: row.len(),
                });
            }
            for (f, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(ModelError::NonFinite { row: r, feature: f });
                }
                columns[f].push(v);
            }
        }
        Ok(Self {
            n_rows: rows.len(),
            columns,
        })
    }

    /// The selected rows of a feature table.
    pub fn from_table(table: &FeatureTable, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(ModelError::Empty);
        }
        let mut columns: Vec<Vec<f64>> = (0..N_FEATURES).map(|_| Vec::with_capacity(rows.len())).collect();
        for &r in rows {
            for (col, &v) in columns.iter_mut().zip(table.rows[r].features.as_slice()) {
                col.push(v);
            }
        }
        Ok(Self {
            n_rows: rows.len(),
            columns,
        })
    }

    pub(crate) fn from_columns(columns: Vec<Vec<f64>>, n_rows: usize) -> Self {
        Self { n_rows, columns }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, f: usize) -> &[f64] {
        &self.columns[f]
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[r]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    LinearSvm,
    RandomForest,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Logistic => "logistic",
            ModelKind::LinearSvm => "linear_svm",
            ModelKind::RandomForest => "random_forest",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        [ModelKind::Logistic, ModelKind::LinearSvm, ModelKind::RandomForest]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ModelError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Gini,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub min_samples_split: usize,
    pub criterion: Criterion,
    pub features_per_split: usize,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 800,
            max_depth: 12,
            min_samples_leaf: 2,
            min_samples_split: 15,
            criterion: Criterion::Gini,
            // round(sqrt(66))
            features_per_split: 8,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticParams {
    pub l2_lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            l2_lambda: 1e-4,
            learning_rate: 0.1,
            epochs: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmParams {
    /// Hinge-loss weight `C`.
    pub c: f64,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            learning_rate: 0.1,
            epochs: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelParams {
    Logistic(LogisticParams),
    LinearSvm(SvmParams),
    RandomForest(ForestParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub params: ModelParams,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        Self { params, seed }
    }

    pub fn logistic() -> Self {
        Self::new(ModelParams::Logistic(LogisticParams::default()), 0)
    }

    pub fn linear_svm() -> Self {
        Self::new(ModelParams::LinearSvm(SvmParams::default()), 0)
    }

    pub fn random_forest() -> Self {
        Self::new(ModelParams::RandomForest(ForestParams::default()), 0)
    }

    pub fn kind(&self) -> ModelKind {
        match self.params {
            ModelParams::Logistic(_) => ModelKind::Logistic,
            ModelParams::LinearSvm(_) => ModelKind::LinearSvm,
            ModelParams::RandomForest(_) => ModelKind::RandomForest,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(format!("{}: {m}", self.kind())));
        match &self.params {
            ModelParams::Logistic(p) => {
                if p.epochs == 0 || !(p.learning_rate > 0.0) || !(p.l2_lambda >= 0.0) {
                    return bad("epochs and learning_rate must be positive, l2_lambda nonnegative");
                }
            }
            ModelParams::LinearSvm(p) => {
                if p.epochs == 0 || !(p.learning_rate > 0.0) || !(p.c > 0.0) {
                    return bad("epochs, learning_rate and c must be positive");
                }
            }
            ModelParams::RandomForest(p) => {
                if p.n_trees == 0
                    || p.max_depth == 0
                    || p.min_samples_leaf == 0
                    || p.min_samples_split == 0
                    || p.features_per_split == 0
                {
                    return bad("counts must be positive and max_depth >= 1");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameters {
    Linear { weights: Vec<f64>, bias: f64 },
    Forest { trees: Vec<DecisionTree> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDigest {
    pub rows: usize,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub feature_names: Vec<String>,
    pub standardization: Option<Standardization>,
    pub parameters: Parameters,
    pub training_digest: TrainingDigest,
}

fn forest_tree(
    x: &Matrix,
    y: &[u8],
    params: &ForestParams,
    seed: u64,
) -> DecisionTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = x.n_rows();
    let rows: Vec<usize> = if params.bootstrap {
        (0..n).map(|_| rng.gen_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    let tree_params = TreeParams {
        max_depth: params.max_depth,
        min_samples_leaf: params.min_samples_leaf,
        min_samples_split: params.min_samples_split,
        features_per_split: Some(params.features_per_split),
    };
    DecisionTree::fit(x, y, rows, &tree_params, &mut rng)
}

/// Trains on an arbitrary matrix; `feature_names` fixes the input width.
pub fn fit_matrix(
    spec: &ModelSpec,
    x: &Matrix,
    y: &[u8],
    feature_names: Vec<String>,
) -> Result<ModelArtifact> {
    spec.validate()?;
    if x.n_rows() == 0 || y.is_empty() {
        return Err(ModelError::Empty);
    }
    if y.len() != x.n_rows() {
        return Err(ModelError::InvalidSpec(format!(
            "{} labels for {} rows",
            y.len(),
            x.n_rows()
        )));
    }
    if feature_names.len() != x.n_cols() {
        return Err(ModelError::FeatureCount {
            expected: feature_names.len(),
            found: x.n_cols(),
        });
    }
    for f in 0..x.n_cols() {
        if let Some(row) = x.column(f).iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { row, feature: f });
        }
    }
    let positives = y.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == y.len() {
        return Err(ModelError::SingleClass);
    }
    let (standardization, parameters) = match &spec.params {
        ModelParams::Logistic(p) => {
            let s = Standardization::fit(x);
            let (weights, bias) = linear::train_logistic(&s.transform(x), y, p.l2_lambda, p.learning_rate, p.epochs);
            (Some(s), Parameters::Linear { weights, bias })
        }
        ModelParams::LinearSvm(p) => {
            let s = Standardization::fit(x);
            let (weights, bias) = linear::train_svm(&s.transform(x), y, p.c, p.learning_rate, p.epochs);
            (Some(s), Parameters::Linear { weights, bias })
        }
        ModelParams::RandomForest(p) => {
            // Per-tree seeds make parallel and serial training identical.
            let trees = (0..p.n_trees as u64)
                .into_par_iter()
                .map(|t| forest_tree(x, y, p, spec.seed.wrapping_add(t)))
                .collect();
            (None, Parameters::Forest { trees })
        }
    };
    Ok(ModelArtifact {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        feature_names,
        standardization,
        parameters,
        training_digest: TrainingDigest {
            rows: y.len(),
            positives,
            negatives: y.len() - positives,
        },
    })
}

/// Trains on the selected rows of a feature table (all rows if `rows` is `None`).
pub fn fit_rows(spec: &ModelSpec, table: &FeatureTable, rows: Option<&[usize]>) -> Result<ModelArtifact> {
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..table.len()).collect();
            &all
        }
    };
    let x = Matrix::from_table(table, rows)?;
    let y: Vec<u8> = rows.iter().map(|&r| table.rows[r].label).collect();
    fit_matrix(spec, &x, &y, feature_names())
}

pub fn fit(spec: &ModelSpec, table: &FeatureTable) -> Result<ModelArtifact> {
    fit_rows(spec, table, None)
}

impl ModelArtifact {
    pub fn kind(&self) -> ModelKind {
        self.spec.kind()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn predict_proba(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.n_features() {
            return Err(ModelError::FeatureCount {
                expected: self.n_features(),
                found: features.len(),
            });
        }
        if let Some(feature) = features.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { row: 0, feature });
        }
        Ok(self.score(features))
    }

    /// Probability without input validation.
    pub fn score(&self, features: &[f64]) -> f64 {
        match &self.parameters {
            Parameters::Linear { weights, bias } => {
                let s = self.standardization.as_ref();
                let z = weights.iter().enumerate().fold(*bias, |acc, (f, w)| {
                    let v = s.map_or(features[f], |s| s.apply(f, features[f]));
                    acc + w * v
                });
                sigmoid(z)
            }
            Parameters::Forest { trees } => {
                trees.iter().map(|t| t.leaf_value(features)).sum::<f64>() / trees.len() as f64
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let corrupt = |m: String| Err(ModelError::Corrupt(m));
        let n = self.n_features();
        if let Some(s) = &self.standardization {
            if s.mean.len() != n || s.std.len() != n {
                return corrupt("standardization length differs from feature count".into());
            }
        }
        match &self.parameters {
            Parameters::Linear { weights, bias } => {
                if weights.len() != n || !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
                    return corrupt("linear weights malformed".into());
                }
            }
            Parameters::Forest { trees } => {
                if trees.is_empty() {
                    return corrupt("forest without trees".into());
                }
                let max_depth = match &self.spec.params {
                    ModelParams::RandomForest(p) => p.max_depth,
                    _ => return corrupt("forest parameters under a linear spec".into()),
                };
                for (i, t) in trees.iter().enumerate() {
                    t.validate(n).or_else(|e| corrupt(format!("tree {i}: {e}")))?;
                    if t.depth() > max_depth {
                        return corrupt(format!("tree {i} deeper than max_depth"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| ModelError::Corrupt(e.to_string()))?;
        let version = value.get("format_version").and_then(Value::as_u64);
        if version != Some(FORMAT_VERSION as u64) {
            return Err(ModelError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let model: Self = serde_json::from_value(value).map_err(|e| ModelError::Corrupt(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

pub fn save_model(model: &ModelArtifact, path: impl AsRef<Path>) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelArtifact> {
    ModelArtifact::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("f{i}")).collect()
    }

    fn toy() -> (Matrix, Vec<u8>) {
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                let a = (i as f64 * 0.37).sin();
                let b = (i as f64 * 0.91).cos();
                vec![a, b, a * b]
            })
            .collect();
        let y = rows.iter().map(|r| (r[0] + 0.5 * r[1] > 0.1) as u8).collect();
        (Matrix::from_rows(&rows).unwrap(), y)
    }

    #[test]
    fn logistic_separates_one_dimensional_toy() {
        let x = Matrix::from_rows(&[vec![-2.0], vec![-1.0], vec![1.0], vec![2.0]]).unwrap();
        let y = [0, 0, 1, 1];
        let m = fit_matrix(&ModelSpec::logistic(), &x, &y, names(1)).unwrap();
        for (i, &label) in y.iter().enumerate() {
            let p = m.predict_proba(&x.row(i)).unwrap();
            assert_eq!((p > 0.5) as u8, label);
        }
    }

    #[test]
    fn zero_weights_give_half() {
        let m = ModelArtifact {
            format_version: FORMAT_VERSION,
            spec: ModelSpec::logistic(),
            feature_names: names(2),
            standardization: None,
            parameters: Parameters::Linear {
                weights: vec![0.0, 0.0],
                bias: 0.0,
            },
            training_digest: TrainingDigest { rows: 0, positives: 0, negatives: 0 },
        };
        assert_eq!(m.predict_proba(&[3.0, -1.0]).unwrap(), 0.5);
        assert!(matches!(m.predict_proba(&[1.0]), Err(ModelError::FeatureCount { expected: 2, found: 1 })));
        assert!(matches!(m.predict_proba(&[1.0, f64::NAN]), Err(ModelError::NonFinite { .. })));
    }

    fn stump(value: f64) -> DecisionTree {
        DecisionTree {
            nodes: vec![Node::Leaf { value, samples: 1 }],
        }
    }

    fn forest(values: &[f64]) -> ModelArtifact {
        ModelArtifact {
            format_version: FORMAT_VERSION,
            spec: ModelSpec::random_forest(),
            feature_names: names(1),
            standardization: None,
            parameters: Parameters::Forest {
                trees: values.iter().map(|&v| stump(v)).collect(),
            },
            training_digest: TrainingDigest { rows: 0, positives: 0, negatives: 0 },
        }
    }

    #[test]
    fn forest_averages_leaves() {
        assert_eq!(forest(&[1.0, 1.0, 1.0]).predict_proba(&[0.0]).unwrap(), 1.0);
        let p = forest(&[0.2, 0.6]).predict_proba(&[0.0]).unwrap();
        assert!((p - 0.4).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(
            fit_matrix(&ModelSpec::logistic(), &x, &[1, 1], names(1)),
            Err(ModelError::SingleClass)
        ));
    }

    #[test]
    fn single_unbootstrapped_tree_matches_plain_tree() {
        let (x, y) = toy();
        let params = ForestParams {
            n_trees: 1,
            bootstrap: false,
            features_per_split: 3,
            max_depth: 5,
            min_samples_leaf: 1,
            min_samples_split: 2,
            ..Default::default()
        };
        let m = fit_matrix(&ModelSpec::new(ModelParams::RandomForest(params), 9), &x, &y, names(3)).unwrap();
        let tree = DecisionTree::fit(
            &x,
            &y,
            (0..x.n_rows()).collect(),
            &TreeParams {
                max_depth: 5,
                min_samples_leaf: 1,
                min_samples_split: 2,
                features_per_split: None,
            },
            &mut ChaCha8Rng::seed_from_u64(1234),
        );
        match &m.parameters {
            Parameters::Forest { trees } => assert_eq!(trees[0], tree),
            _ => unreachable!(),
        }
        for i in 0..x.n_rows() {
            assert_eq!(m.predict_proba(&x.row(i)).unwrap(), tree.leaf_value(&x.row(i)));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let (x, y) = toy();
        let spec = ModelSpec::new(
            ModelParams::RandomForest(ForestParams { n_trees: 5, ..Default::default() }),
            3,
        );
        let a = fit_matrix(&spec, &x, &y, names(3)).unwrap().to_json();
        let b = fit_matrix(&spec, &x, &y, names(3)).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn version_and_corruption_errors() {
        let (x, y) = toy();
        let m = fit_matrix(&ModelSpec::logistic(), &x, &y, names(3)).unwrap();
        let mut value: Value = serde_json::from_str(&m.to_json()).unwrap();
        value["format_version"] = 99.into();
        assert!(matches!(
            ModelArtifact::from_json(&value.to_string()),
            Err(ModelError::VersionMismatch { found: Some(99), .. })
        ));
        value["format_version"] = 1.into();
        value["parameters"] = Value::String("garbage".into());
        assert!(matches!(ModelArtifact::from_json(&value.to_string()), Err(ModelError::Corrupt(_))));
        assert!(matches!(ModelArtifact::from_json("{not json"), Err(ModelError::Corrupt(_))));
    }

    #[test]
    fn spec_json_shape() {
        let spec: ModelSpec = serde_json::from_str(r#"{"kind":"random_forest","n_trees":100,"seed":5}"#).unwrap();
        assert_eq!(spec.kind(), ModelKind::RandomForest);
        match &spec.params {
            ModelParams::RandomForest(p) => {
                assert_eq!(p.n_trees, 100);
                assert_eq!(p.max_depth, 12);
                assert_eq!(p.min_samples_leaf, 2);
                assert_eq!(p.min_samples_split, 15);
                assert_eq!(p.features_per_split, 8);
            }
            _ => unreachable!(),
        }
        assert_eq!(spec.seed, 5);
        let svm: ModelSpec = serde_json::from_str(r#"{"kind":"linear_svm"}"#).unwrap();
        assert_eq!(svm, ModelSpec::linear_svm());
    }
}
