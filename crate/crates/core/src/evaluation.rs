//! Leave-one-municipality-out cross-validation and precision/recall at the
//! top x percent of ranked pixels or settlements.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureTable;
use crate::models::{self, ModelError, ModelKind, ModelSpec};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least two municipalities for spatial folds, found {0}")]
    TooFewMunicipalities(usize),
    #[error("no units to rank")]
    Empty,
    #[error("no positive labels among {0} units")]
    NoPositives(usize),
    #[error("score for unit {0:?} is not finite")]
    NonFiniteScore(String),
    #[error("group {0:?} is empty")]
    EmptyGroup(String),
    #[error("row {0} has no settlement or grid membership")]
    Ungrouped(String),
    #[error("fold {fold}, model {model}: {source}")]
    Fit {
        fold: String,
        model: ModelKind,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn population(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// `(precision, recall)`; `None` marks an undefined ratio (zero denominator).
pub fn precision_recall(counts: &ConfusionCounts) -> (Option<f64>, Option<f64>) {
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    (
        ratio(counts.tp, counts.tp + counts.fp),
        ratio(counts.tp, counts.tp + counts.fn_),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Percent of units selected, 1..=100.
    pub x: u32,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Number of units declared positive.
    pub selected: usize,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredUnit {
    pub id: String,
    pub score: f64,
    pub label: u8,
}

/// Units selected at the top `x` percent of `n`: `ceil(x * n / 100)`.
#[inline]
pub fn selection_size(x: u32, n: usize) -> usize {
    (x as usize * n).div_ceil(100)
}

/// Precision and recall for x = 1..=100, selecting the highest-scoring
/// units (ties by ascending id).
pub fn curve_at_top_x(units: &[ScoredUnit]) -> Result<Vec<CurvePoint>> {
    if units.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(u) = units.iter().find(|u| !u.score.is_finite()) {
        return Err(EvalError::NonFiniteScore(u.id.clone()));
    }
    let positives = units.iter().filter(|u| u.label == 1).count();
    if positives == 0 {
        return Err(EvalError::NoPositives(units.len()));
    }
    let mut order: Vec<&ScoredUnit> = units.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    let n = units.len();
    let mut cumulative_tp = Vec::with_capacity(n + 1);
    cumulative_tp.push(0usize);
    for u in &order {
        cumulative_tp.push(cumulative_tp.last().unwrap() + (u.label == 1) as usize);
    }
    Ok((1..=100u32)
        .map(|x| {
            let k = selection_size(x, n);
            let tp = cumulative_tp[k];
            let counts = ConfusionCounts {
                tp,
                fp: k - tp,
                fn_: positives - tp,
                tn: n - k - (positives - tp),
            };
            let (precision, recall) = precision_recall(&counts);
            CurvePoint {
                x,
                precision,
                recall,
                selected: k,
                counts,
            }
        })
        .collect())
}

/// Mean of the top `ceil(0.1 * m)` values of a group of `m` probabilities.
pub fn top_decile_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = values.len().div_ceil(10);
    Some(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Pixel probabilities of one settlement polygon or negative grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGroup {
    pub id: String,
    pub label: u8,
    pub probabilities: Vec<f64>,
}

/// One aggregated unit per group: the mean of its top-10% pixel probabilities.
pub fn settlement_scores(groups: &[PixelGroup]) -> Result<Vec<ScoredUnit>> {
    groups
        .iter()
        .map(|g| {
            let score = top_decile_mean(&g.probabilities).ok_or_else(|| EvalError::EmptyGroup(g.id.clone()))?;
            Ok(ScoredUnit {
                id: g.id.clone(),
                score,
                label: g.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub municipality: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per municipality (sorted by name), holding it out as the test set.
pub fn spatial_folds(table: &FeatureTable) -> Result<Vec<Fold>> {
    let mut by_muni: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, row) in table.rows.iter().enumerate() {
        by_muni.entry(row.municipality.as_str()).or_default().push(i);
    }
    if by_muni.len() < 2 {
        return Err(EvalError::TooFewMunicipalities(by_muni.len()));
    }
    Ok(by_muni
        .iter()
        .map(|(&m, test)| Fold {
            municipality: m.to_string(),
            train: table
                .rows
                .iter()
                .enumerate()
                .filter(|(_, r)| r.municipality != m)
                .map(|(i, _)| i)
                .collect(),
            test: test.clone(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Pixel,
    Settlement,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Pixel => "pixel",
            Level::Settlement => "settlement",
        }
    }
}

/// One curve of the report. `fold` is a municipality name, or `"macro"` for
/// the unweighted mean across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub model: ModelKind,
    pub fold: String,
    pub level: Level,
    pub units: usize,
    pub positives: usize,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EvaluationReport {
    pub records: Vec<CurveRecord>,
}

pub const MACRO_FOLD: &str = "macro";

impl EvaluationReport {
    pub fn curve(&self, model: ModelKind, fold: &str, level: Level) -> Option<&CurveRecord> {
        self.records
            .iter()
            .find(|r| r.model == model && r.fold == fold && r.level == level)
    }

    pub fn folds(&self, model: ModelKind, level: Level) -> impl Iterator<Item = &CurveRecord> {
        self.records
            .iter()
            .filter(move |r| r.model == model && r.level == level && r.fold != MACRO_FOLD)
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self).map_err(|e| EvalError::Io(e.into()))
    }

    /// Flat CSV, one line per curve point.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["model", "fold", "level", "x", "precision", "recall", "selected", "tp", "fp", "fn", "tn"])?;
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
        for r in &self.records {
            for p in &r.curve {
                w.write_record([
                    r.model.name().to_string(),
                    r.fold.clone(),
                    r.level.name().to_string(),
                    p.x.to_string(),
                    opt(p.precision),
                    opt(p.recall),
                    p.selected.to_string(),
                    p.counts.tp.to_string(),
                    p.counts.fp.to_string(),
                    p.counts.fn_.to_string(),
                    p.counts.tn.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Pointwise mean of the defined values across curves.
fn macro_average(curves: &[&CurveRecord]) -> Vec<CurvePoint> {
    let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    (0..100)
        .map(|i| {
            let points: Vec<&CurvePoint> = curves.iter().map(|c| &c.curve[i]).collect();
            let sum = points.iter().fold(ConfusionCounts::default(), |acc, p| ConfusionCounts {
                tp: acc.tp + p.counts.tp,
                fp: acc.fp + p.counts.fp,
                fn_: acc.fn_ + p.counts.fn_,
                tn: acc.tn + p.counts.tn,
            });
            CurvePoint {
                x: i as u32 + 1,
                precision: mean(points.iter().filter_map(|p| p.precision).collect()),
                recall: mean(points.iter().filter_map(|p| p.recall).collect()),
                selected: points.iter().map(|p| p.selected).sum(),
                counts: sum,
            }
        })
        .collect()
}

/// Pixel and settlement units of the test rows, scored by `probs`.
pub fn score_units(
    table: &FeatureTable,
    test: &[usize],
    probs: &[f64],
) -> Result<(Vec<ScoredUnit>, Vec<ScoredUnit>)> {
    let mut pixels = Vec::with_capacity(test.len());
    let mut groups: BTreeMap<(&str, u8), Vec<f64>> = BTreeMap::new();
    for (&r, &p) in test.iter().zip(probs) {
        let row = &table.rows[r];
        pixels.push(ScoredUnit {
            id: row.pixel_id.clone(),
            score: p,
            label: row.label,
        });
        let gid = row.group_id().ok_or_else(|| EvalError::Ungrouped(row.pixel_id.clone()))?;
        groups.entry((gid, row.label)).or_default().push(p);
    }
    let groups: Vec<PixelGroup> = groups
        .into_iter()
        .map(|((id, label), probabilities)| PixelGroup {
            id: id.to_string(),
            label,
            probabilities,
        })
        .collect();
    Ok((pixels, settlement_scores(&groups)?))
}

/// Fits every model on each training fold and ranks the held-out
/// municipality's pixels and settlements.
pub fn evaluate(specs: &[ModelSpec], table: &FeatureTable) -> Result<EvaluationReport> {
    if table.positives() == 0 {
        return Err(EvalError::NoPositives(table.len()));
    }
    let folds = spatial_folds(table)?;
    let mut records = Vec::new();
    for spec in specs {
        let per_fold: Vec<[CurveRecord; 2]> = folds
            .par_iter()
            .map(|fold| {
                let model = models::fit_rows(spec, table, Some(&fold.train)).map_err(|source| EvalError::Fit {
                    fold: fold.municipality.clone(),
                    model: spec.kind(),
                    source,
                })?;
                let probs: Vec<f64> = fold
                    .test
                    .iter()
                    .map(|&r| model.score(table.rows[r].features.as_slice()))
                    .collect();
                let (pixels, settlements) = score_units(table, &fold.test, &probs)?;
                let record = |level, units: &[ScoredUnit]| -> Result<CurveRecord> {
                    Ok(CurveRecord {
                        model: spec.kind(),
                        fold: fold.municipality.clone(),
                        level,
                        units: units.len(),
                        positives: units.iter().filter(|u| u.label == 1).count(),
                        curve: curve_at_top_x(units)?,
                    })
                };
                log::info!("evaluated {} on held-out {}", spec.kind(), fold.municipality);
                Ok([record(Level::Pixel, &pixels)?, record(Level::Settlement, &settlements)?])
            })
            .collect::<Result<_>>()?;
        for level in [Level::Pixel, Level::Settlement] {
            let curves: Vec<&CurveRecord> = per_fold.iter().flatten().filter(|r| r.level == level).collect();
            records.extend(curves.iter().map(|r| (*r).clone()));
            records.push(CurveRecord {
                model: spec.kind(),
                fold: MACRO_FOLD.to_string(),
                level,
                units: curves.iter().map(|c| c.units).sum(),
                positives: curves.iter().map(|c| c.positives).sum(),
                curve: macro_average(&curves),
            });
        }
    }
    Ok(EvaluationReport { records })
}
