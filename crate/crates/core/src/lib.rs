//! Detection of newly emerged informal settlements from biennial
//! multispectral composites.
//!
//! The pipeline runs: scenes → [`composite`] (per-epoch medians at 10 m) →
//! [`features`] (12 bands + 10 indices per epoch, 66 values per pixel) →
//! [`sampling`] (labelled pixels) → [`models`] → [`evaluation`]
//! (leave-one-municipality-out, precision/recall at top x%) and
//! [`mapping`] (probability maps, ranked 500 m cells, GeoJSON candidates).

pub mod composite;
pub mod evaluation;
pub mod features;
pub mod mapping;
pub mod models;
pub mod raster;
pub mod sampling;

pub use composite::{median_composite, resample_to_10m, Epoch, EpochComposite, Scene, BAND_NAMES};
pub use evaluation::{
    curve_at_top_x, evaluate, precision_recall, settlement_scores, spatial_folds, ConfusionCounts, CurvePoint,
    EvaluationReport, ScoredUnit,
};
pub use features::{
    assemble_features, compute_index, compute_index_raster, feature_names, BandValues, FeatureRow, FeatureTable,
    FeatureVector, IndexKind, IndexParams, N_FEATURES,
};
pub use mapping::{export_candidates, predict_raster, rank_grid_cells, GridCellScore, Selection};
pub use models::{fit, load_model, save_model, ModelArtifact, ModelKind, ModelSpec};
pub use raster::{
    make_grid_cells, rasterize_polygons, read_raster, write_raster, GridCell, GridSpec, PolygonSet, RasterGrid,
};
pub use sampling::{
    build_dataset, extract_positive_pixels, sample_negative_pixels, NegativeGridRegistry, SamplingPlan,
};
