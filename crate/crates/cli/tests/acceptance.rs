//! Acceptance suite: one PASS/FAIL/FLAG line per criterion. Criterion 10 is
//! a soft check and only flags.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use settlemap_cli::config::{MunicipalityConfig, PipelineConfig};
use settlemap_cli::synth::{generate, SynthOptions};
use settlemap_cli::{Overrides, Pipeline, Stage};
use settlemap_core::composite::{median_composite, Epoch, Scene, BAND_NAMES};
use settlemap_core::evaluation::{
    curve_at_top_x, settlement_scores, spatial_folds, EvaluationReport, Level, PixelGroup, ScoredUnit, MACRO_FOLD,
};
use settlemap_core::features::{compute_index, BandValues, FeatureTable, IndexKind, IndexParams};
use settlemap_core::models::linear::{logistic_gradient, logistic_objective};
use settlemap_core::models::{find_best_split, Matrix, ModelKind};
use settlemap_core::raster::{write_raster, Polygon, PolygonSet, RasterGrid, DEFAULT_NODATA};
use settlemap_core::sampling::{GridClass, NegativeGrid, NegativeGridRegistry, REFERENCE_MUNICIPALITIES};

// Tolerances and thresholds.
const C1_MAX_SECONDS: f64 = 60.0;
const C2_TOLERANCE: f64 = 1e-9;
const C2_MAX_SECONDS: f64 = 5.0;
const C5_MAX_RELATIVE_ERROR: f64 = 1e-6;
const C9_MIN_RECALL: f64 = 0.9;
const C9_AT_X: u32 = 20;
const C9_MIN_FOLDS: usize = 7;
const C9_MAX_SECONDS: f64 = 600.0;
const C10_AT_X: u32 = 10;

/// Negatives per municipality on the end-to-end fixture.
const C9_NEGATIVES: usize = 4_000;

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    Flag,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome { status: Status::Pass, detail: detail.into() }
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome { status: Status::Fail, detail: detail.into() }
}

fn check(ok: bool, detail: impl Into<String>) -> Outcome {
    if ok {
        pass(detail)
    } else {
        fail(detail)
    }
}

// ---------------------------------------------------------------- criterion 1

const C1_WIDTH: usize = 300;
const C1_HEIGHT: usize = 400;

/// An L-shaped polygon covering exactly `n` pixel centers: `n / w` full rows
/// of width `w` plus a partial row.
fn l_shape(n: usize, w: usize, row0: usize, col0: usize, x0: f64, y0: f64) -> Polygon {
    let (q, r) = (n / w, n % w);
    let pts: Vec<(usize, usize)> = match (q, r) {
        (0, r) => vec![(0, 0), (r, 0), (r, 1), (0, 1)],
        (q, 0) => vec![(0, 0), (w, 0), (w, q), (0, q)],
        (q, r) => vec![(0, 0), (w, 0), (w, q), (r, q), (r, q + 1), (0, q + 1)],
    };
    let mut ring: Vec<(f64, f64)> = pts
        .iter()
        .map(|&(c, rr)| (x0 + (col0 + c) as f64 * 10.0, y0 - (row0 + rr) as f64 * 10.0))
        .collect();
    ring.push(ring[0]);
    Polygon::new(ring, None)
}

struct DatasetFixture {
    _dir: tempfile::TempDir,
    dataset: PathBuf,
    summary: Value,
    formal_grids: Vec<String>,
    seconds: f64,
}

fn build_table1_dataset() -> DatasetFixture {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = root.join("out");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut registry = NegativeGridRegistry::default();
    let mut municipalities = Vec::new();
    let mut formal_grids = Vec::new();
    for (i, &(name, pixels, n_polys)) in REFERENCE_MUNICIPALITIES.iter().enumerate() {
        let (x0, y0) = (300_000.0 + i as f64 * 10_000.0, 1_000_000.0);
        for epoch in Epoch::ALL {
            let values = (0..12 * C1_WIDTH * C1_HEIGHT).map(|_| rng.gen_range(0.01f32..0.5)).collect();
            let grid = RasterGrid::new(
                C1_WIDTH,
                C1_HEIGHT,
                BAND_NAMES.iter().map(|b| b.to_string()).collect(),
                [x0, 10.0, 0.0, y0, 0.0, -10.0],
                "EPSG:32618",
                DEFAULT_NODATA,
                values,
            )
            .unwrap();
            let path = out.join(format!("composites/{name}/{}.bsqr", epoch.label()));
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            write_raster(&grid, path).unwrap();
        }
        // Polygons below the grid block, side by side.
        let width = C1_WIDTH / n_polys - 1;
        let polys: Vec<Polygon> = (0..n_polys)
            .map(|j| {
                let n = pixels / n_polys + usize::from(j < pixels % n_polys);
                let mut p = l_shape(n, width, 260, j * (width + 1), x0, y0);
                p.label = Some(format!("{name}-s{j}"));
                p
            })
            .collect();
        let muni_dir = root.join(name);
        fs::create_dir_all(&muni_dir).unwrap();
        PolygonSet::new(polys).write_geojson(muni_dir.join("polygons.geojson")).unwrap();
        let mut epochs = BTreeMap::new();
        for epoch in Epoch::ALL {
            let manifest = muni_dir.join(format!("{}.json", epoch.label()));
            fs::write(&manifest, "[]").unwrap();
            epochs.insert(epoch.label().to_string(), manifest);
        }
        municipalities.push(MunicipalityConfig { name: name.to_string(), polygons: muni_dir.join("polygons.geojson"), epochs });
        // 30 grids of 50x50 px in rows 0..250; a third formal.
        let grids: Vec<NegativeGrid> = (0..30)
            .map(|g| NegativeGrid {
                grid_id: format!("{name}-g{g:02}"),
                class: if g % 3 == 0 { GridClass::Formal } else { GridClass::Unoccupied },
                row0: (g / 6) * 50,
                col0: (g % 6) * 50,
                rows: 50,
                cols: 50,
            })
            .collect();
        formal_grids.extend(grids.iter().filter(|g| g.class == GridClass::Formal).map(|g| g.grid_id.clone()));
        registry.municipalities.insert(name.to_string(), grids);
    }
    registry.write(root.join("registry.json")).unwrap();
    let config = serde_json::json!({
        "output_dir": "out",
        "municipalities": municipalities,
        "registry": "registry.json",
        "seed": 0,
    });
    let config_path = root.join("config.json");
    fs::write(&config_path, config.to_string()).unwrap();
    let cfg = PipelineConfig::load(&config_path, &Overrides::default()).unwrap();
    let mut pipeline = Pipeline::new(cfg, false);
    pipeline.run_stage(Stage::Sample).unwrap();
    let seconds = started.elapsed().as_secs_f64();
    let summary = serde_json::from_str(&fs::read_to_string(out.join("sampling_summary.json")).unwrap()).unwrap();
    DatasetFixture { dataset: out.join("dataset.csv"), _dir: dir, summary, formal_grids, seconds }
}

fn read_table(path: &Path) -> FeatureTable {
    FeatureTable::read_csv(BufReader::new(fs::File::open(path).unwrap())).unwrap()
}

fn criterion_1(fx: &DatasetFixture, table: &FeatureTable) -> Outcome {
    let s = &fx.summary;
    let (pos, neg, rows) = (s["positives"].as_u64().unwrap(), s["negatives"].as_u64().unwrap(), s["rows"].as_u64().unwrap());
    let mut per_muni_ok = true;
    let formal: std::collections::HashSet<&str> = fx.formal_grids.iter().map(String::as_str).collect();
    for &(name, pixels, _) in &REFERENCE_MUNICIPALITIES {
        let rows: Vec<_> = table.rows.iter().filter(|r| r.municipality == name).collect();
        let p = rows.iter().filter(|r| r.label == 1).count();
        let f = rows.iter().filter(|r| r.grid_id.as_deref().is_some_and(|g| formal.contains(g))).count();
        let u = rows.iter().filter(|r| r.label == 0).count() - f;
        per_muni_ok &= p == pixels && f == 12_000 && u == 18_000;
    }
    check(
        pos == 23_756 && neg == 270_000 && rows == 293_756 && per_muni_ok && fx.seconds < C1_MAX_SECONDS,
        format!(
            "positives {pos}, negatives {neg}, rows {rows}, per-municipality 12000/18000 split {}, {:.1} s",
            if per_muni_ok { "exact" } else { "WRONG" },
            fx.seconds
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn reference_index(name: &str, b: &HashMap<&str, f64>, l: f64, c: f64) -> f64 {
    let g = |k: &str| b[k];
    match name {
        "NDVI" => (g("b8") - g("b4")) / (g("b8") + g("b4")),
        "SAVI" => (g("b8A") - g("b4")) * (1.0 + l) / (g("b8A") + g("b4") + l),
        "MNDWI" => (g("b3") - g("b11")) / (g("b3") + g("b11")),
        "NDBI" => (g("b11") - g("b8")) / (g("b11") + g("b8")),
        "UI" => (g("b7") - g("b5")) / (g("b7") + g("b5")),
        "NBI" => g("b4") * g("b11") / g("b8A"),
        "BRBA" => g("b4") / g("b11"),
        "NBAI" => (g("b11") - g("b12") / g("b3")) / (g("b11") + g("b12") / g("b3")),
        "MBI" => (g("b12") * g("b4") - g("b8A") * g("b8A")) / (g("b4") + g("b8A") + g("b12")),
        "BAEI" => (g("b4") + c) / (g("b3") + g("b11")),
        _ => unreachable!(),
    }
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = IndexParams::default();
    let (mut worst, mut bounded) = (0.0f64, true);
    for _ in 0..10_000 {
        let values: [f64; 12] = std::array::from_fn(|_| rng.gen_range(0.0005..1.0));
        let named: HashMap<&str, f64> = BAND_NAMES.iter().copied().zip(values).collect();
        for kind in IndexKind::ALL {
            let got = compute_index(kind, &BandValues(values), &params);
            let want = reference_index(kind.name(), &named, params.savi_l, params.baei_c);
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
            if matches!(kind, IndexKind::Ndvi | IndexKind::Mndwi | IndexKind::Ndbi | IndexKind::Ui) {
                bounded &= (-1.0..=1.0).contains(&got);
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        worst <= C2_TOLERANCE && bounded && secs < C2_MAX_SECONDS,
        format!("max relative deviation {worst:.2e} over 10^4 tuples, normalized differences bounded: {bounded}, {secs:.2} s"),
    )
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gt = [0.0, 10.0, 0.0, 0.0, 0.0, -10.0];
    let one = |w, h, name: &str, v: Vec<f32>| {
        RasterGrid::new(w, h, vec![name.to_string()], gt, "EPSG:32618", DEFAULT_NODATA, v).unwrap()
    };
    let (mut mismatches, mut even, mut empty) = (0usize, 0usize, 0usize);
    for _ in 0..200 {
        let (w, h, k) = (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=25));
        let pool: Vec<f32> = (0..rng.gen_range(2..10)).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        let mask_rate = rng.gen_range(0.0..0.9);
        let values: Vec<Vec<Vec<f32>>> = (0..k)
            .map(|_| (0..12).map(|_| (0..w * h).map(|_| pool[rng.gen_range(0..pool.len())]).collect()).collect())
            .collect();
        let masks: Vec<Vec<bool>> = (0..k).map(|_| (0..w * h).map(|_| !rng.gen_bool(mask_rate)).collect()).collect();
        let scenes: Vec<Scene> = (0..k)
            .map(|s| Scene {
                acquired: NaiveDate::from_ymd_opt(2019, 1 + (s % 12) as u32, 1 + s as u32).unwrap(),
                bands: BAND_NAMES.iter().enumerate().map(|(b, n)| one(w, h, n, values[s][b].clone())).collect(),
                valid_mask: one(w, h, "mask", masks[s].iter().map(|&m| m as u8 as f32).collect()),
            })
            .collect();
        let got = median_composite(&scenes, Epoch::Y2019_2020, DEFAULT_NODATA).unwrap();
        for b in 0..12 {
            for p in 0..w * h {
                let mut v: Vec<f32> = (0..k).filter(|&s| masks[s][p]).map(|s| values[s][b][p]).collect();
                v.sort_by(|a, c| a.partial_cmp(c).unwrap());
                let want = match v.len() {
                    0 => DEFAULT_NODATA,
                    n if n % 2 == 1 => v[n / 2],
                    n => ((v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0) as f32,
                };
                if b == 0 {
                    even += (!v.is_empty() && v.len() % 2 == 0) as usize;
                    empty += v.is_empty() as usize;
                }
                mismatches += (got.bands.pixels[b * w * h + p].to_bits() != want.to_bits()) as usize;
            }
        }
    }
    check(
        mismatches == 0 && even > 0 && empty > 0,
        format!("{mismatches} mismatches on 200 stacks ({even} even-count and {empty} all-masked pixels covered)"),
    )
}

// ---------------------------------------------------------------- criterion 4

fn exhaustive_split(x: &[Vec<f64>], y: &[u8], features: usize, min_leaf: usize) -> Option<(usize, f64, f64)> {
    let n = y.len();
    let gini = |p: usize, t: usize| {
        let p1 = p as f64 / t as f64;
        let p0 = (t - p) as f64 / t as f64;
        1.0 - p0 * p0 - p1 * p1
    };
    let pos = y.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == n {
        return None;
    }
    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..features {
        let mut vals: Vec<f64> = x.iter().map(|r| r[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for pair in vals.windows(2) {
            let mut t = (pair[0] + pair[1]) / 2.0;
            if t >= pair[1] {
                t = pair[0];
            }
            let nl = x.iter().filter(|r| r[f] <= t).count();
            if nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let lp = x.iter().zip(y).filter(|(r, &l)| r[f] <= t && l == 1).count();
            let d = gini(pos, n) - (nl as f64 / n as f64) * gini(lp, nl) - ((n - nl) as f64 / n as f64) * gini(pos - lp, n - nl);
            if d > 0.0 && best.is_none_or(|b| d > b.2) {
                best = Some((f, t, d));
            }
        }
    }
    best
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut disagreements = 0;
    for _ in 0..100 {
        let (n, d, levels) = (rng.gen_range(2..=200), rng.gen_range(1..=5), rng.gen_range(2..25));
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(0..levels) as f64 / 4.0).collect()).collect();
        let y: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.35) as u8).collect();
        let min_leaf = rng.gen_range(1..=3);
        let rows: Vec<usize> = (0..n).collect();
        let features: Vec<usize> = (0..d).collect();
        let got = find_best_split(&Matrix::from_rows(&x).unwrap(), &y, &rows, &features, min_leaf)
            .map(|s| (s.feature, s.threshold, s.decrease));
        disagreements += (got != exhaustive_split(&x, &y, d, min_leaf)) as usize;
    }
    check(disagreements == 0, format!("{disagreements} disagreements on 100 random tables"))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (n, d) = (rng.gen_range(4..30), rng.gen_range(1..6));
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let y: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.5) as u8).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (b, l2) = (rng.gen_range(-1.0..1.0), rng.gen_range(0.0..0.3));
        let (gw, gb) = logistic_gradient(&w, b, &x, &y, l2);
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for j in 0..d {
            let (mut p, mut m) = (w.clone(), w.clone());
            p[j] += h;
            m[j] -= h;
            let num = (logistic_objective(&p, b, &x, &y, l2) - logistic_objective(&m, b, &x, &y, l2)) / (2.0 * h);
            worst = worst.max(rel(gw[j], num));
        }
        let num = (logistic_objective(&w, b + h, &x, &y, l2) - logistic_objective(&w, b - h, &x, &y, l2)) / (2.0 * h);
        worst = worst.max(rel(gb, num));
    }
    check(worst < C5_MAX_RELATIVE_ERROR, format!("max relative error {worst:.2e} on 20 problems"))
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6(table: &FeatureTable) -> Outcome {
    let folds = spatial_folds(table).unwrap();
    let mut leaks = 0usize;
    let mut seen = vec![0u32; table.len()];
    for f in &folds {
        let test_munis: std::collections::HashSet<&str> =
            f.test.iter().map(|&i| table.rows[i].municipality.as_str()).collect();
        leaks += f.train.iter().filter(|&&i| test_munis.contains(table.rows[i].municipality.as_str())).count();
        f.test.iter().for_each(|&i| seen[i] += 1);
    }
    let once = seen.iter().all(|&s| s == 1);
    check(
        leaks == 0 && once && folds.len() == 9,
        format!("{} folds over {} rows, {leaks} leaking training rows, every row tested once: {once}", folds.len(), table.len()),
    )
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut mismatches, mut non_monotone, mut variant) = (0usize, 0usize, 0usize);
    for _ in 0..100 {
        let n = rng.gen_range(1..=1000);
        let levels = rng.gen_range(1..40);
        let mut units: Vec<ScoredUnit> = (0..n)
            .map(|i| ScoredUnit { id: format!("u{i:04}"), score: rng.gen_range(0..levels) as f64, label: rng.gen_bool(0.25) as u8 })
            .collect();
        units[rng.gen_range(0..n)].label = 1;
        units.shuffle(&mut rng);
        let curve = curve_at_top_x(&units).unwrap();
        let mut ranked: Vec<&ScoredUnit> = units.iter().collect();
        ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.id.cmp(&b.id)));
        let total_pos = units.iter().filter(|u| u.label == 1).count();
        let mut last = 0.0;
        for x in 1..=100u32 {
            let k = (x as usize * n).div_ceil(100);
            let tp = ranked[..k].iter().filter(|u| u.label == 1).count();
            let p = &curve[x as usize - 1];
            let expected = (tp, k - tp, total_pos - tp, n - k - (total_pos - tp));
            mismatches += ((p.counts.tp, p.counts.fp, p.counts.fn_, p.counts.tn) != expected) as usize;
            let r = p.recall.unwrap();
            non_monotone += (r < last) as usize;
            last = r;
        }
        let moved: Vec<ScoredUnit> = units.iter().map(|u| ScoredUnit { score: (u.score * 0.37).exp() - 4.0, ..u.clone() }).collect();
        variant += (curve_at_top_x(&moved).unwrap() != curve) as usize;
    }
    check(
        mismatches + non_monotone + variant == 0,
        format!("{mismatches} count mismatches, {non_monotone} recall decreases, {variant} transform-variant curves"),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bad = 0;
    for m in 1..=50usize {
        let mut probs: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
        // ceil(0.1 m), written out by hand.
        let k = if m % 10 == 0 { m / 10 } else { m / 10 + 1 };
        let mut sorted = probs.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let want = sorted[..k].iter().sum::<f64>() / k as f64;
        let score = |p: Vec<f64>| settlement_scores(&[PixelGroup { id: "s".into(), label: 1, probabilities: p }]).unwrap()[0].score;
        let a = score(probs.clone());
        probs.shuffle(&mut rng);
        let b = score(probs);
        bad += (a != want || a.to_bits() != b.to_bits()) as usize;
    }
    check(bad == 0, format!("{bad} mismatches over group sizes 1..50 incl. permutations"))
}

// ------------------------------------------------------------ criteria 9, 10

struct EndToEnd {
    report: EvaluationReport,
    seconds: f64,
    settlements_per_muni: usize,
}

fn run_all(config: &Path, out: &Path) -> Pipeline {
    let overrides = Overrides { seed: None, output_dir: Some(out.to_path_buf()) };
    let cfg = PipelineConfig::load(config, &overrides).unwrap();
    let mut pipeline = Pipeline::new(cfg, false);
    pipeline.run_all().unwrap();
    pipeline
}

fn end_to_end() -> EndToEnd {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let opts = SynthOptions { seed: 9, negatives: C9_NEGATIVES, ..Default::default() };
    let summary = generate(dir.path(), &opts).unwrap();
    let out = dir.path().join("out");
    run_all(&summary.config, &out);
    let text = fs::read_to_string(out.join("reports/evaluation.json")).unwrap();
    EndToEnd {
        report: serde_json::from_str(&text).unwrap(),
        seconds: started.elapsed().as_secs_f64(),
        settlements_per_muni: summary.municipalities.iter().map(|m| m.settlements.len()).min().unwrap(),
    }
}

fn criterion_9(e: &EndToEnd) -> Outcome {
    let folds: Vec<(String, f64)> = e
        .report
        .folds(ModelKind::RandomForest, Level::Settlement)
        .map(|r| (r.fold.clone(), r.curve[C9_AT_X as usize - 1].recall.unwrap_or(0.0)))
        .collect();
    let good = folds.iter().filter(|(_, r)| *r >= C9_MIN_RECALL).count();
    let listing: Vec<String> = folds.iter().map(|(m, r)| format!("{m} {r:.2}")).collect();
    check(
        folds.len() == 9 && good >= C9_MIN_FOLDS && e.settlements_per_muni >= 5 && e.seconds < C9_MAX_SECONDS,
        format!(
            "{good}/9 folds with settlement recall@{C9_AT_X}% >= {C9_MIN_RECALL} [{}], {:.0} s",
            listing.join(", "),
            e.seconds
        ),
    )
}

fn criterion_10(e: &EndToEnd) -> Outcome {
    let at = |kind| {
        e.report
            .curve(kind, MACRO_FOLD, Level::Pixel)
            .and_then(|r| r.curve[C10_AT_X as usize - 1].precision)
            .unwrap_or(f64::NAN)
    };
    let (rf, lr, svm) = (at(ModelKind::RandomForest), at(ModelKind::Logistic), at(ModelKind::LinearSvm));
    let detail = format!("macro pixel precision@{C10_AT_X}%: random_forest {rf:.4}, logistic {lr:.4}, linear_svm {svm:.4}");
    if rf >= lr && rf >= svm {
        pass(detail)
    } else {
        Outcome { status: Status::Flag, detail }
    }
}

// ---------------------------------------------------------------- criterion 11

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let opts = SynthOptions { seed: 11, size: 150, municipalities: 4, negatives: 1_500, trees: 20, ..Default::default() };
    let config = generate(&dir.path().join("fixture"), &opts).unwrap().config;
    let (a, b) = (dir.path().join("run_a"), dir.path().join("run_b"));
    run_all(&config, &a);
    run_all(&config, &b);
    let mut compared = 0;
    let mut differing = Vec::new();
    for sub in ["models", "reports", "maps"] {
        let mut stack = vec![a.join(sub)];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                    continue;
                }
                let twin = b.join(path.strip_prefix(&a).unwrap());
                compared += 1;
                if fs::read(&path).ok() != fs::read(&twin).ok() {
                    differing.push(path.strip_prefix(&a).unwrap().display().to_string());
                }
            }
        }
    }
    check(
        differing.is_empty() && compared >= 3 + 2 + 4 * 4,
        format!("{compared} artifacts compared byte for byte, {} differ {:?}", differing.len(), differing),
    )
}

// ---------------------------------------------------------------------- main

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            fail(format!("panicked: {msg}"))
        }
    }
}

fn report(id: u32, name: &str, outcome: Outcome, failures: &mut u32) {
    let tag = match outcome.status {
        Status::Pass => "PASS",
        Status::Fail => {
            *failures += 1;
            "FAIL"
        }
        Status::Flag => "FLAG",
    };
    println!("[{tag}] criterion {id:>2} {name}: {}", outcome.detail);
}

fn main() {
    // Respect `cargo test -- <filter>` loosely: `--list` prints nothing.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failures = 0;
    println!("acceptance suite");
    let dataset = catch_unwind(build_table1_dataset);
    let table = dataset.as_ref().ok().map(|fx| read_table(&fx.dataset));
    match (&dataset, &table) {
        (Ok(fx), Some(t)) => report(1, "dataset arithmetic", guarded(|| criterion_1(fx, t)), &mut failures),
        _ => report(1, "dataset arithmetic", fail("fixture construction panicked"), &mut failures),
    }
    report(2, "index oracle", guarded(criterion_2), &mut failures);
    report(3, "median composite oracle", guarded(criterion_3), &mut failures);
    report(4, "split search oracle", guarded(criterion_4), &mut failures);
    report(5, "logistic gradient check", guarded(criterion_5), &mut failures);
    match &table {
        Some(t) => report(6, "cross-validation leakage", guarded(|| criterion_6(t)), &mut failures),
        None => report(6, "cross-validation leakage", fail("no dataset"), &mut failures),
    }
    drop(table);
    drop(dataset);
    report(7, "curve oracle", guarded(criterion_7), &mut failures);
    report(8, "settlement aggregation", guarded(criterion_8), &mut failures);
    match catch_unwind(end_to_end) {
        Ok(e) => {
            report(9, "synthetic end-to-end", guarded(|| criterion_9(&e)), &mut failures);
            report(10, "model ordering (soft)", guarded(|| criterion_10(&e)), &mut failures);
        }
        Err(_) => {
            report(9, "synthetic end-to-end", fail("pipeline panicked"), &mut failures);
            report(10, "model ordering (soft)", fail("pipeline panicked"), &mut failures);
        }
    }
    report(11, "determinism", guarded(criterion_11), &mut failures);
    println!("acceptance: {} hard failure(s)", failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
