//! Stage runners shared by the subcommands and `run`.
//!
//! Each stage takes the global seed and derives its own, so running the
//! stages one by one through intermediate files gives the same numbers as a
//! single `run`.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use coverbias::bias::{coverage_bias, national_summary, read_surveys, BiasTable, CoverageSummary, SurveyEntry};
use coverbias::boost::{default_grid, tune_and_fit, Dataset, ModelOutcome, TreeEnsemble};
use coverbias::explain::{
    beeswarm_export, dependence_export, importance_profile, tree_shap, BeeswarmRecord, DependenceExport,
    ImportanceProfile, ShapMatrix,
};
use coverbias::homeloc::{
    aggregate_homes, detect_homes, load_tile_counts, window_average_counts, HomeRule, TimeWindow,
};
use coverbias::ingest::{
    load_area_geometries, load_count_table, load_covariates, load_pings, validate_alignment, AlignmentReport, AreaSet,
    CountTable, CovariateTable, KeyedTable,
};
use coverbias::seed::derive;
use coverbias::spatial::{build_weights, histogram, pearson, permutation_test, Histogram, MoranResult, Pearson};
use coverbias::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{ExplainConfig, ModelConfig, RunConfig, SourceConfig, SourceInput, SpatialConfig};
use crate::report::{write_json, Report, SourceReport};

pub const REPORT_FILE: &str = "report.json";
pub const FAILED_FILE: &str = "FAILED";

/// How a source's per-area counts were obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "input", rename_all = "snake_case")]
pub enum IngestInfo {
    Counts,
    Pings {
        n_devices: usize,
        homed_devices: usize,
        unmapped_pings: usize,
    },
    Tiles {
        window: TimeWindow,
        n_records: usize,
        dropped_tiles: Vec<String>,
    },
}

pub fn homes_stage(pings: &Path, areas: &AreaSet, rule: &HomeRule, source_id: &str) -> Result<(CountTable, IngestInfo)> {
    rule.validate()?;
    let stream = load_pings(pings)?;
    stream.validate(None)?;
    let det = detect_homes(&stream, areas, rule);
    let table = aggregate_homes(&det.homes, areas, source_id)?;
    Ok((
        table,
        IngestInfo::Pings {
            n_devices: det.n_devices,
            homed_devices: det.homes.len(),
            unmapped_pings: det.unmapped_pings,
        },
    ))
}

pub fn source_counts(src: &SourceConfig, areas: &AreaSet, rule: &HomeRule) -> Result<(CountTable, IngestInfo)> {
    match src.input()? {
        SourceInput::Counts(p) => Ok((load_count_table(p, &src.id)?, IngestInfo::Counts)),
        SourceInput::Pings(p) => homes_stage(p, areas, rule, &src.id),
        SourceInput::Tiles(p, window) => {
            let records = load_tile_counts(p)?;
            let agg = window_average_counts(&records, window, areas, &src.id)?;
            Ok((
                agg.table,
                IngestInfo::Tiles {
                    window,
                    n_records: records.len(),
                    dropped_tiles: agg.dropped_tiles,
                },
            ))
        }
    }
}

pub struct LoadedSource {
    pub id: String,
    pub counts: CountTable,
    pub ingest: IngestInfo,
}

pub struct LoadedInputs {
    pub areas: AreaSet,
    pub census: CountTable,
    pub covariates: CovariateTable,
    pub surveys: Vec<SurveyEntry>,
    pub sources: Vec<LoadedSource>,
    pub alignment: AlignmentReport,
}

/// Load every input and check that keys agree. With `allow_partial` the
/// analysis is restricted to areas present everywhere; otherwise any
/// disagreement is a schema error.
pub fn load_inputs(cfg: &RunConfig) -> Result<LoadedInputs> {
    let areas = load_area_geometries(&cfg.inputs.areas)?;
    let census = load_count_table(&cfg.inputs.census, "census")?;
    let covariates = load_covariates(&cfg.inputs.covariates, cfg.inputs.feature_schema.as_deref())?;
    let surveys = match &cfg.inputs.surveys {
        Some(p) => read_surveys(File::open(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?)?,
        None => Vec::new(),
    };
    let mut sources = Vec::with_capacity(cfg.sources.len());
    for s in &cfg.sources {
        let (counts, ingest) = source_counts(s, &areas, &cfg.home_rule)?;
        sources.push(LoadedSource {
            id: s.id.clone(),
            counts,
            ingest,
        });
    }

    let mut tables: Vec<&dyn KeyedTable> = vec![&census, &covariates];
    tables.extend(sources.iter().map(|s| &s.counts as &dyn KeyedTable));
    let mut alignment = validate_alignment(&areas, &tables);
    for s in &sources {
        if let IngestInfo::Tiles { dropped_tiles, .. } = &s.ingest {
            alignment
                .unassigned
                .extend(dropped_tiles.iter().map(|t| format!("{}: tile {t}", s.id)));
        }
    }
    if alignment.is_clean() {
        return Ok(LoadedInputs {
            areas,
            census,
            covariates,
            surveys,
            sources,
            alignment,
        });
    }
    if !cfg.allow_partial {
        return Err(Error::Schema(format!(
            "inputs disagree on area keys (missing: {}; extra: {}); pass --allow-partial to use the intersection",
            preview(&alignment.missing),
            preview(&alignment.extra)
        )));
    }
    log::warn!(
        "restricting analysis to {} aligned areas ({} missing somewhere, {} extra keys)",
        alignment.aligned.len(),
        alignment.missing.len(),
        alignment.extra.len()
    );
    let keep: BTreeSet<&str> = alignment.aligned.iter().map(String::as_str).collect();
    let areas = areas.subset(keep.iter().copied());
    let census = census.restricted(&keep);
    let covariates = CovariateTable {
        features: covariates.features.clone(),
        rows: covariates
            .rows
            .into_iter()
            .filter(|(k, _)| keep.contains(k.as_str()))
            .collect(),
    };
    let sources = sources
        .into_iter()
        .map(|s| LoadedSource {
            counts: s.counts.restricted(&keep),
            ..s
        })
        .collect();
    Ok(LoadedInputs {
        areas,
        census,
        covariates,
        surveys,
        sources,
        alignment,
    })
}

fn preview(ids: &[String]) -> String {
    if ids.is_empty() {
        return "none".into();
    }
    let head: Vec<&str> = ids.iter().take(5).map(String::as_str).collect();
    if ids.len() > 5 {
        format!("{} and {} more", head.join(", "), ids.len() - 5)
    } else {
        head.join(", ")
    }
}

pub struct CoverageOutput {
    pub bias: BiasTable,
    pub summary: CoverageSummary,
}

pub fn coverage_stage(counts: &CountTable, census: &CountTable) -> Result<CoverageOutput> {
    Ok(CoverageOutput {
        bias: coverage_bias(counts, census)?,
        summary: national_summary(counts, census)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeIsolates {
    pub scheme: String,
    pub band_km: Option<f64>,
    pub isolates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialReport {
    pub moran: Vec<MoranResult>,
    /// Max minus min of `I` across schemes; absent with a single scheme.
    pub range: Option<f64>,
    pub weights: Vec<SchemeIsolates>,
    pub histogram: Histogram,
    /// Correlation of bias with census population.
    pub population_association: Option<Pearson>,
}

/// Moran's I with permutation p under each scheme, the cross-scheme range,
/// a bias histogram and the bias-population correlation.
pub fn spatial_stage(
    bias: &BiasTable,
    areas: &AreaSet,
    census: Option<&CountTable>,
    settings: &SpatialConfig,
    seed: u64,
) -> Result<SpatialReport> {
    for id in bias.rows.keys() {
        if !areas.contains_id(id) {
            return Err(Error::MissingKey {
                key: id.clone(),
                table: "areas".into(),
            });
        }
    }
    let local = areas.subset(bias.rows.keys().map(String::as_str));
    let values = bias.bias_values();
    let stage_seed = derive(seed, "spatial");
    let mut moran = Vec::new();
    let mut weights = Vec::new();
    for scheme in settings.parsed_schemes()? {
        let w = build_weights(&local, scheme, settings.row_standardize)?;
        let x = w.align(&values)?;
        moran.push(permutation_test(&x, &w, settings.permutations, stage_seed, settings.alternative)?);
        weights.push(SchemeIsolates {
            scheme: w.label(),
            band_km: w.band_km(),
            isolates: w.isolates().into_iter().map(|i| w.ids()[i].clone()).collect(),
        });
    }
    let range = (moran.len() >= 2).then(|| {
        let (lo, hi) = moran
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), m| (l.min(m.i), h.max(m.i)));
        hi - lo
    });
    let bias_list: Vec<f64> = values.values().copied().collect();
    let population_association = match census {
        Some(c) => {
            let pop = bias
                .rows
                .keys()
                .map(|id| {
                    c.get(id).ok_or_else(|| Error::MissingKey {
                        key: id.clone(),
                        table: c.source_id.clone(),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            match pearson(&pop, &bias_list) {
                Ok(p) => Some(p),
                Err(Error::DegenerateInput(m)) => {
                    log::warn!("bias-population correlation undefined: {m}");
                    None
                }
                Err(e) => return Err(e),
            }
        }
        None => None,
    };
    Ok(SpatialReport {
        moran,
        range,
        weights,
        histogram: histogram(&bias_list, settings.histogram_bins)?,
        population_association,
    })
}

/// Fit the bias model: tune on a training split (unless disabled), refit and
/// score the held-out split.
pub fn model_stage(bias: &BiasTable, covariates: &CovariateTable, cfg: &ModelConfig, seed: u64) -> Result<(Dataset, ModelOutcome)> {
    let data = Dataset::from_tables(bias, covariates)?;
    let mut base = cfg.params.clone();
    base.seed = derive(seed, "boost");
    let grid = if !cfg.tune {
        Vec::new()
    } else if let Some(g) = &cfg.grid {
        g.iter()
            .map(|p| {
                let mut p = p.clone();
                p.seed = base.seed;
                p
            })
            .collect()
    } else {
        default_grid(&base)
    };
    let outcome = tune_and_fit(&data, &base, &grid, cfg.folds, cfg.train_fraction, derive(seed, "model"))?;
    Ok((data, outcome))
}

pub struct ExplainOutput {
    pub shap: ShapMatrix,
    pub importance: ImportanceProfile,
    pub beeswarm: Vec<BeeswarmRecord>,
    pub dependence: Vec<DependenceExport>,
    pub warnings: Vec<String>,
}

/// SHAP over every area, importance ranking and figure exports.
pub fn explain_stage(ensemble: &TreeEnsemble, data: &Dataset, cfg: &ExplainConfig) -> Result<ExplainOutput> {
    let shap = tree_shap(ensemble, &data.ids, &data.features)?;
    let importance = importance_profile(&shap);
    let beeswarm = beeswarm_export(&shap, data)?;
    let mut dependence = Vec::new();
    let mut warnings = Vec::new();
    for fi in importance.features.iter().take(cfg.dependence_top) {
        match dependence_export(&shap, data, fi.index, cfg.span) {
            Ok(mut d) => {
                d.rank = Some(fi.rank);
                dependence.push(d);
            }
            Err(Error::DegenerateInput(m)) => {
                let msg = format!("no dependence curve for `{}`: {m}", fi.feature);
                log::warn!("{msg}");
                warnings.push(msg);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ExplainOutput {
        shap,
        importance,
        beeswarm,
        dependence,
        warnings,
    })
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Schema(format!("csv write: {e}"))
}

pub fn write_shap_csv(shap: &ShapMatrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["area_id".to_string()];
    header.extend(shap.feature_names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (id, row) in shap.ids.iter().zip(&shap.values) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

pub fn write_importance_csv(profile: &ImportanceProfile, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["rank", "feature", "mean_abs_shap", "normalized", "highlighted"])
        .map_err(csv_err)?;
    for f in &profile.features {
        w.write_record([
            f.rank.to_string(),
            f.feature.clone(),
            f.mean_abs_shap.to_string(),
            f.normalized.to_string(),
            f.highlighted.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

pub fn write_moran_csv(report: &SpatialReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["scheme", "I", "p", "n_perm", "seed"]).map_err(csv_err)?;
    for m in &report.moran {
        w.write_record([
            m.scheme.clone(),
            m.i.to_string(),
            m.p_value.to_string(),
            m.n_perm.to_string(),
            m.seed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

pub fn write_predictions_csv(outcome: &ModelOutcome, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["area_id", "observed", "predicted"]).map_err(csv_err)?;
    for p in &outcome.report.test_pairs {
        w.write_record([p.area_id.clone(), p.observed.to_string(), p.predicted.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn remove_if_present(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::Io {
            path: path.into(),
            source: e,
        }),
    }
}

/// Validate the config, run every stage for every source and write the
/// bundle. On a stage failure the files written so far stay in place next to
/// a `FAILED` marker holding the error.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::Io {
        path: cfg.out.clone(),
        source: e,
    })?;
    remove_if_present(&cfg.out.join(FAILED_FILE))?;
    remove_if_present(&cfg.out.join(REPORT_FILE))?;
    let generated_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    match run_stages(cfg, generated_at) {
        Ok(path) => Ok(path),
        Err(e) => {
            let marker = cfg.out.join(FAILED_FILE);
            if let Err(io) = write_text(&marker, &format!("{:?}: {e}\n", e.kind())) {
                log::error!("could not write failure marker: {io}");
            }
            Err(e)
        }
    }
}

fn run_stages(cfg: &RunConfig, generated_at: String) -> Result<PathBuf> {
    let inputs = load_inputs(cfg)?;
    let mut report = Report::new(cfg, generated_at, inputs.alignment.clone());
    let mut summaries = Vec::new();
    for s in &inputs.surveys {
        summaries.push(s.summary()?);
    }

    for src in &inputs.sources {
        log::info!("source `{}`: coverage", src.id);
        let dir = cfg.out.join(&src.id);
        fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        src.counts.save(&dir.join("counts.csv"))?;
        let cov = coverage_stage(&src.counts, &inputs.census)?;
        cov.bias.write_csv(create(&dir.join("coverage.csv"))?)?;
        summaries.push(cov.summary.clone());

        log::info!("source `{}`: spatial", src.id);
        let spatial = spatial_stage(&cov.bias, &inputs.areas, Some(&inputs.census), &cfg.spatial, cfg.seed)?;
        write_moran_csv(&spatial, &dir.join("moran.csv"))?;

        log::info!("source `{}`: model", src.id);
        let (data, outcome) = model_stage(&cov.bias, &inputs.covariates, &cfg.model, cfg.seed)?;
        write_text(&dir.join("model.json"), &outcome.ensemble.to_json())?;
        write_predictions_csv(&outcome, &dir.join("predictions.csv"))?;

        log::info!("source `{}`: explain", src.id);
        let explained = explain_stage(&outcome.ensemble, &data, &cfg.explain)?;
        write_shap_csv(&explained.shap, &dir.join("shap.csv"))?;
        write_importance_csv(&explained.importance, &dir.join("importance.csv"))?;

        report.push_source(SourceReport::new(src, &inputs.census, cov, spatial, outcome, &explained), explained);
    }
    report.set_comparison(&summaries);
    let path = cfg.out.join(REPORT_FILE);
    write_json(&path, &report)?;
    Ok(path)
}
