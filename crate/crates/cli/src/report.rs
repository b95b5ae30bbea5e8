//! The `report.json` bundle read by the figure renderer.
//!
//! Everything a figure needs is stored verbatim. The only run-dependent
//! value is `generated_at`.

use std::path::Path;

use coverbias::bias::{survey_comparison, CoverageSummary};
use coverbias::boost::{FitReport, ModelOutcome};
use coverbias::explain::{BeeswarmRecord, DependenceExport, FeatureImportance};
use coverbias::homeloc::HomeRule;
use coverbias::ingest::{AlignmentReport, CountTable};
use coverbias::spatial::Alternative;
use coverbias::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::pipeline::{CoverageOutput, ExplainOutput, IngestInfo, LoadedSource, SpatialReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub schemes: Vec<String>,
    pub permutations: usize,
    pub alternative: Alternative,
    pub row_standardized: bool,
    pub histogram_bins: usize,
    pub home_rule: HomeRule,
    pub allow_partial: bool,
    pub tune: bool,
    pub folds: usize,
    pub train_fraction: f64,
    pub loess_span: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRecord {
    pub area_id: String,
    pub population: f64,
    pub count: f64,
    pub coverage: f64,
    pub bias: f64,
    pub over_covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub source_id: String,
    pub ingest: IngestInfo,
    pub summary: CoverageSummary,
    pub over_covered: Vec<String>,
    pub areas: Vec<AreaRecord>,
    pub spatial: SpatialReport,
    pub model: FitReport,
    /// Mean model output under the training cover; SHAP values add up from here.
    pub expected_value: f64,
    pub importance_degenerate: bool,
}

impl SourceReport {
    pub fn new(
        src: &LoadedSource,
        census: &CountTable,
        cov: CoverageOutput,
        spatial: SpatialReport,
        outcome: ModelOutcome,
        explained: &ExplainOutput,
    ) -> Self {
        let areas = cov
            .bias
            .rows
            .iter()
            .map(|(id, r)| AreaRecord {
                area_id: id.clone(),
                population: census.get(id).unwrap_or(f64::NAN),
                count: src.counts.get(id).unwrap_or(f64::NAN),
                coverage: r.coverage,
                bias: r.bias,
                over_covered: r.is_over_covered(),
            })
            .collect();
        SourceReport {
            source_id: src.id.clone(),
            ingest: src.ingest.clone(),
            over_covered: cov.bias.over_covered().into_iter().map(String::from).collect(),
            summary: cov.summary,
            areas,
            spatial,
            model: outcome.report,
            expected_value: explained.shap.expected_value,
            importance_degenerate: explained.importance.degenerate,
        }
    }
}

/// A record of a per-source figure array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tagged<T> {
    pub source_id: String,
    #[serde(flatten)]
    pub item: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub generated_at: String,
    pub seed: u64,
    pub settings: Settings,
    pub alignment: AlignmentReport,
    /// Sources and surveys by national coverage per 1,000, highest first.
    pub coverage_comparison: Vec<CoverageSummary>,
    pub sources: Vec<SourceReport>,
    pub importance: Vec<Tagged<FeatureImportance>>,
    pub beeswarm: Vec<Tagged<BeeswarmRecord>>,
    pub dependence: Vec<Tagged<DependenceExport>>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn new(cfg: &RunConfig, generated_at: String, alignment: AlignmentReport) -> Self {
        let mut warnings = Vec::new();
        if !alignment.is_clean() {
            warnings.push(format!(
                "analysis restricted to {} of {} areas",
                alignment.aligned.len(),
                alignment.aligned.len() + alignment.missing.len()
            ));
        }
        warnings.extend(alignment.unassigned.iter().map(|u| format!("unassigned {u}")));
        Report {
            schema_version: SCHEMA_VERSION,
            generated_at,
            seed: cfg.seed,
            settings: Settings {
                schemes: cfg.spatial.schemes.clone(),
                permutations: cfg.spatial.permutations,
                alternative: cfg.spatial.alternative,
                row_standardized: cfg.spatial.row_standardize,
                histogram_bins: cfg.spatial.histogram_bins,
                home_rule: cfg.home_rule,
                allow_partial: cfg.allow_partial,
                tune: cfg.model.tune,
                folds: cfg.model.folds,
                train_fraction: cfg.model.train_fraction,
                loess_span: cfg.explain.span,
            },
            alignment,
            coverage_comparison: Vec::new(),
            sources: Vec::new(),
            importance: Vec::new(),
            beeswarm: Vec::new(),
            dependence: Vec::new(),
            warnings,
        }
    }

    pub fn push_source(&mut self, source: SourceReport, explained: ExplainOutput) {
        let id = source.source_id.clone();
        for w in &source.spatial.weights {
            if !w.isolates.is_empty() {
                self.warnings.push(format!(
                    "{id}: {} leaves {} isolate(s) out of Moran's I",
                    w.scheme,
                    w.isolates.len()
                ));
            }
        }
        let tag = |item| Tagged {
            source_id: id.clone(),
            item,
        };
        self.importance.extend(explained.importance.features.into_iter().map(tag));
        self.beeswarm.extend(explained.beeswarm.into_iter().map(|item| Tagged {
            source_id: id.clone(),
            item,
        }));
        self.dependence.extend(explained.dependence.into_iter().map(|item| Tagged {
            source_id: id.clone(),
            item,
        }));
        self.warnings
            .extend(explained.warnings.into_iter().map(|w| format!("{id}: {w}")));
        self.sources.push(source);
    }

    pub fn set_comparison(&mut self, summaries: &[CoverageSummary]) {
        self.coverage_comparison = survey_comparison(summaries);
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Schema(format!("json: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}
