//! Coverage and coverage-bias measurement.
//!
//! Coverage of area `i` is `c_i = 100 * P_i^D / P_i`, the share (in percent)
//! of the census population captured by a source, and the bias is
//! `e_i = 100 - c_i`. Coverage may exceed 100 when users hold several
//! accounts; the bias is then negative and the row is flagged.

use std::cmp::Ordering;
use std::io::{Read, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::CountTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub coverage: f64,
    pub bias: f64,
}

impl BiasRow {
    pub fn from_coverage(coverage: f64) -> Self {
        BiasRow {
            coverage,
            bias: 100.0 - coverage,
        }
    }

    pub fn is_over_covered(&self) -> bool {
        self.coverage > 100.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasTable {
    pub source_id: String,
    pub rows: IndexMap<String, BiasRow>,
}

impl BiasTable {
    pub fn over_covered(&self) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|(_, r)| r.is_over_covered())
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn bias_values(&self) -> IndexMap<String, f64> {
        self.rows.iter().map(|(k, r)| (k.clone(), r.bias)).collect()
    }

    /// CSV `area_id,coverage,bias`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let wrap = |e: csv::Error| Error::schema(format!("csv write: {e}"));
        w.write_record(["area_id", "coverage", "bias"]).map_err(wrap)?;
        for (id, r) in &self.rows {
            w.write_record([id.as_str(), &r.coverage.to_string(), &r.bias.to_string()])
                .map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::schema(format!("csv write: {e}")))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, source_id: &str) -> Result<BiasTable> {
        let mut rdr = csv::Reader::from_reader(input);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        if header != ["area_id", "coverage", "bias"] {
            return Err(Error::schema("expected header `area_id,coverage,bias`"));
        }
        let mut rows = IndexMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                message: e.to_string(),
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let num = |i: usize| -> Result<f64> {
                let s = rec.get(i).unwrap_or("").trim();
                s.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("`{s}` is not a number"),
                })
            };
            let id = rec.get(0).unwrap_or("").trim().to_string();
            let row = BiasRow {
                coverage: num(1)?,
                bias: num(2)?,
            };
            if rows.insert(id.clone(), row).is_some() {
                return Err(Error::DuplicateKey(id));
            }
        }
        Ok(BiasTable {
            source_id: source_id.to_string(),
            rows,
        })
    }
}

/// Per-area coverage and bias of `source` against `census`.
///
/// Every source area must appear in the census with a positive population.
pub fn coverage_bias(source: &CountTable, census: &CountTable) -> Result<BiasTable> {
    let mut rows = IndexMap::with_capacity(source.len());
    for (id, &captured) in &source.rows {
        let population = census.get(id).ok_or_else(|| Error::MissingKey {
            key: id.clone(),
            table: census.source_id.clone(),
        })?;
        if population <= 0.0 {
            return Err(Error::DegenerateDenominator(id.clone()));
        }
        rows.insert(id.clone(), BiasRow::from_coverage(100.0 * captured / population));
    }
    Ok(BiasTable {
        source_id: source.source_id.clone(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    MobileApp,
    Survey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub source_id: String,
    pub kind: SourceKind,
    pub national_coverage: f64,
    pub national_coverage_per_1000: f64,
    pub national_bias: f64,
    /// Sum of source counts (respondents for surveys).
    pub n_observations: f64,
    /// Sum of census counts over the same areas.
    pub reference_population: f64,
}

impl CoverageSummary {
    fn from_totals(source_id: &str, kind: SourceKind, captured: f64, population: f64) -> Self {
        let coverage = 100.0 * captured / population;
        CoverageSummary {
            source_id: source_id.to_string(),
            kind,
            national_coverage: coverage,
            national_coverage_per_1000: 1000.0 * captured / population,
            national_bias: 100.0 - coverage,
            n_observations: captured,
            reference_population: population,
        }
    }
}

/// National coverage from summed totals over the areas both tables share.
pub fn national_summary(source: &CountTable, census: &CountTable) -> Result<CoverageSummary> {
    let (mut captured, mut population, mut n) = (0.0, 0.0, 0usize);
    for (id, &c) in &source.rows {
        if let Some(p) = census.get(id) {
            captured += c;
            population += p;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptySelection(format!(
            "`{}` shares no areas with `{}`",
            source.source_id, census.source_id
        )));
    }
    if population <= 0.0 {
        return Err(Error::DegenerateDenominator(format!("national total of {}", census.source_id)));
    }
    Ok(CoverageSummary::from_totals(&source.source_id, SourceKind::MobileApp, captured, population))
}

/// A benchmark survey, as respondents out of a reference population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyEntry {
    pub name: String,
    pub respondents: f64,
    pub reference_population: f64,
}

impl SurveyEntry {
    pub fn summary(&self) -> Result<CoverageSummary> {
        if !(self.reference_population > 0.0) || !(self.respondents >= 0.0) {
            return Err(Error::domain(format!("survey `{}` has invalid totals", self.name)));
        }
        Ok(CoverageSummary::from_totals(
            &self.name,
            SourceKind::Survey,
            self.respondents,
            self.reference_population,
        ))
    }
}

/// Load survey benchmarks from CSV `name,respondents,reference_population`.
pub fn read_surveys<R: Read>(input: R) -> Result<Vec<SurveyEntry>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header != ["name", "respondents", "reference_population"] {
        return Err(Error::schema("expected header `name,respondents,reference_population`"));
    }
    rdr.deserialize()
        .map(|r| {
            r.map_err(|e: csv::Error| Error::Parse {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                message: e.to_string(),
            })
        })
        .collect()
}

/// All summaries sorted by coverage per 1,000, highest first, ties by name.
pub fn survey_comparison(summaries: &[CoverageSummary]) -> Vec<CoverageSummary> {
    let mut out = summaries.to_vec();
    out.sort_by(|a, b| {
        b.national_coverage_per_1000
            .partial_cmp(&a.national_coverage_per_1000)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.source_id.cmp(&b.source_id))
    });
    out
}
