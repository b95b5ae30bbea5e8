//! Loading, validating and aligning the shared data model: areal units, count
//! tables, covariates and raw GPS pings.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Coord, MultiPolygon, Polygon};

/// Web-Mercator latitude limit.
pub const MAX_MERCATOR_LAT: f64 = 85.05113;

#[derive(Debug, Clone, PartialEq)]
pub struct Area {
    pub id: String,
    pub name: String,
    pub geometry: MultiPolygon,
    pub centroid: Coord,
    pub bbox: BBox,
}

impl Area {
    pub fn new(id: impl Into<String>, name: impl Into<String>, geometry: MultiPolygon) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::schema("empty area_id"));
        }
        validate_geometry(&id, &geometry)?;
        let bbox = geometry.bbox();
        let centroid = geometry.centroid();
        Ok(Area {
            name: name.into(),
            centroid,
            bbox,
            geometry,
            id,
        })
    }
}

fn validate_geometry(id: &str, geometry: &MultiPolygon) -> Result<()> {
    let bad = |message: String| Error::Geometry {
        area: id.to_string(),
        message,
    };
    if geometry.polygons.is_empty() {
        return Err(bad("no polygons".into()));
    }
    for poly in &geometry.polygons {
        if poly.rings.is_empty() {
            return Err(bad("polygon without rings".into()));
        }
        for ring in &poly.rings {
            if ring.len() < 4 {
                return Err(bad(format!("ring has {} vertices, need at least 4", ring.len())));
            }
            if ring.first() != ring.last() {
                return Err(bad("ring is not closed".into()));
            }
            if ring.iter().flatten().any(|v| !v.is_finite()) {
                return Err(bad("non-finite coordinate".into()));
            }
        }
    }
    Ok(())
}

/// Areal units in file order, with an id index.
#[derive(Debug, Clone, Default)]
pub struct AreaSet {
    areas: Vec<Area>,
    index: HashMap<String, usize>,
}

impl PartialEq for AreaSet {
    fn eq(&self, other: &Self) -> bool {
        self.areas == other.areas
    }
}

impl AreaSet {
    pub fn new(areas: Vec<Area>) -> Result<Self> {
        let mut index = HashMap::with_capacity(areas.len());
        for (i, a) in areas.iter().enumerate() {
            if index.insert(a.id.clone(), i).is_some() {
                return Err(Error::DuplicateKey(a.id.clone()));
            }
        }
        Ok(AreaSet { areas, index })
    }

    pub fn len(&self) -> usize {
        self.areas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.areas.is_empty()
    }

    pub fn areas(&self) -> &[Area] {
        &self.areas
    }

    pub fn get(&self, id: &str) -> Option<&Area> {
        self.index.get(id).map(|&i| &self.areas[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.areas.iter().map(|a| a.id.as_str())
    }

    /// Index of the first area (in file order) containing the point.
    pub fn locate(&self, p: Coord) -> Option<usize> {
        self.areas
            .iter()
            .position(|a| a.bbox.contains(p) && a.geometry.contains(p))
    }

    /// Areas whose id is in `keep`, in the original order.
    pub fn subset<'a>(&self, keep: impl IntoIterator<Item = &'a str>) -> AreaSet {
        let keep: BTreeSet<&str> = keep.into_iter().collect();
        let areas = self
            .areas
            .iter()
            .filter(|a| keep.contains(a.id.as_str()))
            .cloned()
            .collect();
        AreaSet::new(areas).expect("subset of unique ids is unique")
    }

    pub fn to_geojson(&self) -> Value {
        let features: Vec<Value> = self
            .areas
            .iter()
            .map(|a| {
                let polys: Vec<&Vec<Vec<Coord>>> = a.geometry.polygons.iter().map(|p| &p.rings).collect();
                let geometry = if polys.len() == 1 {
                    json!({ "type": "Polygon", "coordinates": polys[0] })
                } else {
                    json!({ "type": "MultiPolygon", "coordinates": polys })
                };
                json!({
                    "type": "Feature",
                    "properties": { "area_id": a.id, "name": a.name },
                    "geometry": geometry,
                })
            })
            .collect();
        json!({ "type": "FeatureCollection", "features": features })
    }

    pub fn write_geojson(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_geojson()).expect("geojson serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

/// Load a GeoJSON FeatureCollection whose features carry an `area_id` property.
pub fn load_area_geometries(path: &Path) -> Result<AreaSet> {
    parse_area_geometries(&read_to_string(path)?)
}

pub fn parse_area_geometries(text: &str) -> Result<AreaSet> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line() as u64,
        message: e.to_string(),
    })?;
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(Error::schema("expected a GeoJSON FeatureCollection"));
    }
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::schema("FeatureCollection without `features` array"))?;

    let mut areas = Vec::with_capacity(features.len());
    let mut seen = BTreeSet::new();
    for (k, feature) in features.iter().enumerate() {
        let props = feature.get("properties");
        let id = match props.and_then(|p| p.get("area_id")) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err(Error::schema(format!("feature {k} has no `area_id` property"))),
        };
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateKey(id));
        }
        let name = props
            .and_then(|p| p.get("name"))
            .and_then(Value::as_str)
            .unwrap_or(&id)
            .to_string();
        let geometry = parse_geometry(&id, feature.get("geometry"))?;
        areas.push(Area::new(id, name, geometry)?);
    }
    AreaSet::new(areas)
}

fn parse_geometry(id: &str, geometry: Option<&Value>) -> Result<MultiPolygon> {
    let bad = |message: &str| Error::Geometry {
        area: id.to_string(),
        message: message.to_string(),
    };
    let geometry = geometry.ok_or_else(|| bad("missing geometry"))?;
    let coords = geometry.get("coordinates").ok_or_else(|| bad("missing coordinates"))?;
    let polygon = |v: &Value| -> Result<Polygon> {
        let rings: Vec<Vec<Coord>> = serde_json::from_value(v.clone())
            .map_err(|_| bad("polygon coordinates are not rings of [lon, lat]"))?;
        Ok(Polygon { rings })
    };
    match geometry.get("type").and_then(Value::as_str) {
        Some("Polygon") => Ok(MultiPolygon {
            polygons: vec![polygon(coords)?],
        }),
        Some("MultiPolygon") => {
            let parts = coords.as_array().ok_or_else(|| bad("MultiPolygon coordinates"))?;
            Ok(MultiPolygon {
                polygons: parts.iter().map(polygon).collect::<Result<_>>()?,
            })
        }
        _ => Err(bad("geometry must be Polygon or MultiPolygon")),
    }
}

/// Inclusive ISO-8601 date range, written `start/end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferencePeriod {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl ReferencePeriod {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if end < start {
            return Err(Error::domain(format!("reference period ends before it starts: {start}/{end}")));
        }
        Ok(ReferencePeriod { start, end })
    }

    /// Epoch-second bounds `[start 00:00, end+1 00:00)` in UTC.
    pub fn epoch_bounds(&self) -> (i64, i64) {
        let lo = self.start.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp();
        let hi = self.end.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp() + 86_400;
        (lo, hi)
    }
}

impl FromStr for ReferencePeriod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('/')
            .ok_or_else(|| Error::schema(format!("reference period `{s}` is not `start/end`")))?;
        let parse = |d: &str| {
            NaiveDate::parse_from_str(d.trim(), "%Y-%m-%d")
                .map_err(|e| Error::schema(format!("bad date `{d}`: {e}")))
        };
        ReferencePeriod::new(parse(a)?, parse(b)?)
    }
}

impl fmt::Display for ReferencePeriod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.start, self.end)
    }
}

/// Per-area population counts from one source or from the census.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountTable {
    pub source_id: String,
    pub reference_period: Option<ReferencePeriod>,
    pub rows: IndexMap<String, f64>,
}

impl CountTable {
    pub fn new(source_id: impl Into<String>) -> Self {
        CountTable {
            source_id: source_id.into(),
            reference_period: None,
            rows: IndexMap::new(),
        }
    }

    /// Insert a validated count; duplicates and negative or non-finite counts are rejected.
    pub fn insert(&mut self, area_id: impl Into<String>, count: f64) -> Result<()> {
        let area_id = area_id.into();
        check_count(&area_id, count)?;
        if self.rows.contains_key(&area_id) {
            return Err(Error::DuplicateKey(area_id));
        }
        self.rows.insert(area_id, count);
        Ok(())
    }

    pub fn get(&self, area_id: &str) -> Option<f64> {
        self.rows.get(area_id).copied()
    }

    pub fn total(&self) -> f64 {
        self.rows.values().sum()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Every area id must belong to `areas`.
    pub fn check_against(&self, areas: &AreaSet) -> Result<()> {
        match self.rows.keys().find(|k| !areas.contains_id(k)) {
            Some(k) => Err(Error::MissingKey {
                key: k.clone(),
                table: "area set".into(),
            }),
            None => Ok(()),
        }
    }

    /// Rows restricted to `keep`, preserving order.
    pub fn restricted(&self, keep: &BTreeSet<&str>) -> CountTable {
        CountTable {
            source_id: self.source_id.clone(),
            reference_period: self.reference_period,
            rows: self
                .rows
                .iter()
                .filter(|(k, _)| keep.contains(k.as_str()))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let wrap = |e: csv::Error| Error::schema(format!("csv write: {e}"));
        w.write_record(["area_id", "count"]).map_err(wrap)?;
        for (id, c) in &self.rows {
            w.write_record([id.as_str(), &c.to_string()]).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::schema(format!("csv write: {e}")))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(File::create(path).map_err(|e| Error::io(path, e))?)
    }
}

fn check_count(area_id: &str, count: f64) -> Result<()> {
    if !count.is_finite() {
        return Err(Error::domain(format!("count for `{area_id}` is not finite")));
    }
    if count < 0.0 {
        return Err(Error::domain(format!("count for `{area_id}` is negative ({count})")));
    }
    Ok(())
}

fn csv_line(pos: Option<&csv::Position>) -> u64 {
    pos.map(|p| p.line()).unwrap_or(0)
}

fn expect_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let found: Vec<&str> = found.iter().map(str::trim).collect();
    if found != expected {
        return Err(Error::schema(format!(
            "expected header `{}`, found `{}`",
            expected.join(","),
            found.join(",")
        )));
    }
    Ok(())
}

/// Load a CSV with header `area_id,count`.
pub fn load_count_table(path: &Path, source_id: &str) -> Result<CountTable> {
    read_count_table(open(path)?, source_id)
}

pub fn read_count_table<R: Read>(input: R, source_id: &str) -> Result<CountTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    expect_header(header, &["area_id", "count"])?;
    let mut table = CountTable::new(source_id);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: csv_line(e.position()),
            message: e.to_string(),
        })?;
        let line = csv_line(rec.position());
        let id = rec.get(0).unwrap_or("").trim();
        if id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty area_id".into(),
            });
        }
        let raw = rec.get(1).unwrap_or("").trim();
        let count: f64 = raw.parse().map_err(|_| Error::Parse {
            line,
            message: format!("count `{raw}` is not a number"),
        })?;
        table.insert(id, count)?;
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    Demographic,
    Socioeconomic,
    ResourceAccessibility,
    Mobility,
    Geographic,
}

impl FromStr for FeatureGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "demographic" => FeatureGroup::Demographic,
            "socioeconomic" => FeatureGroup::Socioeconomic,
            "resource_accessibility" => FeatureGroup::ResourceAccessibility,
            "mobility" => FeatureGroup::Mobility,
            "geographic" => FeatureGroup::Geographic,
            other => return Err(Error::schema(format!("unknown feature group `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub group: Option<FeatureGroup>,
    #[serde(default)]
    pub unit: String,
}

/// Area covariates, one equally ordered feature vector per area.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub features: Vec<FeatureSpec>,
    pub rows: IndexMap<String, Vec<f64>>,
}

impl CovariateTable {
    pub fn new(features: Vec<FeatureSpec>) -> Self {
        CovariateTable {
            features,
            rows: IndexMap::new(),
        }
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn insert(&mut self, area_id: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let area_id = area_id.into();
        if values.len() != self.features.len() {
            return Err(Error::schema(format!(
                "area `{area_id}` has {} covariates, expected {}",
                values.len(),
                self.features.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite covariate for `{area_id}`")));
        }
        if self.rows.contains_key(&area_id) {
            return Err(Error::DuplicateKey(area_id));
        }
        self.rows.insert(area_id, values);
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let wrap = |e: csv::Error| Error::schema(format!("csv write: {e}"));
        let mut header = vec!["area_id".to_string()];
        header.extend(self.feature_names());
        w.write_record(&header).map_err(wrap)?;
        for (id, vals) in &self.rows {
            let mut rec = vec![id.clone()];
            rec.extend(vals.iter().map(f64::to_string));
            w.write_record(&rec).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::schema(format!("csv write: {e}")))?;
        Ok(())
    }

    pub fn write_schema_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let wrap = |e: csv::Error| Error::schema(format!("csv write: {e}"));
        w.write_record(["feature", "group", "unit"]).map_err(wrap)?;
        for f in &self.features {
            let group = f
                .group
                .map(|g| serde_json::to_value(g).unwrap().as_str().unwrap().to_string())
                .unwrap_or_default();
            w.write_record([f.name.as_str(), &group, &f.unit]).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::schema(format!("csv write: {e}")))?;
        Ok(())
    }
}

/// Load a covariate CSV (`area_id,<feature>...`) and, optionally, a feature
/// schema CSV (`feature,group,unit`) naming each column's group.
pub fn load_covariates(path: &Path, schema: Option<&Path>) -> Result<CovariateTable> {
    let schema = match schema {
        Some(p) => Some(read_feature_schema(open(p)?)?),
        None => None,
    };
    read_covariates(open(path)?, schema)
}

pub fn read_feature_schema<R: Read>(input: R) -> Result<Vec<FeatureSpec>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    expect_header(header, &["feature", "group", "unit"])?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: csv_line(e.position()),
            message: e.to_string(),
        })?;
        let group = rec.get(1).unwrap_or("").trim();
        out.push(FeatureSpec {
            name: rec.get(0).unwrap_or("").trim().to_string(),
            group: if group.is_empty() { None } else { Some(group.parse()?) },
            unit: rec.get(2).unwrap_or("").trim().to_string(),
        });
    }
    Ok(out)
}

pub fn read_covariates<R: Read>(input: R, schema: Option<Vec<FeatureSpec>>) -> Result<CovariateTable> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if header.get(0).map(str::trim) != Some("area_id") || header.len() < 2 {
        return Err(Error::schema("covariate header must be `area_id,<feature>...`"));
    }
    let names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let features = match schema {
        None => names
            .iter()
            .map(|n| FeatureSpec {
                name: n.clone(),
                group: None,
                unit: String::new(),
            })
            .collect(),
        Some(schema) => {
            let by_name: HashMap<&str, &FeatureSpec> = schema.iter().map(|f| (f.name.as_str(), f)).collect();
            names
                .iter()
                .map(|n| {
                    by_name
                        .get(n.as_str())
                        .map(|f| (*f).clone())
                        .ok_or_else(|| Error::schema(format!("feature `{n}` missing from feature schema")))
                })
                .collect::<Result<_>>()?
        }
    };
    let mut table = CovariateTable::new(features);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: csv_line(e.position()),
            message: e.to_string(),
        })?;
        let line = csv_line(rec.position());
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let id = rec.get(0).unwrap_or("").trim().to_string();
        let mut values = Vec::with_capacity(names.len());
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let cell = cell.trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
                return Err(Error::schema(format!(
                    "missing value for feature `{}` in area `{id}` (line {line})",
                    names[j]
                )));
            }
            values.push(cell.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("`{cell}` is not a number"),
            })?);
        }
        table.insert(id, values)?;
    }
    Ok(table)
}

/// A single GPS record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ping {
    pub device_id: String,
    /// UTC epoch seconds.
    pub timestamp: i64,
    pub lon: f64,
    pub lat: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PingStream {
    pub pings: Vec<Ping>,
}

impl PingStream {
    pub fn validate(&self, period: Option<&ReferencePeriod>) -> Result<()> {
        let bounds = period.map(ReferencePeriod::epoch_bounds);
        for (k, p) in self.pings.iter().enumerate() {
            if !(-180.0..=180.0).contains(&p.lon) || !(-MAX_MERCATOR_LAT..=MAX_MERCATOR_LAT).contains(&p.lat) {
                return Err(Error::domain(format!(
                    "ping {k} of `{}` outside the lon/lat band: ({}, {})",
                    p.device_id, p.lon, p.lat
                )));
            }
            if let Some((lo, hi)) = bounds {
                if p.timestamp < lo || p.timestamp >= hi {
                    return Err(Error::domain(format!(
                        "ping {k} of `{}` at {} is outside the reference period",
                        p.device_id, p.timestamp
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Load pings from CSV (`device_id,timestamp,lon,lat`) or, for `.ndjson` /
/// `.jsonl` files, newline-delimited JSON with the same keys.
pub fn load_pings(path: &Path) -> Result<PingStream> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let file = open(path)?;
    if matches!(ext, "ndjson" | "jsonl" | "json") {
        read_pings_ndjson(file)
    } else {
        read_pings_csv(file)
    }
}

pub fn read_pings_csv<R: Read>(input: R) -> Result<PingStream> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    expect_header(header, &["device_id", "timestamp", "lon", "lat"])?;
    let mut pings = Vec::new();
    for rec in rdr.deserialize::<Ping>() {
        pings.push(rec.map_err(|e| Error::Parse {
            line: csv_line(e.position()),
            message: e.to_string(),
        })?);
    }
    Ok(PingStream { pings })
}

pub fn read_pings_ndjson<R: Read>(input: R) -> Result<PingStream> {
    let mut pings = Vec::new();
    for (k, line) in BufReader::new(input).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: k as u64 + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        pings.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: k as u64 + 1,
            message: e.to_string(),
        })?);
    }
    Ok(PingStream { pings })
}

/// Anything keyed by area id that must line up with the area set.
pub trait KeyedTable {
    fn table_name(&self) -> &str;
    fn area_keys(&self) -> Vec<&str>;
}

impl KeyedTable for CountTable {
    fn table_name(&self) -> &str {
        &self.source_id
    }

    fn area_keys(&self) -> Vec<&str> {
        self.rows.keys().map(String::as_str).collect()
    }
}

impl KeyedTable for CovariateTable {
    fn table_name(&self) -> &str {
        "covariates"
    }

    fn area_keys(&self) -> Vec<&str> {
        self.rows.keys().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableAlignment {
    pub table: String,
    pub missing: Vec<String>,
    pub extra: Vec<String>,
}

/// Key agreement between the area set and a list of tables.
///
/// `aligned` holds area ids present in every table, `missing` area ids absent
/// from at least one table, `extra` table ids that are not areas. The three
/// sets are disjoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub aligned: Vec<String>,
    pub missing: Vec<String>,
    pub extra: Vec<String>,
    pub per_table: Vec<TableAlignment>,
    /// Items dropped upstream because they could not be placed in any area
    /// (for example tiles whose centre falls outside every polygon).
    #[serde(default)]
    pub unassigned: Vec<String>,
}

impl AlignmentReport {
    pub fn is_clean(&self) -> bool {
        self.missing.is_empty() && self.extra.is_empty()
    }
}

pub fn validate_alignment(areas: &AreaSet, tables: &[&dyn KeyedTable]) -> AlignmentReport {
    let mut report = AlignmentReport::default();
    let mut missing_any = BTreeSet::new();
    let mut extra_any = BTreeSet::new();
    for t in tables {
        let keys: BTreeSet<&str> = t.area_keys().into_iter().collect();
        let missing: Vec<String> = areas.ids().filter(|id| !keys.contains(id)).map(String::from).collect();
        let extra: Vec<String> = keys
            .iter()
            .filter(|k| !areas.contains_id(k))
            .map(|k| k.to_string())
            .collect();
        missing_any.extend(missing.iter().cloned());
        extra_any.extend(extra.iter().cloned());
        report.per_table.push(TableAlignment {
            table: t.table_name().to_string(),
            missing,
            extra,
        });
    }
    for id in areas.ids() {
        if missing_any.contains(id) {
            report.missing.push(id.to_string());
        } else {
            report.aligned.push(id.to_string());
        }
    }
    report.extra = extra_any.into_iter().collect();
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_feature(id: &str, x: f64) -> String {
        format!(
            r#"{{"type":"Feature","properties":{{"area_id":"{id}"}},"geometry":{{"type":"Polygon","coordinates":[[[{x},0],[{x1},0],[{x1},1],[{x},1],[{x},0]]]}}}}"#,
            x1 = x + 1.0
        )
    }

    fn collection(features: &[String]) -> String {
        format!(r#"{{"type":"FeatureCollection","features":[{}]}}"#, features.join(","))
    }

    #[test]
    fn two_squares_load() {
        let set = parse_area_geometries(&collection(&[square_feature("A", 0.0), square_feature("B", 1.0)])).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.ids().collect::<Vec<_>>(), ["A", "B"]);
        let b = set.get("B").unwrap();
        assert_eq!(b.centroid, [1.5, 0.5]);
        assert!(b.bbox.contains(b.centroid));
        assert_eq!(set.locate([1.2, 0.3]), Some(1));
        assert_eq!(set.locate([5.0, 0.3]), None);
    }

    #[test]
    fn duplicate_area_id_rejected() {
        let err = parse_area_geometries(&collection(&[
            square_feature("E0600001", 0.0),
            square_feature("E0600001", 1.0),
        ]))
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateKey(ref k) if k == "E0600001"));
    }

    #[test]
    fn missing_area_id_is_schema_error() {
        let text = square_feature("A", 0.0).replace("area_id", "code");
        let err = parse_area_geometries(&collection(&[text])).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn open_or_short_ring_is_geometry_error() {
        let open = r#"{"type":"FeatureCollection","features":[{"type":"Feature","properties":{"area_id":"A"},"geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,1]]]}}]}"#;
        assert!(matches!(parse_area_geometries(open).unwrap_err(), Error::Geometry { .. }));
        let short = r#"{"type":"FeatureCollection","features":[{"type":"Feature","properties":{"area_id":"A"},"geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[0,0]]]}}]}"#;
        assert!(matches!(parse_area_geometries(short).unwrap_err(), Error::Geometry { .. }));
    }

    #[test]
    fn count_table_basic_and_errors() {
        let t = read_count_table("area_id,count\nA,10\nB,0\n".as_bytes(), "src").unwrap();
        assert_eq!(t.get("A"), Some(10.0));
        assert_eq!(t.get("B"), Some(0.0));

        let err = read_count_table("area_id,count\nA,-1\n".as_bytes(), "src").unwrap_err();
        assert!(matches!(err, Error::Domain(_)));

        let err = read_count_table("area_id,count\nA,1\nB,abc\n".as_bytes(), "src").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");

        let err = read_count_table("id,value\nA,1\n".as_bytes(), "src").unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn count_table_round_trip_full_precision() {
        let mut t = CountTable::new("x");
        t.insert("A", 0.1 + 0.2).unwrap();
        t.insert("B", 1.0 / 3.0).unwrap();
        t.insert("C", 12345678.901234567).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = read_count_table(buf.as_slice(), "x").unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn covariates_missing_cell_is_error() {
        let err = read_covariates("area_id,a,b\nX,1,\n".as_bytes(), None).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        let ok = read_covariates("area_id,a,b\nX,1,2\nY,3,4\n".as_bytes(), None).unwrap();
        assert_eq!(ok.rows["Y"], vec![3.0, 4.0]);
    }

    #[test]
    fn covariate_schema_assigns_groups() {
        let schema = read_feature_schema("feature,group,unit\na,demographic,%\nb,geographic,km\n".as_bytes()).unwrap();
        let t = read_covariates("area_id,b,a\nX,1,2\n".as_bytes(), Some(schema)).unwrap();
        assert_eq!(t.features[0].group, Some(FeatureGroup::Geographic));
        assert_eq!(t.features[1].unit, "%");
    }

    #[test]
    fn pings_csv_and_ndjson_agree() {
        let csv = "device_id,timestamp,lon,lat\nd1,100,0.5,0.5\nd2,200,-1.25,51.5\n";
        let nd = "{\"device_id\":\"d1\",\"timestamp\":100,\"lon\":0.5,\"lat\":0.5}\n\n{\"device_id\":\"d2\",\"timestamp\":200,\"lon\":-1.25,\"lat\":51.5}\n";
        let a = read_pings_csv(csv.as_bytes()).unwrap();
        let b = read_pings_ndjson(nd.as_bytes()).unwrap();
        assert_eq!(a, b);
        a.validate(None).unwrap();
    }

    #[test]
    fn ping_validation_bounds() {
        let bad = PingStream {
            pings: vec![Ping {
                device_id: "d".into(),
                timestamp: 0,
                lon: 0.0,
                lat: 86.0,
            }],
        };
        assert!(bad.validate(None).is_err());
        let period: ReferencePeriod = "2021-03-01/2021-03-31".parse().unwrap();
        let (lo, hi) = period.epoch_bounds();
        assert_eq!(hi - lo, 31 * 86_400);
        let late = PingStream {
            pings: vec![Ping {
                device_id: "d".into(),
                timestamp: hi,
                lon: 0.0,
                lat: 0.0,
            }],
        };
        assert!(late.validate(Some(&period)).is_err());
    }

    #[test]
    fn alignment_reports_missing_and_extra() {
        let set = parse_area_geometries(&collection(&[
            square_feature("A", 0.0),
            square_feature("B", 1.0),
            square_feature("C", 2.0),
        ]))
        .unwrap();
        let full = read_count_table("area_id,count\nA,1\nB,2\nC,3\n".as_bytes(), "census").unwrap();
        let report = validate_alignment(&set, &[&full, &full]);
        assert!(report.is_clean());
        assert_eq!(report.aligned, ["A", "B", "C"]);

        let partial = read_count_table("area_id,count\nA,1\nB,2\nZ,5\n".as_bytes(), "src").unwrap();
        let report = validate_alignment(&set, &[&full, &partial]);
        assert_eq!(report.missing, ["C"]);
        assert_eq!(report.extra, ["Z"]);
        assert_eq!(report.aligned, ["A", "B"]);
        assert_eq!(report.per_table[1].missing, ["C"]);
    }
}
