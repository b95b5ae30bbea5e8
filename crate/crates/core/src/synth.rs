//! Synthetic worlds with planted coverage drivers, plus brute-force oracles.
//!
//! A world is a `rows x cols` grid of square cells. Census counts are
//! log-normal, covariates are drawn independently per cell and optionally
//! smoothed by repeated averaging over the 8-cell neighbourhood. Source counts
//! are `census * p(x) * exp(eps)` with `p = base + amplitude * g(z)`, where
//! `z = intercept + sum(beta_k x_k)` and `g` is the named shape.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution as _, LogNormal, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::boost::{TreeEnsemble, TreeNode};
use crate::error::{Error, Result};
use crate::geometry::square;
use crate::ingest::{Area, AreaSet, CountTable, CovariateTable, FeatureGroup, FeatureSpec};
use crate::seed::{derive, substream};
use crate::spatial::SpatialWeights;

pub const MAX_PENETRATION: f64 = 1.5;
pub const DEFAULT_SMALL_COUNT: f64 = 10.0;
pub const MAX_BRUTEFORCE_FEATURES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
    LogNormal { mu: f64, sigma: f64 },
}

impl Default for Distribution {
    fn default() -> Self {
        Distribution::Normal { mean: 0.0, sd: 1.0 }
    }
}

impl Distribution {
    fn sample_n(&self, rng: &mut impl Rng, n: usize) -> Result<Vec<f64>> {
        let bad = |e: &dyn std::fmt::Display| Error::domain(format!("covariate distribution: {e}"));
        Ok(match *self {
            Distribution::Normal { mean, sd } => {
                let d = Normal::new(mean, sd).map_err(|e| bad(&e))?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Distribution::Uniform { low, high } => {
                let d = Uniform::new(low, high).map_err(|e| bad(&e))?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Distribution::LogNormal { mu, sigma } => {
                let d = LogNormal::new(mu, sigma).map_err(|e| bad(&e))?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateGenerator {
    pub name: String,
    #[serde(default)]
    pub group: Option<FeatureGroup>,
    #[serde(default)]
    pub distribution: Distribution,
    /// Number of neighbourhood-averaging passes; 0 leaves the draws independent.
    #[serde(default)]
    pub smoothing: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenetrationForm {
    Linear,
    Logistic,
    UShape,
    Threshold,
}

impl PenetrationForm {
    fn shape(self, z: f64) -> f64 {
        match self {
            PenetrationForm::Linear => z,
            PenetrationForm::Logistic => 1.0 / (1.0 + (-z).exp()),
            PenetrationForm::UShape => z * z,
            PenetrationForm::Threshold => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenetrationSpec {
    pub form: PenetrationForm,
    #[serde(default)]
    pub intercept: f64,
    /// Coefficient per covariate name; unnamed covariates get 0.
    #[serde(default)]
    pub coefficients: IndexMap<String, f64>,
    #[serde(default)]
    pub base: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusSpec {
    pub log_mean: f64,
    pub log_sd: f64,
}

impl Default for CensusSpec {
    /// Median population of about 5,000 per cell.
    fn default() -> Self {
        CensusSpec {
            log_mean: 5000f64.ln(),
            log_sd: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub rows: usize,
    pub cols: usize,
    /// Optional consistency check against `rows * cols`.
    #[serde(default)]
    pub n_areas: Option<usize>,
    #[serde(default = "one")]
    pub cell_size: f64,
    #[serde(default)]
    pub origin: [f64; 2],
    #[serde(default)]
    pub census: CensusSpec,
    pub covariates: Vec<CovariateGenerator>,
    pub penetration: PenetrationSpec,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
    /// Counts below this value are zeroed. Off when absent.
    #[serde(default)]
    pub small_count_drop: Option<f64>,
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ScenarioSpec = toml::from_str(text).map_err(|e| Error::schema(format!("scenario: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ScenarioSpec = serde_json::from_str(text).map_err(|e| Error::schema(format!("scenario: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads TOML unless the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn n_areas(&self) -> usize {
        self.rows * self.cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::domain("grid needs at least one row and column"));
        }
        if let Some(n) = self.n_areas {
            if n != self.n_areas() {
                return Err(Error::domain(format!("n_areas {n} != {} x {}", self.rows, self.cols)));
            }
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::domain("cell_size must be positive"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::domain("noise_sd must be >= 0"));
        }
        if !(self.census.log_sd >= 0.0) {
            return Err(Error::domain("census log_sd must be >= 0"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.covariates {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::DuplicateKey(c.name.clone()));
            }
        }
        for name in self.penetration.coefficients.keys() {
            if !seen.contains(name.as_str()) {
                return Err(Error::schema(format!("coefficient for undeclared covariate `{name}`")));
            }
        }
        Ok(())
    }

    pub fn area_id(&self, row: usize, col: usize) -> String {
        let width = (self.rows.max(self.cols) - 1).to_string().len();
        format!("r{row:0width$}c{col:0width$}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub areas: AreaSet,
    pub census: CountTable,
    pub covariates: CovariateTable,
}

/// Average each cell with its (up to 8) grid neighbours, `passes` times.
fn smooth(values: &mut [f64], rows: usize, cols: usize, passes: usize) {
    for _ in 0..passes {
        let prev = values.to_vec();
        for r in 0..rows {
            for c in 0..cols {
                let (mut sum, mut n) = (0.0, 0.0);
                for rr in r.saturating_sub(1)..=(r + 1).min(rows - 1) {
                    for cc in c.saturating_sub(1)..=(c + 1).min(cols - 1) {
                        sum += prev[rr * cols + cc];
                        n += 1.0;
                    }
                }
                values[r * cols + c] = sum / n;
            }
        }
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Build the grid, census and covariates for `spec`.
///
/// Smoothed covariates are rescaled back to the mean and spread of their raw
/// draws so that coefficients keep their meaning.
pub fn generate_world(spec: &ScenarioSpec) -> Result<World> {
    spec.validate()?;
    let (rows, cols) = (spec.rows, spec.cols);
    let n = spec.n_areas();

    let mut areas = Vec::with_capacity(n);
    for r in 0..rows {
        for c in 0..cols {
            let id = spec.area_id(r, c);
            let geom = square(
                spec.origin[0] + c as f64 * spec.cell_size,
                spec.origin[1] + r as f64 * spec.cell_size,
                spec.cell_size,
            );
            areas.push(Area::new(id.clone(), id, geom)?);
        }
    }
    let areas = AreaSet::new(areas)?;

    let census_dist = LogNormal::new(spec.census.log_mean, spec.census.log_sd)
        .map_err(|e| Error::domain(format!("census distribution: {e}")))?;
    let mut rng = substream(derive(spec.seed, "census"), 0);
    let mut census = CountTable::new("census");
    for id in areas.ids() {
        census.insert(id, census_dist.sample(&mut rng).round().max(1.0))?;
    }

    let cov_seed = derive(spec.seed, "covariates");
    let mut columns = Vec::with_capacity(spec.covariates.len());
    for (k, g) in spec.covariates.iter().enumerate() {
        let mut rng = substream(cov_seed, k as u64);
        let mut v = g.distribution.sample_n(&mut rng, n)?;
        if g.smoothing > 0 {
            let (m0, s0) = mean_sd(&v);
            smooth(&mut v, rows, cols, g.smoothing);
            let (m1, s1) = mean_sd(&v);
            if s1 > 0.0 {
                v.iter_mut().for_each(|x| *x = m0 + (*x - m1) * s0 / s1);
            }
        }
        columns.push(v);
    }
    let mut covariates = CovariateTable::new(
        spec.covariates
            .iter()
            .map(|g| FeatureSpec {
                name: g.name.clone(),
                group: g.group,
                unit: String::new(),
            })
            .collect(),
    );
    for (i, id) in areas.ids().enumerate() {
        covariates.insert(id, columns.iter().map(|c| c[i]).collect())?;
    }
    Ok(World {
        areas,
        census,
        covariates,
    })
}

/// Planted penetration rate per area, in world order.
pub fn penetration(world: &World, spec: &ScenarioSpec) -> Result<IndexMap<String, f64>> {
    let names = world.covariates.feature_names();
    let beta: Vec<f64> = names
        .iter()
        .map(|n| spec.penetration.coefficients.get(n).copied().unwrap_or(0.0))
        .collect();
    let p = &spec.penetration;
    let mut out = IndexMap::with_capacity(world.covariates.rows.len());
    for (id, x) in &world.covariates.rows {
        let z = p.intercept + x.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
        let rate = p.base + p.amplitude * p.form.shape(z);
        if !(0.0..=MAX_PENETRATION).contains(&rate) {
            return Err(Error::domain(format!(
                "penetration {rate} in area `{id}` lies outside [0, {MAX_PENETRATION}]"
            )));
        }
        out.insert(id.clone(), rate);
    }
    Ok(out)
}

/// Source counts `census * p * exp(eps)`; counts under the drop threshold become 0.
pub fn generate_counts(world: &World, spec: &ScenarioSpec) -> Result<CountTable> {
    let rates = penetration(world, spec)?;
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::domain(format!("noise: {e}")))?;
    let mut rng = substream(derive(spec.seed, "noise"), 0);
    let mut out = CountTable::new("synthetic");
    for (id, rate) in &rates {
        let census = world.census.get(id).ok_or_else(|| Error::MissingKey {
            key: id.clone(),
            table: "census".into(),
        })?;
        let eps = if spec.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        let mut count = (census * rate * eps.exp()).max(0.0);
        if let Some(threshold) = spec.small_count_drop {
            if count < threshold {
                count = 0.0;
            }
        }
        out.insert(id.clone(), count)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldFiles {
    pub areas: PathBuf,
    pub census: PathBuf,
    pub covariates: PathBuf,
    pub feature_schema: PathBuf,
    pub counts: Option<PathBuf>,
}

/// Write a world (and optionally source counts) in the formats ingest reads.
pub fn write_world(world: &World, counts: Option<&CountTable>, dir: &Path) -> Result<WorldFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = WorldFiles {
        areas: dir.join("areas.geojson"),
        census: dir.join("census.csv"),
        covariates: dir.join("covariates.csv"),
        feature_schema: dir.join("feature_schema.csv"),
        counts: counts.map(|_| dir.join("counts.csv")),
    };
    world.areas.write_geojson(&files.areas)?;
    world.census.save(&files.census)?;
    let create = |p: &Path| fs::File::create(p).map_err(|e| Error::io(p, e));
    world.covariates.write_csv(create(&files.covariates)?)?;
    world.covariates.write_schema_csv(create(&files.feature_schema)?)?;
    if let (Some(c), Some(p)) = (counts, &files.counts) {
        c.save(p)?;
    }
    Ok(files)
}

fn conditional_expectation(node: &TreeNode, x: &[f64], known: u32) -> f64 {
    match node {
        TreeNode::Leaf { weight, .. } => *weight,
        TreeNode::Split {
            feature,
            threshold,
            cover,
            left,
            right,
            ..
        } => {
            if known & (1 << feature) != 0 {
                let next = if x[*feature] < *threshold { left } else { right };
                conditional_expectation(next, x, known)
            } else {
                let total = cover.unwrap_or(f64::NAN);
                let wl = left.cover().unwrap_or(f64::NAN) / total;
                let wr = right.cover().unwrap_or(f64::NAN) / total;
                wl * conditional_expectation(left, x, known) + wr * conditional_expectation(right, x, known)
            }
        }
    }
}

fn ensure_covers(node: &TreeNode) -> Result<()> {
    if let TreeNode::Split { left, right, cover, .. } = node {
        if cover.is_none() || left.cover().is_none() || right.cover().is_none() {
            return Err(Error::schema("tree node lacks training cover"));
        }
        ensure_covers(left)?;
        ensure_covers(right)?;
    }
    Ok(())
}

/// Exact Shapley values of `ensemble` at `row` by enumerating all feature subsets.
pub fn shapley_bruteforce(ensemble: &TreeEnsemble, row: &[f64]) -> Result<Vec<f64>> {
    let f = ensemble.n_features();
    if f > MAX_BRUTEFORCE_FEATURES {
        return Err(Error::domain(format!(
            "subset enumeration supports at most {MAX_BRUTEFORCE_FEATURES} features, got {f}"
        )));
    }
    if row.len() != f {
        return Err(Error::schema(format!("row has {} features, model expects {f}", row.len())));
    }
    for t in &ensemble.trees {
        ensure_covers(t)?;
    }
    let eta = ensemble.params.learning_rate;
    let value: Vec<f64> = (0..1u32 << f)
        .map(|mask| {
            ensemble.base_prediction
                + eta * ensemble.trees.iter().map(|t| conditional_expectation(t, row, mask)).sum::<f64>()
        })
        .collect();

    let mut fact = vec![1.0f64; f + 1];
    for k in 1..=f {
        fact[k] = fact[k - 1] * k as f64;
    }
    let mut phi = vec![0.0; f];
    for (j, p) in phi.iter_mut().enumerate() {
        let bit = 1u32 << j;
        for mask in 0..1u32 << f {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let weight = fact[s] * fact[f - s - 1] / fact[f];
            *p += weight * (value[(mask | bit) as usize] - value[mask as usize]);
        }
    }
    Ok(phi)
}

/// Moran's I by direct evaluation over the dense weight matrix.
pub fn morans_naive(values: &[f64], w: &SpatialWeights) -> Result<f64> {
    let dense = w.to_dense();
    let n_all = dense.len();
    if values.len() != n_all {
        return Err(Error::schema(format!("{} values for {n_all} weighted areas", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite value in Moran input"));
    }
    let keep: Vec<bool> = dense.iter().map(|row| row.iter().any(|&v| v != 0.0)).collect();
    let n = keep.iter().filter(|&&k| k).count();
    if n < 2 {
        return Err(Error::domain("fewer than two non-isolate areas"));
    }
    let mut mean = 0.0;
    for i in 0..n_all {
        if keep[i] {
            mean += values[i];
        }
    }
    mean /= n as f64;
    let (mut num, mut den, mut s0) = (0.0, 0.0, 0.0);
    for i in 0..n_all {
        if !keep[i] {
            continue;
        }
        den += (values[i] - mean) * (values[i] - mean);
        for j in 0..n_all {
            s0 += dense[i][j];
            num += dense[i][j] * (values[i] - mean) * (values[j] - mean);
        }
    }
    if den == 0.0 {
        return Err(Error::DegenerateInput("values have zero variance".into()));
    }
    Ok(n as f64 / s0 * num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bias::coverage_bias;

    fn spec(form: PenetrationForm, base: f64, amplitude: f64) -> ScenarioSpec {
        ScenarioSpec {
            rows: 4,
            cols: 5,
            n_areas: None,
            cell_size: 1.0,
            origin: [0.0, 0.0],
            census: CensusSpec::default(),
            covariates: vec![
                CovariateGenerator {
                    name: "x".into(),
                    group: Some(FeatureGroup::Socioeconomic),
                    distribution: Distribution::default(),
                    smoothing: 2,
                },
                CovariateGenerator {
                    name: "decoy".into(),
                    group: None,
                    distribution: Distribution::Uniform { low: 0.0, high: 1.0 },
                    smoothing: 0,
                },
            ],
            penetration: PenetrationSpec {
                form,
                intercept: 0.0,
                coefficients: [("x".to_string(), 1.0)].into_iter().collect(),
                base,
                amplitude,
            },
            noise_sd: 0.0,
            seed: 11,
            small_count_drop: None,
        }
    }

    #[test]
    fn constant_penetration_gives_constant_coverage() {
        let s = spec(PenetrationForm::Linear, 0.1, 0.0);
        let w = generate_world(&s).unwrap();
        let b = coverage_bias(&generate_counts(&w, &s).unwrap(), &w.census).unwrap();
        for r in b.rows.values() {
            assert!((r.coverage - 10.0).abs() < 1e-12);
            assert!((r.bias - 90.0).abs() < 1e-12);
        }
        let s = spec(PenetrationForm::Linear, 1.0, 0.0);
        let b = coverage_bias(&generate_counts(&w, &s).unwrap(), &w.census).unwrap();
        assert!(b.rows.values().all(|r| r.bias.abs() < 1e-12));
    }

    #[test]
    fn deterministic_world() {
        let s = spec(PenetrationForm::Logistic, 0.0, 1.0);
        assert_eq!(generate_world(&s).unwrap(), generate_world(&s).unwrap());
        let mut other = s.clone();
        other.seed = 12;
        assert_ne!(generate_world(&s).unwrap().census, generate_world(&other).unwrap().census);
    }

    #[test]
    fn out_of_range_penetration() {
        let s = spec(PenetrationForm::Linear, 0.0, 5.0);
        let w = generate_world(&s).unwrap();
        assert!(matches!(generate_counts(&w, &s), Err(Error::Domain(_))));
    }

    #[test]
    fn undeclared_coefficient_rejected() {
        let mut s = spec(PenetrationForm::Linear, 0.1, 0.0);
        s.penetration.coefficients.insert("ghost".into(), 1.0);
        assert!(generate_world(&s).is_err());
    }

    #[test]
    fn small_count_drop_zeroes() {
        let mut s = spec(PenetrationForm::Linear, 0.001, 0.0);
        s.small_count_drop = Some(DEFAULT_SMALL_COUNT);
        let w = generate_world(&s).unwrap();
        let c = generate_counts(&w, &s).unwrap();
        assert!(c.rows.values().all(|&v| v == 0.0 || v >= 10.0));
        assert_eq!(c.len(), 20);
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
rows = 2
cols = 2
seed = 3
[[covariates]]
name = "x"
group = "mobility"
distribution = { kind = "uniform", low = 0.0, high = 1.0 }
[penetration]
form = "threshold"
coefficients = { x = 2.0 }
intercept = -1.0
base = 0.2
amplitude = 0.5
"#;
        let s = ScenarioSpec::from_toml(text).unwrap();
        assert_eq!(s.penetration.form, PenetrationForm::Threshold);
        let w = generate_world(&s).unwrap();
        assert_eq!(w.areas.len(), 4);
        assert_eq!(w.areas.ids().collect::<Vec<_>>(), ["r0c0", "r0c1", "r1c0", "r1c1"]);
    }
}
