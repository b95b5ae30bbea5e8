//! Spatial weights, global Moran's I with permutation inference, and
//! Pearson correlation.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::haversine_km;
use crate::ingest::AreaSet;
use crate::seed::substream;

pub const DEFAULT_KNN: usize = 8;
pub const DEFAULT_PERMUTATIONS: usize = 999;
pub const DEFAULT_HISTOGRAM_BINS: usize = 20;

/// Vertex-contact tolerance for queen adjacency, in degrees.
const QUEEN_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Scheme {
    Queen,
    Knn { k: usize },
    /// Centroids within `km` kilometres. `None` picks the smallest band that
    /// leaves no area without neighbours.
    DistanceBand { km: Option<f64> },
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || Error::schema(format!("bad weighting scheme `{s}`"));
        match (name.to_ascii_lowercase().as_str(), arg) {
            ("queen", None) => Ok(Scheme::Queen),
            ("knn", None) => Ok(Scheme::Knn { k: DEFAULT_KNN }),
            ("knn", Some(k)) => Ok(Scheme::Knn {
                k: k.parse().map_err(|_| bad())?,
            }),
            ("band" | "distance_band", None) => Ok(Scheme::DistanceBand { km: None }),
            ("band" | "distance_band", Some(d)) => Ok(Scheme::DistanceBand {
                km: Some(d.parse().map_err(|_| bad())?),
            }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Queen => write!(f, "queen"),
            Scheme::Knn { k } => write!(f, "knn:{k}"),
            Scheme::DistanceBand { km: None } => write!(f, "band"),
            Scheme::DistanceBand { km: Some(d) } => write!(f, "band:{d}"),
        }
    }
}

/// Parse a comma-separated scheme list such as `queen,knn:8,band`.
pub fn parse_schemes(list: &str) -> Result<Vec<Scheme>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

/// Sparse neighbour weights over an ordered list of areas.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeights {
    scheme: Scheme,
    ids: Vec<String>,
    neighbors: Vec<Vec<(usize, f64)>>,
    row_standardized: bool,
    band_km: Option<f64>,
}

impl SpatialWeights {
    /// Build from explicit neighbour lists (binary or weighted).
    pub fn from_neighbors(scheme: Scheme, ids: Vec<String>, neighbors: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if ids.len() != neighbors.len() {
            return Err(Error::schema("one neighbour row per area is required"));
        }
        for (i, row) in neighbors.iter().enumerate() {
            for &(j, w) in row {
                if j >= ids.len() || j == i || !(w >= 0.0 && w.is_finite()) {
                    return Err(Error::domain(format!("invalid weight entry ({i}, {j}, {w})")));
                }
            }
        }
        Ok(SpatialWeights {
            scheme,
            ids,
            neighbors,
            row_standardized: false,
            band_km: None,
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Label including the resolved band radius, when one was chosen automatically.
    pub fn label(&self) -> String {
        match (self.scheme, self.band_km) {
            (Scheme::DistanceBand { km: None }, Some(d)) => format!("band:{d:.3}"),
            _ => self.scheme.to_string(),
        }
    }

    pub fn band_km(&self) -> Option<f64> {
        self.band_km
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn neighbors_of(&self, id: &str) -> Option<Vec<(&str, f64)>> {
        let i = self.ids.iter().position(|x| x == id)?;
        Some(self.neighbors[i].iter().map(|&(j, w)| (self.ids[j].as_str(), w)).collect())
    }

    pub fn is_row_standardized(&self) -> bool {
        self.row_standardized
    }

    pub fn isolates(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.neighbors[i].is_empty()).collect()
    }

    pub fn s0(&self) -> f64 {
        self.neighbors.iter().flatten().map(|&(_, w)| w).sum()
    }

    /// Whether `j in N(i)` iff `i in N(j)`.
    pub fn is_symmetric_structure(&self) -> bool {
        let edges: BTreeSet<(usize, usize)> = self
            .neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&(j, _)| (i, j)))
            .collect();
        edges.iter().all(|&(i, j)| edges.contains(&(j, i)))
    }

    pub fn row_standardize(&mut self) {
        for row in &mut self.neighbors {
            let total: f64 = row.iter().map(|&(_, w)| w).sum();
            if total > 0.0 {
                for entry in row.iter_mut() {
                    entry.1 /= total;
                }
            }
        }
        self.row_standardized = true;
    }

    /// Dense `n x n` copy.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        let mut m = vec![vec![0.0; n]; n];
        for (i, row) in self.neighbors.iter().enumerate() {
            for &(j, w) in row {
                m[i][j] += w;
            }
        }
        m
    }

    /// Values from `map` in this matrix's area order.
    pub fn align(&self, map: &IndexMap<String, f64>) -> Result<Vec<f64>> {
        self.ids
            .iter()
            .map(|id| {
                map.get(id).copied().ok_or_else(|| Error::MissingKey {
                    key: id.clone(),
                    table: "values".into(),
                })
            })
            .collect()
    }
}

fn distance_matrix(areas: &AreaSet) -> Vec<Vec<f64>> {
    let c: Vec<_> = areas.areas().iter().map(|a| a.centroid).collect();
    let n = c.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = haversine_km(c[i], c[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

fn queen_neighbors(areas: &AreaSet) -> Vec<Vec<(usize, f64)>> {
    let list = areas.areas();
    let n = list.len();
    let quantize = |v: [f64; 2]| ((v[0] / QUEEN_TOLERANCE).round() as i64, (v[1] / QUEEN_TOLERANCE).round() as i64);
    let mut by_vertex: HashMap<(i64, i64), BTreeSet<usize>> = HashMap::new();
    for (i, a) in list.iter().enumerate() {
        for v in a.geometry.vertices() {
            by_vertex.entry(quantize(v)).or_default().insert(i);
        }
    }
    let mut adjacent: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for members in by_vertex.values() {
        for &i in members {
            for &j in members {
                if i != j {
                    adjacent[i].insert(j);
                }
            }
        }
    }
    // Contacts that do not share a vertex exactly (T-junctions, tiny offsets).
    let extra: Vec<(usize, usize)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let adjacent = &adjacent;
            (i + 1..n).filter_map(move |j| {
                let (a, b) = (&list[i], &list[j]);
                (!adjacent[i].contains(&j)
                    && a.bbox.intersects(&b.bbox, QUEEN_TOLERANCE)
                    && a.geometry.touches(&b.geometry, QUEEN_TOLERANCE))
                .then_some((i, j))
            })
        })
        .collect();
    for (i, j) in extra {
        adjacent[i].insert(j);
        adjacent[j].insert(i);
    }
    adjacent
        .into_iter()
        .map(|s| s.into_iter().map(|j| (j, 1.0)).collect())
        .collect()
}

/// Build weights for `scheme`, row-standardized when `standardize` is set.
pub fn build_weights(areas: &AreaSet, scheme: Scheme, standardize: bool) -> Result<SpatialWeights> {
    let n = areas.len();
    if n < 2 {
        return Err(Error::domain("spatial weights need at least two areas"));
    }
    let ids: Vec<String> = areas.ids().map(String::from).collect();
    let mut band_km = None;
    let neighbors = match scheme {
        Scheme::Queen => queen_neighbors(areas),
        Scheme::Knn { k } => {
            if k == 0 || k >= n {
                return Err(Error::domain(format!("knn needs 0 < k < n, got k={k}, n={n}")));
            }
            let d = distance_matrix(areas);
            (0..n)
                .map(|i| {
                    let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                    order.sort_by(|&a, &b| d[i][a].total_cmp(&d[i][b]).then(a.cmp(&b)));
                    let mut row: Vec<(usize, f64)> = order[..k].iter().map(|&j| (j, 1.0)).collect();
                    row.sort_by_key(|e| e.0);
                    row
                })
                .collect()
        }
        Scheme::DistanceBand { km } => {
            let d = distance_matrix(areas);
            let radius = match km {
                Some(r) if r > 0.0 && r.is_finite() => r,
                Some(r) => return Err(Error::domain(format!("distance band must be positive, got {r}"))),
                None => (0..n)
                    .map(|i| (0..n).filter(|&j| j != i).map(|j| d[i][j]).fold(f64::INFINITY, f64::min))
                    .fold(0.0, f64::max),
            };
            band_km = Some(radius);
            let rows: Vec<Vec<(usize, f64)>> = (0..n)
                .map(|i| (0..n).filter(|&j| j != i && d[i][j] <= radius).map(|j| (j, 1.0)).collect())
                .collect();
            let isolates = rows.iter().filter(|r| r.is_empty()).count();
            if isolates > 0 {
                log::warn!("distance band {radius:.3} km leaves {isolates} isolate(s)");
            }
            rows
        }
    };
    let mut w = SpatialWeights::from_neighbors(scheme, ids, neighbors)?;
    w.band_km = band_km;
    if standardize {
        w.row_standardize();
    }
    Ok(w)
}

/// Centred values over non-isolates, their sum of squares, and the active mask.
struct Centred {
    z: Vec<f64>,
    active: Vec<usize>,
    sum_sq: f64,
}

fn centre(values: &[f64], w: &SpatialWeights) -> Result<Centred> {
    if values.len() != w.len() {
        return Err(Error::schema(format!(
            "{} values for {} weighted areas",
            values.len(),
            w.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite value in Moran input"));
    }
    let active: Vec<usize> = (0..w.len()).filter(|&i| !w.row(i).is_empty()).collect();
    if active.len() < 2 {
        return Err(Error::domain("fewer than two non-isolate areas"));
    }
    let (lo, hi) = active
        .iter()
        .map(|&i| values[i])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if lo == hi {
        return Err(Error::DegenerateInput("values have zero variance".into()));
    }
    let mean = active.iter().map(|&i| values[i]).sum::<f64>() / active.len() as f64;
    let z: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let sum_sq = active.iter().map(|&i| z[i] * z[i]).sum();
    Ok(Centred { z, active, sum_sq })
}

fn cross_product(z: &[f64], active: &[usize], w: &SpatialWeights) -> f64 {
    active
        .iter()
        .map(|&i| z[i] * w.row(i).iter().map(|&(j, wij)| wij * z[j]).sum::<f64>())
        .sum()
}

fn active_s0(active: &[usize], w: &SpatialWeights) -> f64 {
    active.iter().map(|&i| w.row(i).iter().map(|e| e.1).sum::<f64>()).sum()
}

/// Global Moran's I of `values` (in `w`'s area order). Isolates are left out
/// of `n`, `S0` and all sums.
pub fn morans_i(values: &[f64], w: &SpatialWeights) -> Result<f64> {
    let c = centre(values, w)?;
    let s0 = active_s0(&c.active, w);
    Ok(c.active.len() as f64 / s0 * cross_product(&c.z, &c.active, w) / c.sum_sq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// Positive autocorrelation: counts permuted statistics `>=` the observed one.
    #[default]
    Greater,
    /// Twice the smaller one-sided tail, capped at 1.
    TwoSided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoranResult {
    pub scheme: String,
    #[serde(rename = "I")]
    pub i: f64,
    #[serde(rename = "p")]
    pub p_value: f64,
    pub n_perm: usize,
    pub seed: u64,
    pub alternative: Alternative,
}

/// Moran's I with a seeded permutation pseudo p-value.
///
/// Permutation `k` shuffles the non-isolate values with substream `k` of
/// `seed`, so the result is independent of thread count.
pub fn permutation_test(
    values: &[f64],
    w: &SpatialWeights,
    n_permutations: usize,
    seed: u64,
    alternative: Alternative,
) -> Result<MoranResult> {
    let c = centre(values, w)?;
    let n = c.active.len() as f64;
    let scale = n / active_s0(&c.active, w) / c.sum_sq;
    let observed = scale * cross_product(&c.z, &c.active, w);
    let base: Vec<f64> = c.active.iter().map(|&i| c.z[i]).collect();

    let (greater, less) = (0..n_permutations)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(seed, k as u64);
            let mut shuffled = base.clone();
            shuffled.shuffle(&mut rng);
            let mut z = c.z.clone();
            for (&i, v) in c.active.iter().zip(shuffled) {
                z[i] = v;
            }
            let stat = scale * cross_product(&z, &c.active, w);
            (usize::from(stat >= observed), usize::from(stat <= observed))
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));

    let denom = (n_permutations + 1) as f64;
    let p_greater = (greater + 1) as f64 / denom;
    let p_value = match alternative {
        Alternative::Greater => p_greater,
        Alternative::TwoSided => (2.0 * p_greater.min((less + 1) as f64 / denom)).min(1.0),
    };
    Ok(MoranResult {
        scheme: w.label(),
        i: observed,
        p_value,
        n_perm: n_permutations,
        seed,
        alternative,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeStatistic {
    pub scheme: String,
    #[serde(rename = "I")]
    pub i: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeRange {
    pub per_scheme: Vec<SchemeStatistic>,
    pub range: f64,
}

/// Moran's I under each weights matrix, and the max minus min across them.
pub fn scheme_range(values: &IndexMap<String, f64>, weights: &[SpatialWeights]) -> Result<SchemeRange> {
    if weights.len() < 2 {
        return Err(Error::domain("scheme range needs at least two schemes"));
    }
    let per_scheme = weights
        .iter()
        .map(|w| {
            Ok(SchemeStatistic {
                scheme: w.label(),
                i: morans_i(&w.align(values)?, w)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = per_scheme
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), s| (l.min(s.i), h.max(s.i)));
    Ok(SchemeRange {
        per_scheme,
        range: hi - lo,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pearson {
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

/// Sample correlation with a two-sided t-test p-value on `n - 2` degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Pearson> {
    if x.len() != y.len() {
        return Err(Error::schema("pearson inputs differ in length"));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::domain("pearson needs at least three pairs"));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("pearson input has zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = nf - 2.0;
    let one_minus = 1.0 - r * r;
    let p = if one_minus <= 0.0 {
        0.0
    } else {
        let t2 = r * r * df / one_minus;
        statrs::function::beta::beta_reg(df / 2.0, 0.5, df / (df + t2))
    };
    Ok(Pearson { r, p, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width histogram over `[min, max]`; the maximum lands in the last bin.
pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::domain("histogram needs at least one bin"));
    }
    if values.is_empty() {
        return Err(Error::EmptySelection("histogram of no values".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|k| lo + width * k as f64).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let k = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(Histogram { edges, counts })
}
