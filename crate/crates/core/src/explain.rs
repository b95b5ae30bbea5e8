//! Exact SHAP attributions for boosted tree ensembles and the summaries built
//! on them: normalised importance, beeswarm records and dependence curves.
//!
//! Attributions are path-dependent: the value of a coalition `S` is the
//! expectation of the tree output when features in `S` are fixed and the
//! remaining splits are averaged by training cover.

use serde::{Deserialize, Serialize};

use crate::boost::{Dataset, TreeEnsemble, TreeNode};
use crate::error::{Error, Result};
use crate::loess::{loess, LoessCurve, DEFAULT_GRID_POINTS};

pub const BEESWARM_TOP: usize = 20;
pub const DEPENDENCE_TOP: usize = 6;
pub const HIGHLIGHT_THRESHOLD: f64 = 0.5;
pub const MIN_DEPENDENCE_ROWS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapMatrix {
    pub ids: Vec<String>,
    pub feature_names: Vec<String>,
    /// `values[row][feature]`, in target units.
    pub values: Vec<Vec<f64>>,
    pub expected_value: f64,
    pub predictions: Vec<f64>,
}

impl ShapMatrix {
    /// Largest `|expected + sum(shap) - prediction|` over rows.
    pub fn local_accuracy_error(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.predictions)
            .map(|(row, p)| (self.expected_value + row.iter().sum::<f64>() - p).abs())
            .fold(0.0, f64::max)
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn column(&self, feature: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[feature]).collect()
    }

    pub fn scaled(&self, k: f64) -> ShapMatrix {
        ShapMatrix {
            values: self.values.iter().map(|r| r.iter().map(|v| v * k).collect()).collect(),
            expected_value: self.expected_value * k,
            predictions: self.predictions.iter().map(|p| p * k).collect(),
            ..self.clone()
        }
    }
}

fn node_cover(node: &TreeNode) -> Result<f64> {
    node.cover()
        .filter(|c| *c > 0.0 && c.is_finite())
        .ok_or_else(|| Error::schema("tree node lacks training cover"))
}

/// Cover-weighted mean output of one tree.
pub fn tree_expectation(node: &TreeNode) -> Result<f64> {
    match node {
        TreeNode::Leaf { weight, .. } => Ok(*weight),
        TreeNode::Split { left, right, .. } => {
            let total = node_cover(node)?;
            Ok(node_cover(left)? / total * tree_expectation(left)?
                + node_cover(right)? / total * tree_expectation(right)?)
        }
    }
}

fn check_covers(node: &TreeNode) -> Result<()> {
    if let TreeNode::Split { left, right, .. } = node {
        node_cover(node)?;
        node_cover(left)?;
        node_cover(right)?;
        check_covers(left)?;
        check_covers(right)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: Option<usize>,
    zero_fraction: f64,
    one_fraction: f64,
    pweight: f64,
}

fn extend_path(path: &mut Vec<PathElement>, zero_fraction: f64, one_fraction: f64, feature: Option<usize>) {
    let depth = path.len();
    path.push(PathElement {
        feature,
        zero_fraction,
        one_fraction,
        pweight: if depth == 0 { 1.0 } else { 0.0 },
    });
    let d1 = (depth + 1) as f64;
    for i in (0..depth).rev() {
        path[i + 1].pweight += one_fraction * path[i].pweight * (i + 1) as f64 / d1;
        path[i].pweight = zero_fraction * path[i].pweight * (depth - i) as f64 / d1;
    }
}

fn unwind_path(path: &mut Vec<PathElement>, index: usize) {
    let depth = path.len() - 1;
    let PathElement {
        zero_fraction,
        one_fraction,
        ..
    } = path[index];
    let d1 = (depth + 1) as f64;
    let mut next_one = path[depth].pweight;
    for i in (0..depth).rev() {
        if one_fraction != 0.0 {
            let tmp = path[i].pweight;
            path[i].pweight = next_one * d1 / ((i + 1) as f64 * one_fraction);
            next_one = tmp - path[i].pweight * zero_fraction * (depth - i) as f64 / d1;
        } else {
            path[i].pweight = path[i].pweight * d1 / (zero_fraction * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
    path.pop();
}

/// Total permutation weight of the path with element `index` removed.
fn unwound_path_sum(path: &[PathElement], index: usize) -> f64 {
    let depth = path.len() - 1;
    let PathElement {
        zero_fraction,
        one_fraction,
        ..
    } = path[index];
    let mut next_one = path[depth].pweight;
    let mut total = 0.0;
    if one_fraction != 0.0 {
        for i in (0..depth).rev() {
            let tmp = next_one / ((i + 1) as f64 * one_fraction);
            total += tmp;
            next_one = path[i].pweight - tmp * zero_fraction * (depth - i) as f64;
        }
    } else {
        for i in (0..depth).rev() {
            total += path[i].pweight / (zero_fraction * (depth - i) as f64);
        }
    }
    total * (depth + 1) as f64
}

fn recurse(
    node: &TreeNode,
    x: &[f64],
    phi: &mut [f64],
    mut path: Vec<PathElement>,
    zero_fraction: f64,
    one_fraction: f64,
    feature: Option<usize>,
) {
    extend_path(&mut path, zero_fraction, one_fraction, feature);
    match node {
        TreeNode::Leaf { weight, .. } => {
            for i in 1..path.len() {
                let w = unwound_path_sum(&path, i);
                let el = path[i];
                if let Some(f) = el.feature {
                    phi[f] += w * (el.one_fraction - el.zero_fraction) * weight;
                }
            }
        }
        TreeNode::Split {
            feature: split_feature,
            threshold,
            cover,
            left,
            right,
            ..
        } => {
            let (hot, cold) = if x[*split_feature] < *threshold {
                (left, right)
            } else {
                (right, left)
            };
            let total = cover.expect("covers checked");
            let hot_zero = hot.cover().expect("covers checked") / total;
            let cold_zero = cold.cover().expect("covers checked") / total;
            let (mut incoming_zero, mut incoming_one) = (1.0, 1.0);
            if let Some(k) = (1..path.len()).find(|&k| path[k].feature == Some(*split_feature)) {
                incoming_zero = path[k].zero_fraction;
                incoming_one = path[k].one_fraction;
                unwind_path(&mut path, k);
            }
            recurse(
                hot,
                x,
                phi,
                path.clone(),
                hot_zero * incoming_zero,
                incoming_one,
                Some(*split_feature),
            );
            recurse(cold, x, phi, path, cold_zero * incoming_zero, 0.0, Some(*split_feature));
        }
    }
}

/// SHAP values of one tree's raw (unscaled) output for row `x`.
pub fn tree_shap_single(tree: &TreeNode, x: &[f64], n_features: usize) -> Result<Vec<f64>> {
    check_covers(tree)?;
    let mut phi = vec![0.0; n_features];
    recurse(tree, x, &mut phi, Vec::new(), 1.0, 1.0, None);
    Ok(phi)
}

/// Per-row SHAP values of the whole ensemble, scaled by the learning rate.
pub fn tree_shap(ensemble: &TreeEnsemble, ids: &[String], rows: &[Vec<f64>]) -> Result<ShapMatrix> {
    use rayon::prelude::*;

    if ids.len() != rows.len() {
        return Err(Error::schema("one id per SHAP row is required"));
    }
    let f = ensemble.n_features();
    if let Some(bad) = rows.iter().find(|r| r.len() != f) {
        return Err(Error::schema(format!("row has {} features, model expects {f}", bad.len())));
    }
    for t in &ensemble.trees {
        check_covers(t)?;
    }
    let eta = ensemble.params.learning_rate;
    let mut expected_value = ensemble.base_prediction;
    for t in &ensemble.trees {
        expected_value += eta * tree_expectation(t)?;
    }
    let values: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|x| {
            let mut phi = vec![0.0; f];
            for t in &ensemble.trees {
                recurse(t, x, &mut phi, Vec::new(), 1.0, 1.0, None);
            }
            phi.iter_mut().for_each(|v| *v *= eta);
            phi
        })
        .collect();
    Ok(ShapMatrix {
        ids: ids.to_vec(),
        feature_names: ensemble.feature_names.clone(),
        values,
        expected_value,
        predictions: rows.iter().map(|x| ensemble.predict_row(x)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub index: usize,
    pub mean_abs_shap: f64,
    pub normalized: f64,
    /// 1 = most important.
    pub rank: usize,
    /// Normalised score above 0.5.
    pub highlighted: bool,
}

/// Features in rank order with min-max normalised scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile {
    pub features: Vec<FeatureImportance>,
    /// Set when every raw score is equal (or there is one feature); all
    /// normalised scores are then 1.
    pub degenerate: bool,
}

impl ImportanceProfile {
    pub fn top(&self) -> Option<&FeatureImportance> {
        self.features.first()
    }
}

pub fn importance_profile(shap: &ShapMatrix) -> ImportanceProfile {
    let n_rows = shap.values.len().max(1) as f64;
    let raw: Vec<f64> = (0..shap.n_features())
        .map(|f| shap.values.iter().map(|r| r[f].abs()).sum::<f64>() / n_rows)
        .collect();
    importance_from_scores(&shap.feature_names, &raw)
}

pub fn importance_from_scores(names: &[String], raw: &[f64]) -> ImportanceProfile {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(hi > lo);
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]).then(a.cmp(&b)));
    let features = order
        .iter()
        .enumerate()
        .map(|(r, &f)| {
            let normalized = if degenerate { 1.0 } else { (raw[f] - lo) / (hi - lo) };
            FeatureImportance {
                feature: names[f].clone(),
                index: f,
                mean_abs_shap: raw[f],
                normalized,
                rank: r + 1,
                highlighted: normalized > HIGHLIGHT_THRESHOLD,
            }
        })
        .collect();
    ImportanceProfile { features, degenerate }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeeswarmRecord {
    pub feature: String,
    pub rank: usize,
    pub area_id: String,
    pub shap: f64,
    pub value: f64,
    /// Average-rank percentile of `value` within the feature, 0 to 100.
    pub percentile: f64,
}

/// Percentile of each value among `values`, ties sharing their average rank.
pub fn rank_percentiles(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 1 {
        return vec![50.0];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let avg_rank = (start + end) as f64 / 2.0;
        for &i in &order[start..=end] {
            out[i] = 100.0 * avg_rank / (n - 1) as f64;
        }
        start = end + 1;
    }
    out
}

/// Beeswarm records for the 20 highest-ranked features, in rank order.
pub fn beeswarm_export(shap: &ShapMatrix, covariates: &Dataset) -> Result<Vec<BeeswarmRecord>> {
    if covariates.ids != shap.ids {
        return Err(Error::schema("SHAP rows and covariate rows are not aligned"));
    }
    let profile = importance_profile(shap);
    let mut out = Vec::new();
    for fi in profile.features.iter().take(BEESWARM_TOP) {
        let values = covariates.column(fi.index);
        let pct = rank_percentiles(&values);
        for (row, id) in shap.ids.iter().enumerate() {
            out.push(BeeswarmRecord {
                feature: fi.feature.clone(),
                rank: fi.rank,
                area_id: id.clone(),
                shap: shap.values[row][fi.index],
                value: values[row],
                percentile: pct[row],
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencePoint {
    pub area_id: String,
    pub value: f64,
    pub shap: f64,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceExport {
    pub feature: String,
    pub rank: Option<usize>,
    pub points: Vec<DependencePoint>,
    /// Smoothed SHAP value against the feature.
    pub shap_curve: LoessCurve,
    /// Smoothed target (bias) against the feature.
    pub target_curve: LoessCurve,
}

/// Scatter plus local-linear smooths of SHAP and target against one feature.
pub fn dependence_export(shap: &ShapMatrix, covariates: &Dataset, feature: usize, span: f64) -> Result<DependenceExport> {
    if covariates.ids != shap.ids {
        return Err(Error::schema("SHAP rows and covariate rows are not aligned"));
    }
    if feature >= shap.n_features() {
        return Err(Error::domain(format!("feature index {feature} out of range")));
    }
    let n = shap.ids.len();
    if n < MIN_DEPENDENCE_ROWS {
        return Err(Error::domain(format!("dependence curves need at least {MIN_DEPENDENCE_ROWS} areas, got {n}")));
    }
    let x = covariates.column(feature);
    let s = shap.column(feature);
    let shap_curve = loess(&x, &s, span, DEFAULT_GRID_POINTS)?;
    let target_curve = loess(&x, &covariates.targets, span, DEFAULT_GRID_POINTS)?;
    Ok(DependenceExport {
        feature: shap.feature_names[feature].clone(),
        rank: None,
        points: (0..n)
            .map(|i| DependencePoint {
                area_id: shap.ids[i].clone(),
                value: x[i],
                shap: s[i],
                target: covariates.targets[i],
            })
            .collect(),
        shap_curve,
        target_curve,
    })
}
