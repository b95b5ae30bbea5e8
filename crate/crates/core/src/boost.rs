//! Gradient-boosted regression trees on squared error.
//!
//! Trees are grown depth-first with exact greedy split search over every
//! distinct feature value. Gradients are `g = prediction - target` and
//! hessians are 1. A candidate split is scored by
//!
//! ```text
//! gain = 1/2 [ T(G_L)^2/(H_L+lambda) + T(G_R)^2/(H_R+lambda) - T(G)^2/(H+lambda) ] - gamma
//! ```
//!
//! with `T` the L1 soft threshold, and leaves take `w = -T(G)/(H+lambda)`.
//! Predictions are `base + eta * sum_m tree_m(x)`.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bias::BiasTable;
use crate::error::{Error, Result};
use crate::ingest::CovariateTable;
use crate::seed::substream;

pub const ENSEMBLE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostParams {
    pub learning_rate: f64,
    pub max_depth: usize,
    pub n_rounds: usize,
    pub subsample: f64,
    pub lambda_l2: f64,
    pub alpha_l1: f64,
    pub gamma_min_gain: f64,
    pub min_child_hessian: f64,
    pub seed: u64,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams {
            learning_rate: 0.1,
            max_depth: 3,
            n_rounds: 100,
            subsample: 1.0,
            lambda_l2: 1.0,
            alpha_l1: 0.0,
            gamma_min_gain: 0.0,
            min_child_hessian: 1.0,
            seed: 0,
        }
    }
}

impl BoostParams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| if ok { Ok(()) } else { Err(Error::domain(what.to_string())) };
        check(self.learning_rate > 0.0 && self.learning_rate <= 1.0, "learning_rate must lie in (0, 1]")?;
        check(self.max_depth >= 1, "max_depth must be at least 1")?;
        check(self.subsample > 0.0 && self.subsample <= 1.0, "subsample must lie in (0, 1]")?;
        check(self.lambda_l2 >= 0.0 && self.lambda_l2.is_finite(), "lambda_l2 must be >= 0")?;
        check(self.alpha_l1 >= 0.0 && self.alpha_l1.is_finite(), "alpha_l1 must be >= 0")?;
        check(self.gamma_min_gain >= 0.0 && self.gamma_min_gain.is_finite(), "gamma_min_gain must be >= 0")?;
        check(
            self.min_child_hessian >= 0.0 && self.min_child_hessian.is_finite(),
            "min_child_hessian must be >= 0",
        )
    }
}

/// Default tuning grid: learning rate x depth x subsample x L2 x L1 (72 points).
/// Other fields come from `base`.
pub fn default_grid(base: &BoostParams) -> Vec<BoostParams> {
    let mut grid = Vec::new();
    for &learning_rate in &[0.05, 0.1, 0.3] {
        for &max_depth in &[2, 3, 4] {
            for &subsample in &[0.8, 1.0] {
                for &lambda_l2 in &[1.0, 10.0] {
                    for &alpha_l1 in &[0.0, 1.0] {
                        grid.push(BoostParams {
                            learning_rate,
                            max_depth,
                            subsample,
                            lambda_l2,
                            alpha_l1,
                            ..base.clone()
                        });
                    }
                }
            }
        }
    }
    grid
}

/// Row-major design matrix with targets and row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(ids: Vec<String>, feature_names: Vec<String>, features: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        if ids.len() != features.len() || ids.len() != targets.len() {
            return Err(Error::schema("dataset ids, rows and targets differ in length"));
        }
        for (id, row) in ids.iter().zip(&features) {
            if row.len() != feature_names.len() {
                return Err(Error::schema(format!("row `{id}` has {} features", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain(format!("non-finite feature in row `{id}`")));
            }
        }
        if let Some(k) = targets.iter().position(|t| !t.is_finite()) {
            return Err(Error::domain(format!("non-finite target in row `{}`", ids[k])));
        }
        Ok(Dataset {
            ids,
            feature_names,
            features,
            targets,
        })
    }

    /// Join bias (target) with covariates (features), in bias-table order.
    pub fn from_tables(bias: &BiasTable, covariates: &CovariateTable) -> Result<Self> {
        let mut ids = Vec::with_capacity(bias.rows.len());
        let mut features = Vec::with_capacity(bias.rows.len());
        let mut targets = Vec::with_capacity(bias.rows.len());
        for (id, row) in &bias.rows {
            let x = covariates.rows.get(id).ok_or_else(|| Error::MissingKey {
                key: id.clone(),
                table: "covariates".into(),
            })?;
            ids.push(id.clone());
            features.push(x.clone());
            targets.push(row.bias);
        }
        Dataset::new(ids, covariates.feature_names(), features, targets)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
            features: rows.iter().map(|&i| self.features[i].clone()).collect(),
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    pub fn column(&self, feature: usize) -> Vec<f64> {
        self.features.iter().map(|r| r[feature]).collect()
    }
}

/// Seeded shuffle; the first `ceil(fraction * n)` rows train, the rest test.
pub fn split_train_test(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = data.len();
    if n < 10 {
        return Err(Error::domain(format!("train/test split needs at least 10 rows, got {n}")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::domain("train fraction must lie in (0, 1)"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, 0));
    let n_train = ((fraction * n as f64) - 1e-9).ceil() as usize;
    let n_train = n_train.clamp(1, n - 1);
    Ok((data.subset(&order[..n_train]), data.subset(&order[n_train..])))
}

/// A binary regression tree. Leaf weights are stored before learning-rate
/// scaling. `cover` is the hessian sum (row count) of training rows reaching
/// the node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        weight: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cover: Option<f64>,
    },
    Split {
        feature: usize,
        /// Rows with `x[feature] < threshold` go left.
        threshold: f64,
        /// Reserved for missing values, which ingestion rules out.
        default_left: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cover: Option<f64>,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { weight, .. } => return *weight,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => node = if x[*feature] < *threshold { left } else { right },
            }
        }
    }

    /// Number of split levels; a lone leaf has depth 0.
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn cover(&self) -> Option<f64> {
        match self {
            TreeNode::Leaf { cover, .. } | TreeNode::Split { cover, .. } => *cover,
        }
    }

    pub fn leaf_weights(&self) -> Vec<f64> {
        match self {
            TreeNode::Leaf { weight, .. } => vec![*weight],
            TreeNode::Split { left, right, .. } => {
                let mut w = left.leaf_weights();
                w.extend(right.leaf_weights());
                w
            }
        }
    }

    /// Feature indices used by any split.
    pub fn used_features(&self, out: &mut BTreeSet<usize>) {
        if let TreeNode::Split { feature, left, right, .. } = self {
            out.insert(*feature);
            left.used_features(out);
            right.used_features(out);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub format_version: u32,
    pub base_prediction: f64,
    pub params: BoostParams,
    pub feature_names: Vec<String>,
    pub trees: Vec<TreeNode>,
    /// Training-set RMSE after each round.
    #[serde(default)]
    pub train_rmse: Vec<f64>,
}

impl TreeEnsemble {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        self.base_prediction + self.params.learning_rate * sum
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ensemble serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let e: TreeEnsemble = serde_json::from_str(text).map_err(|err| Error::Parse {
            line: err.line() as u64,
            message: err.to_string(),
        })?;
        if e.format_version != ENSEMBLE_FORMAT_VERSION {
            return Err(Error::schema(format!("unsupported ensemble format {}", e.format_version)));
        }
        Ok(e)
    }
}

/// Predict every row; rows must have the training feature count.
pub fn predict(ensemble: &TreeEnsemble, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    rows.iter()
        .map(|x| {
            if x.len() != ensemble.n_features() {
                Err(Error::schema(format!(
                    "row has {} features, model expects {}",
                    x.len(),
                    ensemble.n_features()
                )))
            } else {
                Ok(ensemble.predict_row(x))
            }
        })
        .collect()
}

fn soft_threshold(g: f64, alpha: f64) -> f64 {
    g.signum() * (g.abs() - alpha).max(0.0)
}

struct Grower<'a> {
    columns: &'a [Vec<f64>],
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a BoostParams,
    n_rows: usize,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl Grower<'_> {
    fn score(&self, g: f64, h: f64) -> f64 {
        let t = soft_threshold(g, self.params.alpha_l1);
        let denom = h + self.params.lambda_l2;
        if denom > 0.0 {
            t * t / denom
        } else {
            0.0
        }
    }

    fn leaf_weight(&self, g: f64, h: f64) -> f64 {
        let denom = h + self.params.lambda_l2;
        if denom > 0.0 {
            -soft_threshold(g, self.params.alpha_l1) / denom + 0.0
        } else {
            0.0
        }
    }

    /// `sorted[f]` holds this node's rows ordered by feature `f`.
    fn grow(&self, sorted: Vec<Vec<usize>>, depth: usize) -> TreeNode {
        let rows = &sorted[0];
        let g: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        let leaf = || TreeNode::Leaf {
            weight: self.leaf_weight(g, h),
            cover: Some(h),
        };
        if depth >= self.params.max_depth || rows.len() < 2 {
            return leaf();
        }
        let Some(best) = self.best_split(&sorted, g, h) else {
            return leaf();
        };

        let col = &self.columns[best.feature];
        let mut goes_left = vec![false; self.n_rows];
        for &i in rows {
            goes_left[i] = col[i] < best.threshold;
        }
        let (left, right): (Vec<Vec<usize>>, Vec<Vec<usize>>) = sorted
            .into_iter()
            .map(|list| list.into_iter().partition(|&i| goes_left[i]))
            .unzip();
        TreeNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            default_left: true,
            cover: Some(h),
            left: Box::new(self.grow(left, depth + 1)),
            right: Box::new(self.grow(right, depth + 1)),
        }
    }

    fn best_split(&self, sorted: &[Vec<usize>], g: f64, h: f64) -> Option<BestSplit> {
        let parent = self.score(g, h);
        let min_h = self.params.min_child_hessian;
        let mut best: Option<BestSplit> = None;
        for (f, list) in sorted.iter().enumerate() {
            let col = &self.columns[f];
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..list.len() - 1 {
                let i = list[k];
                gl += self.grad[i];
                hl += self.hess[i];
                let (lo, hi) = (col[i], col[list[k + 1]]);
                if lo >= hi {
                    continue;
                }
                let hr = h - hl;
                if hl < min_h || hr < min_h {
                    continue;
                }
                let gain = 0.5 * (self.score(gl, hl) + self.score(g - gl, hr) - parent) - self.params.gamma_min_gain;
                if gain > best.as_ref().map_or(0.0, |b| b.gain) {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold <= lo {
                        threshold = hi;
                    }
                    best = Some(BestSplit {
                        gain,
                        feature: f,
                        threshold,
                    });
                }
            }
        }
        best
    }
}

fn rmse(pred: &[f64], target: &[f64]) -> f64 {
    let sse: f64 = pred.iter().zip(target).map(|(p, y)| (p - y) * (p - y)).sum();
    (sse / target.len() as f64).sqrt()
}

/// Fit a boosted ensemble to `train`.
pub fn fit(train: &Dataset, params: &BoostParams) -> Result<TreeEnsemble> {
    params.validate()?;
    let n = train.len();
    if n < 2 {
        return Err(Error::domain("fitting needs at least two rows"));
    }
    if train.n_features() == 0 {
        return Err(Error::domain("fitting needs at least one feature"));
    }
    // Dataset::new already rejects non-finite values; recheck for hand-built sets.
    if train.targets.iter().chain(train.features.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite feature or target"));
    }

    let columns: Vec<Vec<f64>> = (0..train.n_features()).map(|f| train.column(f)).collect();
    let presorted: Vec<Vec<usize>> = columns
        .iter()
        .map(|col| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            idx
        })
        .collect();

    let (lo, hi) = train
        .targets
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &y| (l.min(y), h.max(y)));
    let base_prediction = if lo == hi {
        lo
    } else {
        train.targets.iter().sum::<f64>() / n as f64
    };

    let mut pred = vec![base_prediction; n];
    let mut grad = vec![0.0; n];
    let hess = vec![1.0; n];
    let mut trees = Vec::with_capacity(params.n_rounds);
    let mut train_rmse = Vec::with_capacity(params.n_rounds);
    let n_sample = ((params.subsample * n as f64).ceil() as usize).clamp(1, n);

    for round in 0..params.n_rounds {
        for i in 0..n {
            grad[i] = pred[i] - train.targets[i];
        }
        let root_lists = if n_sample < n {
            let mut mask = vec![false; n];
            for i in index::sample(&mut substream(params.seed, round as u64), n, n_sample) {
                mask[i] = true;
            }
            presorted
                .iter()
                .map(|l| l.iter().copied().filter(|&i| mask[i]).collect())
                .collect()
        } else {
            presorted.clone()
        };
        let grower = Grower {
            columns: &columns,
            grad: &grad,
            hess: &hess,
            params,
            n_rows: n,
        };
        let tree = grower.grow(root_lists, 0);
        for (p, x) in pred.iter_mut().zip(&train.features) {
            *p += params.learning_rate * tree.predict(x);
        }
        trees.push(tree);
        train_rmse.push(rmse(&pred, &train.targets));
    }

    Ok(TreeEnsemble {
        format_version: ENSEMBLE_FORMAT_VERSION,
        base_prediction,
        params: params.clone(),
        feature_names: train.feature_names.clone(),
        trees,
        train_rmse,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionPair {
    pub area_id: String,
    pub observed: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub rmse: f64,
    /// `None` when the observed values are constant.
    pub r2: Option<f64>,
    pub pairs: Vec<PredictionPair>,
}

pub fn evaluate(ensemble: &TreeEnsemble, test: &Dataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::EmptySelection("evaluation set is empty".into()));
    }
    let predicted = predict(ensemble, &test.features)?;
    let mean = test.targets.iter().sum::<f64>() / test.len() as f64;
    let sst: f64 = test.targets.iter().map(|y| (y - mean) * (y - mean)).sum();
    let sse: f64 = predicted.iter().zip(&test.targets).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(Evaluation {
        rmse: (sse / test.len() as f64).sqrt(),
        r2: (sst > 0.0).then(|| 1.0 - sse / sst),
        pairs: test
            .ids
            .iter()
            .zip(&test.targets)
            .zip(&predicted)
            .map(|((id, &observed), &predicted)| PredictionPair {
                area_id: id.clone(),
                observed,
                predicted,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub params: BoostParams,
    pub fold_rmse: Vec<f64>,
    pub mean_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best_index: usize,
    pub best_params: BoostParams,
    pub scores: Vec<GridScore>,
}

/// Seeded k-fold assignment: shuffled position modulo `folds`.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, 0));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

/// k-fold cross-validated grid search; lowest mean validation RMSE wins and
/// ties go to the earliest grid entry.
pub fn grid_search_cv(train: &Dataset, grid: &[BoostParams], folds: usize, seed: u64) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::domain("empty hyperparameter grid"));
    }
    if folds < 2 {
        return Err(Error::domain("cross validation needs at least two folds"));
    }
    if train.len() < folds {
        return Err(Error::domain(format!("{} rows cannot fill {folds} folds", train.len())));
    }
    for p in grid {
        p.validate()?;
    }
    let assignment = fold_assignment(train.len(), folds, seed);
    let splits: Vec<(Dataset, Dataset)> = (0..folds)
        .map(|f| {
            let (fit_rows, val_rows): (Vec<usize>, Vec<usize>) = (0..train.len()).partition(|&i| assignment[i] != f);
            (train.subset(&fit_rows), train.subset(&val_rows))
        })
        .collect();

    let tasks: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..folds).map(move |f| (g, f))).collect();
    let results: Vec<f64> = tasks
        .par_iter()
        .map(|&(g, f)| {
            let (fit_set, val_set) = &splits[f];
            let model = fit(fit_set, &grid[g])?;
            Ok(evaluate(&model, val_set)?.rmse)
        })
        .collect::<Result<_>>()?;

    let scores: Vec<GridScore> = grid
        .iter()
        .enumerate()
        .map(|(g, params)| {
            let fold_rmse = results[g * folds..(g + 1) * folds].to_vec();
            let mean_rmse = fold_rmse.iter().sum::<f64>() / folds as f64;
            GridScore {
                params: params.clone(),
                fold_rmse,
                mean_rmse,
            }
        })
        .collect();
    let mut best_index = 0;
    for (g, s) in scores.iter().enumerate() {
        if s.mean_rmse < scores[best_index].mean_rmse {
            best_index = g;
        }
    }
    Ok(CvResult {
        best_index,
        best_params: grid[best_index].clone(),
        scores,
    })
}

/// Training history, held-out performance and tuning record for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub train_rmse: Vec<f64>,
    pub test_rmse: f64,
    pub test_r2: Option<f64>,
    pub best_params: BoostParams,
    pub best_index: usize,
    pub fold_scores: Vec<GridScore>,
    pub test_pairs: Vec<PredictionPair>,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutcome {
    pub ensemble: TreeEnsemble,
    pub report: FitReport,
    pub train: Dataset,
    pub test: Dataset,
}

/// Hold out a test split, pick parameters from `grid` by k-fold CV on the
/// training part, refit on the whole training part and score the test split.
/// An empty grid skips tuning and uses `base`.
pub fn tune_and_fit(
    data: &Dataset,
    base: &BoostParams,
    grid: &[BoostParams],
    folds: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<ModelOutcome> {
    use crate::seed::derive;

    let (train, test) = split_train_test(data, train_fraction, derive(seed, "split"))?;
    let (best_params, best_index, fold_scores) = if grid.is_empty() {
        (base.clone(), 0, Vec::new())
    } else {
        let cv = grid_search_cv(&train, grid, folds, derive(seed, "folds"))?;
        (cv.best_params, cv.best_index, cv.scores)
    };
    let ensemble = fit(&train, &best_params)?;
    let eval = evaluate(&ensemble, &test)?;
    let report = FitReport {
        train_rmse: ensemble.train_rmse.clone(),
        test_rmse: eval.rmse,
        test_r2: eval.r2,
        best_params,
        best_index,
        fold_scores,
        test_pairs: eval.pairs,
        n_train: train.len(),
        n_test: test.len(),
    };
    Ok(ModelOutcome {
        ensemble,
        report,
        train,
        test,
    })
}
