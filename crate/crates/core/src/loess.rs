//! Degree-1 local regression with a tricube kernel and pointwise 95% bands.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SPAN: f64 = 0.75;
pub const DEFAULT_GRID_POINTS: usize = 100;
const Z_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoessCurve {
    pub span: f64,
    pub grid: Vec<f64>,
    pub fit: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Global residual standard deviation used for the band.
    pub residual_sd: f64,
}

fn tricube(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        let t = 1.0 - u * u * u;
        t * t * t
    }
}

/// Equivalent-kernel weights `l` such that the local fit at `x0` is `sum l_i y_i`.
pub fn local_weights(x: &[f64], x0: f64, span: f64) -> Vec<f64> {
    let n = x.len();
    let q = ((span * n as f64).ceil() as usize).clamp(1, n);
    let mut dist: Vec<f64> = x.iter().map(|v| (v - x0).abs()).collect();
    let mut sorted = dist.clone();
    sorted.sort_by(f64::total_cmp);
    let h = sorted[q - 1];
    for d in dist.iter_mut() {
        *d = if h > 0.0 {
            tricube(*d / h)
        } else if *d == 0.0 {
            1.0
        } else {
            0.0
        };
    }
    let w = dist;

    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for (xi, wi) in x.iter().zip(&w) {
        let u = xi - x0;
        s0 += wi;
        s1 += wi * u;
        s2 += wi * u * u;
    }
    let det = s0 * s2 - s1 * s1;
    if det <= 1e-12 * s0 * s2 || det <= 0.0 {
        // all weight on one x value: fall back to a local mean
        return w.iter().map(|wi| wi / s0).collect();
    }
    x.iter()
        .zip(&w)
        .map(|(xi, wi)| wi * (s2 - s1 * (xi - x0)) / det)
        .collect()
}

/// Smooth `(x, y)` and evaluate on `grid_points` equally spaced points over the range of `x`.
pub fn loess(x: &[f64], y: &[f64], span: f64, grid_points: usize) -> Result<LoessCurve> {
    if x.len() != y.len() {
        return Err(Error::schema("loess inputs differ in length"));
    }
    if !(span > 0.0 && span <= 1.0) {
        return Err(Error::domain(format!("loess span must lie in (0, 1], got {span}")));
    }
    if grid_points < 2 {
        return Err(Error::domain("loess grid needs at least two points"));
    }
    let n = x.len();
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if n == 0 || lo == hi {
        return Err(Error::DegenerateInput("loess predictor is constant".into()));
    }

    let dot = |l: &[f64]| l.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let (mut rss, mut trace) = (0.0, 0.0);
    for (i, &xi) in x.iter().enumerate() {
        let l = local_weights(x, xi, span);
        let r = y[i] - dot(&l);
        rss += r * r;
        trace += l[i];
    }
    let residual_sd = (rss / (n as f64 - trace).max(1.0)).sqrt();

    let step = (hi - lo) / (grid_points - 1) as f64;
    let grid: Vec<f64> = (0..grid_points)
        .map(|k| if k + 1 == grid_points { hi } else { lo + step * k as f64 })
        .collect();
    let mut fit = Vec::with_capacity(grid_points);
    let mut se = Vec::with_capacity(grid_points);
    for &g in &grid {
        let l = local_weights(x, g, span);
        fit.push(dot(&l));
        se.push(residual_sd * l.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    let lower = fit.iter().zip(&se).map(|(f, s)| f - Z_95 * s).collect();
    let upper = fit.iter().zip(&se).map(|(f, s)| f + Z_95 * s).collect();
    Ok(LoessCurve {
        span,
        grid,
        fit,
        se,
        lower,
        upper,
        residual_sd,
    })
}
