use std::collections::{BTreeMap, HashMap};

use chrono::NaiveDate;
use coverbias::boost::{fit, BoostParams, Dataset};
use coverbias::explain::tree_shap;
use coverbias::geometry::{haversine_km, square};
use coverbias::homeloc::{
    aggregate_homes, detect_homes, tile_center, window_average_counts, HomeRule, TileCountRecord, TileKey, TimeWindow,
};
use coverbias::ingest::{Area, AreaSet, Ping, PingStream};
use coverbias::loess::{loess, local_weights};
use coverbias::spatial::{build_weights, morans_i, permutation_test, Alternative, Scheme};
use coverbias::synth::{morans_naive, shapley_bruteforce};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(rows: usize, cols: usize, size: f64) -> AreaSet {
    let mut v = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let id = format!("g{r}_{c}");
            v.push(Area::new(id.clone(), id, square(c as f64 * size, r as f64 * size, size)).unwrap());
        }
    }
    AreaSet::new(v).unwrap()
}

fn random_ensemble_case(rng: &mut ChaCha8Rng) -> (Dataset, BoostParams) {
    let f = rng.random_range(2..=8);
    let n = 80;
    let features: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..f).map(|_| (rng.random_range(0..20) as f64) / 4.0).collect())
        .collect();
    let targets = features
        .iter()
        .map(|x| x[0] * x[0] - 2.0 * x[1] + if f > 2 && x[2] > 2.0 { 3.0 } else { 0.0 } + rng.random_range(-0.5..0.5))
        .collect();
    let data = Dataset::new(
        (0..n).map(|i| format!("r{i}")).collect(),
        (0..f).map(|k| format!("f{k}")).collect(),
        features,
        targets,
    )
    .unwrap();
    let params = BoostParams {
        learning_rate: [0.05, 0.1, 0.3][rng.random_range(0..3)],
        max_depth: rng.random_range(1..=4),
        n_rounds: rng.random_range(1..=20),
        subsample: if rng.random_bool(0.5) { 0.8 } else { 1.0 },
        lambda_l2: [1.0, 10.0][rng.random_range(0..2)],
        alpha_l1: [0.0, 1.0][rng.random_range(0..2)],
        seed: rng.random(),
        ..Default::default()
    };
    (data, params)
}

#[test]
fn tree_shap_matches_subset_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let (data, params) = random_ensemble_case(&mut rng);
        let model = fit(&data, &params).unwrap();
        let rows: Vec<Vec<f64>> = data.features.iter().take(6).cloned().collect();
        let ids: Vec<String> = data.ids.iter().take(6).cloned().collect();
        let shap = tree_shap(&model, &ids, &rows).unwrap();
        assert!(shap.local_accuracy_error() < 1e-9);
        for (r, row) in rows.iter().enumerate() {
            let oracle = shapley_bruteforce(&model, row).unwrap();
            for (a, b) in shap.values[r].iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn unused_feature_gets_zero() {
    let n = 60;
    let features: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, 7.0, (i % 5) as f64]).collect();
    let targets: Vec<f64> = features.iter().map(|x| x[0].sqrt() + x[2]).collect();
    let data = Dataset::new(
        (0..n).map(|i| i.to_string()).collect(),
        vec!["a".into(), "dummy".into(), "c".into()],
        features,
        targets,
    )
    .unwrap();
    let model = fit(&data, &BoostParams::default()).unwrap();
    let shap = tree_shap(&model, &data.ids, &data.features).unwrap();
    assert!(shap.values.iter().all(|r| r[1] == 0.0));
}

#[test]
fn morans_fast_equals_naive_on_grid() {
    let areas = grid(10, 10, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for scheme in [Scheme::Queen, Scheme::Knn { k: 8 }, Scheme::DistanceBand { km: None }] {
        let w = build_weights(&areas, scheme, true).unwrap();
        for _ in 0..100 {
            let v: Vec<f64> = (0..100).map(|_| rng.random_range(-50.0..150.0)).collect();
            let a = morans_i(&v, &w).unwrap();
            let b = morans_naive(&v, &w).unwrap();
            assert!((a - b).abs() < 1e-12, "{scheme}: {a} vs {b}");
        }
    }
}

#[test]
fn knn_matches_sorted_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let areas: Vec<Area> = (0..40)
        .map(|i| {
            let id = format!("a{i}");
            let geom = square(rng.random_range(-3.0..3.0), rng.random_range(50.0..55.0), 0.01);
            Area::new(id.clone(), id, geom).unwrap()
        })
        .collect();
    let areas = AreaSet::new(areas).unwrap();
    let k = 5;
    let w = build_weights(&areas, Scheme::Knn { k }, false).unwrap();
    let c: Vec<[f64; 2]> = areas.areas().iter().map(|a| a.centroid).collect();
    for i in 0..c.len() {
        let mut others: Vec<(f64, usize)> = (0..c.len()).filter(|&j| j != i).map(|j| (haversine_km(c[i], c[j]), j)).collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut expect: Vec<usize> = others[..k].iter().map(|p| p.1).collect();
        expect.sort();
        let mut got: Vec<usize> = w.row(i).iter().map(|e| e.0).collect();
        got.sort();
        assert_eq!(got, expect);
    }
}

#[test]
fn window_average_matches_per_tile_mean() {
    let level = 12;
    let keys = [
        TileKey::containing(-0.12, 51.50, level).unwrap(),
        TileKey::containing(-0.05, 51.52, level).unwrap(),
        TileKey::containing(0.30, 51.55, level).unwrap(),
    ];
    // one area around the first two tiles, one around the third
    let areas = AreaSet::new(vec![
        Area::new("west", "west", square(-0.2, 51.4, 0.2)).unwrap(),
        Area::new("east", "east", square(0.2, 51.4, 0.2)).unwrap(),
    ])
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut records = Vec::new();
    let mut oracle: HashMap<usize, Vec<f64>> = HashMap::new();
    for day in 1..=7 {
        let date = NaiveDate::from_ymd_opt(2020, 3, day).unwrap();
        for (t, key) in keys.iter().enumerate() {
            if t == 1 && day % 3 == 0 {
                continue;
            }
            let count = rng.random_range(10..500) as f64;
            oracle.entry(t).or_default().push(count);
            records.push(TileCountRecord {
                date,
                window: TimeWindow::W2,
                tile: *key,
                count,
            });
            records.push(TileCountRecord {
                date,
                window: TimeWindow::W1,
                tile: *key,
                count: 1e6,
            });
        }
    }
    let mean = |t: usize| oracle[&t].iter().sum::<f64>() / oracle[&t].len() as f64;
    let agg = window_average_counts(&records, TimeWindow::W2, &areas, "fb").unwrap();
    for key in &keys {
        let (lon, lat) = tile_center(key);
        assert!(areas.locate([lon, lat]).is_some());
    }
    assert!((agg.table.get("west").unwrap() - (mean(0) + mean(1))).abs() < 1e-9);
    assert!((agg.table.get("east").unwrap() - mean(2)).abs() < 1e-9);
    assert!(agg.dropped_tiles.is_empty());
}

#[test]
fn home_counts_match_group_by() {
    let areas = grid(5, 5, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let night = 1_583_020_800 + 23 * 3600;
    let mut assigned: HashMap<String, String> = HashMap::new();
    let mut pings = Vec::new();
    for d in 0..10_000 {
        let device = format!("dev{d}");
        let a = &areas.areas()[rng.random_range(0..areas.len())];
        for k in 0..3 {
            pings.push(Ping {
                device_id: device.clone(),
                timestamp: night + k * 600,
                lon: a.bbox.min_lon + rng.random_range(0.01..0.09),
                lat: a.bbox.min_lat + rng.random_range(0.01..0.09),
            });
        }
        assigned.insert(device, a.id.clone());
    }
    let det = detect_homes(&PingStream { pings }, &areas, &HomeRule::default());
    let table = aggregate_homes(&det.homes, &areas, "app").unwrap();
    let mut oracle: BTreeMap<&str, f64> = BTreeMap::new();
    for area in assigned.values() {
        *oracle.entry(area.as_str()).or_default() += 1.0;
    }
    for id in areas.ids() {
        assert_eq!(table.get(id).unwrap(), oracle.get(id).copied().unwrap_or(0.0));
    }
}

#[test]
fn loess_full_span_is_global_weighted_fit() {
    let x: Vec<f64> = (0..40).map(|i| i as f64 * 0.25).collect();
    let y: Vec<f64> = x.iter().map(|v| v * v - 3.0 * v).collect();
    let curve = loess(&x, &y, 1.0, 100).unwrap();
    let h = |x0: f64| x.iter().map(|v| (v - x0).abs()).fold(0.0, f64::max);
    for (g, fit) in curve.grid.iter().zip(&curve.fit) {
        let hh = h(*g);
        let w: Vec<f64> = x
            .iter()
            .map(|v| {
                let u = (v - g).abs() / hh;
                if u < 1.0 {
                    (1.0 - u.powi(3)).powi(3)
                } else {
                    0.0
                }
            })
            .collect();
        // normal equations for [1, x]
        let (mut a, mut b, mut c, mut p, mut q) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..x.len() {
            a += w[i];
            b += w[i] * x[i];
            c += w[i] * x[i] * x[i];
            p += w[i] * y[i];
            q += w[i] * x[i] * y[i];
        }
        let det = a * c - b * b;
        let beta0 = (c * p - b * q) / det;
        let beta1 = (a * q - b * p) / det;
        assert!((fit - (beta0 + beta1 * g)).abs() < 1e-9);
    }
    let s: f64 = local_weights(&x, 3.3, 1.0).iter().sum();
    assert!((s - 1.0).abs() < 1e-12);
}

#[test]
fn planted_gradient_is_significant() {
    let areas = grid(10, 10, 0.1);
    let w = build_weights(&areas, Scheme::Queen, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v: Vec<f64> = (0..100).map(|i| (i / 10 + i % 10) as f64 + rng.random_range(-1.0..1.0)).collect();
    let r = permutation_test(&v, &w, 999, 42, Alternative::Greater).unwrap();
    assert!(r.p_value <= 0.01);
    assert!(r.i > 0.5);
}
