use coverbias::bias::coverage_bias;
use coverbias::geometry::square;
use coverbias::homeloc::{detect_home, HomeRule, TileKey};
use coverbias::ingest::{Area, AreaSet, CountTable, Ping};
use coverbias::spatial::{build_weights, morans_i, Scheme};
use proptest::prelude::*;

fn grid(rows: usize, cols: usize) -> AreaSet {
    let mut v = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let id = format!("g{r}_{c}");
            v.push(Area::new(id.clone(), id, square(c as f64, r as f64, 1.0)).unwrap());
        }
    }
    AreaSet::new(v).unwrap()
}

fn ping_strategy() -> impl Strategy<Value = Vec<Ping>> {
    prop::collection::vec((0i64..86_400, -0.5f64..3.5, 0.05f64..2.95), 0..30).prop_map(|v| {
        v.into_iter()
            .map(|(t, lon, lat)| Ping {
                device_id: "d".into(),
                timestamp: 1_600_000_000 - 1_600_000_000 % 86_400 + t,
                lon,
                lat,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn quadkey_round_trips(level in 1u8..=23, fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
        let side = 1u64 << level;
        let x = ((fx * side as f64) as u64).min(side - 1) as u32;
        let y = ((fy * side as f64) as u64).min(side - 1) as u32;
        let key = TileKey::new(level, x, y).unwrap();
        let qk = key.quadkey();
        prop_assert_eq!(qk.len(), level as usize);
        prop_assert_eq!(TileKey::from_quadkey(&qk).unwrap(), key);
    }

    #[test]
    fn home_ignores_ping_order(pings in ping_strategy(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let areas = grid(3, 3);
        let rule = HomeRule::default();
        let mut shuffled = pings.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(detect_home(&pings, &areas, &rule), detect_home(&shuffled, &areas, &rule));
    }

    #[test]
    fn stricter_rules_never_add_homes(pings in ping_strategy(), lo in 0.0f64..0.9, extra in 0.0f64..0.5, m in 1u32..5) {
        let areas = grid(3, 3);
        let loose = HomeRule { modal_share_threshold: lo, min_night_pings: m, ..HomeRule::default() };
        let strict_share = HomeRule { modal_share_threshold: (lo + extra).min(0.999), ..loose };
        let strict_count = HomeRule { min_night_pings: m + 1, ..loose };
        let base = detect_home(&pings, &areas, &loose).home;
        if base.is_none() {
            prop_assert!(detect_home(&pings, &areas, &strict_share).home.is_none());
            prop_assert!(detect_home(&pings, &areas, &strict_count).home.is_none());
        }
        if let Some(h) = detect_home(&pings, &areas, &strict_share).home {
            prop_assert_eq!(Some(h), base);
        }
    }

    #[test]
    fn coverage_is_scale_free(rows in prop::collection::vec((1.0f64..1e6, 0.0f64..2.0), 1..20), k in 0.001f64..1000.0) {
        let mut census = CountTable::new("census");
        let mut src = CountTable::new("s");
        let mut census_k = CountTable::new("census");
        let mut src_k = CountTable::new("s");
        for (i, (pop, rate)) in rows.iter().enumerate() {
            let id = format!("a{i}");
            census.insert(id.clone(), *pop).unwrap();
            src.insert(id.clone(), pop * rate).unwrap();
            census_k.insert(id.clone(), pop * k).unwrap();
            src_k.insert(id, pop * rate * k).unwrap();
        }
        let a = coverage_bias(&src, &census).unwrap();
        let b = coverage_bias(&src_k, &census_k).unwrap();
        for (x, y) in a.rows.values().zip(b.rows.values()) {
            prop_assert!((x.coverage - y.coverage).abs() <= 1e-9 * x.coverage.abs().max(1.0));
            prop_assert!((x.bias + x.coverage - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn morans_affine_invariant(v in prop::collection::vec(-100.0f64..100.0, 16), a in 0.01f64..100.0, b in -1e3f64..1e3, neg in any::<bool>()) {
        let areas = grid(4, 4);
        let w = build_weights(&areas, Scheme::Queen, true).unwrap();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(hi - lo > 1e-3);
        let a = if neg { -a } else { a };
        let t: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        let i0 = morans_i(&v, &w).unwrap();
        let i1 = morans_i(&t, &w).unwrap();
        prop_assert!((i0 - i1).abs() < 1e-10, "{} vs {}", i0, i1);
    }
}
