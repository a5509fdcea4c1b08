use chrono::NaiveTime;
use dynbench::benchmark::{self, SliceStat};
use dynbench::exposure::SliceKey;
use dynbench::geoindex::{self, CellId, GeoPoint, Polyline};
use dynbench::ingest::{self, Severity, SeverityFlags, TimeWindow, Underreporting};
use proptest::prelude::*;

fn point() -> impl Strategy<Value = GeoPoint> {
    (-89.9f64..89.9, -180.0f64..180.0).prop_map(|(lat, lng)| GeoPoint::new(lat, lng).unwrap())
}

fn stats() -> impl Strategy<Value = Vec<SliceStat>> {
    prop::collection::vec(
        (0u32..500, 1e3f64..1e9, prop::option::of(1e-3f64..1e5)),
        1..60,
    )
    .prop_filter_map("needs ADS miles", |rows| {
        if rows.iter().all(|r| r.2.is_none()) {
            return None;
        }
        Some(
            rows.into_iter()
                .enumerate()
                .map(|(i, (c, m, w))| {
                    let key = SliceKey::Cell(CellId::from_face_ij(1, 13, i as u64, 0).unwrap());
                    SliceStat::new(key, c as f64, m, w.unwrap_or(0.0))
                })
                .collect(),
        )
    })
}

proptest! {
    #[test]
    fn cell_contains_its_points(p in point(), level in 0u8..=30) {
        let cell = geoindex::cell_from_point(p, level).unwrap();
        prop_assert_eq!(cell.level(), level);
        let leaf = geoindex::cell_from_point(p, 30).unwrap();
        prop_assert!(cell.contains(&leaf));
        prop_assert_eq!(leaf.ancestor(level), Some(cell));
        prop_assert_eq!(cell.token().parse::<CellId>().unwrap(), cell);
    }

    #[test]
    fn allocation_is_a_partition(a in point(), bearing in 0.0f64..360.0, km in 0.01f64..5.0, step in 1.0f64..50.0) {
        let b = GeoPoint::new(
            (a.lat() + km / 111.0 * bearing.to_radians().cos()).clamp(-89.9, 89.9),
            ((a.lng() + km / 111.0 * bearing.to_radians().sin()) + 540.0).rem_euclid(360.0) - 180.0,
        ).unwrap();
        let alloc = geoindex::allocate_polyline(&Polyline::new(vec![a, b]).unwrap(), 13, step).unwrap();
        prop_assert!((alloc.total() - 1.0).abs() <= 1e-9);
        prop_assert!(alloc.iter().all(|(_, f)| *f > 0.0 && *f <= 1.0 + 1e-12));
    }

    #[test]
    fn haversine_symmetric_and_bounded(a in point(), b in point()) {
        let d = geoindex::haversine_m(a, b);
        prop_assert!((d - geoindex::haversine_m(b, a)).abs() < 1e-6);
        prop_assert!(d <= std::f64::consts::PI * geoindex::EARTH_RADIUS_M + 1e-6);
    }

    #[test]
    fn dynamic_within_slice_rates(s in stats()) {
        let d = benchmark::dynamic_rate(&s).unwrap();
        let live: Vec<f64> = s.iter().filter(|x| x.ads_miles > 0.0).map(|x| x.rate).collect();
        let lo = live.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = live.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= d && d <= hi);
        let e = benchmark::dynamic_rate_from_shares(&s).unwrap();
        prop_assert!((d - e).abs() <= 1e-12 * d.abs().max(e.abs()).max(f64::MIN_POSITIVE));
    }

    #[test]
    fn ads_scale_invariance(s in stats(), k in 1e-3f64..1e3) {
        let scaled: Vec<SliceStat> = s.iter().map(|x| SliceStat::new(x.key, x.crashes, x.human_vmt, x.ads_miles * k)).collect();
        let (a, b) = (benchmark::dynamic_rate(&s).unwrap(), benchmark::dynamic_rate(&scaled).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(f64::MIN_POSITIVE));
    }

    #[test]
    fn flags_always_monotone(i: bool, a: bool, s: bool, f: bool) {
        let flags = SeverityFlags::new(i, a, s, f);
        prop_assert!(flags.is_monotone());
        prop_assert!(flags.police_reported());
        let count = Severity::ALL.iter().filter(|sev| sev.matches(&flags)).count();
        prop_assert!(count >= 1);
    }

    #[test]
    fn windows_partition_the_day(secs in 0u32..86_400) {
        let t = NaiveTime::from_num_seconds_from_midnight_opt(secs, 0).unwrap();
        let w = ingest::time_window(t);
        let start = w.start_secs();
        let idx = TimeWindow::ALL.iter().position(|x| *x == w).unwrap();
        let end = TimeWindow::ALL.get(idx + 1).map_or(86_400 + TimeWindow::ALL[0].start_secs(), |n| n.start_secs());
        let s = if secs < TimeWindow::ALL[0].start_secs() { secs + 86_400 } else { secs };
        prop_assert!(start <= s && s < end);
    }

    #[test]
    fn underreporting_only_touches_injury(count in 0.0f64..1e6, factor in 0.0f64..0.99) {
        let adj = Underreporting { factor, ..Default::default() };
        for sev in Severity::ALL {
            let out = ingest::apply_underreporting(count, sev, &adj).unwrap();
            if sev == Severity::AnyInjury {
                prop_assert!((out - count / (1.0 - factor)).abs() <= 1e-9 * out.max(1.0));
            } else {
                prop_assert_eq!(out, count);
            }
        }
    }
}
