use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dynbench::synth::{self, AdsProfile, Anchor, SeverityProbs, SynthSpec};
use serde_json::Value;

fn dynbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynbench"))
        .args(args)
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

struct County {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl County {
    fn new() -> Self {
        let spec = SynthSpec {
            seed: 21,
            level: 13,
            anchor: Anchor {
                lat: 37.76,
                lng: -122.44,
            },
            grid_cols: None,
            rates: vec![1e-6, 4e-6, 2e-6, 6e-6, 3e-6, 1e-6],
            human_vmt: vec![3e8, 1e8, 2e8, 5e7, 1e8, 2e8],
            ads: AdsProfile::PerSlice {
                miles: vec![100.0, 900.0, 300.0, 700.0, 0.0, 200.0],
                fleet_tag: Some("a".into()),
            },
            ads_record_miles: 5.0,
            severity_probs: SeverityProbs {
                any_injury: 0.4,
                airbag: 0.1,
                serious_plus: 0.1,
                fatal: 0.02,
            },
            start: "2023-03-01T00:00:00".into(),
            ads_step_secs: 1800,
        };
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        synth::generate(&spec).unwrap().write_to(&root).unwrap();
        std::fs::write(
            root.join("spec.json"),
            serde_json::to_string(&spec).unwrap(),
        )
        .unwrap();
        County { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn inputs(&self) -> Vec<String> {
        [
            "--crashes",
            "crashes.csv",
            "--segments",
            "segments.geojson",
            "--ads",
            "ads.csv",
        ]
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if i % 2 == 1 {
                self.path(s).to_str().unwrap().to_string()
            } else {
                s.to_string()
            }
        })
        .collect()
    }

    fn run(&self, command: &str, extra: &[&str]) -> Output {
        let mut args: Vec<String> = vec![command.to_string()];
        args.extend(self.inputs());
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        dynbench(&refs)
    }
}

#[test]
fn missing_input_exits_2() {
    let out = dynbench(&[
        "benchmark",
        "--crashes",
        "/nonexistent.csv",
        "--segments",
        "/x.geojson",
        "--ads",
        "/y.csv",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    assert_eq!(dynbench(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dynbench(&["--help"]).status.code(), Some(0));
}

#[test]
fn injury_adjustment_is_applied_and_echoed() {
    let c = County::new();
    let out = c.path("inj.json");
    let res = c.run(
        "benchmark",
        &["--severity", "any_injury", "--no-ci", "--out", p(&out)],
    );
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let doc = read_json(&out);
    assert_eq!(doc["severity"], "any_injury");
    assert_eq!(doc["config_echo"]["underreporting"]["factor"], 0.32);
    assert_eq!(doc["config_echo"]["underreporting"]["formula"], "divide");
    let raw = doc["diagnostics"]["raw_crashes"].as_f64().unwrap();
    let total = doc["total_crashes"].as_f64().unwrap();
    assert!((total - raw / 0.68).abs() <= 1e-5 * total);
    assert!(doc["ci"].is_null());
    assert!(doc["input_digests"]["crashes"]
        .as_str()
        .unwrap()
        .starts_with("sha256:"));
}

#[test]
fn several_severities_give_an_array() {
    let c = County::new();
    let out = c.path("multi.json");
    assert!(c
        .run(
            "benchmark",
            &[
                "--severity",
                "police_reported,serious_plus",
                "--n",
                "200",
                "--out",
                p(&out)
            ]
        )
        .status
        .success());
    let doc = read_json(&out);
    let arr = doc.as_array().unwrap();
    assert_eq!(arr.len(), 2);
    assert_eq!(arr[1]["severity"], "serious_plus");
    let (lo, hi) = (
        arr[0]["ci"]["lo"].as_f64().unwrap(),
        arr[0]["ci"]["hi"].as_f64().unwrap(),
    );
    let m = arr[0]["multiplier"].as_f64().unwrap();
    assert!(lo <= m && m <= hi);
}

#[test]
fn heatmap_shares_sum_to_one() {
    let c = County::new();
    let out = c.path("heat.csv");
    let res = c.run("heatmap", &["--out", p(&out)]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    assert_eq!(
        rdr.headers().unwrap(),
        vec!["cell", "lat", "lng", "f_h", "f_w", "rate_ipmm"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    for col in [3, 4] {
        let sum: f64 = rows.iter().map(|r| r[col].parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() <= 1e-9, "column {col} sums to {sum}");
    }
    let meta = read_json(Path::new(&format!("{}.meta.json", out.display())));
    assert_eq!(meta["cells"], 6);
    assert!(meta["config_echo"].is_object());
}

#[test]
fn timeline_at_total_matches_benchmark() {
    let c = County::new();
    let bench = c.path("bench.json");
    assert!(c
        .run("benchmark", &["--no-ci", "--out", p(&bench)])
        .status
        .success());
    let line = c.path("line.json");
    let res = c.run(
        "timeline",
        &["--checkpoints", "2200", "--no-ci", "--out", p(&line)],
    );
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let b = read_json(&bench);
    let t = read_json(&line);
    assert_eq!(b["m_w_miles"], 2200.0);
    assert_eq!(t["points"][0]["multiplier"], b["multiplier"]);

    let res = c.run("timeline", &["--checkpoints", "500,1000,9999", "--no-ci"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn strict_mode_exits_3_on_excluded_miles() {
    let c = County::new();
    let ads = std::fs::read_to_string(c.path("ads.csv")).unwrap();
    std::fs::write(
        c.path("ads.csv"),
        format!("{ads}40.0,-100.0,50,2024-01-01T00:00:00,a\n"),
    )
    .unwrap();
    let out = c.path("strict.json");
    let res = c.run("benchmark", &["--no-ci", "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&res.stderr).contains("warning"));
    let res = c.run("benchmark", &["--no-ci", "--strict", "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(3));
    let doc = read_json(&out);
    assert_eq!(doc["diagnostics"]["exclusion_warning"], true);
    assert_eq!(doc["diagnostics"]["excluded_ads_miles"], 50.0);
}

#[test]
fn buckets_and_bootstrap_outputs() {
    let c = County::new();
    let out = c.path("b.json");
    assert!(c
        .run("buckets", &["--buckets", "3", "--out", p(&out)])
        .status
        .success());
    let doc = read_json(&out);
    let buckets = doc["buckets"].as_array().unwrap();
    assert_eq!(buckets.len(), 3);
    let share: f64 = buckets
        .iter()
        .map(|b| b["human_share"].as_f64().unwrap())
        .sum();
    assert!((share - 1.0).abs() < 1e-5);
    assert_eq!(doc["weighting"], "human_vmt");

    let res = c.run("buckets", &["--buckets", "50"]);
    assert_eq!(res.status.code(), Some(2));

    let out = c.path("boot.json");
    assert!(c
        .run(
            "bootstrap",
            &["--statistic", "dynamic", "--n", "300", "--out", p(&out)]
        )
        .status
        .success());
    let doc = read_json(&out);
    assert_eq!(doc["unit"], "ipmm");
    assert_eq!(doc["replicates_used"], 300);
    assert!(doc["lo"].as_f64().unwrap() <= doc["hi"].as_f64().unwrap());
}

#[test]
fn config_file_is_echoed_and_overridden() {
    let c = County::new();
    let cfg = c.path("run.json");
    std::fs::write(&cfg, r#"{"bootstrap": {"n_replicates": 150, "seed": 8}, "underreporting": {"factor": 0.25, "formula": "multiply"}}"#).unwrap();
    let out = c.path("cfg.json");
    assert!(c
        .run(
            "benchmark",
            &["--config", p(&cfg), "--seed", "9", "--out", p(&out)]
        )
        .status
        .success());
    let echo = &read_json(&out)["config_echo"];
    assert_eq!(echo["bootstrap"]["n_replicates"], 150);
    assert_eq!(echo["bootstrap"]["seed"], 9);
    assert_eq!(echo["underreporting"]["formula"], "multiply");

    std::fs::write(&cfg, r#"{"bogus": 1}"#).unwrap();
    assert_eq!(
        c.run("benchmark", &["--config", p(&cfg)]).status.code(),
        Some(2)
    );
}

#[test]
fn fleet_subset_changes_only_ads_side() {
    let c = County::new();
    let out = c.path("fleet.json");
    let res = c.run("benchmark", &["--fleet-tag", "nope"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(c
        .run(
            "benchmark",
            &["--fleet-tag", "a", "--no-ci", "--out", p(&out)]
        )
        .status
        .success());
    assert_eq!(read_json(&out)["config_echo"]["fleet_tag"], "a");
}

#[test]
fn timeofday_from_raw_crashes() {
    let c = County::new();
    let shares = c.path("shares.csv");
    std::fs::write(
        &shares,
        "window,human_vmt_share\nEarly Morning,0.05\nMorning Commute,0.2\nLate Morning & Early Afternoon,0.35\nLate Afternoon,0.2\nEvening & Overnight,0.2\n",
    )
    .unwrap();
    let out = c.path("tod.json");
    let res = dynbench(&[
        "timeofday",
        "--crashes",
        p(&c.path("crashes.csv")),
        "--shares",
        p(&shares),
        "--ads",
        p(&c.path("ads.csv")),
        "--calibration-target",
        "1e9",
        "--n",
        "200",
        "--out",
        p(&out),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let doc = read_json(&out);
    assert_eq!(doc["config_echo"]["dimension"], "temporal");
    assert_eq!(doc["slice_count"], 5);
    assert_eq!(doc["m_h_miles"], 1e9);
}

#[test]
fn ingest_normalizes_switrs() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("switrs.csv");
    std::fs::write(
        &raw,
        "collision_severity,victim_safety_equip_1,victim_safety_equip_2,party_safety_equip_1,party_safety_equip_2,lat,lng,occurred_at\n\
         K,-,-,-,-,37.77,-122.41,2023-01-01 04:00\n\
         B,L,-,-,-,,,2023-01-01 05:00\n\
         O,-,-,M,-,37.75,-122.45,2023-01-02 18:30\n",
    )
    .unwrap();
    let out = dir.path().join("canonical.csv");
    let report = dir.path().join("report.json");
    let res = dynbench(&[
        "ingest",
        "--crashes",
        p(&raw),
        "--crash-format",
        "switrs",
        "--out",
        p(&out),
        "--report",
        p(&report),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let doc = read_json(&report);
    assert_eq!(
        (
            doc["input_rows"].as_u64(),
            doc["kept"].as_u64(),
            doc["missing_location"].as_u64()
        ),
        (Some(3), Some(2), Some(1))
    );
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "crash_id,lat,lng,occurred_at,source,is_surface_street,is_passenger_vehicle,any_injury,airbag,serious_plus,fatal");
    assert!(lines
        .next()
        .unwrap()
        .ends_with("true,true,true,false,true,true"));

    let res = dynbench(&["ingest", "--crashes", p(&raw), "--crash-format", "adot"]);
    assert_eq!(res.status.code(), Some(2));
}
