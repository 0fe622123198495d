use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn evtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evtrack"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = evtrack(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = evtrack(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error["), "{err}");
    err
}

struct Lcg(u64);

impl Lcg {
    fn next(&mut self, n: u64) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 33) % n
    }
}

/// Events on a `w x h` sensor from 1 ms on, about 50 us apart.
fn events_csv(w: u64, h: u64, n: usize, seed: u64) -> String {
    let mut rng = Lcg(seed);
    let mut t = 1000;
    let mut rows = vec!["t,x,y,p".to_string()];
    for _ in 0..n {
        t += rng.next(100);
        rows.push(format!("{t},{},{},{}", rng.next(w), rng.next(h), rng.next(2)));
    }
    rows.join("\n")
}

fn labels_csv(w: f64, h: f64, frames: u64) -> String {
    let mut rows = vec!["t,x,y,closed".to_string()];
    for k in 0..frames {
        let closed = (k % 7 == 3) as u8;
        rows.push(format!("{},{:?},{:?},{closed}", k * 10_000, w / 2.0 + k as f64, h / 2.0 - k as f64 * 0.25));
    }
    rows.join("\n")
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// A 80x60 sensor binned at 5 with a matching two-block model.
    fn small() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        fs::write(f.path("e.csv"), events_csv(80, 60, 1500, 7)).unwrap();
        fs::write(f.path("l.csv"), labels_csv(80.0, 60.0, 15)).unwrap();
        let run = json!({
            "width": 80,
            "height": 60,
            "model_config": {
                "input_height": 12,
                "input_width": 16,
                "groups": 2,
                "blocks": [
                    {"channels": 4, "temporal_dws": false, "spatial_dws": false},
                    {"channels": 8, "temporal_dws": true, "spatial_dws": true}
                ],
                "head": {"temporal_dws": true, "spatial_dws": false, "hidden_channels": 6}
            }
        });
        fs::write(f.path("run.json"), run.to_string()).unwrap();
        ok(&["--config", &f.s("run.json"), "init-weights", "--seed", "3", "--out-dir", &f.s("model")]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn read_preds(text: &str) -> Vec<[f64; 4]> {
    text.trim()
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            [v[0], v[1], v[2], v[3]]
        })
        .collect()
}

#[test]
fn bin_writes_full_resolution_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("e.csv");
    fs::write(&events, events_csv(640, 480, 400, 1)).unwrap();
    let out = dir.path().join("t.evt");
    let e = events.to_str().unwrap();
    let o = out.to_str().unwrap();
    ok(&["bin", "--events", e, "--dt-us", "10000", "--downsample", "5", "--mode", "causal", "--out", o]);
    let bytes = fs::read(&out).unwrap();
    assert_eq!(&bytes[..4], b"EVT1");
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    assert_eq!((word(0), word(1), word(3), word(4), word(5)), (1, 2, 96, 128, 10_000));
    assert_eq!(bytes.len(), 32 + 4 * (2 * word(2) * 96 * 128) as usize);

    let again = dir.path().join("t2.evt");
    ok(&["bin", "--events", e, "--out", again.to_str().unwrap()]);
    assert_eq!(fs::read(&again).unwrap(), bytes);

    let direct = dir.path().join("d.evt");
    ok(&["bin", "--events", e, "--mode", "direct", "--out", direct.to_str().unwrap()]);
    assert_ne!(fs::read(&direct).unwrap(), bytes);

    let err = fails(&["bin", "--events", e, "--mode", "sideways", "--out", o]);
    assert!(err.starts_with("error[config]"), "{err}");
}

#[test]
fn bin_reports_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "t,x,y,p\n2000,5,5,1\n1000,5,5,0").unwrap();
    let out = dir.path().join("t.evt");
    let err = fails(&["bin", "--events", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(err.starts_with("error[non-monotonic]") && err.contains("line 3"), "{err}");
    let err = fails(&["bin", "--events", "/nonexistent/e.csv", "--out", out.to_str().unwrap()]);
    assert!(err.starts_with("error[io]"), "{err}");
    assert!(!out.exists());
}

#[test]
fn augment_is_seeded() {
    let f = Fixture::small();
    let (cfg, events, labels) = (f.s("run.json"), f.s("e.csv"), f.s("l.csv"));
    let run = |out: &str, extra: &[&str]| {
        let out = f.s(out);
        let base = ["--config", &cfg, "augment", "--events", &events, "--labels", &labels, "--out-dir", &out];
        ok(&[&base[..], extra].concat());
    };
    run("a", &["--seed", "11"]);
    run("b", &["--seed", "11"]);
    run("c", &["--seed", "12"]);
    for name in ["events.csv", "labels.csv", "mask.csv", "params.json"] {
        assert_eq!(fs::read(f.path("a").join(name)).unwrap(), fs::read(f.path("b").join(name)).unwrap(), "{name}");
    }
    assert_ne!(fs::read(f.path("a/events.csv")).unwrap(), fs::read(f.path("c/events.csv")).unwrap());
}

#[test]
fn augment_identity_and_mask() {
    let f = Fixture::small();
    ok(&[
        "--config", &f.s("run.json"), "augment", "--events", &f.s("e.csv"), "--labels", &f.s("l.csv"),
        "--identity", "--out-dir", &f.s("id"),
    ]);
    assert_eq!(fs::read_to_string(f.path("id/events.csv")).unwrap(), fs::read_to_string(f.path("e.csv")).unwrap());
    assert_eq!(fs::read_to_string(f.path("id/labels.csv")).unwrap(), fs::read_to_string(f.path("l.csv")).unwrap());
    let mask = fs::read_to_string(f.path("id/mask.csv")).unwrap();
    let flags: Vec<&str> = mask.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    let expected: Vec<&str> = (0..15).map(|k| if k % 7 == 3 { "0" } else { "1" }).collect();
    assert_eq!(flags, expected);
    let params = read_json(&f.path("id/params.json"));
    assert_eq!(params["draw"]["flip"], json!(false));

    // tripling the scale about the centre pushes the last pupil off the sensor
    fs::write(
        f.path("zoom.json"),
        json!({"scale_min": 3.0, "scale_max": 3.0, "rotation_deg": 0.0, "translation": 0.0,
               "temporal_scale_min": 1.0, "temporal_scale_max": 1.0, "flip_probability": 0.0}).to_string(),
    )
    .unwrap();
    ok(&[
        "--config", &f.s("run.json"), "augment", "--events", &f.s("e.csv"), "--labels", &f.s("l.csv"),
        "--policy", &f.s("zoom.json"), "--out-dir", &f.s("zoom"),
    ]);
    let zoomed = fs::read_to_string(f.path("zoom/mask.csv")).unwrap();
    let mut expected = mask.clone();
    expected.replace_range(expected.len() - 1.., "0");
    assert_eq!(zoomed, expected);
}

#[test]
fn augment_rejects_bad_policy() {
    let f = Fixture::small();
    fs::write(f.path("p.json"), r#"{"scale_min": 1.5, "scale_max": 0.5}"#).unwrap();
    let err = fails(&[
        "--config", &f.s("run.json"), "augment", "--events", &f.s("e.csv"), "--labels", &f.s("l.csv"),
        "--policy", &f.s("p.json"), "--out-dir", &f.s("x"),
    ]);
    assert!(err.starts_with("error[config]"), "{err}");
}

#[test]
fn infer_modes_agree() {
    let f = Fixture::small();
    let base = ["--config", &f.s("run.json"), "infer", "--model", &f.s("model"), "--events", &f.s("e.csv"), "--stride", "1"];
    let streaming = read_preds(&ok(&[&base[..], &["--streaming"]].concat()));
    let offline = read_preds(&ok(&[&base[..], &["--offline"]].concat()));
    assert_eq!(streaming.len(), offline.len());
    assert!(streaming.len() >= 8, "{}", streaming.len());
    for (a, b) in streaming.iter().zip(&offline) {
        assert_eq!(a[0], b[0]);
        for i in 1..4 {
            // 4-decimal output: allow one unit of rounding on top of 1e-4
            assert!((a[i] - b[i]).abs() <= 1e-4 + 1e-4, "{a:?} vs {b:?}");
        }
        assert!(a[1] >= 0.0 && a[1] <= 80.0 && a[2] >= 0.0 && a[2] <= 60.0);
    }
}

#[test]
fn infer_stride_and_labels() {
    let f = Fixture::small();
    let common = ["--config", &f.s("run.json"), "infer", "--model", &f.s("model"), "--events", &f.s("e.csv")];
    let every = read_preds(&ok(&[&common[..], &["--stride", "1", "--t0-us", "0"]].concat()));
    let fifth = read_preds(&ok(&[&common[..], &["--stride", "5", "--t0-us", "0"]].concat()));
    let times: Vec<f64> = fifth.iter().map(|p| p[0]).collect();
    assert!(times.windows(2).all(|w| w[1] - w[0] == 50_000.0), "{times:?}");
    assert_eq!(fifth.len(), every.len().div_ceil(5));
    for (k, p) in fifth.iter().enumerate() {
        assert_eq!(p, &every[5 * k]);
    }

    let with_labels = read_preds(&ok(&[
        &common[..],
        &["--stride", "1", "--labels", &f.s("l.csv"), "--profile-out", &f.s("prof.json"), "--loss-out", &f.s("loss.json")],
    ]
    .concat()));
    assert_eq!(with_labels.len(), 15);
    let loss = read_json(&f.path("loss.json"));
    assert!(loss["loss"].as_f64().unwrap() > 0.0);
    assert_eq!(loss["valid_frames"], json!(13));
    let prof = read_json(&f.path("prof.json"));
    let fractions = prof["layers"].as_object().unwrap();
    assert_eq!(fractions.len(), 7);
    assert!(fractions.values().all(|v| (0.0..=1.0).contains(&v.as_f64().unwrap())));
}

#[test]
fn infer_rejects_empty_and_mismatched_input() {
    let f = Fixture::small();
    fs::write(f.path("empty.csv"), "t,x,y,p\n").unwrap();
    let err = fails(&["--config", &f.s("run.json"), "infer", "--model", &f.s("model"), "--events", &f.s("empty.csv")]);
    assert!(err.starts_with("error[domain]"), "{err}");
    // default 640x480 sensor does not fit a 12x16 model
    fs::write(f.path("big.csv"), events_csv(640, 480, 50, 2)).unwrap();
    let err = fails(&["infer", "--model", &f.s("model"), "--events", &f.s("big.csv")]);
    assert!(err.starts_with("error[shape]"), "{err}");
}

#[test]
fn eval_scores_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("l.csv");
    fs::write(&labels, "t,x,y,closed\n0,320.0,240.0,0\n10000,160.0,80.0,0\n20000,8.0,8.0,1").unwrap();
    let preds = dir.path().join("p.csv");
    fs::write(&preds, "t,x,y,score\n0,40.0000,30.0000,0.9000\n10000,20.0000,10.0000,0.8000\n20000,70.0000,50.0000,0.7000").unwrap();
    let report: Value = serde_json::from_str(&ok(&["eval", "--preds", preds.to_str().unwrap(), "--labels", labels.to_str().unwrap()])).unwrap();
    assert_eq!(report["p10"], json!(1.0));
    assert_eq!(report["mean_distance"], json!(0.0));
    assert_eq!(report["n_evaluated"], json!(2));

    fs::write(&preds, "t,x,y,score\n0,40.0000,30.0000,0.9000\n10000,40.0000,10.0000,0.8000").unwrap();
    let out = dir.path().join("r.json");
    ok(&["eval", "--preds", preds.to_str().unwrap(), "--labels", labels.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let report = read_json(&out);
    assert_eq!(report["p10"], json!(0.5));
    assert_eq!(report["mean_distance"], json!(10.0));

    fs::write(&preds, "t,x,y,score\n5000,40.0000,30.0000,0.9000").unwrap();
    let err = fails(&["eval", "--preds", preds.to_str().unwrap(), "--labels", labels.to_str().unwrap()]);
    assert!(err.starts_with("error[domain]"), "{err}");
}

#[test]
fn macs_default_and_profiled() {
    let report: Value = serde_json::from_str(&ok(&["macs"])).unwrap();
    let params = report["total_params"].as_f64().unwrap();
    assert!((params - 809_000.0).abs() <= 0.1 * 809_000.0, "{params}");
    let dense = report["total_dense"].as_f64().unwrap();
    assert!((dense - 55.2e6).abs() <= 0.4 * 55.2e6, "{dense}");
    assert!(report["convention"].as_str().unwrap().contains("multiply-accumulate"));

    let f = Fixture::small();
    ok(&[
        "--config", &f.s("run.json"), "infer", "--model", &f.s("model"), "--events", &f.s("e.csv"),
        "--out", &f.s("p.csv"), "--profile-out", &f.s("prof.json"),
    ]);
    let sparse: Value = serde_json::from_str(&ok(&["macs", "--model", &f.s("model"), "--profile", &f.s("prof.json")])).unwrap();
    for layer in sparse["layers"].as_array().unwrap() {
        assert!(layer["sparse"].as_f64().unwrap() <= layer["dense"].as_f64().unwrap());
    }
    assert!(sparse["total_sparse"].as_f64().unwrap() < sparse["total_dense"].as_f64().unwrap());
}

#[test]
fn init_weights_is_deterministic_and_validated() {
    let f = Fixture::small();
    ok(&["--config", &f.s("run.json"), "init-weights", "--seed", "3", "--out-dir", &f.s("again")]);
    ok(&["--config", &f.s("run.json"), "init-weights", "--seed", "4", "--out-dir", &f.s("other")]);
    for name in ["config.json", "manifest.json", "weights.bin"] {
        assert_eq!(fs::read(f.path("model").join(name)).unwrap(), fs::read(f.path("again").join(name)).unwrap());
    }
    assert_ne!(fs::read(f.path("model/weights.bin")).unwrap(), fs::read(f.path("other/weights.bin")).unwrap());

    let manifest = read_json(&f.path("model/manifest.json"));
    let scalars: u64 = manifest
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).product::<u64>())
        .sum();
    assert_eq!(4 * scalars, fs::metadata(f.path("model/weights.bin")).unwrap().len());
    let macs: Value = serde_json::from_str(&ok(&["macs", "--model", &f.s("model")])).unwrap();
    assert_eq!(macs["total_params"].as_u64().unwrap(), scalars);

    fs::write(f.path("bad.json"), r#"{"blocks": [{"channels": 6, "temporal_dws": false, "spatial_dws": false}]}"#).unwrap();
    let err = fails(&["init-weights", "--model-config", &f.s("bad.json"), "--out-dir", &f.s("bad")]);
    assert!(err.starts_with("error[config]"), "{err}");

    let blob = fs::read(f.path("model/weights.bin")).unwrap();
    fs::write(f.path("model/weights.bin"), &blob[..blob.len() - 8]).unwrap();
    let err = fails(&["--config", &f.s("run.json"), "infer", "--model", &f.s("model"), "--events", &f.s("e.csv")]);
    assert!(err.starts_with("error[weights]"), "{err}");
}

#[test]
fn verify_passes_and_catches_centered_window() {
    let f = Fixture::small();
    let args = ["--config", &f.s("run.json"), "verify", "--model", &f.s("model"), "--events", &f.s("e.csv"), "--cuts", "20"];
    ok(&[&args[..], &["--out", &f.s("v.json")]].concat());
    let report = read_json(&f.path("v.json"));
    assert_eq!(report["pass"], json!(true));
    let stages: Vec<&str> = report["equivalence"]["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["stage"].as_str().unwrap())
        .collect();
    assert_eq!(
        stages,
        ["input", "block1.temporal", "block1.spatial", "block2.temporal", "block2.spatial", "head.temporal", "head.spatial", "head.output"]
    );
    assert_eq!(report["causality"]["cut_times"].as_array().unwrap().len(), 20);

    let err = fails(&[&args[..], &["--mutate-centered", "--out", &f.s("m.json")]].concat());
    assert!(err.starts_with("error[verify]"), "{err}");
    let report = read_json(&f.path("m.json"));
    assert_eq!(report["causality"]["pass"], json!(false));
    assert!(!report["causality"]["violations"].as_array().unwrap().is_empty());
}

#[test]
fn config_file_supplies_paths() {
    let f = Fixture::small();
    let mut run = read_json(&f.path("run.json"));
    run["events"] = json!(f.s("e.csv"));
    run["model"] = json!(f.s("model"));
    run["stride"] = json!(3);
    fs::write(f.path("full.json"), run.to_string()).unwrap();
    let preds = read_preds(&ok(&["--config", &f.s("full.json"), "infer", "--t0-us", "0"]));
    assert!(preds.windows(2).all(|w| w[1][0] - w[0][0] == 30_000.0));

    fs::write(f.path("typo.json"), r#"{"strid": 3}"#).unwrap();
    let err = fails(&["--config", &f.s("typo.json"), "macs"]);
    assert!(err.starts_with("error[json]"), "{err}");
}
