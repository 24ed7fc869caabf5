use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Duration;

use pcreg::io::write_freg;
use pcreg::model::Model;
use pcreg::scenes::{dataset_load, dataset_save, generate_scene, ScenePair};
use pcreg::{PointCloud, RigidTransform, Vec3};
use pcreg_cli::report::{read_csv, BenchRow, EpochRow, EvalSummaryRow, SampleRow};
use pcreg_cli::{cmd_bench, cmd_eval, exit, summarize, Settings};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Small scenes and a reduced model so every command runs in seconds.
const SMALL_SCENES: &str = "\
encoder.sa1.num_samples = 256
encoder.sa2.num_samples = 128
encoder.sa3.num_samples = 64
encoder.sa4.num_samples = 32
scene.extent = 40
scene.boxes = 12
scene.cylinders = 8
scene.walls = 3
scene.max_sensor_separation = 5
scene.min_points = 1000
sensor.fans = 16
sensor.horizontal_resolution_deg = 1.0
sensor.max_range = 25
train.epochs = 2
train.batch_size = 2
";

fn pcreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcreg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.cfg");
    fs::write(&p, SMALL_SCENES).unwrap();
    p
}

fn random_weights(dir: &Path) -> PathBuf {
    let model = Model::init(&settings().model, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let p = dir.join("weights.frwt");
    model.save(&p).unwrap();
    p
}

fn settings() -> Settings {
    Settings::parse(SMALL_SCENES).unwrap()
}

#[test]
fn generate_writes_manifest_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = pcreg(&["--config", s(&cfg), "--seed", "5", "generate", "--out", s(out), "--count", "5"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let manifest = fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 12);
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
    let stats: Vec<pcreg_cli::report::StatisticsRow> = read_csv(&a.join("statistics.csv")).unwrap();
    assert_eq!(stats.iter().rfind(|r| r.quantity == "overlap").unwrap().cumulative_fraction, 1.0);
}

#[test]
fn invalid_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "scene.colour = red\n").unwrap();
    let o = pcreg(&["--config", s(&cfg), "generate", "--out", s(&dir.path().join("x")), "--count", "1"]);
    assert_eq!(o.status.code(), Some(exit::INPUT));
    assert!(String::from_utf8_lossy(&o.stderr).contains("scene.colour"));
}

#[test]
fn usage_errors_have_their_own_code() {
    let o = pcreg(&["register"]);
    assert_eq!(o.status.code(), Some(exit::USAGE));
    let help = pcreg(&["--help"]);
    assert!(help.status.success());
    let text = String::from_utf8_lossy(&help.stdout);
    for word in ["generate", "train", "register", "eval", "bench", "--seed", "--config", "--threads"] {
        assert!(text.contains(word), "help lacks {word}");
    }
}

#[test]
fn train_writes_loadable_weights_and_reproducible_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    assert!(pcreg(&["--config", s(&cfg), "--seed", "3", "generate", "--out", s(&data), "--count", "6"]).status.success());
    let mut logs = Vec::new();
    for run in ["r1", "r2"] {
        let w = dir.path().join(format!("{run}.frwt"));
        let log = dir.path().join(format!("{run}.csv"));
        let o = pcreg(&[
            "--config", s(&cfg), "--seed", "1", "--threads", "1", "train", "--dataset", s(&data), "--out", s(&w), "--log", s(&log),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let model = Model::load(&w).unwrap();
        assert_eq!(model.config(), settings().model);
        let rows: Vec<EpochRow> = read_csv(&log).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);
        logs.push(fs::read(&log).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn register_self_is_identity_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let weights = random_weights(dir.path());
    let pair = generate_scene(&settings().scene, 9, "reg").unwrap();
    let cloud = dir.path().join("cloud.freg");
    write_freg(&cloud, &pair.source).unwrap();
    let result = dir.path().join("result.json");
    let args = [
        "--seed", "4", "register", s(&cloud), s(&cloud), "--weights", s(&weights), "--icp", "--output", s(&result),
    ];
    let a = pcreg(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = pcreg(&args);
    assert_eq!(a.stdout, b.stdout);

    let record: serde_json::Value = serde_json::from_slice(&fs::read(&result).unwrap()).unwrap();
    let m: Vec<f64> = record["transform"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let t = RigidTransform::from_row_major(&m).unwrap();
    let id = RigidTransform::identity();
    assert!(pcreg::geometry::translation_error(&t, &id) < 0.01);
    assert!(pcreg::geometry::rotation_error(&t, &id) < 0.1);
    assert!(t.is_valid(1e-6));
    for stage in ["downsample", "encode", "attention", "match", "ransac", "icp"] {
        assert!(record["stage_ms"][stage].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn missing_weights_and_failed_registration_exit_differently() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("tiny.freg");
    let few: Vec<Vec3> = (0..50).map(|i| Vec3::new(i as f64, 0.5 * i as f64, 0.0)).collect();
    write_freg(&cloud, &PointCloud::new(few)).unwrap();
    let missing = pcreg(&["register", s(&cloud), s(&cloud), "--weights", s(&dir.path().join("nope.frwt"))]);
    assert_eq!(missing.status.code(), Some(exit::INPUT));
    let weights = random_weights(dir.path());
    let failed = pcreg(&["register", s(&cloud), s(&cloud), "--weights", s(&weights)]);
    assert_eq!(failed.status.code(), Some(exit::REGISTRATION));
    assert!(String::from_utf8_lossy(&failed.stderr).contains("encode"));
}

fn duplicate_dataset(dir: &Path, overlap: f64) -> PathBuf {
    let base = generate_scene(&settings().scene, 2, "base").unwrap();
    let pairs: Vec<ScenePair> = (0..3)
        .map(|i| ScenePair {
            scene_id: format!("dup_{i}"),
            source: base.source.clone(),
            target: base.source.clone(),
            ground_truth: RigidTransform::identity(),
            overlap,
            separation: 0.0,
        })
        .collect();
    let data = dir.join(format!("dup_{overlap}"));
    dataset_save(&pairs, &data).unwrap();
    data
}

#[test]
fn eval_on_duplicates_has_full_recall_and_consistent_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let weights = random_weights(dir.path());
    let data = duplicate_dataset(dir.path(), 1.0);
    let out = dir.path().join("eval");
    let (rows, summary) = cmd_eval(&settings(), &data, &weights, true, 0, &out).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(summary.len(), 4);
    for bin in &summary {
        assert_eq!(bin.count, 3);
        assert_eq!(bin.recall, Some(1.0));
    }
    let read_rows: Vec<SampleRow> = read_csv(&out.join("samples.csv")).unwrap();
    let read_summary: Vec<EvalSummaryRow> = read_csv(&out.join("summary.csv")).unwrap();
    assert_eq!(read_rows, rows);
    assert_eq!(read_summary, summary);
    assert_eq!(summarize(&read_rows), read_summary);
}

#[test]
fn empty_overlap_bins_are_blank() {
    let dir = tempfile::tempdir().unwrap();
    let weights = random_weights(dir.path());
    let data = duplicate_dataset(dir.path(), 0.45);
    let out = dir.path().join("eval");
    let (_, summary) = cmd_eval(&settings(), &data, &weights, false, 0, &out).unwrap();
    assert_eq!(summary[0].bin, ">0.6");
    assert_eq!(summary[0].count, 0);
    assert_eq!(summary[0].recall, None);
    assert_eq!(summary[0].mte_m, None);
    assert_eq!(summary[2].count, 3);
    let text = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with(">0.6,0,,,,,"), "{text}");
}

#[test]
fn bench_reports_all_stages_and_excludes_loading() {
    let dir = tempfile::tempdir().unwrap();
    let weights = random_weights(dir.path());
    let data = dir.path().join("data");
    let pairs: Vec<ScenePair> = (0..2).map(|i| generate_scene(&settings().scene, 40 + i, format!("b{i}")).unwrap()).collect();
    dataset_save(&pairs, &data).unwrap();

    let rows = cmd_bench(&settings(), || Ok(dataset_load(&data)?), &weights, 3, 0).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.stage.as_str()).collect();
    assert_eq!(names, ["downsample", "encode", "attention", "match", "ransac", "icp", "end_to_end"]);
    assert!(rows.iter().all(|r| r.samples == 6));
    let stage_sum: f64 = rows[..6].iter().map(|r| r.mean_ms).sum();
    let total = rows[6].mean_ms;
    assert!((stage_sum - total).abs() <= 0.1 * total, "stages {stage_sum} vs total {total}");

    let delayed: Vec<BenchRow> = cmd_bench(
        &settings(),
        || {
            std::thread::sleep(Duration::from_secs(1));
            Ok(dataset_load(&data)?)
        },
        &weights,
        3,
        0,
    )
    .unwrap();
    // a one-second load delay must not show up in any per-registration timing
    assert!(delayed[6].mean_ms < total + 500.0, "{} vs {}", delayed[6].mean_ms, total);
    assert!(delayed.iter().all(|r| r.mean_ms < 1000.0));
}
