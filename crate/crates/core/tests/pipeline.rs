use nalgebra::Vector3;

use neuralfly::bench::{run_pipeline, ExperimentConfig, TrackingReport};
use neuralfly::control::ControllerKind;
use neuralfly::daiml::TrainingLog;
use neuralfly::data::{collect, load_dataset, CollectConfig};
use neuralfly::wind::WindCondition;

fn winds(speeds: &[f64]) -> Vec<WindCondition<f64>> {
    speeds
        .iter()
        .enumerate()
        .map(|(k, &s)| WindCondition::constant(Vector3::new(s, 0.0, 0.0), k).unwrap())
        .collect()
}

// The stencil spans the kinks of the held command, so labels are only as
// good as the 50 Hz differentiation allows.
#[test]
fn noise_free_labels_track_the_true_residual() {
    let mut config = CollectConfig::default();
    config.residual.noise_sigma = 0.0;
    let ds = collect(&winds(&[0.0, 6.1]), 30.0, &config, 3).unwrap();
    let mut worst: f64 = 0.0;
    let mut sq = 0.0;
    let mut n = 0.0;
    for s in ds.subdatasets.iter().flatten() {
        let e = Vector3::from(s.y) - Vector3::from(s.f_true);
        worst = worst.max(e.amax());
        sq += e.norm_squared();
        n += 1.0;
    }
    let rms = (sq / n).sqrt();
    assert!(rms < 0.02, "rms {rms}");
    assert!(worst < 0.25, "worst {worst}");
}

fn small_config(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        controllers: vec![ControllerKind::Nf, ControllerKind::Baseline],
        seeds: vec![0, 1],
        laps: 1,
        ..ExperimentConfig::default()
    };
    cfg.winds.truncate(2);
    cfg.training.winds = vec![0.0, 3.0, 6.0];
    cfg.training.duration_s = 20.0;
    cfg.training.validation_duration_s = 8.0;
    cfg.training.daiml.epochs = 3;
    cfg.output.dir = dir.to_path_buf();
    cfg.output.telemetry = true;
    cfg
}

#[test]
fn small_pipeline_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = run_pipeline(&cfg).unwrap();

    let train = load_dataset(&dir.path().join("data/train")).unwrap();
    assert_eq!(train.num_conditions(), 3);
    assert_eq!(train.len(), 3 * 20 * 50);

    let log = TrainingLog::read_csv(std::fs::File::open(dir.path().join("training_log.csv")).unwrap()).unwrap();
    assert_eq!(Some(&log), out.training_log.as_ref());
    assert_eq!(log.records.len(), 4);
    assert!(dir.path().join("phi.json").is_file());

    let csv = std::fs::read_to_string(&out.report_csv).unwrap();
    let report = TrackingReport::from_csv(&csv).unwrap();
    assert_eq!(report, out.report);
    assert_eq!(report.cells.len(), 2 * 2 * 2);
    assert_eq!(report.failures().count(), 0);

    let telemetry = std::fs::read_dir(dir.path().join("telemetry")).unwrap().count();
    assert_eq!(telemetry, 8);
    let txt = std::fs::read_to_string(&out.report_txt).unwrap();
    assert!(txt.contains("| nf |") && txt.contains("| baseline |"));
}

#[test]
fn reusing_a_checkpoint_skips_training() {
    let dir = tempfile::tempdir().unwrap();
    let first = run_pipeline(&small_config(&dir.path().join("a"))).unwrap();

    let mut cfg = small_config(&dir.path().join("b"));
    cfg.output.checkpoint = Some(dir.path().join("a/phi.json"));
    let second = run_pipeline(&cfg).unwrap();
    assert!(second.training_log.is_none());
    assert!(!dir.path().join("b/data").exists());
    assert_eq!(first.report, second.report);
}
