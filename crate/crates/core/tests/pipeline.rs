use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use intersliceboost::deblur::DeblurConfig;
use intersliceboost::gan::GanConfig;
use intersliceboost::phantom::{PhantomConfig, SplitAssignment};
use intersliceboost::pipeline::report::REPORT_FILES;
use intersliceboost::pipeline::{
    evaluate_and_report, run_pipeline, DataConfig, EvaluationReport, ExperimentConfig, ModelRecord, RunOptions,
    StageKind, StageStatus, StageToggles,
};
use intersliceboost::Error;

fn tiny(out: &Path) -> ExperimentConfig {
    let base = ExperimentConfig::default();
    let mut c = ExperimentConfig {
        output_dir: out.to_path_buf(),
        settings: vec![1],
        data: DataConfig {
            phantom: PhantomConfig {
                num_slices: 9,
                height: 32,
                width: 32,
                boundary_amplitude_px: 1.0,
                drift_max_px: 1.0,
                min_layer_thickness_px: 2,
                ..PhantomConfig::default()
            },
            num_patients: 5,
            dataset_path: None,
        },
        stages: StageToggles {
            interslice_aug: true,
            deblur: true,
            classical_aug: true,
            bilinear_baseline: true,
            gan_reco_baseline: true,
            fully_supervised: true,
        },
        gan: GanConfig {
            encoder_widths: vec![8, 16],
            disc_widths: vec![8, 16],
            max_epochs: 2,
            ..base.gan.clone()
        },
        deblur: DeblurConfig {
            widths: vec![8, 16],
            disc_widths: vec![8, 16],
            max_epochs: 2,
            patience: 1,
            ..base.deblur.clone()
        },
        ..base.clone()
    };
    c.seg.widths = vec![8, 16];
    c.seg.max_epochs = 2;
    c.seg.patience = 1;
    c
}

fn report(out: &Path) -> EvaluationReport {
    serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn tiny_run_is_cached_on_rerun_and_reproducible_elsewhere() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let config = tiny(a.path());

    let first = run_pipeline(&config, &RunOptions::default()).unwrap();
    assert!(first.complete);
    assert!(first.stages.iter().all(|s| s.status == StageStatus::Completed));
    for name in [
        "phantom",
        "split",
        "sparsify-s1",
        "train-gen-s1",
        "fill-s1",
        "train-deblur-s1",
        "deblur-fill-s1",
        "fill-bilinear-s1",
        "gan-reco-s1",
        "train-seg-partial-s1",
        "train-seg-interslice-s1",
        "train-seg-full",
        "eval",
        "report",
    ] {
        assert!(first.stage(name).is_some(), "missing stage {name}");
    }

    let second = run_pipeline(&config, &RunOptions::default()).unwrap();
    assert!(second.all_cached());
    assert_eq!(second.stages.len(), first.stages.len());

    run_pipeline(&tiny(b.path()), &RunOptions::default()).unwrap();
    for f in REPORT_FILES {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs between runs"
        );
    }

    let rep = report(a.path());
    let models = config.setting_models().len();
    assert_eq!(rep.rows.len(), models * config.settings.len() + 1);
    assert_eq!(rep.comparisons_m, models - 1);
    assert!((rep.alpha_adjusted - 0.05 / (models - 1) as f64).abs() < 1e-15);
    let subsets: BTreeSet<&str> = rep.generator.iter().map(|g| g.subset.as_str()).collect();
    assert_eq!(subsets, BTreeSet::from(["A-val", "B"]));
}

#[test]
fn until_stops_early_and_a_later_run_reuses_the_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path());
    let partial = run_pipeline(
        &config,
        &RunOptions {
            until: Some(StageKind::Fill),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert!(!partial.complete);
    assert!(partial.stage("fill-s1").is_some());
    assert!(partial.stage("train-seg-partial-s1").is_none());
    assert!(!dir.path().join("report.csv").exists());

    let full = run_pipeline(&config, &RunOptions::default()).unwrap();
    assert!(full.complete);
    assert_eq!(full.stage("train-gen-s1").unwrap().status, StageStatus::Cached);
    assert_eq!(full.stage("eval").unwrap().status, StageStatus::Completed);
}

#[test]
fn fully_supervised_only_trains_one_model() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        settings: vec![],
        stages: StageToggles {
            interslice_aug: false,
            fully_supervised: true,
            ..StageToggles::default()
        },
        ..tiny(dir.path())
    };
    let manifest = run_pipeline(&config, &RunOptions::default()).unwrap();
    let names: Vec<&str> = manifest.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["phantom", "split", "train-seg-full", "eval", "report"]);
    let rep = report(dir.path());
    assert_eq!(rep.rows.len(), 1);
    assert!(rep.comparisons.is_empty() && rep.generator.is_empty());
}

#[test]
fn contaminated_split_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path());
    run_pipeline(
        &config,
        &RunOptions {
            until: Some(StageKind::Split),
            ..RunOptions::default()
        },
    )
    .unwrap();
    let path = dir.path().join("stages/split/assignment.json");
    let mut asg: SplitAssignment = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    let leaked = asg.test.iter().next().unwrap().clone();
    asg.train.insert(leaked);
    fs::write(&path, serde_json::to_vec(&asg).unwrap()).unwrap();
    let err = run_pipeline(&config, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Leakage(_)), "{err}");
}

#[test]
fn evaluation_refuses_a_model_trained_on_test_patients() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path());
    run_pipeline(&config, &RunOptions::default()).unwrap();
    let asg: SplitAssignment =
        serde_json::from_slice(&fs::read(dir.path().join("stages/split/assignment.json")).unwrap()).unwrap();
    let stacks = intersliceboost::pipeline::load_stacks(&dir.path().join("stages/phantom")).unwrap();
    let split = intersliceboost::pipeline::apply_assignment(&stacks, &asg).unwrap();
    let mut train_patients = asg.train.clone();
    train_patients.extend(asg.test.iter().cloned());
    let record = ModelRecord {
        model: "full".into(),
        setting: None,
        checkpoint: dir.path().join("stages/train-seg-full"),
        train_patients,
    };
    let err = evaluate_and_report(&[record], &split, &[], &config.eval, &asg.train).unwrap_err();
    assert!(matches!(err, Error::Leakage(_)), "{err}");
}
