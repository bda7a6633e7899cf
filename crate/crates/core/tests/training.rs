use flexmol::featurize::featurize;
use flexmol::finetune::{finetune, FinetuneConfig, Task, HEAD_W};
use flexmol::model::{forward_stage2, Branch, ModelConfig};
use flexmol::molio::collate;
use flexmol::pretrain::{run_stage1, run_stage2, Checkpoint, RunOptions, TrainConfig};
use flexmol::synth::toy_molecules;

fn small_run() -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        f: 1,
        ..ModelConfig::tiny()
    };
    let train = TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        epochs_stage1: 3,
        epochs_stage2: 3,
        deterministic: true,
        ..TrainConfig::default()
    };
    (model, train)
}

fn stage1_checkpoint() -> Checkpoint {
    let (model, train) = small_run();
    run_stage1(&toy_molecules(8, 21), &model, &train, &RunOptions::default())
        .unwrap()
        .checkpoint
}

#[test]
fn metrics_log_has_one_line_per_step() {
    let (model, train) = small_run();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("metrics.jsonl");
    let ckpt = dir.path().join("s1.ckpt");
    let opts = RunOptions {
        metrics_path: Some(log.clone()),
        checkpoint_path: Some(ckpt.clone()),
        cache: None,
    };
    let out = run_stage1(&toy_molecules(8, 21), &model, &train, &opts).unwrap();
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), out.reports.len());
    assert_eq!(lines.len(), 6);
    for (k, line) in lines.iter().enumerate() {
        assert_eq!(line["step"], k);
        assert!(line["wallclock"].is_null());
        for term in ["cl", "ra", "c", "atom", "pos", "spd"] {
            assert!(line["terms"][term].is_f64(), "missing {term}");
        }
    }
    let saved = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(saved.params, out.checkpoint.params);
    assert_eq!((saved.stage, saved.step), (1, 6));
}

#[test]
fn stage2_freezes_the_opposite_feature_learner_on_both_paths() {
    let s1 = stage1_checkpoint();
    let (_, train) = small_run();
    let data = toy_molecules(8, 22);
    for (branch, frozen, unused) in [(Branch::TwoD, "fl_3d.", "fl_2d."), (Branch::ThreeD, "fl_2d.", "fl_3d.")] {
        let out = run_stage2(&data, &s1, branch, &train, &RunOptions::default()).unwrap();
        assert_eq!(out.reports.len(), 6);
        let mut unused_moved = false;
        for (name, t) in s1.params.iter() {
            let after = out.checkpoint.params.get(name).unwrap();
            if name.starts_with(frozen) {
                assert_eq!(after, t, "{name} moved on the {} path", branch.tag());
            } else if name.starts_with(unused) {
                unused_moved |= after != t;
            }
        }
        assert!(!unused_moved, "the unused feature learner receives no gradient");
        assert!(out.reports.iter().all(|r| r.total.is_finite()));
        assert!(out.reports.iter().all(|r| !r.terms.contains_key("cl")));
        let single = match branch {
            Branch::TwoD => data[0].without_3d(),
            Branch::ThreeD => data[0].without_2d(),
        };
        let rec = collate(&[featurize(&single, &s1.config.features, 0).unwrap()])
            .unwrap()
            .records
            .remove(0);
        let o = forward_stage2(&out.checkpoint.params.bind_with(|_| false), &rec, branch, &s1.config).unwrap();
        assert!(o.s_l.value().all_finite() && o.atom_logits.value().all_finite());
    }
}

#[test]
fn stage2_rejects_fresh_checkpoints_and_missing_modalities() {
    let (model, train) = small_run();
    let fresh = Checkpoint {
        config: model.clone(),
        params: flexmol::model::ParamStore::init(&model, 0).unwrap(),
        stage: 0,
        step: 0,
    };
    let data = toy_molecules(4, 23);
    assert!(run_stage2(&data, &fresh, Branch::TwoD, &train, &RunOptions::default()).is_err());
    let s1 = stage1_checkpoint();
    let graphs_only: Vec<_> = data.iter().map(|m| m.without_3d()).collect();
    assert!(run_stage2(&graphs_only, &s1, Branch::ThreeD, &train, &RunOptions::default()).is_err());
}

#[test]
fn finetune_regression_fits_and_frozen_backbone_is_untouched() {
    let s1 = stage1_checkpoint();
    let data = toy_molecules(8, 24);
    let cfg = FinetuneConfig {
        task: Task::Regression,
        lr: 1e-2,
        epochs: 40,
        batch_size: 8,
        ..FinetuneConfig::default()
    };
    let out = finetune(&data, &s1, &cfg).unwrap();
    assert_eq!(out.report.steps, 40);
    assert!(out.report.final_loss < 0.5 * out.report.initial_loss, "{:?}", out.report);

    let frozen = finetune(
        &data,
        &s1,
        &FinetuneConfig {
            freeze_backbone: true,
            epochs: 5,
            ..cfg
        },
    )
    .unwrap();
    for (name, t) in s1.params.iter() {
        assert_eq!(frozen.params.get(name), Some(t), "{name} moved");
    }
    assert!(frozen.params.get(HEAD_W).is_some());
}

#[test]
fn finetune_classification_reports_accuracy() {
    let s1 = stage1_checkpoint();
    let mut data = toy_molecules(8, 25);
    for (i, m) in data.iter_mut().enumerate() {
        m.label = Some((i % 2) as f64);
    }
    let cfg = FinetuneConfig {
        task: Task::Classification,
        branch: Branch::ThreeD,
        lr: 1e-2,
        epochs: 30,
        batch_size: 4,
        ..FinetuneConfig::default()
    };
    let out = finetune(&data, &s1, &cfg).unwrap();
    assert_eq!(out.report.metric_name, "accuracy");
    assert!((0.0..=1.0).contains(&out.report.metric));
    data[0].label = Some(0.5);
    assert!(finetune(&data, &s1, &cfg).is_err());
}
