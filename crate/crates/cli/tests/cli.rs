use std::path::Path;
use std::process::{Command, Output};

use flexmol::molio::write_jsonl;
use flexmol::synth::toy_molecules;
use serde_json::Value;

fn flexmol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexmol"))
        .args(args)
        .env_remove("FLEXMOL_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn json_out(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&o.stdout),
            String::from_utf8_lossy(&o.stderr)
        )
    })
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "d = 8\nk = 4\nf = 1\nl = 1\nheads = 2\nmlp_ratio = 2\nhead_hidden = 8\nspd_hidden = 8\nbatch_size = 4\n";

#[test]
fn unknown_command_is_usage_error() {
    let o = flexmol(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_usage_error() {
    let o = flexmol(&["inspect", "--bogus", "x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_on_three_atoms() {
    let o = flexmol(&["gradcheck", "--atoms", "3", "--dim", "8"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json_out(&o);
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert_eq!(v["pass"], Value::Bool(true));
}

#[test]
fn gradcheck_fails_with_impossible_tolerance() {
    let o = flexmol(&["gradcheck", "--atoms", "2", "--dim", "2", "--tolerance", "1e-30"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(json_out(&o)["pass"], Value::Bool(false));
}

#[test]
fn stage2_without_checkpoint_explains() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    write_jsonl(&data, &toy_molecules(4, 0)).unwrap();
    let out = dir.path().join("s2.ckpt");
    let o = flexmol(&["pretrain-stage2", "--modality", "2d", "--data", p(&data), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("Stage 1 checkpoint"), "{err}");
    let missing = dir.path().join("nope.ckpt");
    let o = flexmol(&[
        "pretrain-stage2", "--modality", "2d", "--data", p(&data), "--out", p(&out), "--init", p(&missing),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no checkpoint"));
}

#[test]
fn eval_conf_identity_sets() {
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("r.jsonl");
    write_jsonl(&refs, &toy_molecules(5, 3)).unwrap();
    let o = flexmol(&["eval-conf", "--gen", p(&refs), "--ref", p(&refs), "--delta", "0.5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json_out(&o);
    assert_eq!(v["cov_mean"].as_f64(), Some(1.0));
    assert!(v["mat_mean"].as_f64().unwrap().abs() < 1e-12);
    assert_eq!(v["per_molecule"].as_array().unwrap().len(), 5);
    let o = flexmol(&["eval-conf", "--gen", p(&refs), "--ref", p(&refs), "--pretty"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("COV"));
}

#[test]
fn convert_sdf_to_jsonl_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let sdf = dir.path().join("w.sdf");
    std::fs::write(
        &sdf,
        "water\n  test\n\n  3  2  0  0  0  0  0  0  0  0999 V2000\n    0.0000    0.0000    0.0000 O   0  0  0  0  0  0  0  0  0  0  0  0\n    0.9572    0.0000    0.0000 H   0  0  0  0  0  0  0  0  0  0  0  0\n   -0.2400    0.9266    0.0000 H   0  0  0  0  0  0  0  0  0  0  0  0\n  1  2  1  0\n  1  3  1  0\nM  END\n$$$$\n",
    )
    .unwrap();
    let out = dir.path().join("w.jsonl");
    let o = flexmol(&["convert", "--in", p(&sdf), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json_out(&o)["records"], 1);
    let mols = flexmol::molio::parse_jsonl(&out).unwrap();
    assert_eq!(mols[0].atomic_numbers, vec![8, 1, 1]);
    assert!(flexmol::molio::DatasetManifest::sidecar_path(&out).exists());
    let o = flexmol(&["featurize", "--data", p(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json_out(&o)["atoms"], 3);
}

#[test]
fn manifest_mismatch_is_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let mols = toy_molecules(3, 1);
    write_jsonl(&data, &mols).unwrap();
    flexmol::molio::DatasetManifest::describe(&data, &mols[..2])
        .save(flexmol::molio::DatasetManifest::sidecar_path(&data))
        .unwrap();
    let o = flexmol(&["featurize", "--data", p(&data)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_config_key_is_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "no_such_key = 3\n").unwrap();
    let data = dir.path().join("d.jsonl");
    write_jsonl(&data, &toy_molecules(4, 0)).unwrap();
    let out = dir.path().join("s1.ckpt");
    let o = flexmol(&["pretrain-stage1", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
}

#[test]
fn pipeline_end_to_end_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("d.jsonl");
    write_jsonl(&data, &toy_molecules(8, 5)).unwrap();
    let s1 = dir.path().join("s1.ckpt");
    let run = |metrics: &Path| {
        flexmol(&[
            "pretrain-stage1", "--config", p(&cfg), "--data", p(&data), "--out", p(&s1), "--metrics",
            p(metrics), "--epochs", "2", "--seed", "11", "--deterministic",
        ])
    };
    let (m1, m2) = (dir.path().join("m1.jsonl"), dir.path().join("m2.jsonl"));
    let o = run(&m1);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json_out(&o)["steps"], 4);
    assert_eq!(run(&m2).status.code(), Some(0));
    let log = std::fs::read(&m1).unwrap();
    assert_eq!(log, std::fs::read(&m2).unwrap());
    assert_eq!(String::from_utf8_lossy(&log).lines().count(), 4);

    let o = flexmol(&["inspect", p(&s1)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json_out(&o)["stage"], 1);

    let s2 = dir.path().join("s2.ckpt");
    let o = flexmol(&[
        "pretrain-stage2", "--config", p(&cfg), "--data", p(&data), "--init", p(&s1), "--modality", "2d",
        "--out", p(&s2), "--max-steps", "2", "--evaluate",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json_out(&o);
    assert_eq!(v["stage"], 2);
    assert!(v["evaluation"]["masked_atom_accuracy"].is_number());
    let o = flexmol(&["inspect", p(&s2)]);
    assert_eq!(json_out(&o)["stage"], 2);

    let gen = dir.path().join("g.jsonl");
    let o = flexmol(&["gen-conf", "--data", p(&data), "--init", p(&s2), "--out", p(&gen)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json_out(&o)["conformers"], 16);
    let o = flexmol(&["eval-conf", "--gen", p(&gen), "--ref", p(&data)]);
    assert_eq!(o.status.code(), Some(0));
    let v = json_out(&o);
    for key in ["cov_mean", "cov_median", "mat_mean", "mat_median"] {
        assert!(v[key].is_number(), "{key}");
    }

    let o = flexmol(&[
        "finetune", "--data", p(&data), "--init", p(&s2), "--task", "regression", "--freeze-backbone",
        "--epochs", "3", "--batch-size", "4", "--lr", "0.01",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json_out(&o);
    assert_eq!(v["report"]["steps"], 6);
    assert_eq!(v["report"]["metric_name"], "mse");
}
