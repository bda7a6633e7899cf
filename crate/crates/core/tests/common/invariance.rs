#![allow(dead_code)]

use super::*;
use flexmol::autograd::{Tensor, Var};
use flexmol::featurize::featurize;
use flexmol::losses::{stage1_terms, Targets};
use flexmol::model::{
    build_2d_inputs, embed_tokens, forward_stage1, forward_stage2_rows, Branch, Masks, ModelConfig, ParamStore,
    Stage1Output,
};
use flexmol::molio::{collate, collate_to};
use flexmol::pretrain::{apply_corruption, TrainConfig};
use flexmol::synth::toy_molecules;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg() -> ModelConfig {
    ModelConfig::tiny()
}

fn stage1_losses(outs: &[Stage1Output], targets: &[Targets]) -> Vec<(String, f64)> {
    let terms = stage1_terms(outs, targets, 0.1).unwrap();
    terms.terms.iter().map(|(k, v)| (k.to_string(), v.value().item())).collect()
}

/// Worst relative change of (y, Q), of any Stage 1 loss, and worst relative
/// equivariance error of the recovered positions under rigid motions.
pub fn se3_worst(trials: u64) -> (f64, f64, f64) {
    let cfg = cfg();
    let train = TrainConfig::default();
    let (mut worst_inv, mut worst_loss, mut worst_pos) = (0.0f64, 0.0f64, 0.0f64);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let params = ParamStore::init(&cfg, trial).unwrap();
        let b = params.bind_with(|_| false);
        let mols = toy_molecules(3, trial);
        let feats: Vec<_> = mols.iter().map(|m| featurize(m, &cfg.features, 0).unwrap()).collect();
        let batch = collate(&feats).unwrap();
        let (batch, _, targets) = apply_corruption(&batch, &train, &mut rng).unwrap();
        let (r, t) = (random_rotation(&mut rng), random_translation(&mut rng));
        let moved: Vec<_> = batch.records.iter().map(|rec| move_record(rec, &r, t)).collect();
        let moved_targets: Vec<Targets> = targets
            .iter()
            .map(|tg| {
                let mut tg = tg.clone();
                let n_real = tg.atoms.len();
                if let Some(c) = tg.coords.as_mut() {
                    for (i, p) in c.iter_mut().enumerate() {
                        if i < n_real {
                            *p = transform(&r, t, *p);
                        }
                    }
                }
                tg
            })
            .collect();
        let outs: Vec<_> = batch.records.iter().map(|rec| forward_stage1(&b, rec, &cfg).unwrap()).collect();
        let outs_m: Vec<_> = moved.iter().map(|rec| forward_stage1(&b, rec, &cfg).unwrap()).collect();
        for ((o, om), rec) in outs.iter().zip(&outs_m).zip(&batch.records) {
            worst_inv = worst_inv.max(rel_diff(o.y.value().data(), om.y.value().data()));
            worst_inv = worst_inv.max(rel_diff(o.q.value().data(), om.q.value().data()));
            let p = rows(&o.positions);
            let pm = rows(&om.positions);
            let expect: Vec<f64> = p
                .iter()
                .take(rec.n_real)
                .flat_map(|row| transform(&r, t, [row[0], row[1], row[2]]))
                .collect();
            let got: Vec<f64> = pm.iter().take(rec.n_real).flatten().copied().collect();
            worst_pos = worst_pos.max(rel_diff(&expect, &got));
        }
        let a = stage1_losses(&outs, &targets);
        let m = stage1_losses(&outs_m, &moved_targets);
        for ((name, x), (_, y)) in a.iter().zip(&m) {
            let _ = name;
            worst_loss = worst_loss.max((x - y).abs() / x.abs().max(1e-12));
        }
    }
    (worst_inv, worst_loss, worst_pos)
}

/// Worst absolute deviation from permutation equivariance over per-atom and
/// pair outputs of both stages.
pub fn permutation_worst(trials: u64) -> f64 {
    let cfg = cfg();
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let params = ParamStore::init(&cfg, trial).unwrap();
        let b = params.bind_with(|_| false);
        let mol = toy_molecules(1, 500 + trial).remove(0);
        let perm = random_permutation(&mut rng, mol.n_atoms());
        let pm = permute_molecule(&mol, &perm);
        let f = featurize(&mol, &cfg.features, 0).unwrap();
        let fp = featurize(&pm, &cfg.features, 0).unwrap();
        let o = forward_stage1(&b, &collate(&[f]).unwrap().records[0], &cfg).unwrap();
        let op = forward_stage1(&b, &collate(&[fp]).unwrap().records[0], &cfg).unwrap();
        let per_atom = |s: &Stage1Output| {
            vec![
                &s.x, &s.y, &s.x_tilde, &s.y_tilde, &s.x_f, &s.y_f, &s.x_hat, &s.y_hat, &s.x_l, &s.y_l,
                &s.atom_logits_x, &s.atom_logits_y, &s.positions,
            ]
            .into_iter()
            .map(rows)
            .collect::<Vec<_>>()
        };
        for (a, ap) in per_atom(&o).iter().zip(per_atom(&op).iter()) {
            for (i, &src) in perm.iter().enumerate() {
                worst = worst.max(max_abs_diff(&ap[i], &a[src]));
            }
        }
        let n = mol.n_atoms();
        let pair = |v: &flexmol::autograd::Var| rows(v);
        for (a, ap) in [(&o.p_l, &op.p_l), (&o.q_l, &op.q_l), (&o.spd_logits, &op.spd_logits)] {
            let (a, ap) = (pair(a), pair(ap));
            for i in 0..n {
                for j in 0..n {
                    worst = worst.max(max_abs_diff(&ap[i * n + j], &a[perm[i] * n + perm[j]]));
                }
            }
        }
        for branch in [Branch::TwoD, Branch::ThreeD] {
            let single = |m: &flexmol::molio::Molecule| match branch {
                Branch::TwoD => m.without_3d(),
                Branch::ThreeD => m.without_2d(),
            };
            let f = featurize(&single(&mol), &cfg.features, 0).unwrap();
            let fp = featurize(&single(&pm), &cfg.features, 0).unwrap();
            let o = forward_stage2_rows(&b, &collate(&[f]).unwrap().records[0], branch, &cfg, None).unwrap();
            let op = forward_stage2_rows(&b, &collate(&[fp]).unwrap().records[0], branch, &cfg, None).unwrap();
            for (a, ap) in [(&o.s_l, &op.s_l), (&o.atom_logits, &op.atom_logits), (&o.recon, &op.recon)] {
                let (a, ap) = (rows(a), rows(ap));
                for (i, &src) in perm.iter().enumerate() {
                    worst = worst.max(max_abs_diff(&ap[i], &a[src]));
                }
            }
        }
    }
    worst
}

/// Worst absolute change of real-atom outputs and of Stage 1 losses when a
/// record is padded.
pub fn padding_worst(trials: u64) -> (f64, f64) {
    let cfg = cfg();
    let (mut worst, mut worst_loss) = (0.0f64, 0.0f64);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + trial);
        let params = ParamStore::init(&cfg, trial).unwrap();
        let b = params.bind_with(|_| false);
        let mol = toy_molecules(1, 900 + trial).remove(0);
        let n = mol.n_atoms();
        let f = featurize(&mol, &cfg.features, 0).unwrap();
        let extra = rng.random_range(1..6);
        let alone = collate(std::slice::from_ref(&f)).unwrap();
        let padded = collate_to(&[f], n + extra).unwrap();
        assert_eq!(padded.pad_to, n + extra);
        let o = forward_stage1(&b, &alone.records[0], &cfg).unwrap();
        let op = forward_stage1(&b, &padded.records[0], &cfg).unwrap();
        let w = n + extra;
        for (a, ap) in [
            (&o.x_f, &op.x_f), (&o.y_f, &op.y_f), (&o.x_l, &op.x_l), (&o.y_l, &op.y_l),
            (&o.atom_logits_x, &op.atom_logits_x), (&o.atom_logits_y, &op.atom_logits_y),
            (&o.positions, &op.positions),
        ] {
            let (a, ap) = (rows(a), rows(ap));
            for i in 0..n {
                worst = worst.max(max_abs_diff(&a[i], &ap[i]));
            }
        }
        for (a, ap) in [(&o.p_l, &op.p_l), (&o.q_l, &op.q_l), (&o.spd_logits, &op.spd_logits)] {
            let (a, ap) = (rows(a), rows(ap));
            for i in 0..n {
                for j in 0..n {
                    worst = worst.max(max_abs_diff(&a[i * n + j], &ap[i * w + j]));
                }
            }
        }
        let targets_alone = vec![clean_targets(&alone.records[0])];
        let targets_padded = vec![clean_targets(&padded.records[0])];
        let la = stage1_losses(&[o], &targets_alone);
        let lp = stage1_losses(&[op], &targets_padded);
        for ((_, x), (_, y)) in la.iter().zip(&lp) {
            worst_loss = worst_loss.max((x - y).abs());
        }
    }
    (worst, worst_loss)
}

/// Largest attention weight a real query puts on a padded key.
pub fn padded_attention_max() -> f64 {
    let mut top = 0.0f64;
    let cfg = cfg();
    let params = ParamStore::init(&cfg, 3).unwrap();
    let b = params.bind_with(|_| false);
    let mols = toy_molecules(2, 4);
    let feats: Vec<_> = mols.iter().map(|m| featurize(m, &cfg.features, 0).unwrap()).collect();
    let batch = collate_to(&feats, 24).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for rec in &batch.records {
        let n = rec.n;
        let masks = Masks::for_record(rec);
        let x0 = embed_tokens(&b, &rec.tokens).unwrap();
        let (_, pair, _) = build_2d_inputs(&b, &x0, rec.graph.as_ref().unwrap(), &masks);
        let x = Var::constant(Tensor::new(
            vec![n, cfg.d],
            (0..n * cfg.d).map(|_| rng.random_range(-3.0..3.0)).collect(),
        ));
        let lin = |w: &str, bias: &str| x.matmul(b.get(w)).add(b.get(bias));
        let q = lin("enc.0.attn.wq", "enc.0.attn.bq");
        let k = lin("enc.0.attn.wk", "enc.0.attn.bk");
        let dh = cfg.d / cfg.heads;
        for h in 0..cfg.heads {
            let logits = q
                .narrow_cols(h * dh, dh)
                .matmul(&k.narrow_cols(h * dh, dh).transpose())
                .scale(1.0 / (dh as f64).sqrt())
                .add(&masks.key_bias)
                .add(&pair.narrow_cols(h, 1).reshape(&[n, n]));
            let w = logits.softmax();
            for (i, row) in rows(&w).iter().enumerate().take(rec.n_real) {
                let _ = i;
                for &v in &row[rec.n_real..] {
                    top = top.max(v);
                }
            }
        }
    }
    top
}

pub fn clean_targets(rec: &flexmol::molio::PaddedRecord) -> Targets {
    let n = rec.n;
    let real = rec.n_real;
    let mut spd_pairs = vec![false; n * n];
    for i in 0..real {
        for j in 0..real {
            spd_pairs[i * n + j] = i != j;
        }
    }
    Targets {
        atoms: rec.tokens.clone(),
        masked: (0..n).map(|i| i < real).collect(),
        noised: vec![false; n],
        coords: rec.geometry.as_ref().map(|g| g.coords.clone()),
        spd: rec.graph.as_ref().map(|g| g.spd.clone()),
        spd_pairs,
    }
}
