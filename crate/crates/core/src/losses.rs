//! Training objectives and their aggregation.
//!
//! Batch-level losses take row-stacked tensors: streams are `(Σn, d)` with an
//! `(Σn, 1)` atom mask, pair tensors are `(Σn², H)` with an `(Σn², 1)` mask.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Branch, Stage1Output, Stage2Output};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_cl: f64,
    pub w_ra: f64,
    pub w_c: f64,
    pub w_atom: f64,
    pub w_pos: f64,
    pub w_spd: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cl: 1.0,
            w_ra: 1.0,
            w_c: 1.0,
            w_atom: 1.0,
            w_pos: 1.0,
            w_spd: 1.0,
            tau: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_cl, self.w_ra, self.w_c, self.w_atom, self.w_pos, self.w_spd];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.tau)));
        }
        Ok(())
    }
}

/// Scalar values of every term, their weighted total and bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub batch_size: usize,
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
}

impl LossReport {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }
}

fn constant_scalar(v: f64) -> Var {
    Var::constant(Tensor::scalar(v))
}

fn mask_total(mask: &Var) -> f64 {
    mask.value().data().iter().sum()
}

/// Masked mean over real atoms, L2-normalized. Returns `(1, d)`.
pub fn pool(stream: &Var, atom_mask: &Var) -> Result<Var> {
    let count = mask_total(atom_mask);
    if count == 0.0 {
        return Err(Error::Empty("cannot pool a record with no real atoms".into()));
    }
    let mean = atom_mask.transpose().matmul(stream).scale(1.0 / count);
    let norm = mean.square().sum_axis(1).sqrt().reshape(&[1, 1]);
    Ok(mean.div(&norm))
}

/// Symmetric InfoNCE over in-batch pairs; rows of `xp` and `yp` are matched.
pub fn info_nce(xp: &Var, yp: &Var, tau: f64) -> Var {
    let b = xp.shape()[0];
    let sim = xp.matmul(&yp.transpose()).scale(1.0 / tau);
    let targets: Vec<usize> = (0..b).collect();
    let w = vec![1.0 / (2 * b) as f64; b];
    sim.cross_entropy(&targets, &w)
        .add(&sim.transpose().cross_entropy(&targets, &w))
}

/// `Σ mask ⊙ (a − b)²`.
pub fn masked_sq(a: &Var, b: &Var, mask: &Var) -> Var {
    a.sub(b).square().mul(mask).sum()
}

/// `(‖x − x̃‖² + ‖y − ỹ‖²) / n_real` over real atoms.
pub fn loss_ra(x: &Var, x_tilde: &Var, y: &Var, y_tilde: &Var, atom_mask: &Var) -> Var {
    let n = mask_total(atom_mask).max(1.0);
    masked_sq(x, x_tilde, atom_mask)
        .add(&masked_sq(y, y_tilde, atom_mask))
        .scale(1.0 / n)
}

/// Encoder/decoder consistency; the encoder-side arguments are targets.
#[allow(clippy::too_many_arguments)]
pub fn loss_c(
    x_f: &Var,
    x_hat: &Var,
    y_f: &Var,
    y_hat: &Var,
    p: &Var,
    p_hat: &Var,
    q: &Var,
    q_hat: &Var,
    atom_mask: &Var,
    pair_mask: &Var,
) -> Var {
    let n = mask_total(atom_mask).max(1.0);
    let n2 = mask_total(pair_mask).max(1.0);
    let streams = masked_sq(x_hat, &x_f.detach(), atom_mask)
        .add(&masked_sq(y_hat, &y_f.detach(), atom_mask))
        .scale(1.0 / n);
    let pairs = masked_sq(p_hat, &p.detach(), pair_mask)
        .add(&masked_sq(q_hat, &q.detach(), pair_mask))
        .scale(1.0 / n2);
    streams.add(&pairs)
}

/// Mean cross-entropy over rows flagged in `positions`.
pub fn loss_masked_atom(logits: &Var, targets: &[usize], positions: &[bool]) -> Result<Var> {
    let count = positions.iter().filter(|&&p| p).count();
    if count == 0 {
        return Err(Error::Empty("no masked atom positions".into()));
    }
    let w: Vec<f64> = positions
        .iter()
        .map(|&p| if p { 1.0 / count as f64 } else { 0.0 })
        .collect();
    Ok(logits.cross_entropy(targets, &w))
}

/// Mean cross-entropy over flagged pairs; 0 when none are flagged.
pub fn loss_spd(logits: &Var, targets: &[usize], pair_mask: &[bool]) -> Var {
    let count = pair_mask.iter().filter(|&&p| p).count();
    if count == 0 {
        return constant_scalar(0.0);
    }
    let w: Vec<f64> = pair_mask
        .iter()
        .map(|&p| if p { 1.0 / count as f64 } else { 0.0 })
        .collect();
    logits.cross_entropy(targets, &w)
}

/// Huber (δ = 1 Å) on the residual norm of each corrupted atom, divided by
/// three times the number of corrupted atoms.
pub fn loss_pos(recovered: &Var, truth: &Var, noised: &[bool]) -> Var {
    let count = noised.iter().filter(|&&p| p).count();
    if count == 0 {
        return constant_scalar(0.0);
    }
    let rows = noised.len();
    let mask = Var::constant(Tensor::new(
        vec![rows],
        noised.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect(),
    ));
    recovered
        .sub(truth)
        .square()
        .sum_axis(1)
        .huber_from_squared(1.0)
        .mul(&mask)
        .sum()
        .scale(1.0 / (3 * count) as f64)
}

/// Supervision for one padded record.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// Original tokens, length `n`.
    pub atoms: Vec<usize>,
    pub masked: Vec<bool>,
    pub noised: Vec<bool>,
    /// Uncorrupted coordinates, `n` rows (zero on padding).
    pub coords: Option<Vec<[f64; 3]>>,
    /// SPD classes, `n²`.
    pub spd: Option<Vec<usize>>,
    /// Real off-diagonal pairs, `n²`.
    pub spd_pairs: Vec<bool>,
}

fn stack(parts: Vec<Var>) -> Var {
    if parts.len() == 1 {
        parts.into_iter().next().unwrap()
    } else {
        Var::concat(&parts, 0)
    }
}

/// Targets and flags for the rows each output's atom head covers.
fn head_targets<'a>(
    rows: impl Iterator<Item = &'a [usize]>,
    targets: &[Targets],
) -> (Vec<usize>, Vec<bool>) {
    let mut atoms = Vec::new();
    let mut masked = Vec::new();
    for (rows, t) in rows.zip(targets) {
        for &r in rows {
            atoms.push(t.atoms[r]);
            masked.push(t.masked[r]);
        }
    }
    (atoms, masked)
}

fn collect<T: Clone>(targets: &[Targets], f: impl Fn(&Targets) -> &[T]) -> Vec<T> {
    targets.iter().flat_map(|t| f(t).iter().cloned()).collect()
}

fn coords_of(t: &Targets, what: &str) -> Result<Var> {
    let c = t
        .coords
        .as_ref()
        .ok_or_else(|| Error::Modality(format!("{what} needs coordinates")))?;
    Ok(Var::constant(Tensor::new(
        vec![c.len(), 3],
        c.iter().flatten().copied().collect(),
    )))
}

fn spd_of(targets: &[Targets]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for t in targets {
        out.extend_from_slice(
            t.spd
                .as_ref()
                .ok_or_else(|| Error::Modality("SPD prediction needs a bond graph".into()))?,
        );
    }
    Ok(out)
}

/// Term values as graph nodes, in report order.
pub struct LossTerms {
    pub terms: Vec<(&'static str, Var)>,
}

impl LossTerms {
    pub fn get(&self, name: &str) -> Option<&Var> {
        self.terms.iter().find(|(n, _)| *n == name).map(|(_, v)| v)
    }
}

pub fn stage1_terms(outs: &[Stage1Output], targets: &[Targets], tau: f64) -> Result<LossTerms> {
    if outs.is_empty() || outs.len() != targets.len() {
        return Err(Error::Shape("outputs and targets differ in batch size".into()));
    }
    let am = stack(outs.iter().map(|o| o.masks.atom_mask.clone()).collect());
    let pm = stack(outs.iter().map(|o| o.masks.pair_mask.clone()).collect());
    let s = |f: &dyn Fn(&Stage1Output) -> &Var| stack(outs.iter().map(|o| f(o).clone()).collect());

    let xp = stack(outs.iter().map(|o| pool(&o.x_f, &o.masks.atom_mask)).collect::<Result<_>>()?);
    let yp = stack(outs.iter().map(|o| pool(&o.y_f, &o.masks.atom_mask)).collect::<Result<_>>()?);
    let cl = info_nce(&xp, &yp, tau);
    let ra = loss_ra(&s(&|o| &o.x), &s(&|o| &o.x_tilde), &s(&|o| &o.y), &s(&|o| &o.y_tilde), &am);
    let c = loss_c(
        &s(&|o| &o.x_f),
        &s(&|o| &o.x_hat),
        &s(&|o| &o.y_f),
        &s(&|o| &o.y_hat),
        &s(&|o| &o.p),
        &s(&|o| &o.p_hat),
        &s(&|o| &o.q),
        &s(&|o| &o.q_hat),
        &am,
        &pm,
    );
    let (atoms, masked) = head_targets(outs.iter().map(|o| o.atom_rows.as_slice()), targets);
    let atom = loss_masked_atom(&s(&|o| &o.atom_logits_x), &atoms, &masked)?
        .add(&loss_masked_atom(&s(&|o| &o.atom_logits_y), &atoms, &masked)?)
        .scale(0.5);
    let truth = stack(targets.iter().map(|t| coords_of(t, "position recovery")).collect::<Result<_>>()?);
    let pos = loss_pos(&s(&|o| &o.positions), &truth, &collect(targets, |t| &t.noised));
    let spd = loss_spd(&s(&|o| &o.spd_logits), &spd_of(targets)?, &collect(targets, |t| &t.spd_pairs));
    Ok(LossTerms {
        terms: vec![
            ("cl", cl),
            ("ra", ra),
            ("c", c),
            ("atom", atom),
            ("pos", pos),
            ("spd", spd),
        ],
    })
}

pub fn stage2_terms(outs: &[Stage2Output], targets: &[Targets]) -> Result<LossTerms> {
    if outs.is_empty() || outs.len() != targets.len() {
        return Err(Error::Shape("outputs and targets differ in batch size".into()));
    }
    let branch = outs[0].branch;
    if outs.iter().any(|o| o.branch != branch) {
        return Err(Error::Modality("batch mixes single-modality branches".into()));
    }
    let am = stack(outs.iter().map(|o| o.masks.atom_mask.clone()).collect());
    let s = |f: &dyn Fn(&Stage2Output) -> &Var| stack(outs.iter().map(|o| f(o).clone()).collect());
    let n = mask_total(&am).max(1.0);
    let recon = masked_sq(&s(&|o| &o.recon), &s(&|o| &o.target), &am).scale(1.0 / n);
    let (atoms, masked) = head_targets(outs.iter().map(|o| o.atom_rows.as_slice()), targets);
    let atom = loss_masked_atom(&s(&|o| &o.atom_logits), &atoms, &masked)?;
    let mut terms = vec![("c", recon), ("atom", atom)];
    match branch {
        Branch::TwoD => {
            let logits = outs
                .iter()
                .map(|o| o.spd_logits.clone())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Modality("SPD logits missing on the 2D path".into()))?;
            let spd = loss_spd(&stack(logits), &spd_of(targets)?, &collect(targets, |t| &t.spd_pairs));
            terms.push(("spd", spd));
        }
        Branch::ThreeD => {
            let pos = outs
                .iter()
                .map(|o| o.positions.clone())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Modality("positions missing on the 3D path".into()))?;
            let truth = stack(targets.iter().map(|t| coords_of(t, "position recovery")).collect::<Result<_>>()?);
            terms.push(("pos", loss_pos(&stack(pos), &truth, &collect(targets, |t| &t.noised))));
        }
    }
    Ok(LossTerms { terms })
}

fn weight_of(w: &LossWeights, name: &str) -> f64 {
    match name {
        "cl" => w.w_cl,
        "ra" => w.w_ra,
        "c" => w.w_c,
        "atom" => w.w_atom,
        "pos" => w.w_pos,
        "spd" => w.w_spd,
        _ => 0.0,
    }
}

fn weighted_total(terms: &LossTerms, w: &LossWeights, step: usize, batch_size: usize) -> (Var, LossReport) {
    let mut total = constant_scalar(0.0);
    let mut report = BTreeMap::new();
    let mut sum = 0.0;
    for (name, v) in &terms.terms {
        let wi = weight_of(w, name);
        let value = v.value().item();
        report.insert(name.to_string(), value);
        sum += wi * value;
        if wi != 0.0 {
            total = total.add(&v.scale(wi));
        }
    }
    debug_assert!((total.value().item() - sum).abs() <= 1e-9 * sum.abs().max(1.0));
    (
        total,
        LossReport {
            step,
            batch_size,
            terms: report,
            total: sum,
        },
    )
}

const STAGE1: [&str; 6] = ["cl", "ra", "c", "atom", "pos", "spd"];

pub fn total_stage1(terms: &LossTerms, w: &LossWeights, step: usize, batch_size: usize) -> Result<(Var, LossReport)> {
    for name in STAGE1 {
        if terms.get(name).is_none() {
            return Err(Error::Modality(format!("stage 1 term '{name}' is missing")));
        }
    }
    Ok(weighted_total(terms, w, step, batch_size))
}

/// Stage 2 total on the given path. Terms that need the absent modality must
/// not be present.
pub fn total_stage2(
    terms: &LossTerms,
    branch: Branch,
    w: &LossWeights,
    step: usize,
    batch_size: usize,
) -> Result<(Var, LossReport)> {
    let (need, forbidden) = match branch {
        Branch::TwoD => ("spd", "pos"),
        Branch::ThreeD => ("pos", "spd"),
    };
    for name in ["c", "atom", need] {
        if terms.get(name).is_none() {
            return Err(Error::Modality(format!("stage 2 term '{name}' is missing")));
        }
    }
    if terms.get(forbidden).is_some() || terms.get("cl").is_some() {
        return Err(Error::Modality(format!(
            "term '{forbidden}' requires a modality absent on the {} path",
            branch.tag()
        )));
    }
    Ok(weighted_total(terms, w, step, batch_size))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Var {
        Var::constant(Tensor::new(vec![rows, cols], data.to_vec()))
    }

    #[test]
    fn pool_normalizes_and_ignores_padding() {
        let s = m(3, 2, &[3.0, 4.0, 3.0, 4.0, 100.0, -7.0]);
        let mask = m(3, 1, &[1.0, 1.0, 0.0]);
        let p = pool(&s, &mask).unwrap();
        assert!((p.value().data()[0] - 0.6).abs() < 1e-12);
        assert!((p.value().data()[1] - 0.8).abs() < 1e-12);
        assert!(pool(&s, &m(3, 1, &[0.0; 3])).is_err());
    }

    #[test]
    fn info_nce_closed_forms() {
        let x = m(1, 2, &[0.6, 0.8]);
        assert_eq!(info_nce(&x, &x, 1.0).value().item(), 0.0);
        let x = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((info_nce(&x, &x, 1.0).value().item() - expected).abs() < 1e-12);
    }

    #[test]
    fn ra_and_c_fixed_points() {
        let x = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mask = m(2, 1, &[1.0, 1.0]);
        assert_eq!(loss_ra(&x, &x, &x, &x, &mask).value().item(), 0.0);
        let one = m(1, 3, &[1.0, 0.0, 0.0]);
        let zero = m(1, 3, &[0.0; 3]);
        let mask1 = m(1, 1, &[1.0]);
        assert_eq!(loss_ra(&one, &zero, &zero, &zero, &mask1).value().item(), 1.0);

        let pair = m(4, 1, &[0.0; 4]);
        let mut bumped = [0.0; 4];
        bumped[1] = 1.0;
        let pair_hat = m(4, 1, &bumped);
        let pm = m(4, 1, &[1.0; 4]);
        let c = loss_c(&x, &x, &x, &x, &pair, &pair_hat, &pair, &pair, &mask, &pm);
        assert!((c.value().item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn consistency_targets_receive_no_gradient() {
        let xf = Var::param(Tensor::new(vec![1, 2], vec![1.0, -1.0]));
        let xh = Var::param(Tensor::new(vec![1, 2], vec![0.5, 0.0]));
        let pair = Var::param(Tensor::new(vec![1, 1], vec![0.3]));
        let mask = m(1, 1, &[1.0]);
        let c = loss_c(&xf, &xh, &xf, &xh, &pair, &pair, &pair, &pair, &mask, &mask);
        let g = crate::autograd::backward(&c);
        assert!(g.get_or_zeros(&xf).data().iter().all(|&v| v == 0.0));
        assert!(g.get_or_zeros(&xh).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn cross_entropy_terms() {
        let v = 7;
        let logits = m(2, v, &[0.0; 14]);
        let l = loss_masked_atom(&logits, &[1, 2], &[true, false]).unwrap();
        assert!((l.value().item() - (v as f64).ln()).abs() < 1e-12);
        assert!(loss_masked_atom(&logits, &[1, 2], &[false, false]).is_err());
        let mut sat = vec![0.0; 7];
        sat[3] = 200.0;
        let l = loss_spd(&m(1, 7, &sat), &[3], &[true]);
        assert!(l.value().item() < 1e-12);
        assert_eq!(loss_spd(&m(1, 7, &sat), &[0], &[false]).value().item(), 0.0);
    }

    #[test]
    fn position_loss_quadratic_branch() {
        let truth = m(2, 3, &[0.0; 6]);
        let rec = m(2, 3, &[0.5, 0.0, 0.0, 9.0, 9.0, 9.0]);
        let l = loss_pos(&rec, &truth, &[true, false]);
        assert!((l.value().item() - 0.125 / 3.0).abs() < 1e-15);
        assert_eq!(loss_pos(&truth, &truth, &[true, true]).value().item(), 0.0);
    }

    #[test]
    fn weights_validation() {
        LossWeights::default().validate().unwrap();
        let zero = LossWeights {
            w_cl: 0.0,
            w_ra: 0.0,
            w_c: 0.0,
            w_atom: 0.0,
            w_pos: 0.0,
            w_spd: 0.0,
            tau: 1.0,
        };
        assert!(zero.validate().is_err());
        assert!(LossWeights { tau: 0.0, ..LossWeights::default() }.validate().is_err());
    }
}
