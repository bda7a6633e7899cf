use super::layers::{
    build_2d_inputs, build_3d_inputs, check_finite, decoder_forward, embed_tokens,
    encoder_forward, feature_learner, gaussian_basis, head_masked_atom, head_position, head_spd,
    mm_encoder, Branch, Direction, Masks, PairRep,
};
use super::{Bound, ModelConfig};
use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::molio::{PaddedGeometry, PaddedGraph, PaddedRecord};

/// Every intermediate of the paired forward pass for one record.
pub struct Stage1Output {
    pub masks: Masks,
    pub x0: Var,
    pub x: Var,
    pub y: Var,
    pub x_tilde: Var,
    pub y_tilde: Var,
    pub p: PairRep,
    pub q: PairRep,
    pub x_f: Var,
    pub y_f: Var,
    pub p_f: PairRep,
    pub q_f: PairRep,
    pub x_hat: Var,
    pub y_hat: Var,
    pub p_hat: PairRep,
    pub q_hat: PairRep,
    pub x_l: Var,
    pub y_l: Var,
    pub p_l: PairRep,
    pub q_l: PairRep,
    /// Stream rows covered by the atom logits, in order.
    pub atom_rows: Vec<usize>,
    pub atom_logits_x: Var,
    pub atom_logits_y: Var,
    pub spd_logits: Var,
    /// Recovered coordinates, `n×3`.
    pub positions: Var,
}

/// Single-modality forward: the real branch is encoded, the missing one is
/// reconstructed by a decoder and fused back in.
pub struct Stage2Output {
    pub masks: Masks,
    pub branch: Branch,
    pub x0: Var,
    /// Input stream and lifted bias of the real modality.
    pub stream: Var,
    pub pair: PairRep,
    pub stream_f: Var,
    pub pair_f: PairRep,
    /// Frozen feature-learner output for the missing modality (no gradient).
    pub target: Var,
    pub recon: Var,
    pub recon_pair: PairRep,
    pub fused: Var,
    pub fused_pair: PairRep,
    pub s_l: Var,
    pub p_l: PairRep,
    /// Stream rows covered by the atom logits, in order.
    pub atom_rows: Vec<usize>,
    pub atom_logits: Var,
    /// Present on the 2D path.
    pub spd_logits: Option<Var>,
    /// Present on the 3D path.
    pub positions: Option<Var>,
}

/// Borrowed view of the inputs a forward pass needs from one record.
pub struct RecordInputs<'a> {
    pub id: &'a str,
    pub tokens: &'a [usize],
    pub pair_class: &'a [usize],
    pub graph: Option<&'a PaddedGraph>,
    pub geometry: Option<&'a PaddedGeometry>,
    pub masks: Masks,
}

impl<'a> RecordInputs<'a> {
    pub fn from_record(rec: &'a PaddedRecord) -> Self {
        Self {
            id: &rec.id,
            tokens: &rec.tokens,
            pair_class: &rec.pair_class,
            graph: rec.graph.as_ref(),
            geometry: rec.geometry.as_ref(),
            masks: Masks::for_record(rec),
        }
    }
}

fn coords_var(g: &PaddedGeometry) -> Var {
    let n = g.coords.len();
    Var::constant(Tensor::new(
        vec![n, 3],
        g.coords.iter().flatten().copied().collect(),
    ))
}

fn require_2d<'a>(r: &RecordInputs<'a>) -> Result<&'a PaddedGraph> {
    r.graph
        .ok_or_else(|| Error::Modality(format!("record '{}' has no bond graph", r.id)))
}

fn require_3d<'a>(r: &RecordInputs<'a>) -> Result<&'a PaddedGeometry> {
    r.geometry
        .ok_or_else(|| Error::Modality(format!("record '{}' has no coordinates", r.id)))
}

fn head_rows(rows: Option<&[usize]>, n: usize) -> Result<Vec<usize>> {
    match rows {
        None => Ok((0..n).collect()),
        Some(r) if r.iter().all(|&i| i < n) => Ok(r.to_vec()),
        Some(_) => Err(Error::Shape(format!("atom head row outside {n} atoms"))),
    }
}

pub fn forward_stage1(b: &Bound, rec: &PaddedRecord, cfg: &ModelConfig) -> Result<Stage1Output> {
    forward_stage1_rows(b, rec, cfg, None)
}

/// As [`forward_stage1`], with the atom head evaluated only on `atom_rows`
/// (all rows when `None`).
pub fn forward_stage1_rows(
    b: &Bound,
    rec: &PaddedRecord,
    cfg: &ModelConfig,
    atom_rows: Option<&[usize]>,
) -> Result<Stage1Output> {
    let atom_rows = head_rows(atom_rows, rec.n)?;
    let r = RecordInputs::from_record(rec);
    let graph = require_2d(&r)?;
    let geom = require_3d(&r)?;
    let masks = r.masks;
    let x0 = embed_tokens(b, r.tokens)?;
    let (x, p, _) = build_2d_inputs(b, &x0, graph, &masks);
    let psi = gaussian_basis(b, &geom.dist, r.pair_class, &masks);
    let (y, q, _) = build_3d_inputs(b, &x0, &psi, &masks);
    check_finite(&x, "input_2d")?;
    check_finite(&y, "input_3d")?;
    let x_tilde = feature_learner(b, &x0, Branch::TwoD);
    let y_tilde = feature_learner(b, &x0, Branch::ThreeD);
    let (x_f, p_f) = encoder_forward(b, Branch::TwoD, &x, &p, &masks, cfg)?;
    let (y_f, q_f) = encoder_forward(b, Branch::ThreeD, &y, &q, &masks, cfg)?;
    let (x_hat, p_hat) = decoder_forward(b, Direction::ThreeDToTwoD, &y_f, &p, &x_f, &masks, cfg)?;
    let (y_hat, q_hat) = decoder_forward(b, Direction::TwoDToThreeD, &x_f, &q, &y_f, &masks, cfg)?;
    let (x_l, p_l) = mm_encoder(b, &x_hat, &p_hat, &masks, cfg)?;
    let (y_l, q_l) = mm_encoder(b, &y_hat, &q_hat, &masks, cfg)?;
    let atom_logits_x = head_masked_atom(b, &x_l.index_rows(&atom_rows));
    let atom_logits_y = head_masked_atom(b, &y_l.index_rows(&atom_rows));
    let spd_logits = head_spd(b, &p_l, &q_l);
    let positions = head_position(b, &q_l, &coords_var(geom), &masks);
    check_finite(&positions, "head_position")?;
    Ok(Stage1Output {
        masks,
        x0,
        x,
        y,
        x_tilde,
        y_tilde,
        p,
        q,
        x_f,
        y_f,
        p_f,
        q_f,
        x_hat,
        y_hat,
        p_hat,
        q_hat,
        x_l,
        y_l,
        p_l,
        q_l,
        atom_rows,
        atom_logits_x,
        atom_logits_y,
        spd_logits,
        positions,
    })
}

/// Forward on the `branch` modality alone. The record may carry the other
/// modality; it is ignored.
pub fn forward_stage2(
    b: &Bound,
    rec: &PaddedRecord,
    branch: Branch,
    cfg: &ModelConfig,
) -> Result<Stage2Output> {
    forward_stage2_rows(b, rec, branch, cfg, None)
}

/// As [`forward_stage2`], with the atom head evaluated only on `atom_rows`.
pub fn forward_stage2_rows(
    b: &Bound,
    rec: &PaddedRecord,
    branch: Branch,
    cfg: &ModelConfig,
    atom_rows: Option<&[usize]>,
) -> Result<Stage2Output> {
    let atom_rows = head_rows(atom_rows, rec.n)?;
    let r = RecordInputs::from_record(rec);
    let masks = r.masks.clone();
    let n = masks.n;
    let x0 = embed_tokens(b, r.tokens)?;
    let empty_pair = Var::constant(Tensor::zeros(&[n * n, cfg.heads]));
    let (stream, pair, geom) = match branch {
        Branch::TwoD => {
            let graph = require_2d(&r)?;
            let (x, p, _) = build_2d_inputs(b, &x0, graph, &masks);
            (x, p, None)
        }
        Branch::ThreeD => {
            let geom = require_3d(&r)?;
            // A 3D-only record has no bond classes to condition the kernel on.
            let none = vec![0; n * n];
            let psi = gaussian_basis(b, &geom.dist, &none, &masks);
            let (y, q, _) = build_3d_inputs(b, &x0, &psi, &masks);
            (y, q, Some(geom))
        }
    };
    check_finite(&stream, "input")?;
    let (missing, direction) = match branch {
        Branch::TwoD => (Branch::ThreeD, Direction::TwoDToThreeD),
        Branch::ThreeD => (Branch::TwoD, Direction::ThreeDToTwoD),
    };
    let target = feature_learner(b, &x0, missing).detach();
    let (stream_f, pair_f) = encoder_forward(b, branch, &stream, &pair, &masks, cfg)?;
    let (recon, recon_pair) =
        decoder_forward(b, direction, &stream_f, &empty_pair, &stream_f, &masks, cfg)?;
    let fused = stream_f.add(&recon);
    let fused_pair = pair.add(&recon_pair);
    let (s_l, p_l) = mm_encoder(b, &fused, &fused_pair, &masks, cfg)?;
    let atom_logits = head_masked_atom(b, &s_l.index_rows(&atom_rows));
    let (spd_logits, positions) = match geom {
        None => (Some(head_spd(b, &p_l, &p_l)), None),
        Some(g) => {
            let pos = head_position(b, &p_l, &coords_var(g), &masks);
            check_finite(&pos, "head_position")?;
            (None, Some(pos))
        }
    };
    Ok(Stage2Output {
        masks,
        branch,
        x0,
        stream,
        pair,
        stream_f,
        pair_f,
        target,
        recon,
        recon_pair,
        fused,
        fused_pair,
        s_l,
        p_l,
        atom_rows,
        atom_logits,
        spd_logits,
        positions,
    })
}

/// Iteratively refines `init` (real atoms only) with the position head driven
/// by the graph-only forward pass.
pub fn generate_positions(
    b: &Bound,
    rec: &PaddedRecord,
    init: &[[f64; 3]],
    rounds: usize,
    cfg: &ModelConfig,
) -> Result<Vec<[f64; 3]>> {
    if init.len() != rec.n_real {
        return Err(Error::Shape(format!(
            "{} initial coordinates for {} atoms",
            init.len(),
            rec.n_real
        )));
    }
    let out = forward_stage2(b, rec, Branch::TwoD, cfg)?;
    let n = rec.n;
    let mut coords = vec![0.0; n * 3];
    for (i, c) in init.iter().enumerate() {
        coords[i * 3..i * 3 + 3].copy_from_slice(c);
    }
    let pair = out.p_l.detach();
    for _ in 0..rounds {
        let c = Var::constant(Tensor::new(vec![n, 3], coords));
        let next = head_position(b, &pair, &c, &out.masks);
        check_finite(&next, "generation")?;
        coords = next.value().data().to_vec();
    }
    Ok((0..rec.n_real)
        .map(|i| [coords[i * 3], coords[i * 3 + 1], coords[i * 3 + 2]])
        .collect())
}
