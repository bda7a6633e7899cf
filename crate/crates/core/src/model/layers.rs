use std::f64::consts::PI;

use super::{Bound, ModelConfig};
use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::featurize::vocab;
use crate::molio::{PaddedGraph, PaddedRecord, PAD_BIAS};

/// Per-head atom-pair tensor, stored as an `(n², H)` matrix (row `i·n + j`).
pub type PairRep = Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Branch {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

impl Branch {
    pub fn tag(self) -> &'static str {
        match self {
            Branch::TwoD => "2d",
            Branch::ThreeD => "3d",
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2d" => Ok(Branch::TwoD),
            "3d" => Ok(Branch::ThreeD),
            _ => Err(crate::error::Error::Config(format!("unknown modality '{s}' (expected 2d or 3d)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ThreeDToTwoD,
    TwoDToThreeD,
}

impl Direction {
    fn prefix(self) -> &'static str {
        match self {
            Direction::ThreeDToTwoD => "dec_3d2d",
            Direction::TwoDToThreeD => "dec_2d3d",
        }
    }
}

/// Constant masks for one padded record.
#[derive(Clone, Debug)]
pub struct Masks {
    pub n: usize,
    pub n_real: usize,
    /// `n×n` additive bias: 0 on real pairs, the padding sentinel elsewhere.
    pub key_bias: Var,
    /// `(n², 1)`: 1 on real pairs.
    pub pair_mask: Var,
    /// `(n, 1)`: 1 on real atoms.
    pub atom_mask: Var,
}

impl Masks {
    pub fn new(n: usize, n_real: usize) -> Self {
        let mut bias = vec![PAD_BIAS; n * n];
        let mut pm = vec![0.0; n * n];
        for i in 0..n_real {
            for j in 0..n_real {
                bias[i * n + j] = 0.0;
                pm[i * n + j] = 1.0;
            }
        }
        let am = (0..n).map(|i| if i < n_real { 1.0 } else { 0.0 }).collect();
        Self {
            n,
            n_real,
            key_bias: Var::constant(Tensor::new(vec![n, n], bias)),
            pair_mask: Var::constant(Tensor::new(vec![n * n, 1], pm)),
            atom_mask: Var::constant(Tensor::new(vec![n, 1], am)),
        }
    }

    pub fn for_record(rec: &PaddedRecord) -> Self {
        Self::new(rec.n, rec.n_real)
    }
}

pub(crate) fn check_finite(v: &Var, layer: &str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(layer.to_string()))
    }
}

fn linear(b: &Bound, w: &str, bias: &str, x: &Var) -> Var {
    x.matmul(b.get(w)).add(b.get(bias))
}

fn ln(b: &Bound, prefix: &str, x: &Var) -> Var {
    x.layer_norm(b.get(&format!("{prefix}.g")), b.get(&format!("{prefix}.b")), 1e-5)
}

fn mlp(b: &Bound, prefix: &str, x: &Var) -> Var {
    let h = linear(b, &format!("{prefix}.w1"), &format!("{prefix}.b1"), x).gelu();
    linear(b, &format!("{prefix}.w2"), &format!("{prefix}.b2"), &h)
}

/// Atom embeddings for already-tokenized atoms.
pub fn embed_tokens(b: &Bound, tokens: &[usize]) -> Result<Var> {
    if let Some(&t) = tokens.iter().find(|&&t| t >= vocab::VOCAB_SIZE) {
        return Err(Error::Shape(format!(
            "token {t} outside vocabulary of {}",
            vocab::VOCAB_SIZE
        )));
    }
    Ok(b.get("embed.atom").index_rows(tokens))
}

pub fn embed_atoms(b: &Bound, atomic_numbers: &[u32], charges: &[i32]) -> Result<Var> {
    if atomic_numbers.len() != charges.len() {
        return Err(Error::Shape("atomic numbers and charges differ in length".into()));
    }
    let tokens = atomic_numbers
        .iter()
        .zip(charges)
        .map(|(&z, &c)| {
            vocab::token(z, c).ok_or_else(|| {
                Error::Shape(format!("atom (Z={z}, charge={c}) is outside the vocabulary"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    embed_tokens(b, &tokens)
}

fn lift(b: &Bound, branch: Branch, scalar: &Var, masks: &Masks) -> PairRep {
    let t = branch.tag();
    let w = b.get(&format!("pair_in.{t}.w"));
    let bias = b.get(&format!("pair_in.{t}.b"));
    scalar.matmul(w).add(bias).mul(&masks.pair_mask)
}

/// Returns `(x, P, b)` where `b` is the scalar bias before the head lift.
pub fn build_2d_inputs(b: &Bound, x0: &Var, graph: &PaddedGraph, masks: &Masks) -> (Var, PairRep, Var) {
    let n = masks.n;
    let x = x0.add(&b.get("embed.degree").index_rows(&graph.degree_index));
    let spd = b.get("embed.spd").index_rows(&graph.spd);
    let paths = Var::constant(Tensor::new(vec![n * n, graph.path_width], graph.edge_path.clone()));
    let inv_len = graph
        .path_len
        .iter()
        .map(|&l| if l == 0 { 0.0 } else { 1.0 / l as f64 })
        .collect();
    let inv_len = Var::constant(Tensor::new(vec![n * n, 1], inv_len));
    let edge = paths.matmul(b.get("embed.edge")).mul(&inv_len);
    let scalar = spd.add(&edge).mul(&masks.pair_mask);
    let p = lift(b, Branch::TwoD, &scalar, masks);
    (x, p, scalar)
}

/// Gaussian densities of the affinely transformed pair distances, `(n², K)`;
/// zero on padded pairs.
pub fn gaussian_basis(b: &Bound, dist: &[f64], pair_class: &[usize], masks: &Masks) -> Var {
    let n2 = masks.n * masks.n;
    let d = Var::constant(Tensor::new(vec![n2, 1], dist.to_vec()));
    let gamma = b.get("gauss.gamma").index_rows(pair_class);
    let beta = b.get("gauss.beta").index_rows(pair_class);
    let a = gamma.mul(&d).add(&beta);
    let sigma = b.get("gauss.sigma_raw").softplus();
    let z = a.sub(b.get("gauss.mu")).div(&sigma);
    let density = z.square().scale(-0.5).exp().div(&sigma.scale((2.0 * PI).sqrt()));
    density.mul(&masks.pair_mask)
}

/// Returns `(y, Q, Φ3D)`.
pub fn build_3d_inputs(b: &Bound, x0: &Var, psi: &Var, masks: &Masks) -> (Var, PairRep, Var) {
    let n = masks.n;
    let k = psi.shape()[1];
    let centrality = psi.reshape(&[n, n, k]).sum_axis(1).matmul(b.get("gauss.wd"));
    let y = x0.add(&centrality);
    let phi = psi
        .matmul(b.get("gauss.wd1"))
        .gelu()
        .matmul(b.get("gauss.wd2"))
        .mul(&masks.pair_mask);
    let q = lift(b, Branch::ThreeD, &phi, masks);
    (y, q, phi)
}

/// Two-layer GELU MLP mapping atom embeddings to one modality's input stream.
pub fn feature_learner(b: &Bound, x0: &Var, which: Branch) -> Var {
    mlp(b, &format!("fl_{}", which.tag()), x0)
}

/// Multi-head attention of `xq` over `xkv`. Returns the projected output and
/// the scaled per-head query-key products (before any bias).
pub fn multi_head_attention(
    b: &Bound,
    prefix: &str,
    xq: &Var,
    xkv: &Var,
    pair: Option<&PairRep>,
    key_bias: &Var,
    heads: usize,
) -> (Var, Vec<Var>) {
    let p = |s: &str| format!("{prefix}.{s}");
    let q = linear(b, &p("wq"), &p("bq"), xq);
    let k = linear(b, &p("wk"), &p("bk"), xkv);
    let v = linear(b, &p("wv"), &p("bv"), xkv);
    let (n, m) = (xq.shape()[0], xkv.shape()[0]);
    let d = q.shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut qks = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.narrow_cols(h * dh, dh);
        let kh = k.narrow_cols(h * dh, dh);
        let vh = v.narrow_cols(h * dh, dh);
        let qk = qh.matmul(&kh.transpose()).scale(scale);
        let mut logits = qk.add(key_bias);
        if let Some(pair) = pair {
            logits = logits.add(&pair.narrow_cols(h, 1).reshape(&[n, m]));
        }
        outs.push(logits.softmax().matmul(&vh));
        qks.push(qk);
    }
    let merged = if heads == 1 {
        outs.pop().unwrap()
    } else {
        Var::concat(&outs, 1)
    };
    (linear(b, &p("wo"), &p("bo"), &merged), qks)
}

/// Pair update: adds each head's scaled query-key products on real pairs.
fn update_pair(pair: &PairRep, qks: &[Var], masks: &Masks) -> PairRep {
    let n2 = masks.n * masks.n;
    let cols: Vec<Var> = qks.iter().map(|qk| qk.reshape(&[n2, 1])).collect();
    let delta = if cols.len() == 1 {
        cols[0].clone()
    } else {
        Var::concat(&cols, 1)
    };
    pair.add(&delta.mul(&masks.pair_mask))
}

/// One pre-norm block with self-attention biased by (and updating) `pair`.
fn pair_block(
    b: &Bound,
    attn: &str,
    own: &str,
    s: &Var,
    pair: &PairRep,
    masks: &Masks,
    heads: usize,
) -> (Var, PairRep) {
    let h = ln(b, &format!("{own}.ln1"), s);
    let (a, qks) = multi_head_attention(b, attn, &h, &h, Some(pair), &masks.key_bias, heads);
    let s = s.add(&a);
    let pair = update_pair(pair, &qks, masks);
    let f = mlp(b, &format!("{own}.ffn"), &ln(b, &format!("{own}.ln2"), &s));
    (s.add(&f), pair)
}

/// Modality encoder: self-attention weights are shared between branches,
/// norms and feed-forward weights are not.
pub fn encoder_forward(
    b: &Bound,
    branch: Branch,
    stream: &Var,
    pair: &PairRep,
    masks: &Masks,
    cfg: &ModelConfig,
) -> Result<(Var, PairRep)> {
    let (mut s, mut p) = (stream.clone(), pair.clone());
    for l in 0..cfg.f {
        let own = format!("enc_{}.{l}", branch.tag());
        (s, p) = pair_block(b, &format!("enc.{l}.attn"), &own, &s, &p, masks, cfg.heads);
        check_finite(&s, &own)?;
        check_finite(&p, &own)?;
    }
    Ok((s, p))
}

/// Cross-modality decoder. Self-attention weights are shared by both
/// directions; cross-attention, norms and feed-forward are per direction.
pub fn decoder_forward(
    b: &Bound,
    direction: Direction,
    source: &Var,
    self_bias: &PairRep,
    memory: &Var,
    masks: &Masks,
    cfg: &ModelConfig,
) -> Result<(Var, PairRep)> {
    if memory.shape() != source.shape() {
        return Err(Error::Shape(format!(
            "decoder memory {:?} does not match source {:?}",
            memory.shape(),
            source.shape()
        )));
    }
    let (mut s, mut p) = (source.clone(), self_bias.clone());
    for l in 0..cfg.f {
        let own = format!("{}.{l}", direction.prefix());
        let h = ln(b, &format!("{own}.ln1"), &s);
        let (a, qks) = multi_head_attention(
            b,
            &format!("dec.{l}.attn"),
            &h,
            &h,
            Some(&p),
            &masks.key_bias,
            cfg.heads,
        );
        s = s.add(&a);
        p = update_pair(&p, &qks, masks);
        let h = ln(b, &format!("{own}.ln2"), &s);
        let (c, _) = multi_head_attention(
            b,
            &format!("{own}.cross"),
            &h,
            memory,
            None,
            &masks.key_bias,
            cfg.heads,
        );
        s = s.add(&c);
        let f = mlp(b, &format!("{own}.ffn"), &ln(b, &format!("{own}.ln3"), &s));
        s = s.add(&f);
        check_finite(&s, &own)?;
        check_finite(&p, &own)?;
    }
    Ok((s, p))
}

/// Multi-modal encoder; one call per stream, all weights shared.
pub fn mm_encoder(
    b: &Bound,
    stream: &Var,
    pair: &PairRep,
    masks: &Masks,
    cfg: &ModelConfig,
) -> Result<(Var, PairRep)> {
    let (mut s, mut p) = (stream.clone(), pair.clone());
    for l in 0..cfg.l {
        let own = format!("mm.{l}");
        (s, p) = pair_block(b, &format!("{own}.attn"), &own, &s, &p, masks, cfg.heads);
        check_finite(&s, &own)?;
        check_finite(&p, &own)?;
    }
    Ok((s, p))
}

pub fn head_masked_atom(b: &Bound, stream: &Var) -> Var {
    mlp(b, "head_atom", &ln(b, "head_atom.ln", stream))
}

/// SPD logits per pair from the concatenated channels of two pair tensors.
pub fn head_spd(b: &Bound, first: &PairRep, second: &PairRep) -> Var {
    let x = Var::concat(&[first.clone(), second.clone()], 1);
    mlp(b, "head_spd", &x)
}

/// `r̂_i = r_i + (1/n) Σ_j (r_i − r_j) u_ij` with `u_ij` a scalar read out of
/// the pair channels; `coords` is `n×3` with zero rows on padding.
pub fn head_position(b: &Bound, pair: &PairRep, coords: &Var, masks: &Masks) -> Var {
    let n = masks.n;
    let u = mlp(b, "head_pos", pair).mul(&masks.pair_mask).reshape(&[n, n]);
    let row = u.sum_axis(1).reshape(&[n, 1]);
    let delta = coords.mul(&row).sub(&u.matmul(coords));
    coords.add(&delta.scale(1.0 / masks.n_real.max(1) as f64))
}
