use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, WeightInit};
use crate::autograd::{softplus_inv, Tensor, Var};
use crate::error::{Error, Result};
use crate::featurize::PAIR_CLASSES;

enum Init {
    /// Token-indexed vector tables.
    Embed,
    /// Scalar bias tables read one entry per pair.
    Bias,
    /// Weight matrices; the first dimension is the fan-in.
    Normal,
    /// Weight matrices of the prediction heads.
    Head,
    Zeros,
    Ones,
    Const(f64),
    Linspace(f64, f64),
}

/// Every learnable tensor of the model, keyed by a dotted name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

fn attention(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.w{p}"), vec![d, d], Init::Normal));
        out.push((format!("{prefix}.b{p}"), vec![d], Init::Zeros));
    }
}

fn layer_norm(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.g"), vec![d], Init::Ones));
    out.push((format!("{prefix}.b"), vec![d], Init::Zeros));
}

fn mlp(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, dims: [usize; 3]) {
    mlp_with(out, prefix, dims, || Init::Normal);
}

fn mlp_with(
    out: &mut Vec<(String, Vec<usize>, Init)>,
    prefix: &str,
    dims: [usize; 3],
    weight: impl Fn() -> Init,
) {
    out.push((format!("{prefix}.w1"), vec![dims[0], dims[1]], weight()));
    out.push((format!("{prefix}.b1"), vec![dims[1]], Init::Zeros));
    out.push((format!("{prefix}.w2"), vec![dims[1], dims[2]], weight()));
    out.push((format!("{prefix}.b2"), vec![dims[2]], Init::Zeros));
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, k, h) = (cfg.d, cfg.k, cfg.heads);
    let fc = &cfg.features;
    let hidden = d * cfg.mlp_ratio;
    let mut out = vec![
        ("embed.atom".to_string(), vec![cfg.vocab_size(), d], Init::Embed),
        ("embed.degree".into(), vec![fc.max_degree + 1, d], Init::Embed),
        ("embed.spd".into(), vec![fc.spd_buckets(), 1], Init::Bias),
        ("embed.edge".into(), vec![fc.max_path_len * fc.edge_feat_dim, 1], Init::Bias),
        ("pair_in.2d.w".into(), vec![1, h], Init::Ones),
        ("pair_in.2d.b".into(), vec![h], Init::Zeros),
        ("pair_in.3d.w".into(), vec![1, h], Init::Ones),
        ("pair_in.3d.b".into(), vec![h], Init::Zeros),
        ("gauss.mu".into(), vec![k], Init::Linspace(0.0, 10.0)),
        ("gauss.sigma_raw".into(), vec![k], Init::Const(softplus_inv(1.0))),
        ("gauss.gamma".into(), vec![PAIR_CLASSES, 1], Init::Ones),
        ("gauss.beta".into(), vec![PAIR_CLASSES, 1], Init::Zeros),
        ("gauss.wd".into(), vec![k, d], Init::Normal),
        ("gauss.wd1".into(), vec![k, k], Init::Normal),
        ("gauss.wd2".into(), vec![k, 1], Init::Normal),
    ];
    mlp(&mut out, "fl_2d", [d, d, d]);
    mlp(&mut out, "fl_3d", [d, d, d]);
    for l in 0..cfg.f {
        attention(&mut out, &format!("enc.{l}.attn"), d);
        for m in ["enc_2d", "enc_3d"] {
            layer_norm(&mut out, &format!("{m}.{l}.ln1"), d);
            layer_norm(&mut out, &format!("{m}.{l}.ln2"), d);
            mlp(&mut out, &format!("{m}.{l}.ffn"), [d, hidden, d]);
        }
    }
    for l in 0..cfg.f {
        attention(&mut out, &format!("dec.{l}.attn"), d);
        for m in ["dec_3d2d", "dec_2d3d"] {
            attention(&mut out, &format!("{m}.{l}.cross"), d);
            layer_norm(&mut out, &format!("{m}.{l}.ln1"), d);
            layer_norm(&mut out, &format!("{m}.{l}.ln2"), d);
            layer_norm(&mut out, &format!("{m}.{l}.ln3"), d);
            mlp(&mut out, &format!("{m}.{l}.ffn"), [d, hidden, d]);
        }
    }
    for l in 0..cfg.l {
        attention(&mut out, &format!("mm.{l}.attn"), d);
        layer_norm(&mut out, &format!("mm.{l}.ln1"), d);
        layer_norm(&mut out, &format!("mm.{l}.ln2"), d);
        mlp(&mut out, &format!("mm.{l}.ffn"), [d, hidden, d]);
    }
    layer_norm(&mut out, "head_atom.ln", d);
    mlp_with(&mut out, "head_atom", [d, cfg.head_hidden, cfg.vocab_size()], || Init::Head);
    mlp_with(&mut out, "head_spd", [2 * h, cfg.spd_hidden, cfg.spd_classes()], || Init::Head);
    mlp_with(&mut out, "head_pos", [h, h, 1], || Init::Head);
    out
}

impl ParamStore {
    /// Seeded initialization of every parameter for `cfg`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in layout(cfg) {
            let len: usize = shape.iter().product();
            let std = match (&init, cfg.weight_init) {
                (Init::Head, WeightInit::FanInHeads) => 1.0 / (shape[0] as f64).sqrt(),
                (Init::Bias, _) => 1.0,
                (Init::Embed, _) => cfg.embed_std.unwrap_or(cfg.init_std),
                _ => cfg.init_std,
            };
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            let data = match init {
                Init::Embed | Init::Bias | Init::Normal | Init::Head => (0..len).map(|_| normal.sample(&mut rng)).collect(),
                Init::Zeros => vec![0.0; len],
                Init::Ones => vec![1.0; len],
                Init::Const(c) => vec![c; len],
                Init::Linspace(lo, hi) => (0..len)
                    .map(|i| if len == 1 { lo } else { lo + (hi - lo) * i as f64 / (len - 1) as f64 })
                    .collect(),
            };
            tensors.insert(name, Tensor::new(shape, data));
        }
        Ok(Self { tensors })
    }

    /// Checks that names and shapes match the layout implied by `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = layout(cfg);
        if expected.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors, configuration expects {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for (name, shape, _) in expected {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{name}' has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor '{name}'"))),
            }
        }
        Ok(())
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Binds every tensor as a trainable leaf.
    pub fn bind(&self) -> Bound {
        self.bind_with(|_| true)
    }

    /// Binds tensors, making those rejected by `trainable` constants.
    pub fn bind_with(&self, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable(k) {
                    Var::param(t.clone())
                } else {
                    Var::constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters bound into a computation graph for one forward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Copy of this binding with every parameter detached.
    pub fn frozen(&self) -> Bound {
        Bound {
            vars: self
                .vars
                .iter()
                .map(|(k, v)| (k.clone(), Var::constant(v.value().clone())))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_complete() {
        let cfg = ModelConfig::tiny();
        let a = ParamStore::init(&cfg, 3).unwrap();
        let b = ParamStore::init(&cfg, 3).unwrap();
        let c = ParamStore::init(&cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.check_layout(&cfg).unwrap();
        let mu = a.get("gauss.mu").unwrap().data();
        assert_eq!(mu, &[0.0, 10.0 / 3.0, 20.0 / 3.0, 10.0]);
        let sigma = crate::autograd::softplus(a.get("gauss.sigma_raw").unwrap().data()[0]);
        assert!((sigma - 1.0).abs() < 1e-12);
        assert!(a.get("enc.0.attn.wq").is_some());
        assert!(a.get("enc_2d.0.attn.wq").is_none());
    }

    #[test]
    fn layout_mismatch_detected() {
        let cfg = ModelConfig::tiny();
        let a = ParamStore::init(&cfg, 3).unwrap();
        let other = ModelConfig { d: 16, ..cfg };
        assert!(a.check_layout(&other).is_err());
    }

    #[test]
    fn bind_with_freezes() {
        let a = ParamStore::init(&ModelConfig::tiny(), 1).unwrap();
        let b = a.bind_with(|n| !n.starts_with("fl_3d."));
        assert!(!b.get("fl_3d.w1").requires_grad());
        assert!(b.get("fl_2d.w1").requires_grad());
    }
}
