use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::tokenizer::VOCAB_SIZE;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    pub init_seed: u64,
    pub size_tag: String,
    /// `x + Attn(LN(x)) + MLP(LN(x))` when true, the sequential
    /// pre-norm block otherwise.
    #[serde(default = "default_true")]
    pub parallel_blocks: bool,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// The default desk-scale model (~0.2M parameters).
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            seq_len: 128,
            init_seed: 0,
            size_tag: "desk".into(),
            parallel_blocks: true,
            tie_embeddings: true,
        }
    }

    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 128,
            seq_len: 64,
            size_tag: "tiny".into(),
            ..Self::desk()
        }
    }

    /// Roughly four times the non-embedding parameters of [`ModelConfig::tiny`].
    pub fn small() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            seq_len: 64,
            size_tag: "small".into(),
            ..Self::desk()
        }
    }

    pub fn preset(tag: &str) -> Option<Self> {
        match tag {
            "desk" => Some(Self::desk()),
            "tiny" => Some(Self::tiny()),
            "small" => Some(Self::small()),
            _ => None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if self.seq_len < 2 {
            return Err(Error::config("seq_len", "must be at least 2"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config("n_heads", "must divide d_model"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Everything except the init seed must agree for two parameter sets to
    /// share a flat layout.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self.vocab_size == other.vocab_size
            && self.d_model == other.d_model
            && self.n_layers == other.n_layers
            && self.n_heads == other.n_heads
            && self.d_ff == other.d_ff
            && self.seq_len == other.seq_len
            && self.parallel_blocks == other.parallel_blocks
            && self.tie_embeddings == other.tie_embeddings
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Matrices decay; norm gains and biases are exempt.
    pub decay: bool,
    /// Residual output projections get a depth-scaled init.
    pub(crate) residual_out: bool,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerIdx {
    pub ln1: NormIdx,
    pub ln2: Option<NormIdx>,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub w_in: usize,
    pub b_in: usize,
    pub w_out: usize,
    pub b_out: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerIdx>,
    pub ln_f: NormIdx,
    pub head: usize,
}

/// Name → (offset, shape) index of the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    tensors: Vec<TensorSpec>,
    len: usize,
    pub(crate) offsets: Offsets,
}

struct Builder {
    tensors: Vec<TensorSpec>,
    len: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], decay: bool, residual_out: bool) -> usize {
        let offset = self.len;
        let spec = TensorSpec { name, shape: shape.to_vec(), offset, decay, residual_out };
        self.len += spec.len();
        self.tensors.push(spec);
        offset
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIdx {
        NormIdx {
            gain: self.add(format!("{prefix}.gain"), &[d], false, false),
            bias: self.add(format!("{prefix}.bias"), &[d], false, false),
        }
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, f, s) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.seq_len);
        let mut b = Builder { tensors: Vec::new(), len: 0 };
        let tok_emb = b.add("tok_emb".into(), &[v, d], true, false);
        let pos_emb = b.add("pos_emb".into(), &[s, d], true, false);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("layers.{l}");
            let ln1 = b.norm(&format!("{p}.ln1"), d);
            let ln2 = (!cfg.parallel_blocks).then(|| b.norm(&format!("{p}.ln2"), d));
            layers.push(LayerIdx {
                ln1,
                ln2,
                wq: b.add(format!("{p}.attn.wq"), &[d, d], true, false),
                bq: b.add(format!("{p}.attn.bq"), &[d], false, false),
                wk: b.add(format!("{p}.attn.wk"), &[d, d], true, false),
                bk: b.add(format!("{p}.attn.bk"), &[d], false, false),
                wv: b.add(format!("{p}.attn.wv"), &[d, d], true, false),
                bv: b.add(format!("{p}.attn.bv"), &[d], false, false),
                wo: b.add(format!("{p}.attn.wo"), &[d, d], true, true),
                bo: b.add(format!("{p}.attn.bo"), &[d], false, false),
                w_in: b.add(format!("{p}.mlp.w_in"), &[d, f], true, false),
                b_in: b.add(format!("{p}.mlp.b_in"), &[f], false, false),
                w_out: b.add(format!("{p}.mlp.w_out"), &[f, d], true, true),
                b_out: b.add(format!("{p}.mlp.b_out"), &[d], false, false),
            });
        }
        let ln_f = b.norm("ln_f", d);
        let head = if cfg.tie_embeddings {
            tok_emb
        } else {
            b.add("lm_head".into(), &[v, d], true, false)
        };
        ParamLayout {
            tensors: b.tensors,
            len: b.len,
            offsets: Offsets { tok_emb, pos_emb, layers, ln_f, head },
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Tensor containing flat index `i`.
    pub fn tensor_at(&self, i: usize) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.range().contains(&i))
    }

    /// Per-coordinate weight-decay mask.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len];
        for t in &self.tensors {
            mask[t.range()].fill(t.decay);
        }
        mask
    }
}

/// A model's parameters (or gradients) as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub config: ModelConfig,
    pub flat: Vec<T>,
}

pub type ParamSet = Params<f32>;
pub type GradSet = Params<f32>;

impl<T: Scalar> Params<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let len = ParamLayout::new(config).len();
        Params { config: config.clone(), flat: vec![T::zero(); len] }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config)
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        let spec = self.layout().get(name)?.clone();
        Some(&self.flat[spec.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let spec = self.layout().get(name)?.clone();
        Some(&mut self.flat[spec.range()])
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params { config: self.config.clone(), flat: self.flat.iter().map(|x| U::of(x.as_f64())).collect() }
    }

    pub fn same_layout(&self, other: &Params<T>) -> bool {
        self.config.same_architecture(&other.config) && self.flat.len() == other.flat.len()
    }
}

/// Deterministic initialization: N(0, 0.02) for matrices, with residual
/// output projections scaled by 1/√(2·n_layers); norm gains 1, biases 0.
pub fn init_model<T: Scalar>(config: &ModelConfig) -> Result<Params<T>> {
    config.validate()?;
    let layout = ParamLayout::new(config);
    let mut flat = vec![T::zero(); layout.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let base = Normal::new(0.0, INIT_STD).expect("valid std");
    let out_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();
    for t in layout.tensors() {
        let chunk = &mut flat[t.range()];
        if t.name.ends_with(".gain") {
            chunk.fill(T::one());
        } else if t.decay {
            let scale = if t.residual_out { out_scale } else { 1.0 };
            for x in chunk.iter_mut() {
                *x = T::of(base.sample(&mut rng) * scale);
            }
        }
    }
    Ok(Params { config: config.clone(), flat })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 258,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            seq_len: 16,
            init_seed: 1,
            size_tag: "fd".into(),
            parallel_blocks: true,
            tie_embeddings: true,
        }
    }

    #[test]
    fn flat_length_matches_closed_form() {
        let c = fd_config();
        let (v, d, f, s, l) = (258, 8, 32, 16, 2);
        let per_layer = 2 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
        let expected = v * d + s * d + l * per_layer + 2 * d;
        assert_eq!(expected, 3920);
        assert_eq!(ParamLayout::new(&c).len(), expected);
        let untied = ModelConfig { tie_embeddings: false, ..c.clone() };
        assert_eq!(ParamLayout::new(&untied).len(), expected + v * d);
        let seq = ModelConfig { parallel_blocks: false, ..c };
        assert_eq!(ParamLayout::new(&seq).len(), expected + l * 2 * d);
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let a: ParamSet = init_model(&fd_config()).unwrap();
        let b: ParamSet = init_model(&fd_config()).unwrap();
        assert_eq!(a.flat, b.flat);
        let c: ParamSet = init_model(&fd_config().with_seed(2)).unwrap();
        assert_ne!(a.flat, c.flat);
        assert!(a.tensor("ln_f.gain").unwrap().iter().all(|&g| g == 1.0));
        assert!(a.tensor("layers.0.attn.bq").unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn residual_projections_are_scaled_down() {
        let cfg = ModelConfig { d_model: 64, d_ff: 256, n_heads: 4, ..fd_config() };
        let p: Params<f64> = init_model(&cfg).unwrap();
        let std = |xs: &[f64]| (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt();
        let wq = std(p.tensor("layers.0.attn.wq").unwrap());
        let wo = std(p.tensor("layers.0.attn.wo").unwrap());
        assert!((wq - 0.02).abs() < 0.002, "{wq}");
        assert!((wo - 0.01).abs() < 0.001, "{wo}");
    }

    #[test]
    fn rejects_bad_head_split() {
        let bad = ModelConfig { n_heads: 3, ..fd_config() };
        assert!(init_model::<f32>(&bad).is_err());
    }
}
