//! Adam with decoupled weight decay, cosine schedule, the seed / continued
//! training loop and checkpoint persistence.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::{init_model, loss_and_grad, ModelConfig, ParamLayout, Params, Scalar};
use crate::par::ExecPolicy;
use crate::tokenizer::PackedBatch;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState { step: 0, m: vec![T::zero(); len], v: vec![T::zero(); len] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 }
    }
}

/// One bias-corrected Adam update with decoupled weight decay.
///
/// Decay (`p ← p − lr·wd·p`) applies only to coordinates whose tensor is
/// marked as decaying in the parameter layout.
pub fn adam_step<T: Scalar>(
    params: &mut Params<T>,
    grads: &Params<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = params.flat.len();
    if grads.flat.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::LayoutMismatch(format!(
            "params {n}, grads {}, adam {}/{}",
            grads.flat.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let layout = ParamLayout::new(&params.config);
    if let Some(i) = grads.flat.iter().position(|g| !g.is_finite()) {
        let name = layout.tensor_at(i).map(|t| t.name.clone()).unwrap_or_else(|| format!("#{i}"));
        return Err(Error::NonFiniteGradient(name));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let step_size = T::of(lr / bc1);
    let inv_bc2_sqrt = T::of(1.0 / bc2.sqrt());
    let eps = T::of(cfg.eps);
    let decay = T::of(1.0 - lr * cfg.weight_decay);
    for spec in layout.tensors() {
        for i in spec.range() {
            let g = grads.flat[i];
            let m = b1 * state.m[i] + one_b1 * g;
            let v = b2 * state.v[i] + one_b2 * g * g;
            state.m[i] = m;
            state.v[i] = v;
            let mut p = params.flat[i];
            if spec.decay && cfg.weight_decay != 0.0 {
                p = p * decay;
            }
            params.flat[i] = p - step_size * m / (v.sqrt() * inv_bc2_sqrt + eps);
        }
    }
    Ok(())
}

/// Linear warmup to `max_lr`, then cosine annealing to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub const DEFAULT_MAX_LR: f64 = 6e-4;
    pub const DEFAULT_MIN_LR: f64 = 6e-5;
    pub const CONTINUED_WARMUP_FRACTION: f64 = 0.01;

    pub fn new(max_lr: f64, min_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        let s = Schedule { max_lr, min_lr, warmup_steps, total_steps };
        s.validate()?;
        Ok(s)
    }

    /// Sized so that `total_steps` batches of `tokens_per_step` cover the
    /// budget, with `warmup_fraction` of the steps spent warming up.
    pub fn for_budget(max_lr: f64, min_lr: f64, warmup_fraction: f64, budget_tokens: u64, tokens_per_step: u64) -> Result<Self> {
        if tokens_per_step == 0 {
            return Err(Error::invalid("tokens_per_step must be positive"));
        }
        let total = budget_tokens.div_ceil(tokens_per_step).max(1);
        let warmup = ((total as f64 * warmup_fraction).floor() as u64).min(total - 1);
        Self::new(max_lr, min_lr, warmup, total)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr > 0.0 && self.min_lr <= self.max_lr) {
            return Err(Error::invalid("schedule needs 0 < min_lr <= max_lr"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::invalid("schedule needs warmup_steps < total_steps"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::invalid(format!("step {step} beyond schedule end {}", self.total_steps)));
        }
        if step < self.warmup_steps {
            return Ok(self.max_lr * step as f64 / self.warmup_steps as f64);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeProvenance {
    pub mode: String,
    pub member_hashes: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    /// Content hash of the root seed checkpoint; empty for seed models.
    pub seed_checkpoint_hash: String,
    pub trained_partition_ids: Vec<String>,
    pub tokens_trained: u64,
    pub schedule_used: Option<Schedule>,
    #[serde(default)]
    pub merged: Option<MergeProvenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: Params<f32>,
    pub adam: AdamState<f32>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    provenance: Provenance,
    adam_step: u64,
    param_count: u64,
}

const MAGIC: &[u8; 8] = b"MXSCKPT\0";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

impl ModelCheckpoint {
    /// Untrained checkpoint from the config's init seed.
    pub fn fresh(config: &ModelConfig) -> Result<Self> {
        let params = init_model::<f32>(config)?;
        let adam = AdamState::new(params.flat.len());
        Ok(ModelCheckpoint { config: config.clone(), params, adam, provenance: Provenance::default() })
    }

    pub fn has_seed_lineage(&self) -> bool {
        self.provenance.tokens_trained > 0 || !self.provenance.seed_checkpoint_hash.is_empty()
    }

    /// Serialized form: magic, version, JSON header, little-endian `f32`
    /// params, Adam `m` and `v`, then a SHA-256 of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            provenance: self.provenance.clone(),
            adam_step: self.adam.step,
            param_count: self.params.flat.len() as u64,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let n = self.params.flat.len();
        let mut out = Vec::with_capacity(16 + header.len() + 12 * n + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in [&self.params.flat, &self.adam.m, &self.adam.v] {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt { path: origin.to_path_buf(), reason: reason.to_string() };
        if bytes.len() < 16 + DIGEST_LEN || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::ConfigMismatch(format!("unsupported checkpoint version {version}")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified)"));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header_end = 16 + hlen;
        if header_end > body.len() {
            return Err(corrupt("header overruns file"));
        }
        let header: Header = serde_json::from_slice(&body[16..header_end]).map_err(|e| corrupt(&e.to_string()))?;
        let n = header.param_count as usize;
        if ParamLayout::new(&header.config).len() != n {
            return Err(corrupt("parameter count disagrees with config"));
        }
        let payload = &body[header_end..];
        if payload.len() != 12 * n {
            return Err(corrupt("payload length mismatch"));
        }
        let read = |k: usize| -> Vec<f32> {
            payload[4 * n * k..4 * n * (k + 1)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        Ok(ModelCheckpoint {
            params: Params { config: header.config.clone(), flat: read(0) },
            adam: AdamState { step: header.adam_step, m: read(1), v: read(2) },
            config: header.config,
            provenance: header.provenance,
        })
    }

    pub fn content_hash(&self) -> String {
        let bytes = self.to_bytes();
        hex(&bytes[bytes.len() - DIGEST_LEN..])
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes via a temporary sibling and rename, so readers never observe a
/// partial file.
pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<String> {
    let bytes = ckpt.to_bytes();
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))?;
    Ok(hex(&bytes[bytes.len() - DIGEST_LEN..]))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes, path)
}

/// Loads and checks the architecture against `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<ModelCheckpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.config != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has {:?} ({}x{}), expected {:?} ({}x{})",
            ckpt.config.size_tag,
            ckpt.config.n_layers,
            ckpt.config.d_model,
            expected.size_tag,
            expected.n_layers,
            expected.d_model
        )));
    }
    Ok(ckpt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// From initialization on the general seed corpus.
    Seed,
    /// From a seed checkpoint: LR schedule restarts, Adam moments carry over.
    Continued,
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub budget_tokens: u64,
    pub schedule: Schedule,
    pub mode: TrainMode,
    pub adam: AdamConfig,
    pub partition_ids: Vec<String>,
    /// Discard the start checkpoint's Adam moments (ablation only).
    pub reset_optimizer: bool,
    pub policy: ExecPolicy,
}

impl TrainSettings {
    pub fn new(budget_tokens: u64, schedule: Schedule, mode: TrainMode) -> Self {
        TrainSettings {
            budget_tokens,
            schedule,
            mode,
            adam: AdamConfig::default(),
            partition_ids: Vec::new(),
            reset_optimizer: false,
            policy: ExecPolicy::default(),
        }
    }

    pub fn partitions(mut self, ids: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.partition_ids = ids.into_iter().map(Into::into).collect();
        self
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
}

/// Consumes batches until at least `budget_tokens` unmasked tokens have been
/// trained on.
pub fn train<I>(start: &ModelCheckpoint, stream: I, settings: &TrainSettings) -> Result<TrainOutcome>
where
    I: IntoIterator<Item = PackedBatch>,
{
    if settings.budget_tokens == 0 {
        return Err(Error::invalid("training budget must be positive"));
    }
    settings.schedule.validate()?;
    if settings.mode == TrainMode::Continued && !start.has_seed_lineage() {
        return Err(Error::invalid("continued training needs a seed-trained start checkpoint"));
    }
    let mut params = start.params.clone();
    let mut adam = if settings.reset_optimizer {
        AdamState::new(params.flat.len())
    } else {
        start.adam.clone()
    };
    let mut consumed = 0u64;
    let mut losses = Vec::new();
    let mut lrs = Vec::new();
    let mut batches = stream.into_iter();
    let mut step = 0u64;
    while consumed < settings.budget_tokens {
        let batch = batches.next().ok_or(Error::StreamExhausted { consumed, budget: settings.budget_tokens })?;
        let lr = settings.schedule.lr_at(step.min(settings.schedule.total_steps))?;
        let (loss, grads) = loss_and_grad(&params, &batch, settings.policy)?;
        adam_step(&mut params, &grads, &mut adam, lr, &settings.adam)?;
        consumed += batch.unmasked_tokens();
        losses.push(loss);
        lrs.push(lr);
        step += 1;
    }
    let mut provenance = start.provenance.clone();
    if settings.mode == TrainMode::Continued && provenance.seed_checkpoint_hash.is_empty() {
        provenance.seed_checkpoint_hash = start.content_hash();
    }
    provenance.trained_partition_ids.extend(settings.partition_ids.iter().cloned());
    provenance.tokens_trained += consumed;
    provenance.schedule_used = Some(settings.schedule);
    provenance.merged = None;
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint { config: start.config.clone(), params, adam, provenance },
        losses,
        lrs,
    })
}
