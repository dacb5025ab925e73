//! A small decoder-only transformer with hand-written gradients.

mod model;
mod params;
mod scalar;

pub use model::{backward, forward_nll, forward_nll_with, loss_and_grad, token_losses, ForwardOutput, TokenLosses};
pub use params::{init_model, GradSet, ModelConfig, ParamLayout, ParamSet, Params, TensorSpec};
pub use scalar::Scalar;

use serde::{Deserialize, Serialize};

use crate::corpus::DocumentSet;
use crate::error::{Error, Result};
use crate::par::ExecPolicy;
use crate::tokenizer::{encode, pack_sequences};

const EVAL_ROWS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub domain_id: String,
    pub token_count: u64,
    /// Summed negative log-likelihood in nats.
    pub total_nll: f64,
    pub perplexity: f64,
}

impl EvalResult {
    fn from_totals(domain_id: &str, token_count: u64, total_nll: f64) -> Self {
        EvalResult {
            domain_id: domain_id.to_string(),
            token_count,
            total_nll,
            perplexity: (total_nll / token_count as f64).exp(),
        }
    }
}

/// Per-token perplexity of `params` on already-tokenized documents.
pub fn evaluate_tokens<T, I, D>(params: &Params<T>, domain_id: &str, docs: I, policy: ExecPolicy) -> Result<EvalResult>
where
    T: Scalar,
    I: IntoIterator<Item = D>,
    D: AsRef<[u32]>,
{
    let mut total = 0.0;
    let mut count = 0u64;
    for batch in pack_sequences(docs, params.config.seq_len, EVAL_ROWS) {
        let losses = token_losses(params, &batch, policy)?;
        total += losses.total();
        count += losses.count() as u64;
    }
    if count == 0 {
        return Err(Error::NoLossTokens);
    }
    Ok(EvalResult::from_totals(domain_id, count, total))
}

pub fn evaluate_perplexity<T: Scalar>(params: &Params<T>, eval_docs: &DocumentSet, domain_id: &str) -> Result<EvalResult> {
    evaluate_perplexity_with(params, eval_docs, domain_id, ExecPolicy::default())
}

pub fn evaluate_perplexity_with<T: Scalar>(
    params: &Params<T>,
    eval_docs: &DocumentSet,
    domain_id: &str,
    policy: ExecPolicy,
) -> Result<EvalResult> {
    if eval_docs.is_empty() {
        return Err(Error::invalid(format!("evaluation set {domain_id:?} is empty")));
    }
    evaluate_tokens(params, domain_id, eval_docs.documents().iter().map(|d| encode(&d.text)), policy)
}
