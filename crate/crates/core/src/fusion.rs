//! Multi-head scaled dot-product attention and the β-weighted combination
//! of expression and fused embeddings. The same primitive serves the
//! backbone's self-attention (queries = keys) and the cross-modal fusion
//! layer (queries from the expression embedding, keys and values from the
//! structural embedding).

use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub heads: usize,
    pub hidden: usize,
    /// Weight β on h_fusion in h_combined = h_expr + β·h_fusion.
    pub beta: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            heads: 4,
            hidden: 64,
            beta: 1.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden width {} must be divisible by head count {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn init_params(&self, seed: u64, params: &mut ParamSet) {
        init_attention_params("fusion", self.hidden, seed, params);
    }
}

/// Query/key/value/output projection weights for one attention module.
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
    pub heads: usize,
}

pub fn init_attention_params(prefix: &str, d: usize, seed: u64, params: &mut ParamSet) {
    let scale = (1.0 / d as f64).sqrt();
    for part in ["wq", "wk", "wv", "wo"] {
        let name = format!("{prefix}.{part}");
        let mut r = rng::stream(seed, &format!("init::{name}"), 0, 0);
        let data: Vec<f64> = (0..d * d).map(|_| r.gen_range(-scale..scale)).collect();
        params.insert(&name, Tensor::matrix(d, d, data).unwrap());
    }
    params.insert(&format!("{prefix}.bo"), Tensor::matrix(1, d, vec![0.0; d]).unwrap());
}

pub fn bind_attention_params(
    prefix: &str,
    heads: usize,
    set: &ParamSet,
    vars: &[Var],
) -> AttentionParams {
    let var = |part: &str| {
        vars[set
            .index_of(&format!("{prefix}.{part}"))
            .unwrap_or_else(|| panic!("missing parameter {prefix}.{part}"))]
    };
    AttentionParams {
        wq: var("wq"),
        wk: var("wk"),
        wv: var("wv"),
        wo: var("wo"),
        bo: var("bo"),
        heads,
    }
}

/// Per head: scaled dot-product attention at 1/√(d/H), queries projected
/// from `query_input`, keys and values from `key_value_input`; heads
/// concatenated then output-projected. Attention matrices are materialized
/// only on request.
pub fn multi_head_attention(
    tape: &mut Tape,
    query_input: Var,
    key_value_input: Var,
    params: &AttentionParams,
    return_attention: bool,
) -> Result<(Var, Option<Vec<Tensor>>)> {
    let (nq, d) = tape.value(query_input).dims2();
    let (nk, dk) = tape.value(key_value_input).dims2();
    if d != dk {
        return Err(Error::shape(format!(
            "attention widths disagree: {d} vs {dk}"
        )));
    }
    if d % params.heads != 0 {
        return Err(Error::shape(format!(
            "width {d} not divisible by {} heads",
            params.heads
        )));
    }
    let dh = d / params.heads;
    let q_all = tape.matmul(query_input, params.wq)?;
    let k_all = tape.matmul(key_value_input, params.wk)?;
    let v_all = tape.matmul(key_value_input, params.wv)?;
    let mut head_outputs: Option<Var> = None;
    let mut attentions = if return_attention { Some(Vec::new()) } else { None };
    for h in 0..params.heads {
        let lo = h * dh;
        let hi = lo + dh;
        let q = tape.slice_cols(q_all, lo, hi)?;
        let k = tape.slice_cols(k_all, lo, hi)?;
        let v = tape.slice_cols(v_all, lo, hi)?;
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_rows(scaled)?;
        if let Some(a) = &mut attentions {
            a.push(tape.value(attn).clone());
        }
        let out = tape.matmul(attn, v)?;
        head_outputs = Some(match head_outputs {
            None => out,
            Some(prev) => tape.concat_cols(prev, out)?,
        });
    }
    let cat = head_outputs.expect("at least one head");
    debug_assert_eq!(tape.value(cat).dims2(), (nq, d));
    let _ = nk;
    let proj = tape.matmul(cat, params.wo)?;
    let out = tape.add_row(proj, params.bo)?;
    Ok((out, attentions))
}

/// Cross-attention fusion output for one cell.
pub struct FusionOutput {
    pub h_fusion: Var,
    pub attention: Option<Vec<Tensor>>,
}

/// Queries from the expression embedding, keys and values from the
/// structural embedding. Rows of both inputs must be aligned to the same
/// gene order; callers gather structural rows by token gene index first.
/// The structural input is carried through a skip connection: rows are
/// gene-aligned, so each token keeps direct access to its own structural
/// features while attention contributes a learned mixture.
pub fn cross_attention(
    tape: &mut Tape,
    h_expr: Var,
    h_struct: Var,
    params: &AttentionParams,
    return_attention: bool,
) -> Result<FusionOutput> {
    let (ne, _) = tape.value(h_expr).dims2();
    let (ns, _) = tape.value(h_struct).dims2();
    if ne != ns {
        return Err(Error::shape(format!(
            "misaligned gene sets: {ne} expression rows vs {ns} structural rows"
        )));
    }
    let (mixed, attention) =
        multi_head_attention(tape, h_expr, h_struct, params, return_attention)?;
    let h_fusion = tape.add(mixed, h_struct)?;
    Ok(FusionOutput { h_fusion, attention })
}

/// h_combined = h_expr + β·h_fusion.
pub fn combine(tape: &mut Tape, h_expr: Var, h_fusion: Var, beta: f64) -> Result<Var> {
    let scaled = tape.scale(h_fusion, beta);
    tape.add(h_expr, scaled)
}
