//! Toy transformer expression encoder/decoder for masked expression
//! modeling: tokenize nonzero genes, mask a fraction of expression values,
//! run pre-norm self-attention blocks over the token set (no positional
//! encoding), decode per-token expression, and score reconstruction only
//! on the masked positions.

use crate::error::{Error, Result};
use crate::fusion::{bind_attention_params, init_attention_params, multi_head_attention};
use crate::optim::ParamSet;
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Expression value fed to the value projection at masked positions.
/// Expression is non-negative, so the sentinel is unambiguous.
pub const MASK_SENTINEL: f64 = -1.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub feed_forward: usize,
    pub mask_ratio: f64,
    pub max_genes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden: 64,
            layers: 2,
            heads: 4,
            feed_forward: 256,
            mask_ratio: 0.15,
            max_genes: 256,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden width {} must be divisible by head count {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) || self.mask_ratio == 0.0 {
            return Err(Error::config(format!(
                "mask ratio {} outside (0, 1)",
                self.mask_ratio
            )));
        }
        if self.max_genes == 0 {
            return Err(Error::config("max_genes must be positive"));
        }
        Ok(())
    }

    /// Everything except the gene embedding table, which the trainer owns
    /// and shares with the graph encoder.
    pub fn init_params(&self, seed: u64, params: &mut ParamSet) {
        let d = self.hidden;
        let ff = self.feed_forward;
        fn uniform(
            seed: u64,
            params: &mut ParamSet,
            name: &str,
            rows: usize,
            cols: usize,
            fan_in: usize,
        ) {
            let mut r = rng::stream(seed, &format!("init::{name}"), 0, 0);
            let scale = (1.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols).map(|_| r.gen_range(-scale..scale)).collect();
            params.insert(name, Tensor::matrix(rows, cols, data).unwrap());
        }
        uniform(seed, params, "backbone.value_proj", 1, d, 1);
        params.insert("backbone.value_bias", Tensor::matrix(1, d, vec![0.0; d]).unwrap());
        for l in 0..self.layers {
            init_attention_params(&format!("backbone.l{l}.attn"), d, seed, params);
            for (ln, _) in [("ln1", 0), ("ln2", 1)] {
                params.insert(
                    &format!("backbone.l{l}.{ln}.gain"),
                    Tensor::matrix(1, d, vec![1.0; d]).unwrap(),
                );
                params.insert(
                    &format!("backbone.l{l}.{ln}.bias"),
                    Tensor::matrix(1, d, vec![0.0; d]).unwrap(),
                );
            }
            uniform(seed, params, &format!("backbone.l{l}.ffn.w1"), d, ff, d);
            params.insert(
                &format!("backbone.l{l}.ffn.b1"),
                Tensor::matrix(1, ff, vec![0.0; ff]).unwrap(),
            );
            uniform(seed, params, &format!("backbone.l{l}.ffn.w2"), ff, d, ff);
            params.insert(
                &format!("backbone.l{l}.ffn.b2"),
                Tensor::matrix(1, d, vec![0.0; d]).unwrap(),
            );
        }
        uniform(seed, params, "decoder.w", d, 1, d);
        params.insert("decoder.b", Tensor::matrix(1, 1, vec![0.0]).unwrap());
    }
}

/// One tokenized gene: identity plus (possibly masked) expression value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Token {
    pub gene: usize,
    pub value: f64,
}

/// Masked positions within a token sequence and the values they hid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub positions: Vec<usize>,
    pub original_values: Vec<f64>,
}

/// Nonzero genes as tokens, ordered by descending expression with ties
/// broken by ascending gene index, truncated to `max_genes`.
pub fn tokenize_cell(cell_expression: &[f64], max_genes: usize) -> Vec<Token> {
    let mut tokens: Vec<Token> = cell_expression
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(gene, &value)| Token { gene, value })
        .collect();
    tokens.sort_by(|a, b| b.value.partial_cmp(&a.value).unwrap().then(a.gene.cmp(&b.gene)));
    tokens.truncate(max_genes);
    tokens
}

/// Mask ⌈ratio·n⌉ uniformly chosen positions: expression values become the
/// sentinel, gene identities stay, originals are recorded.
pub fn apply_mask(
    tokens: &[Token],
    mask_ratio: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<Token>, MaskSpec)> {
    if tokens.is_empty() {
        return Err(Error::contract("apply_mask on an empty token sequence"));
    }
    let n = tokens.len();
    let m = ((mask_ratio * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.gen_range(i..n);
        order.swap(i, j);
    }
    let mut positions: Vec<usize> = order[..m].to_vec();
    positions.sort_unstable();
    let original_values = positions.iter().map(|&p| tokens[p].value).collect();
    let mut masked = tokens.to_vec();
    for &p in &positions {
        masked[p].value = MASK_SENTINEL;
    }
    Ok((
        masked,
        MaskSpec {
            positions,
            original_values,
        },
    ))
}

fn affine_layer_norm(
    tape: &mut Tape,
    x: Var,
    gain: Var,
    bias: Var,
) -> Result<Var> {
    let normed = tape.layer_norm_rows(x, 1e-5);
    let scaled = tape.mul_row(normed, gain)?;
    tape.add_row(scaled, bias)
}

/// Token embeddings: gene-identity row from the shared table plus the
/// scalar expression value through a learned projection.
pub fn embed_tokens(
    tape: &mut Tape,
    tokens: &[Token],
    gene_table: Var,
    params: &ParamSet,
    vars: &[Var],
) -> Result<Var> {
    let indices: Vec<usize> = tokens.iter().map(|t| t.gene).collect();
    let gene_emb = tape.gather_rows(gene_table, &indices)?;
    let values = tape.constant(Tensor::matrix(
        tokens.len(),
        1,
        tokens.iter().map(|t| t.value).collect(),
    )?);
    let var = |name: &str| vars[params.index_of(name).expect(name)];
    let value_emb = tape.matmul(values, var("backbone.value_proj"))?;
    let value_emb = tape.add_row(value_emb, var("backbone.value_bias"))?;
    tape.add(gene_emb, value_emb)
}

/// L pre-norm residual self-attention blocks over the token embeddings.
/// With layers = 0 this is the identity on the input embeddings.
pub fn encoder_forward(
    tape: &mut Tape,
    tokens: &[Token],
    gene_table: Var,
    config: &BackboneConfig,
    params: &ParamSet,
    vars: &[Var],
) -> Result<Var> {
    let x = embed_tokens(tape, tokens, gene_table, params, vars)?;
    encoder_blocks(tape, x, config, params, vars)
}

/// The block stack alone; callers that modify the embeddings first (the
/// perturbation-flag fine-tune) enter here.
pub fn encoder_blocks(
    tape: &mut Tape,
    input: Var,
    config: &BackboneConfig,
    params: &ParamSet,
    vars: &[Var],
) -> Result<Var> {
    let mut x = input;
    let var = |name: &str| vars[params.index_of(name).expect(name)];
    for l in 0..config.layers {
        let normed = affine_layer_norm(
            tape,
            x,
            var(&format!("backbone.l{l}.ln1.gain")),
            var(&format!("backbone.l{l}.ln1.bias")),
        )?;
        let attn_params =
            bind_attention_params(&format!("backbone.l{l}.attn"), config.heads, params, vars);
        let (attn_out, _) = multi_head_attention(tape, normed, normed, &attn_params, false)?;
        x = tape.add(x, attn_out)?;

        let normed = affine_layer_norm(
            tape,
            x,
            var(&format!("backbone.l{l}.ln2.gain")),
            var(&format!("backbone.l{l}.ln2.bias")),
        )?;
        let h = tape.matmul(normed, var(&format!("backbone.l{l}.ffn.w1")))?;
        let h = tape.add_row(h, var(&format!("backbone.l{l}.ffn.b1")))?;
        let h = tape.relu(h);
        let h = tape.matmul(h, var(&format!("backbone.l{l}.ffn.w2")))?;
        let h = tape.add_row(h, var(&format!("backbone.l{l}.ffn.b2")))?;
        x = tape.add(x, h)?;
    }
    Ok(x)
}

/// Per-token linear head: one predicted expression value per gene token.
pub fn decoder_forward(
    tape: &mut Tape,
    h_combined: Var,
    params: &ParamSet,
    vars: &[Var],
) -> Result<Var> {
    let var = |name: &str| vars[params.index_of(name).expect(name)];
    let out = tape.matmul(h_combined, var("decoder.w"))?;
    tape.add_row(out, var("decoder.b"))
}

/// Mean squared error over the masked positions only.
pub fn masked_mse_loss(tape: &mut Tape, predictions: Var, mask_spec: &MaskSpec) -> Result<Var> {
    if mask_spec.positions.is_empty() {
        return Err(Error::contract("masked_mse_loss with empty mask set"));
    }
    let (n, w) = tape.value(predictions).dims2();
    if w != 1 {
        return Err(Error::shape(format!(
            "predictions must be n×1, got {:?}",
            tape.value(predictions).shape
        )));
    }
    let mut target = vec![0.0; n];
    let mut mask = vec![0.0; n];
    for (&p, &v) in mask_spec.positions.iter().zip(&mask_spec.original_values) {
        if p >= n {
            return Err(Error::contract(format!(
                "mask position {p} outside {n} predictions"
            )));
        }
        target[p] = v;
        mask[p] = 1.0;
    }
    let target = tape.constant(Tensor::matrix(n, 1, target)?);
    let mask = tape.constant(Tensor::matrix(n, 1, mask)?);
    let diff = tape.sub(predictions, target)?;
    let sq = tape.mul(diff, diff)?;
    let masked = tape.mul(sq, mask)?;
    let total = tape.sum(masked);
    Ok(tape.scale(total, 1.0 / mask_spec.positions.len() as f64))
}
