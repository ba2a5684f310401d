//! Attention-pattern analysis and evaluation metrics. Every function here
//! has a brute-force oracle in its tests; implementations stay simple
//! enough to verify by hand at desk scale.

use crate::error::{Error, Result};
use crate::grn::{pearson, GeneVocabulary, Grn};
use crate::io::format_value;
use crate::tensor::Tensor;
use crate::trainer::{fusion_attention_for_cell, GrnLookup, TrainState};
use crate::io::ExpressionMatrix;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs;
use std::path::Path;

/// Gene-wise attention importance with its TF enrichment summary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttentionReport {
    /// One non-negative weight per gene, summing to 1.
    pub phi: Vec<f64>,
    pub rho: f64,
    pub heads: usize,
    pub n_genes: usize,
    /// What the average ran over, e.g. "32 evaluation cells".
    pub scope: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub metric: String,
    pub group: String,
    pub value: f64,
    pub n: usize,
}

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// φ_j = (1/(H·N)) Σ_h Σ_i a^(h)_ij over row-stochastic N×N matrices.
/// The result sums to 1 by construction; both ends are checked.
pub fn attention_importance(attention: &[Tensor]) -> Result<Vec<f64>> {
    if attention.is_empty() {
        return Err(Error::contract("attention_importance with no heads"));
    }
    let (n, m) = attention[0].dims2();
    if n != m || n == 0 {
        return Err(Error::contract(format!(
            "attention matrices must be square and non-empty, got {n}×{m}"
        )));
    }
    for (h, a) in attention.iter().enumerate() {
        if a.dims2() != (n, n) {
            return Err(Error::contract(format!(
                "head {h} has shape {:?}, expected {n}×{n}",
                a.shape
            )));
        }
        for i in 0..n {
            let row = &a.data[i * n..(i + 1) * n];
            if row.iter().any(|&v| v < 0.0) {
                return Err(Error::contract(format!(
                    "head {h} row {i} has a negative attention weight"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::contract(format!(
                    "head {h} row {i} sums to {s}, not 1"
                )));
            }
        }
    }
    let scale = 1.0 / (attention.len() * n) as f64;
    let mut phi = vec![0.0; n];
    for a in attention {
        for i in 0..n {
            for (j, p) in phi.iter_mut().enumerate() {
                *p += scale * a.data[i * n + j];
            }
        }
    }
    let total: f64 = phi.iter().sum();
    if (total - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::Numeric(format!(
            "importance weights sum to {total}, not 1"
        )));
    }
    Ok(phi)
}

/// ρ = mean(φ over TFs) / mean(φ over non-TFs).
pub fn tf_enrichment_ratio(phi: &[f64], tf_set: &HashSet<usize>) -> Result<f64> {
    let (mut tf_sum, mut tf_n) = (0.0, 0usize);
    let (mut other_sum, mut other_n) = (0.0, 0usize);
    for (j, &p) in phi.iter().enumerate() {
        if tf_set.contains(&j) {
            tf_sum += p;
            tf_n += 1;
        } else {
            other_sum += p;
            other_n += 1;
        }
    }
    if tf_n == 0 || other_n == 0 {
        return Err(Error::contract(
            "enrichment needs both TF and non-TF genes present",
        ));
    }
    let denom = other_sum / other_n as f64;
    if denom <= 0.0 {
        return Err(Error::contract(format!(
            "non-TF mean importance {denom} is not positive"
        )));
    }
    Ok((tf_sum / tf_n as f64) / denom)
}

/// Pearson correlation between predicted and true expression changes
/// relative to control.
pub fn pcc_delta(predicted: &[f64], truth: &[f64], control: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.len() != control.len() {
        return Err(Error::shape(format!(
            "length mismatch: {} predicted, {} true, {} control",
            predicted.len(),
            truth.len(),
            control.len()
        )));
    }
    let pred_delta: Vec<f64> = predicted.iter().zip(control).map(|(p, c)| p - c).collect();
    let true_delta: Vec<f64> = truth.iter().zip(control).map(|(t, c)| t - c).collect();
    pearson(&pred_delta, &true_delta)
}

/// Probability that a random positive outscores a random negative, ties
/// counted half (the Mann-Whitney formulation), computed via average
/// ranks so tied groups of any size stay exact.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("non-finite score"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::contract(
            "roc_auc needs at least one positive and one negative label",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average rank per tie group, 1-based.
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            rank[k] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(&l, _)| l)
        .map(|(_, &r)| r)
        .sum();
    let p = positives as f64;
    let u = pos_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// One row per gene for the degree-versus-importance histograms.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DegreeAttentionRow {
    pub gene: String,
    pub is_tf: bool,
    /// Total degree in the directed edge set (out-degree + in-degree).
    pub degree: usize,
    pub phi: f64,
}

pub fn degree_attention_join(
    grn: &Grn,
    phi: &[f64],
    vocab: &GeneVocabulary,
) -> Result<Vec<DegreeAttentionRow>> {
    if phi.len() != vocab.len() {
        return Err(Error::shape(format!(
            "{} importance values vs {} vocabulary genes",
            phi.len(),
            vocab.len()
        )));
    }
    let mut degree = vec![0usize; vocab.len()];
    for e in grn.edges() {
        degree[e.source] += 1;
        degree[e.target] += 1;
    }
    Ok((0..vocab.len())
        .map(|g| DegreeAttentionRow {
            gene: vocab.id(g).to_string(),
            is_tf: vocab.is_tf(g),
            degree: degree[g],
            phi: phi[g],
        })
        .collect())
}

/// Corpus-level importance: per-cell φ over that cell's tokens, scattered
/// onto the full vocabulary and averaged over the sampled cells. Each
/// cell contributes a unit mass, so the average still sums to 1.
pub fn corpus_attention_report(
    state: &TrainState,
    expression: &ExpressionMatrix,
    lookup: &GrnLookup,
    cell_rows: &[usize],
    n_genes: usize,
) -> Result<(Vec<f64>, usize)> {
    if cell_rows.is_empty() {
        return Err(Error::contract("corpus_attention_report with no cells"));
    }
    let mut phi = vec![0.0; n_genes];
    for &row in cell_rows {
        let (genes, heads) = fusion_attention_for_cell(state, expression, lookup, row)?;
        let cell_phi = attention_importance(&heads)?;
        for (tok, &gene) in genes.iter().enumerate() {
            phi[gene] += cell_phi[tok];
        }
    }
    let scale = 1.0 / cell_rows.len() as f64;
    phi.iter_mut().for_each(|p| *p *= scale);
    Ok((phi, state.config.fusion_heads))
}

pub fn save_attention_report(report: &AttentionReport, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

pub fn save_metrics(records: &[MetricRecord], path: &Path) -> Result<()> {
    let mut text = String::from("metric,group,value,n\n");
    for r in records {
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.metric,
            r.group,
            format_value(r.value),
            r.n
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn save_degree_attention_table(rows: &[DegreeAttentionRow], path: &Path) -> Result<()> {
    let mut text = String::from("gene\tis_tf\tdegree\tphi\n");
    for r in rows {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.gene,
            r.is_tf,
            r.degree,
            format_value(r.phi)
        ));
    }
    fs::write(path, text)?;
    Ok(())
}
