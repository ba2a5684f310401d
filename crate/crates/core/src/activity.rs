//! Regulon activity: AUCell scoring, two-component Gaussian mixture
//! fitting, bimodal/skewed threshold selection, cell-specific GRN
//! derivation, and embedding-space reference mapping.

use crate::error::{Error, Result};
use crate::grn::{Grn, GrnScale};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

/// Cells × regulons AUC scores, all in [0, 1].
#[derive(Debug, Clone)]
pub struct ActivityMatrix {
    pub cell_ids: Vec<String>,
    pub regulon_ids: Vec<String>,
    scores: Vec<f64>,
}

impl ActivityMatrix {
    pub fn new(cell_ids: Vec<String>, regulon_ids: Vec<String>, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != cell_ids.len() * regulon_ids.len() {
            return Err(Error::shape("activity matrix size mismatch".to_string()));
        }
        if scores.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
            return Err(Error::contract("AUC score outside [0, 1]"));
        }
        Ok(ActivityMatrix {
            cell_ids,
            regulon_ids,
            scores,
        })
    }

    pub fn score(&self, cell: usize, regulon: usize) -> f64 {
        self.scores[cell * self.regulon_ids.len() + regulon]
    }

    pub fn regulon_column(&self, regulon: usize) -> Vec<f64> {
        (0..self.cell_ids.len()).map(|c| self.score(c, regulon)).collect()
    }

    pub fn cell_index(&self, id: &str) -> Option<usize> {
        self.cell_ids.iter().position(|c| c == id)
    }

    pub fn regulon_index(&self, id: &str) -> Option<usize> {
        self.regulon_ids.iter().position(|r| r == id)
    }
}

/// Area under the recovery curve of `target_set` within the top-ranked
/// fraction of the cell's expression ranking. Rank order is descending
/// expression, ties broken by ascending gene index. The curve counts
/// cumulative target hits over ranks `1..=ceil(top_fraction·G)` and the
/// score normalizes its area by the maximum achievable area.
pub fn aucell_score(
    cell_expression: &[f64],
    target_set: &HashSet<usize>,
    top_fraction: f64,
) -> Result<f64> {
    if target_set.is_empty() {
        return Err(Error::contract("aucell_score with empty target set"));
    }
    if !(0.0..=1.0).contains(&top_fraction) || top_fraction == 0.0 {
        return Err(Error::contract("top_fraction must be in (0, 1]"));
    }
    let g = cell_expression.len();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| {
        cell_expression[b]
            .partial_cmp(&cell_expression[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let n_top = ((top_fraction * g as f64).ceil() as usize).min(g).max(1);
    let mut hits = 0usize;
    let mut area = 0usize;
    for &gene in order.iter().take(n_top) {
        if target_set.contains(&gene) {
            hits += 1;
        }
        area += hits;
    }
    let t = target_set.len();
    let max_area: usize = (1..=n_top).map(|r| r.min(t)).sum();
    Ok(area as f64 / max_area as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureModel {
    /// Mixing coefficients, ordered with the components (π₁ + π₂ = 1).
    pub weights: [f64; 2],
    /// Component means with μ₁ ≤ μ₂.
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub log_likelihood: f64,
    /// Per-iteration log-likelihoods of the winning restart.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistributionClass {
    Bimodal,
    Skewed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdMethod {
    Intersection,
    MuPlus2Sigma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDecision {
    pub class: DistributionClass,
    pub method: ThresholdMethod,
    pub threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmFitConfig {
    pub restarts: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub variance_floor: f64,
}

impl Default for GmmFitConfig {
    fn default() -> Self {
        GmmFitConfig {
            restarts: 5,
            max_iterations: 500,
            tolerance: 1e-8,
            variance_floor: 1e-6,
        }
    }
}

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - d * d / (2.0 * var)
}

fn em_run(
    samples: &[f64],
    mut weights: [f64; 2],
    mut means: [f64; 2],
    mut vars: [f64; 2],
    cfg: &GmmFitConfig,
) -> (GaussianMixtureModel, Vec<f64>) {
    let n = samples.len() as f64;
    let mut trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..cfg.max_iterations {
        // E-step
        let mut resp = vec![0.0; samples.len()];
        let mut ll = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let l1 = weights[0].ln() + log_normal_pdf(x, means[0], vars[0]);
            let l2 = weights[1].ln() + log_normal_pdf(x, means[1], vars[1]);
            let m = l1.max(l2);
            let z = (l1 - m).exp() + (l2 - m).exp();
            resp[i] = (l1 - m).exp() / z;
            ll += m + z.ln();
        }
        trace.push(ll);
        if ll - prev_ll < cfg.tolerance && prev_ll.is_finite() {
            break;
        }
        prev_ll = ll;
        // M-step
        let n1: f64 = resp.iter().sum();
        let n2 = n - n1;
        if n1 <= 0.0 || n2 <= 0.0 {
            break;
        }
        means[0] = samples.iter().zip(&resp).map(|(&x, &r)| r * x).sum::<f64>() / n1;
        means[1] = samples
            .iter()
            .zip(&resp)
            .map(|(&x, &r)| (1.0 - r) * x)
            .sum::<f64>()
            / n2;
        vars[0] = (samples
            .iter()
            .zip(&resp)
            .map(|(&x, &r)| r * (x - means[0]) * (x - means[0]))
            .sum::<f64>()
            / n1)
            .max(cfg.variance_floor);
        vars[1] = (samples
            .iter()
            .zip(&resp)
            .map(|(&x, &r)| (1.0 - r) * (x - means[1]) * (x - means[1]))
            .sum::<f64>()
            / n2)
            .max(cfg.variance_floor);
        weights = [n1 / n, n2 / n];
    }
    let ll = *trace.last().unwrap_or(&f64::NEG_INFINITY);
    // order components by mean
    if means[0] > means[1] {
        means.swap(0, 1);
        vars.swap(0, 1);
        weights.swap(0, 1);
    }
    (
        GaussianMixtureModel {
            weights,
            means,
            variances: vars,
            log_likelihood: ll,
            trace: trace.clone(),
        },
        trace,
    )
}

/// EM fit of a two-component mixture. Initialization splits the sorted
/// sample at the median (lower/upper halves); later restarts jitter the
/// initial means. The best-likelihood restart wins.
pub fn fit_gmm2(samples: &[f64], seed: u64, cfg: &GmmFitConfig) -> Result<GaussianMixtureModel> {
    if samples.len() < 20 {
        return Err(Error::contract(format!(
            "fit_gmm2 needs at least 20 samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::Degenerate(
            "all activity samples identical; mixture fit undefined".into(),
        ));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let half = sorted.len() / 2;
    let stats = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
        (m, v.max(cfg.variance_floor))
    };
    let (m1, v1) = stats(&sorted[..half]);
    let (m2, v2) = stats(&sorted[half..]);
    let sd = var.sqrt();

    let mut rng = crate::rng::stream(seed, "gmm-init", samples.len() as u64, 0);
    let mut best: Option<GaussianMixtureModel> = None;
    for restart in 0..cfg.restarts.max(1) {
        let (j1, j2) = if restart == 0 {
            (0.0, 0.0)
        } else {
            (
                rng.gen_range(-0.5..0.5) * sd,
                rng.gen_range(-0.5..0.5) * sd,
            )
        };
        let (model, _) = em_run(
            samples,
            [0.5, 0.5],
            [m1 + j1, m2 + j2],
            [v1, v2],
            cfg,
        );
        if best
            .as_ref()
            .map(|b| model.log_likelihood > b.log_likelihood)
            .unwrap_or(true)
        {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Bimodality rule: both components carry weight (min π ≥ 0.15) and the
/// means are separated by at least twice the larger standard deviation.
pub fn classify_distribution(gmm: &GaussianMixtureModel) -> DistributionClass {
    const PI_MIN: f64 = 0.15;
    const SEPARATION_FACTOR: f64 = 2.0;
    let sep = gmm.means[1] - gmm.means[0];
    let sd = gmm.variances[0].sqrt().max(gmm.variances[1].sqrt());
    if gmm.weights[0].min(gmm.weights[1]) >= PI_MIN && sep >= SEPARATION_FACTOR * sd {
        DistributionClass::Bimodal
    } else {
        DistributionClass::Skewed
    }
}

/// Bimodal: the weighted-density intersection in [μ₁, μ₂]. Skewed: μ + 2σ
/// of the dominant (larger-π) component.
pub fn select_threshold(
    gmm: &GaussianMixtureModel,
    class: DistributionClass,
) -> Result<ThresholdDecision> {
    match class {
        DistributionClass::Skewed => {
            let dom = if gmm.weights[0] >= gmm.weights[1] { 0 } else { 1 };
            Ok(ThresholdDecision {
                class,
                method: ThresholdMethod::MuPlus2Sigma,
                threshold: gmm.means[dom] + 2.0 * gmm.variances[dom].sqrt(),
            })
        }
        DistributionClass::Bimodal => {
            let [p1, p2] = gmm.weights;
            let [mu1, mu2] = gmm.means;
            let [v1, v2] = gmm.variances;
            // π₁N(x|μ₁,σ₁²) = π₂N(x|μ₂,σ₂²) in log form is Ax² + Bx + C = 0
            let a = 0.5 / v2 - 0.5 / v1;
            let b = mu1 / v1 - mu2 / v2;
            let c = mu2 * mu2 / (2.0 * v2) - mu1 * mu1 / (2.0 * v1)
                - ((p2 * v1.sqrt()) / (p1 * v2.sqrt())).ln();
            let root = if a.abs() < 1e-14 {
                if b.abs() < 1e-14 {
                    return Err(Error::Numeric(
                        "degenerate intersection: identical components".into(),
                    ));
                }
                -c / b
            } else {
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return Err(Error::Numeric("no real density intersection".into()));
                }
                let sq = disc.sqrt();
                let r1 = (-b + sq) / (2.0 * a);
                let r2 = (-b - sq) / (2.0 * a);
                let lo = mu1 - 1e-12;
                let hi = mu2 + 1e-12;
                if (lo..=hi).contains(&r1) {
                    r1
                } else if (lo..=hi).contains(&r2) {
                    r2
                } else {
                    return Err(Error::Numeric(format!(
                        "no density intersection inside [{mu1}, {mu2}] (roots {r1}, {r2})"
                    )));
                }
            };
            Ok(ThresholdDecision {
                class,
                method: ThresholdMethod::Intersection,
                threshold: root,
            })
        }
    }
}

/// Cell-specific GRN: the cell-type edges of exactly those regulons whose
/// AUC for this cell strictly exceeds their threshold.
pub fn derive_cell_grn(
    celltype_grn: &Grn,
    eregulon_tfs: &BTreeMap<String, usize>,
    activity: &ActivityMatrix,
    thresholds: &BTreeMap<String, ThresholdDecision>,
    cell: &str,
) -> Result<Grn> {
    let ci = activity
        .cell_index(cell)
        .ok_or_else(|| Error::data(format!("unknown cell id {cell}")))?;
    let mut active_tfs = HashSet::new();
    for (regulon, &tf) in eregulon_tfs {
        let ri = activity
            .regulon_index(regulon)
            .ok_or_else(|| Error::data(format!("regulon {regulon} missing from activity matrix")))?;
        let thr = thresholds
            .get(regulon)
            .ok_or_else(|| Error::contract(format!("regulon {regulon} has no threshold")))?;
        if activity.score(ci, ri) > thr.threshold {
            active_tfs.insert(tf);
        }
    }
    let mut grn = Grn::new(GrnScale::Cell, cell);
    for e in celltype_grn.edges() {
        if active_tfs.contains(&e.source) {
            grn.add_edge(*e)?;
        }
    }
    Ok(grn)
}

/// For each query row, the `k` reference rows with highest cosine
/// similarity, ties broken by lower reference index.
pub fn reference_map(
    query_embeddings: &Tensor,
    reference_embeddings: &Tensor,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let (nq, dq) = query_embeddings.dims2();
    let (nr, dr) = reference_embeddings.dims2();
    if dq != dr {
        return Err(Error::shape(format!(
            "embedding widths disagree: {dq} vs {dr}"
        )));
    }
    if k == 0 || k > nr {
        return Err(Error::contract(format!(
            "k = {k} out of range for {nr} reference cells"
        )));
    }
    let norm = |row: &[f64]| -> Result<f64> {
        let n = row.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            Err(Error::contract("zero-norm embedding"))
        } else {
            Ok(n)
        }
    };
    let ref_rows: Vec<&[f64]> = (0..nr)
        .map(|i| &reference_embeddings.data[i * dr..(i + 1) * dr])
        .collect();
    let ref_norms: Vec<f64> = ref_rows.iter().map(|r| norm(r)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(nq);
    for qi in 0..nq {
        let q = &query_embeddings.data[qi * dq..(qi + 1) * dq];
        let qn = norm(q)?;
        let mut sims: Vec<(f64, usize)> = ref_rows
            .iter()
            .enumerate()
            .map(|(ri, r)| {
                let dot: f64 = q.iter().zip(r.iter()).map(|(&a, &b)| a * b).sum();
                (dot / (qn * ref_norms[ri]), ri)
            })
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        out.push(sims.into_iter().take(k).map(|(_, i)| i).collect());
    }
    Ok(out)
}

// ── report files ────────────────────────────────────────────────────

/// One `cell\tregulon\tauc\tthreshold\tactive` row per (cell, regulon).
pub fn save_activity_report(
    activity: &ActivityMatrix,
    thresholds: &BTreeMap<String, ThresholdDecision>,
    path: &Path,
) -> Result<()> {
    let mut out = String::from("cell\tregulon\tauc\tthreshold\tactive\n");
    for (ci, cell) in activity.cell_ids.iter().enumerate() {
        for (ri, regulon) in activity.regulon_ids.iter().enumerate() {
            let thr = thresholds
                .get(regulon)
                .ok_or_else(|| Error::contract(format!("no threshold for regulon {regulon}")))?;
            let auc = activity.score(ci, ri);
            let _ = writeln!(
                out,
                "{cell}\t{regulon}\t{}\t{}\t{}",
                crate::io::format_value(auc),
                crate::io::format_value(thr.threshold),
                auc > thr.threshold
            );
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdReportEntry {
    pub regulon: String,
    pub pi: [f64; 2],
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    pub class: DistributionClass,
    pub threshold: f64,
}

pub fn save_threshold_report(entries: &[ThresholdReportEntry], path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(entries)?)?;
    Ok(())
}
