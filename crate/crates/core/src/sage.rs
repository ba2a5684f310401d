//! Sampling-based graph encoding of regulatory networks: fixed-size
//! uniform neighbor sampling, mean aggregation with concat + linear per
//! layer, co-expression-guided edge perturbation, and the element-wise
//! combination of the two scales.

use crate::error::{Error, Result};
use crate::grn::{CoExpressionGraph, Grn, GrnEdge};
use crate::optim::ParamSet;
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SageConfig {
    /// Layer count K.
    pub layers: usize,
    /// Neighbor sample size S per layer.
    pub sample_size: usize,
    /// Embedding width d (matches the backbone hidden width).
    pub hidden: usize,
}

impl Default for SageConfig {
    fn default() -> Self {
        SageConfig {
            layers: 2,
            sample_size: 10,
            hidden: 64,
        }
    }
}

impl SageConfig {
    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers).map(|k| format!("sage.w{k}")).collect()
    }

    /// One weight per layer mapping concat(self, neighborhood) 2d→d.
    pub fn init_params(&self, seed: u64, params: &mut ParamSet) {
        let d = self.hidden;
        for k in 0..self.layers {
            let name = format!("sage.w{k}");
            let mut r = rng::stream(seed, &format!("init::{name}"), 0, 0);
            let scale = (1.0 / (2 * d) as f64).sqrt();
            let data: Vec<f64> = (0..2 * d * d).map(|_| r.gen_range(-scale..scale)).collect();
            params.insert(&name, Tensor::matrix(2 * d, d, data).unwrap());
        }
    }
}

/// Uniform sample without replacement; all neighbors when degree < `s`.
pub fn sample_from_list(neighbors: &[usize], s: usize, rng: &mut impl Rng) -> Vec<usize> {
    if neighbors.len() <= s {
        return neighbors.to_vec();
    }
    let mut idx: Vec<usize> = neighbors.to_vec();
    // partial Fisher-Yates: only the first s slots are needed
    for i in 0..s {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    idx.truncate(s);
    idx
}

/// Fixed-size uniform neighbor sample for one node, over the undirected
/// neighborhood. Empty for isolated nodes.
pub fn sample_neighbors(
    grn: &Grn,
    n_genes: usize,
    node: usize,
    s: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let adj = grn.undirected_adjacency(n_genes);
    sample_from_list(&adj[node], s, rng)
}

/// Mean-aggregation matrix over freshly sampled neighborhoods: row v holds
/// 1/|sample(v)| at each sampled neighbor, all-zero for isolated nodes.
fn sampled_aggregation_matrix(
    adj: &[Vec<usize>],
    s: usize,
    rng: &mut impl Rng,
) -> Tensor {
    let n = adj.len();
    let mut data = vec![0.0; n * n];
    for (v, neighbors) in adj.iter().enumerate() {
        let picked = sample_from_list(neighbors, s, rng);
        if picked.is_empty() {
            continue;
        }
        let w = 1.0 / picked.len() as f64;
        for u in picked {
            data[v * n + u] += w;
        }
    }
    Tensor {
        shape: vec![n, n],
        data,
    }
}

/// K layers of: mean-aggregate sampled neighbor features, concat with own
/// features, linear, ReLU. Neighborhoods are undirected; every vocabulary
/// gene keeps a row, isolated genes aggregate a zero vector.
pub fn sage_forward(
    tape: &mut Tape,
    grn: &Grn,
    input_features: Var,
    config: &SageConfig,
    layer_weights: &[Var],
    rng: &mut impl Rng,
) -> Result<Var> {
    let (n, d) = tape.value(input_features).dims2();
    if d != config.hidden {
        return Err(Error::shape(format!(
            "feature width {d} does not match configured width {}",
            config.hidden
        )));
    }
    if layer_weights.len() != config.layers {
        return Err(Error::contract(format!(
            "expected {} layer weights, got {}",
            config.layers,
            layer_weights.len()
        )));
    }
    let adj = grn.undirected_adjacency(n);
    let mut h = input_features;
    for &w in layer_weights {
        let agg = sampled_aggregation_matrix(&adj, config.sample_size, rng);
        let agg = tape.constant(agg);
        let neigh = tape.matmul(agg, h)?;
        let cat = tape.concat_cols(h, neigh)?;
        let lin = tape.matmul(cat, w)?;
        h = tape.relu(lin);
    }
    Ok(h)
}

/// Element-wise sum of the two scales' embeddings.
pub fn combine_scales(tape: &mut Tape, h_cell: Var, h_type: Var) -> Result<Var> {
    tape.add(h_cell, h_type)
}

#[derive(Debug, Clone)]
pub struct PerturbOutcome {
    pub grn: Grn,
    pub removed: usize,
    pub added: usize,
    /// True when fewer eligible co-expression pairs existed than requested.
    pub exhausted: bool,
}

/// Replace ⌊α|E|⌋ uniformly chosen edges with co-expression pairs sampled
/// uniformly from the implied clique, excluding pairs already present in
/// the original edge set. Added edges carry weight 1 and a provenance flag.
/// When eligible pairs run short, adds as many as exist.
pub fn perturb_grn(
    grn: &Grn,
    co_graph: &CoExpressionGraph,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<PerturbOutcome> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::contract(format!("alpha {alpha} outside [0, 1)")));
    }
    let e = grn.n_edges();
    let m = (alpha * e as f64).floor() as usize;
    if m == 0 {
        return Ok(PerturbOutcome {
            grn: grn.clone(),
            removed: 0,
            added: 0,
            exhausted: false,
        });
    }
    if co_graph.n_active() < 2 {
        return Err(Error::contract(
            "perturbation requires at least 2 co-expressed genes",
        ));
    }
    // pick edges to drop
    let mut order: Vec<usize> = (0..e).collect();
    for i in 0..m {
        let j = rng.gen_range(i..e);
        order.swap(i, j);
    }
    let dropped: HashSet<usize> = order[..m].iter().copied().collect();

    let original_pairs: HashSet<(usize, usize)> = grn
        .edges()
        .iter()
        .map(|ed| (ed.source.min(ed.target), ed.source.max(ed.target)))
        .collect();
    // eligible co-expression pairs, unordered, not already edges
    let mut eligible: Vec<(usize, usize)> = (0..co_graph.implied_edge_count())
        .map(|i| co_graph.pair_at(i))
        .filter(|p| !original_pairs.contains(p))
        .collect();
    let add_count = m.min(eligible.len());
    eligible.partial_shuffle(rng, add_count);

    let mut out = Grn::new(grn.scale, grn.owner.clone());
    for (i, ed) in grn.edges().iter().enumerate() {
        if !dropped.contains(&i) {
            out.add_edge(*ed)?;
        }
    }
    for &(u, v) in eligible.iter().take(add_count) {
        out.add_edge(GrnEdge {
            source: u,
            target: v,
            weight: 1.0,
            perturbed: true,
        })?;
    }
    Ok(PerturbOutcome {
        grn: out,
        removed: m,
        added: add_count,
        exhausted: add_count < m,
    })
}
