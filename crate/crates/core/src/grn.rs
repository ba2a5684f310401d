//! Regulatory graph data model: gene vocabulary, TF→target networks at two
//! scales, simplified enhancer-driven regulon linking, and the per-cell
//! co-expression graph.

use crate::error::{Error, Result};
use crate::io::ExpressionMatrix;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

/// Ordered gene identifiers with TF membership and optional genomic
/// coordinates. Index lookup is a bijection onto `0..len()`.
#[derive(Debug, Clone)]
pub struct GeneVocabulary {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    tfs: BTreeSet<usize>,
    coords: Vec<Option<(String, u64)>>,
}

impl GeneVocabulary {
    pub fn new(ids: Vec<String>, tf_ids: &[String]) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate gene identifier {id}")));
            }
        }
        let mut tfs = BTreeSet::new();
        for tf in tf_ids {
            match index.get(tf) {
                Some(&i) => {
                    tfs.insert(i);
                }
                None => return Err(Error::data(format!("TF {tf} not in vocabulary"))),
            }
        }
        let coords = vec![None; ids.len()];
        Ok(GeneVocabulary {
            ids,
            index,
            tfs,
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.ids[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn is_tf(&self, idx: usize) -> bool {
        self.tfs.contains(&idx)
    }

    pub fn tf_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.tfs.iter().copied()
    }

    pub fn n_tfs(&self) -> usize {
        self.tfs.len()
    }

    pub fn set_coordinate(&mut self, idx: usize, chrom: &str, position: u64) {
        self.coords[idx] = Some((chrom.to_string(), position));
    }

    pub fn coordinate(&self, idx: usize) -> Option<&(String, u64)> {
        self.coords[idx].as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GrnScale {
    CellType,
    Cell,
}

impl GrnScale {
    pub fn tag(&self) -> &'static str {
        match self {
            GrnScale::CellType => "cell-type-specific",
            GrnScale::Cell => "cell-specific",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self> {
        match s {
            "cell-type-specific" => Ok(GrnScale::CellType),
            "cell-specific" => Ok(GrnScale::Cell),
            other => Err(Error::data(format!("unknown GRN scale tag '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrnEdge {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
    /// Set on edges injected by co-expression perturbation.
    pub perturbed: bool,
}

/// Directed regulatory graph at one scale. Construction rejects self-loops,
/// duplicate (source, target) pairs, and non-positive weights.
#[derive(Debug, Clone)]
pub struct Grn {
    pub scale: GrnScale,
    pub owner: String,
    edges: Vec<GrnEdge>,
    pairs: HashSet<(usize, usize)>,
}

impl Grn {
    pub fn new(scale: GrnScale, owner: impl Into<String>) -> Self {
        Grn {
            scale,
            owner: owner.into(),
            edges: Vec::new(),
            pairs: HashSet::new(),
        }
    }

    pub fn add_edge(&mut self, edge: GrnEdge) -> Result<()> {
        if edge.source == edge.target {
            return Err(Error::data(format!("self-loop on gene {}", edge.source)));
        }
        if !edge.weight.is_finite() || edge.weight <= 0.0 {
            return Err(Error::data(format!(
                "edge weight {} must be finite and positive",
                edge.weight
            )));
        }
        if !self.pairs.insert((edge.source, edge.target)) {
            return Err(Error::data(format!(
                "duplicate edge {} -> {}",
                edge.source, edge.target
            )));
        }
        self.edges.push(edge);
        Ok(())
    }

    pub fn edges(&self) -> &[GrnEdge] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn contains_pair(&self, source: usize, target: usize) -> bool {
        self.pairs.contains(&(source, target))
    }

    /// Undirected adjacency lists over `n_genes` nodes.
    pub fn undirected_adjacency(&self, n_genes: usize) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); n_genes];
        for e in &self.edges {
            adj[e.source].push(e.target);
            adj[e.target].push(e.source);
        }
        adj
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancerRegion {
    pub chrom: String,
    pub start: u64,
    pub end: u64,
}

/// One TF, its enhancer regions, and the targets that passed both the
/// proximity and correlation criteria.
#[derive(Debug, Clone)]
pub struct ERegulon {
    pub tf: usize,
    pub enhancers: Vec<EnhancerRegion>,
    pub targets: Vec<(usize, f64)>,
}

/// Per-cell co-expression graph: the clique over genes with positive
/// expression, stored implicitly as the active-gene set. Pairs are indexed
/// lexicographically for uniform sampling without materializing O(G²) edges.
#[derive(Debug, Clone)]
pub struct CoExpressionGraph {
    pub owner: String,
    active: Vec<usize>,
}

impl CoExpressionGraph {
    pub fn active_genes(&self) -> &[usize] {
        &self.active
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    pub fn implied_edge_count(&self) -> usize {
        let k = self.active.len();
        k * k.saturating_sub(1) / 2
    }

    /// Unordered pair for flat index `i` in `0..implied_edge_count()`,
    /// enumerated as (a0,a1), (a0,a2), ..., (a1,a2), ...
    pub fn pair_at(&self, mut i: usize) -> (usize, usize) {
        let k = self.active.len();
        for u in 0..k {
            let run = k - 1 - u;
            if i < run {
                return (self.active[u], self.active[u + 1 + i]);
            }
            i -= run;
        }
        panic!("pair index out of range");
    }
}

/// Active set = genes with strictly positive expression in this cell.
pub fn build_co_expression_graph(
    owner: impl Into<String>,
    cell_expression: &[f64],
    n_genes: usize,
) -> Result<CoExpressionGraph> {
    if cell_expression.len() != n_genes {
        return Err(Error::shape(format!(
            "expression vector length {} does not match vocabulary size {}",
            cell_expression.len(),
            n_genes
        )));
    }
    let active = cell_expression
        .iter()
        .enumerate()
        .filter(|(_, &x)| x > 0.0)
        .map(|(i, _)| i)
        .collect();
    Ok(CoExpressionGraph {
        owner: owner.into(),
        active,
    })
}

/// Two-pass Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::contract(format!(
            "pearson needs two equal-length vectors of length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Degenerate(
            "pearson undefined for a constant vector".into(),
        ));
    }
    Ok(cov / (vx * vy).sqrt())
}

fn distance_to_region(position: u64, region: &EnhancerRegion) -> u64 {
    if position < region.start {
        region.start - position
    } else if position > region.end {
        position - region.end
    } else {
        0
    }
}

/// Retain candidates that lie within `proximity_kb` of some enhancer (same
/// chromosome, gene point to nearest interval point) AND whose expression
/// correlates with the TF's at |r| above `corr_floor`.
#[allow(clippy::too_many_arguments)]
pub fn link_eregulon(
    tf: usize,
    enhancers: &[EnhancerRegion],
    candidate_targets: &[usize],
    vocab: &GeneVocabulary,
    expression: &ExpressionMatrix,
    proximity_kb: f64,
    corr_floor: f64,
) -> Result<ERegulon> {
    if !vocab.is_tf(tf) {
        return Err(Error::contract(format!(
            "gene {} is not a transcription factor",
            vocab.id(tf)
        )));
    }
    vocab
        .coordinate(tf)
        .ok_or_else(|| Error::data(format!("missing coordinates for gene {}", vocab.id(tf))))?;
    let window = (proximity_kb * 1000.0) as u64;
    let tf_expr = expression.column(tf);
    let mut targets = Vec::new();
    for &cand in candidate_targets {
        if cand == tf {
            continue;
        }
        let (chrom, pos) = vocab
            .coordinate(cand)
            .ok_or_else(|| Error::data(format!("missing coordinates for gene {}", vocab.id(cand))))?;
        let near = enhancers
            .iter()
            .any(|e| e.chrom == *chrom && distance_to_region(*pos, e) <= window);
        if !near {
            continue;
        }
        let r = match pearson(&tf_expr, &expression.column(cand)) {
            Ok(r) => r,
            Err(Error::Degenerate(_)) => continue, // constant expression carries no signal
            Err(e) => return Err(e),
        };
        if r.abs() > corr_floor {
            targets.push((cand, r));
        }
    }
    Ok(ERegulon {
        tf,
        enhancers: enhancers.to_vec(),
        targets,
    })
}

/// Union of TF→target edges with weight |r|; duplicates keep the maximum.
pub fn grn_from_eregulons(
    eregulons: &[ERegulon],
    scale: GrnScale,
    owner: impl Into<String>,
) -> Grn {
    let mut best: HashMap<(usize, usize), f64> = HashMap::new();
    for er in eregulons {
        for &(target, r) in &er.targets {
            let w = best.entry((er.tf, target)).or_insert(0.0);
            if r.abs() > *w {
                *w = r.abs();
            }
        }
    }
    let mut keys: Vec<_> = best.keys().copied().collect();
    keys.sort_unstable();
    let mut grn = Grn::new(scale, owner);
    for (source, target) in keys {
        grn.add_edge(GrnEdge {
            source,
            target,
            weight: best[&(source, target)],
            perturbed: false,
        })
        .expect("deduplicated edges cannot collide");
    }
    grn
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeStats {
    pub mean_tf_out_degree: f64,
    pub mean_non_tf_degree: f64,
    pub zero_edge_fraction: f64,
}

pub fn degree_stats(grn: &Grn, vocab: &GeneVocabulary) -> DegreeStats {
    let g = vocab.len();
    let mut out_degree = vec![0usize; g];
    let mut total_degree = vec![0usize; g];
    for e in grn.edges() {
        out_degree[e.source] += 1;
        total_degree[e.source] += 1;
        total_degree[e.target] += 1;
    }
    let tfs: Vec<usize> = vocab.tf_indices().collect();
    let non_tfs: Vec<usize> = (0..g).filter(|i| !vocab.is_tf(*i)).collect();
    let mean = |idx: &[usize], deg: &[usize]| {
        if idx.is_empty() {
            0.0
        } else {
            idx.iter().map(|&i| deg[i] as f64).sum::<f64>() / idx.len() as f64
        }
    };
    let zero = if g == 0 {
        0.0
    } else {
        total_degree.iter().filter(|&&d| d == 0).count() as f64 / g as f64
    };
    DegreeStats {
        mean_tf_out_degree: mean(&tfs, &out_degree),
        mean_non_tf_degree: mean(&non_tfs, &total_degree),
        zero_edge_fraction: zero,
    }
}

// ── file formats ────────────────────────────────────────────────────

/// Edge-list TSV: `source\ttarget\tweight\tscale\towner`, identifiers as
/// strings. One file may carry many graphs (distinct owners).
pub fn save_edge_lists(grns: &[&Grn], vocab: &GeneVocabulary, path: &Path) -> Result<()> {
    let mut out = String::from("source\ttarget\tweight\tscale\towner\n");
    for grn in grns {
        for e in grn.edges() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                vocab.id(e.source),
                vocab.id(e.target),
                crate::io::format_value(e.weight),
                grn.scale.tag(),
                grn.owner
            );
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load every graph in an edge-list file, keyed by owner id.
pub fn load_edge_lists(path: &Path, vocab: &GeneVocabulary) -> Result<Vec<Grn>> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut grns: Vec<Grn> = Vec::new();
    let mut by_owner: HashMap<String, usize> = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 {
            if line != "source\ttarget\tweight\tscale\towner" {
                return Err(Error::Parse {
                    path: pstr,
                    line: 1,
                    msg: "bad edge-list header".into(),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                path: pstr,
                line: ln + 1,
                msg: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let parse_gene = |id: &str| {
            vocab.index_of(id).ok_or_else(|| Error::Parse {
                path: pstr.clone(),
                line: ln + 1,
                msg: format!("unknown gene {id}"),
            })
        };
        let source = parse_gene(fields[0])?;
        let target = parse_gene(fields[1])?;
        let weight: f64 = fields[2].parse().map_err(|_| Error::Parse {
            path: pstr.clone(),
            line: ln + 1,
            msg: format!("bad weight '{}'", fields[2]),
        })?;
        let scale = GrnScale::from_tag(fields[3])?;
        let owner = fields[4].to_string();
        let gi = *by_owner.entry(owner.clone()).or_insert_with(|| {
            grns.push(Grn::new(scale, owner));
            grns.len() - 1
        });
        grns[gi].add_edge(GrnEdge {
            source,
            target,
            weight,
            perturbed: false,
        })?;
    }
    Ok(grns)
}

/// Coordinate TSV: `gene\tchrom\tposition`.
pub fn save_coordinates(vocab: &GeneVocabulary, path: &Path) -> Result<()> {
    let mut out = String::from("gene\tchrom\tposition\n");
    for i in 0..vocab.len() {
        if let Some((chrom, pos)) = vocab.coordinate(i) {
            let _ = writeln!(out, "{}\t{}\t{}", vocab.id(i), chrom, pos);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_coordinates(vocab: &mut GeneVocabulary, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: pstr,
                line: ln + 1,
                msg: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let idx = vocab.index_of(fields[0]).ok_or_else(|| Error::Parse {
            path: pstr.clone(),
            line: ln + 1,
            msg: format!("unknown gene {}", fields[0]),
        })?;
        let pos: u64 = fields[2].parse().map_err(|_| Error::Parse {
            path: pstr.clone(),
            line: ln + 1,
            msg: format!("bad position '{}'", fields[2]),
        })?;
        vocab.set_coordinate(idx, fields[1], pos);
    }
    Ok(())
}
