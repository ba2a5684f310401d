//! Synthetic paired-omics data with planted regulatory structure. Every
//! downstream property test reads its ground truth from the manifest
//! written here, never from the model under test.
//!
//! Planted structure: TFs get disjoint target blocks and dense out-degree
//! while most non-TF genes stay sparse. Target expression follows its
//! regulator plus noise. Genomic coordinates place true targets within the
//! proximity window of their TF's enhancers and everything else far away.

use crate::error::{Error, Result};
use crate::grn::{
    save_coordinates, save_edge_lists, EnhancerRegion, GeneVocabulary, Grn, GrnEdge, GrnScale,
};
use crate::io::{save_matrix, ExpressionMatrix};
use crate::rng::stream;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

/// Expression mean of an active regulator; the off mode sits near zero.
pub const TF_ON_MEAN: f64 = 3.0;
pub const TF_OFF_MEAN: f64 = 0.2;
/// Added to each target's baseline while its regulator is on.
pub const TARGET_EFFECT: f64 = 2.0;
pub const TARGET_BASELINE: f64 = 0.8;
/// Shift applied to a flagged TF's targets in the perturbation task.
pub const PERTURB_EFFECT: f64 = 2.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub cells: usize,
    pub genes: usize,
    pub tfs: usize,
    pub cell_types: usize,
    pub mean_targets_per_tf: usize,
    /// Fraction of regulons whose per-cell activity is planted bimodal;
    /// the rest are active in nearly every cell (skewed).
    pub bimodal_fraction: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            cells: 500,
            genes: 200,
            tfs: 20,
            cell_types: 4,
            mean_targets_per_tf: 8,
            bimodal_fraction: 0.5,
            noise: 0.1,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 || self.genes == 0 || self.tfs == 0 || self.cell_types == 0 {
            return Err(Error::config("all synthetic counts must be positive"));
        }
        if self.tfs >= self.genes {
            return Err(Error::config(format!(
                "TF count {} must be below gene count {}",
                self.tfs, self.genes
            )));
        }
        if self.cell_types > self.cells {
            return Err(Error::config(format!(
                "cell type count {} exceeds cell count {}",
                self.cell_types, self.cells
            )));
        }
        if self.mean_targets_per_tf == 0 {
            return Err(Error::config("mean_targets_per_tf must be positive"));
        }
        // Targets are disjoint blocks; jitter can add up to 1 per TF.
        if self.tfs * (self.mean_targets_per_tf + 1) > self.genes - self.tfs {
            return Err(Error::config(format!(
                "{} TFs with up to {} targets each do not fit in {} non-TF genes",
                self.tfs,
                self.mean_targets_per_tf + 1,
                self.genes - self.tfs
            )));
        }
        if !(0.0..=1.0).contains(&self.bimodal_fraction) {
            return Err(Error::config("bimodal_fraction outside [0, 1]"));
        }
        if self.noise < 0.0 {
            return Err(Error::config("noise must be non-negative"));
        }
        Ok(())
    }
}

/// Planted facts downstream oracles may rely on verbatim.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct GroundTruth {
    /// TF id to its planted target ids.
    pub targets: BTreeMap<String, Vec<String>>,
    /// Regulons with planted on/off per-cell activity.
    pub bimodal_regulons: Vec<String>,
    /// Per regulon, planted regulator expression means [off, on].
    pub activity_modes: BTreeMap<String, [f64; 2]>,
    /// Cell type label to the TFs wired in that type's GRN.
    pub type_active_tfs: BTreeMap<String, Vec<String>>,
    /// Cell id to the regulons planted on in that cell.
    pub cell_active_regulons: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: SyntheticConfig,
    /// Role (expression, coordinates, grns, tfs, cell_types, enhancers)
    /// to path relative to the manifest.
    pub files: BTreeMap<String, String>,
    /// Role to SHA-256 hex digest of the file bytes.
    pub checksums: BTreeMap<String, String>,
    pub ground_truth: GroundTruth,
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read manifest {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Gaussian draw via Box-Muller so only `Rng` is needed.
fn normal(rng: &mut impl Rng, mean: f64, sd: f64) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    mean + sd * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn tf_id(i: usize) -> String {
    format!("TF{i:03}")
}

fn gene_id(i: usize) -> String {
    format!("G{i:04}")
}

fn cell_id(i: usize) -> String {
    format!("cell{i:04}")
}

fn type_label(t: usize) -> String {
    format!("type{t}")
}

/// Writes expression, coordinates, per-type GRN edge lists, TF list, cell
/// type labels, and enhancer regions into `out_dir`, then the manifest.
pub fn gen_synthetic(config: &SyntheticConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let seed = config.seed;
    let g = config.genes;
    let n_tfs = config.tfs;

    let mut ids: Vec<String> = (0..n_tfs).map(tf_id).collect();
    ids.extend((n_tfs..g).map(gene_id));
    let tf_ids: Vec<String> = ids[..n_tfs].to_vec();
    let mut vocab = GeneVocabulary::new(ids.clone(), &tf_ids)?;

    let mut plant = stream(seed, "synth::plant", 0, 0);

    // Disjoint target blocks over shuffled non-TF genes.
    let mut pool: Vec<usize> = (n_tfs..g).collect();
    for i in (1..pool.len()).rev() {
        let j = plant.gen_range(0..=i);
        pool.swap(i, j);
    }
    let mut targets_of: Vec<Vec<usize>> = Vec::with_capacity(n_tfs);
    let mut cursor = 0usize;
    for _ in 0..n_tfs {
        let jitter = plant.gen_range(0..=2) as i64 - 1;
        let count = (config.mean_targets_per_tf as i64 + jitter).max(1) as usize;
        let block: Vec<usize> = pool[cursor..cursor + count].to_vec();
        cursor += count;
        targets_of.push(block);
    }

    // Each TF lives on its own chromosome stretch; enhancers flank it and
    // targets sit within the proximity window, everything else far away.
    let mut enhancers: BTreeMap<String, Vec<EnhancerRegion>> = BTreeMap::new();
    for t in 0..n_tfs {
        let chrom = format!("chr{}", t + 1);
        let base = 1_000_000u64;
        vocab.set_coordinate(t, &chrom, base);
        let regions = vec![
            EnhancerRegion {
                chrom: chrom.clone(),
                start: base + 40_000,
                end: base + 45_000,
            },
            EnhancerRegion {
                chrom: chrom.clone(),
                start: base - 60_000,
                end: base - 55_000,
            },
        ];
        for (k, &tgt) in targets_of[t].iter().enumerate() {
            // Within 100kb of the first enhancer, inside the 150kb rule.
            vocab.set_coordinate(tgt, &chrom, base + 45_000 + 5_000 * (k as u64 + 1));
        }
        enhancers.insert(tf_id(t), regions);
    }
    for gene in n_tfs..g {
        if vocab.coordinate(gene).is_none() {
            let chrom = format!("chr{}", gene % n_tfs + 1);
            vocab.set_coordinate(gene, &chrom, 10_000_000 + 1_000 * gene as u64);
        }
    }

    // Per type, the wired TF subset; TF t is forced into type t mod T so
    // every TF appears somewhere.
    let mut type_active: Vec<Vec<usize>> = vec![Vec::new(); config.cell_types];
    for t in 0..n_tfs {
        for (ty, active) in type_active.iter_mut().enumerate() {
            if t % config.cell_types == ty || plant.gen_bool(0.75) {
                active.push(t);
            }
        }
    }

    let mut grns: Vec<Grn> = Vec::new();
    for (ty, active) in type_active.iter().enumerate() {
        let mut grn = Grn::new(GrnScale::CellType, type_label(ty));
        for &t in active {
            for &tgt in &targets_of[t] {
                grn.add_edge(GrnEdge {
                    source: t,
                    target: tgt,
                    weight: 1.0,
                    perturbed: false,
                })?;
            }
        }
        grns.push(grn);
    }

    let n_bimodal = (config.bimodal_fraction * n_tfs as f64).ceil() as usize;
    let bimodal: Vec<bool> = (0..n_tfs).map(|t| t < n_bimodal).collect();

    // Expression: regulator on/off state per (cell, regulon), targets
    // follow their regulator, unregulated genes are dull background.
    let mut values = vec![0.0; config.cells * g];
    let mut cell_type_of: Vec<String> = Vec::with_capacity(config.cells);
    let mut cell_active_regulons: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut target_of_gene: Vec<Option<usize>> = vec![None; g];
    for (t, block) in targets_of.iter().enumerate() {
        for &tgt in block {
            target_of_gene[tgt] = Some(t);
        }
    }
    for c in 0..config.cells {
        let ty = c % config.cell_types;
        cell_type_of.push(type_label(ty));
        let mut rng = stream(seed, "synth::cell", c as u64, 0);
        let mut on = vec![false; n_tfs];
        let mut active_here = Vec::new();
        for &t in &type_active[ty] {
            let p_on = if bimodal[t] { 0.5 } else { 0.9 };
            if rng.gen_bool(p_on) {
                on[t] = true;
                active_here.push(tf_id(t));
            }
        }
        cell_active_regulons.insert(cell_id(c), active_here);
        for gene in 0..g {
            let v = if gene < n_tfs {
                let mean = if on[gene] { TF_ON_MEAN } else { TF_OFF_MEAN };
                normal(&mut rng, mean, config.noise)
            } else if let Some(t) = target_of_gene[gene] {
                let drive = if on[t] { TARGET_EFFECT } else { 0.0 };
                normal(&mut rng, TARGET_BASELINE + drive, config.noise)
            } else if rng.gen_bool(0.5) {
                0.0
            } else {
                normal(&mut rng, 0.6, 0.3)
            };
            values[c * g + gene] = v.max(0.0);
        }
    }
    let cell_ids: Vec<String> = (0..config.cells).map(cell_id).collect();
    let expression = ExpressionMatrix::new(cell_ids.clone(), ids, values)?;

    let paths: BTreeMap<String, String> = [
        ("expression", "expression.tsv"),
        ("coordinates", "coordinates.tsv"),
        ("grns", "grns.tsv"),
        ("tfs", "tfs.txt"),
        ("cell_types", "cell_types.tsv"),
        ("enhancers", "enhancers.tsv"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let file = |role: &str| -> PathBuf { out_dir.join(&paths[role]) };

    save_matrix(&expression, &file("expression"))?;
    save_coordinates(&vocab, &file("coordinates"))?;
    save_edge_lists(&grns.iter().collect::<Vec<_>>(), &vocab, &file("grns"))?;
    fs::write(file("tfs"), tf_ids.join("\n") + "\n")?;
    {
        let mut text = String::from("cell\tcell_type\n");
        for (cid, ty) in cell_ids.iter().zip(&cell_type_of) {
            text.push_str(&format!("{cid}\t{ty}\n"));
        }
        fs::write(file("cell_types"), text)?;
    }
    {
        let mut text = String::from("tf\tchrom\tstart\tend\n");
        for (tf, regions) in &enhancers {
            for r in regions {
                text.push_str(&format!("{tf}\t{}\t{}\t{}\n", r.chrom, r.start, r.end));
            }
        }
        fs::write(file("enhancers"), text)?;
    }

    let mut checksums = BTreeMap::new();
    for (role, rel) in &paths {
        checksums.insert(role.clone(), sha256_hex(&out_dir.join(rel))?);
    }

    let ground_truth = GroundTruth {
        targets: targets_of
            .iter()
            .enumerate()
            .map(|(t, block)| {
                (
                    tf_id(t),
                    block.iter().map(|&tgt| vocab.id(tgt).to_string()).collect(),
                )
            })
            .collect(),
        bimodal_regulons: (0..n_bimodal).map(tf_id).collect(),
        activity_modes: (0..n_tfs)
            .map(|t| (tf_id(t), [TF_OFF_MEAN, TF_ON_MEAN]))
            .collect(),
        type_active_tfs: type_active
            .iter()
            .enumerate()
            .map(|(ty, active)| (type_label(ty), active.iter().map(|&t| tf_id(t)).collect()))
            .collect(),
        cell_active_regulons,
    };

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        config: config.clone(),
        files: paths,
        checksums,
        ground_truth,
    };
    save_manifest(&manifest, &out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Fully parsed dataset with checksums verified against the manifest.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub expression: ExpressionMatrix,
    pub vocab: GeneVocabulary,
    pub celltype_grns: BTreeMap<String, Grn>,
    /// Cell type label per expression row.
    pub cell_types: Vec<String>,
    pub enhancers: BTreeMap<String, Vec<EnhancerRegion>>,
}

pub fn load_dataset(manifest_path: &Path) -> Result<SyntheticDataset> {
    let manifest = load_manifest(manifest_path)?;
    let dir = manifest_path
        .parent()
        .ok_or_else(|| Error::data("manifest path has no parent directory"))?;
    for (role, rel) in &manifest.files {
        let path = dir.join(rel);
        let actual = sha256_hex(&path).map_err(|_| {
            Error::data(format!("manifest file {role} missing at {}", path.display()))
        })?;
        let expected = manifest
            .checksums
            .get(role)
            .ok_or_else(|| Error::data(format!("manifest lacks checksum for {role}")))?;
        if &actual != expected {
            return Err(Error::data(format!(
                "checksum mismatch for {role}: {} does not match manifest",
                path.display()
            )));
        }
    }
    let file = |role: &str| dir.join(&manifest.files[role]);

    let expression = crate::io::load_matrix(&file("expression"))?;
    let tf_text = fs::read_to_string(file("tfs"))?;
    let tf_ids: Vec<String> = tf_text.lines().map(str::to_string).collect();
    let mut vocab = GeneVocabulary::new(expression.gene_ids.clone(), &tf_ids)?;
    crate::grn::load_coordinates(&mut vocab, &file("coordinates"))?;

    let grns = crate::grn::load_edge_lists(&file("grns"), &vocab)?;
    let celltype_grns: BTreeMap<String, Grn> =
        grns.into_iter().map(|g| (g.owner.clone(), g)).collect();

    let ct_text = fs::read_to_string(file("cell_types"))?;
    let mut by_cell = BTreeMap::new();
    for (i, line) in ct_text.lines().enumerate().skip(1) {
        let mut parts = line.split('\t');
        let (cell, ty) = (parts.next(), parts.next());
        match (cell, ty, parts.next()) {
            (Some(cell), Some(ty), None) => {
                by_cell.insert(cell.to_string(), ty.to_string());
            }
            _ => {
                return Err(Error::Parse {
                    path: file("cell_types").display().to_string(),
                    line: i + 1,
                    msg: "expected exactly two tab-separated fields".into(),
                })
            }
        }
    }
    let mut cell_types = Vec::with_capacity(expression.n_cells());
    for cid in &expression.cell_ids {
        let ty = by_cell
            .get(cid)
            .ok_or_else(|| Error::data(format!("cell {cid} missing from cell type labels")))?;
        cell_types.push(ty.clone());
    }

    let en_text = fs::read_to_string(file("enhancers"))?;
    let mut enhancers: BTreeMap<String, Vec<EnhancerRegion>> = BTreeMap::new();
    for (i, line) in en_text.lines().enumerate().skip(1) {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(Error::Parse {
                path: file("enhancers").display().to_string(),
                line: i + 1,
                msg: "expected tf, chrom, start, end".into(),
            });
        }
        let parse_u64 = |s: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::Parse {
                path: file("enhancers").display().to_string(),
                line: i + 1,
                msg: format!("bad integer {s}"),
            })
        };
        enhancers.entry(parts[0].to_string()).or_default().push(EnhancerRegion {
            chrom: parts[1].to_string(),
            start: parse_u64(parts[2])?,
            end: parse_u64(parts[3])?,
        });
    }

    Ok(SyntheticDataset {
        manifest,
        expression,
        vocab,
        celltype_grns,
        cell_types,
        enhancers,
    })
}

/// One fine-tuning example: flag some genes in a control profile, learn to
/// predict the post-perturbation profile.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationExample {
    pub cell: String,
    pub control: Vec<f64>,
    pub flagged: Vec<usize>,
    pub post: Vec<f64>,
}

/// Planted-effect task: flagging a wired TF adds [`PERTURB_EFFECT`] to each
/// of its targets.
/// Pairs cycle through cells and the TFs wired in each cell's type.
pub fn gen_perturbation_pairs(
    dataset: &SyntheticDataset,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<PerturbationExample>> {
    let gt = &dataset.manifest.ground_truth;
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut rng = stream(seed, "synth::pairs", 0, 0);
    let n_cells = dataset.expression.n_cells();
    for _ in 0..n_pairs {
        let c = rng.gen_range(0..n_cells);
        let ty = &dataset.cell_types[c];
        let wired = &gt.type_active_tfs[ty];
        let tf = &wired[rng.gen_range(0..wired.len())];
        let tf_idx = dataset
            .vocab
            .index_of(tf)
            .ok_or_else(|| Error::data(format!("ground-truth TF {tf} not in vocabulary")))?;
        let control = dataset.expression.row(c).to_vec();
        let mut post = control.clone();
        for target in &gt.targets[tf] {
            let gi = dataset
                .vocab
                .index_of(target)
                .ok_or_else(|| Error::data(format!("ground-truth target {target} unknown")))?;
            post[gi] += PERTURB_EFFECT;
        }
        pairs.push(PerturbationExample {
            cell: dataset.expression.cell_ids[c].clone(),
            control,
            flagged: vec![tf_idx],
            post,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grn::degree_stats;
    use tempfile::tempdir;

    fn small_config(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            cells: 60,
            genes: 50,
            tfs: 5,
            cell_types: 3,
            mean_targets_per_tf: 4,
            bimodal_fraction: 0.5,
            noise: 0.1,
            seed,
        }
    }

    #[test]
    fn infeasible_target_count_is_config_error() {
        let cfg = SyntheticConfig {
            genes: 30,
            tfs: 10,
            mean_targets_per_tf: 10,
            ..small_config(1)
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_byte_identical_across_runs() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let m1 = gen_synthetic(&small_config(7), d1.path()).unwrap();
        let m2 = gen_synthetic(&small_config(7), d2.path()).unwrap();
        assert_eq!(m1.checksums, m2.checksums);
        assert_eq!(m1.ground_truth, m2.ground_truth);
    }

    #[test]
    fn different_seeds_differ() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let m1 = gen_synthetic(&small_config(7), d1.path()).unwrap();
        let m2 = gen_synthetic(&small_config(8), d2.path()).unwrap();
        assert_ne!(m1.checksums["expression"], m2.checksums["expression"]);
    }

    #[test]
    fn planted_grn_has_tf_degree_asymmetry() {
        let dir = tempdir().unwrap();
        gen_synthetic(&small_config(3), dir.path()).unwrap();
        let ds = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
        for grn in ds.celltype_grns.values() {
            let stats = degree_stats(grn, &ds.vocab);
            assert!(
                stats.mean_tf_out_degree > 5.0 * stats.mean_non_tf_degree,
                "type {}: {} vs {}",
                grn.owner,
                stats.mean_tf_out_degree,
                stats.mean_non_tf_degree
            );
        }
    }

    #[test]
    fn full_bimodality_plants_two_modes_for_every_regulon() {
        let dir = tempdir().unwrap();
        let cfg = SyntheticConfig {
            bimodal_fraction: 1.0,
            ..small_config(4)
        };
        let m = gen_synthetic(&cfg, dir.path()).unwrap();
        assert_eq!(m.ground_truth.bimodal_regulons.len(), cfg.tfs);
        for modes in m.ground_truth.activity_modes.values() {
            assert!(modes[1] > modes[0]);
        }
        // Planted on-cells really express the regulator near the high mode.
        let ds = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
        for t in 0..cfg.tfs {
            let tf = format!("TF{t:03}");
            let gi = ds.vocab.index_of(&tf).unwrap();
            let mut on_mean = (0.0, 0usize);
            let mut off_mean = (0.0, 0usize);
            for (c, cid) in ds.expression.cell_ids.iter().enumerate() {
                let v = ds.expression.row(c)[gi];
                if m.ground_truth.cell_active_regulons[cid].contains(&tf) {
                    on_mean = (on_mean.0 + v, on_mean.1 + 1);
                } else {
                    off_mean = (off_mean.0 + v, off_mean.1 + 1);
                }
            }
            if on_mean.1 > 0 && off_mean.1 > 0 {
                assert!(on_mean.0 / on_mean.1 as f64 > 1.0 + off_mean.0 / off_mean.1 as f64);
            }
        }
    }

    #[test]
    fn targets_sit_inside_the_proximity_window() {
        let dir = tempdir().unwrap();
        gen_synthetic(&small_config(5), dir.path()).unwrap();
        let ds = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
        for (tf, targets) in &ds.manifest.ground_truth.targets {
            let regions = &ds.enhancers[tf];
            for target in targets {
                let gi = ds.vocab.index_of(target).unwrap();
                let (chrom, pos) = ds.vocab.coordinate(gi).unwrap();
                let near = regions.iter().any(|r| {
                    r.chrom == *chrom
                        && pos + 150_000 >= r.start
                        && *pos <= r.end + 150_000
                });
                assert!(near, "target {target} of {tf} outside the window");
            }
        }
    }

    #[test]
    fn tampered_file_fails_checksum_on_load() {
        let dir = tempdir().unwrap();
        gen_synthetic(&small_config(6), dir.path()).unwrap();
        let expr = dir.path().join("expression.tsv");
        let mut text = fs::read_to_string(&expr).unwrap();
        text.push('\n');
        fs::write(&expr, text).unwrap();
        let err = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn perturbation_pairs_shift_planted_targets_only() {
        let dir = tempdir().unwrap();
        gen_synthetic(&small_config(9), dir.path()).unwrap();
        let ds = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
        let pairs = gen_perturbation_pairs(&ds, 20, 11).unwrap();
        assert_eq!(pairs.len(), 20);
        for p in &pairs {
            assert_eq!(p.flagged.len(), 1);
            let tf = ds.vocab.id(p.flagged[0]).to_string();
            let targets: Vec<usize> = ds.manifest.ground_truth.targets[&tf]
                .iter()
                .map(|t| ds.vocab.index_of(t).unwrap())
                .collect();
            for gi in 0..p.control.len() {
                let delta = p.post[gi] - p.control[gi];
                if targets.contains(&gi) {
                    assert!((delta - PERTURB_EFFECT).abs() < 1e-12);
                } else {
                    assert_eq!(delta, 0.0);
                }
            }
        }
    }

    #[test]
    fn manifest_round_trips_through_json() {
        let dir = tempdir().unwrap();
        let m = gen_synthetic(&small_config(10), dir.path()).unwrap();
        let loaded = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m, loaded);
    }
}
