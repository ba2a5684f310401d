//! The training loop: per-step graph augmentation, structural encoding,
//! cross-modal fusion, masked reconstruction, and the perturbation-flag
//! fine-tune. Every random draw comes from a purpose-tagged stream keyed
//! by (seed, tag, step, index), so checkpoints carry no generator state
//! and ablation flags never shift unrelated draws.

use crate::activity::{
    aucell_score, classify_distribution, derive_cell_grn, fit_gmm2, select_threshold,
    ActivityMatrix, DistributionClass, GaussianMixtureModel, GmmFitConfig, ThresholdDecision,
    ThresholdMethod,
};
use crate::backbone::{
    apply_mask, decoder_forward, embed_tokens, encoder_blocks, encoder_forward, masked_mse_loss,
    tokenize_cell, BackboneConfig, Token,
};
use crate::error::{Error, Result};
use crate::fusion::{bind_attention_params, cross_attention, combine, init_attention_params, AttentionParams};
use crate::grn::{build_co_expression_graph, CoExpressionGraph, Grn};
use crate::io::{format_value, ExpressionMatrix};
use crate::optim::{AdamConfig, OptimizerState, ParamSet};
use crate::rng::stream;
use crate::sage::{combine_scales, perturb_grn, sage_forward, SageConfig};
use crate::synth::{PerturbationExample, SyntheticDataset};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Fraction of GRN edges replaced by co-expression pairs per step.
    pub alpha: f64,
    /// Weight on the fused structural embedding; 0 silences the GRN path.
    pub beta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub fusion_heads: usize,
    /// Fine-tune variant: update only the flag embedding and decoder.
    pub freeze_pretrained: bool,
    pub optimizer: AdamConfig,
    pub backbone: BackboneConfig,
    pub sage: SageConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.2,
            beta: 1.0,
            batch_size: 8,
            steps: 300,
            seed: 1,
            fusion_heads: 4,
            freeze_pretrained: false,
            optimizer: AdamConfig::default(),
            backbone: BackboneConfig::default(),
            sage: SageConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1)", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        self.backbone.validate()?;
        if self.sage.hidden != self.backbone.hidden {
            return Err(Error::config(format!(
                "graph encoder width {} must match backbone width {}",
                self.sage.hidden, self.backbone.hidden
            )));
        }
        if self.fusion_heads == 0 || self.backbone.hidden % self.fusion_heads != 0 {
            return Err(Error::config(format!(
                "hidden width {} must be divisible by fusion head count {}",
                self.backbone.hidden, self.fusion_heads
            )));
        }
        Ok(())
    }
}

/// Everything a checkpoint needs for exact resume: parameters, optimizer
/// moments, and the absolute step counter. RNG streams are derived from
/// (seed, step), so no generator state is stored.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: usize,
    pub params: ParamSet,
    pub optimizer: OptimizerState,
}

impl TrainState {
    pub fn new(config: TrainConfig, n_genes: usize) -> Result<Self> {
        config.validate()?;
        let d = config.backbone.hidden;
        let seed = config.seed;
        let mut params = ParamSet::new();
        {
            let mut r = stream(seed, "init::embed.gene", 0, 0);
            let scale = (1.0 / d as f64).sqrt();
            let data: Vec<f64> = (0..n_genes * d).map(|_| r.gen_range(-scale..scale)).collect();
            params.insert("embed.gene", Tensor::matrix(n_genes, d, data)?);
        }
        {
            // Nonzero so a flagged token is distinctive from the first
            // fine-tune step; pretraining never reads this row.
            let mut r = stream(seed, "init::embed.perturb_flag", 0, 0);
            let scale = (1.0 / d as f64).sqrt();
            let data: Vec<f64> = (0..d).map(|_| r.gen_range(-scale..scale)).collect();
            params.insert("embed.perturb_flag", Tensor::matrix(1, d, data)?);
        }
        config.backbone.init_params(seed, &mut params);
        config.sage.init_params(seed, &mut params);
        init_attention_params("fusion", d, seed, &mut params);
        let optimizer = OptimizerState::new(config.optimizer.clone(), &params);
        Ok(TrainState {
            config,
            step: 0,
            params,
            optimizer,
        })
    }

    pub fn n_genes(&self) -> usize {
        self.params.get("embed.gene").dims2().0
    }
}

/// Resolves each cell to its (cell-scale, cell-type-scale) GRN pair.
#[derive(Debug, Clone, Default)]
pub struct GrnLookup {
    pub celltype: BTreeMap<String, Grn>,
    pub cell: BTreeMap<String, Grn>,
    pub type_of: BTreeMap<String, String>,
}

impl GrnLookup {
    /// Stable per-type stream key: position in the sorted label set.
    pub fn type_index(&self, label: &str) -> Result<u64> {
        self.celltype
            .keys()
            .position(|k| k == label)
            .map(|i| i as u64)
            .ok_or_else(|| Error::data(format!("unknown cell type {label}")))
    }

    /// Direct resolution, falling back to the cell-scale GRN of the most
    /// cosine-similar cell that has one.
    pub fn resolve_or_map<'a>(
        &'a self,
        cell: &str,
        expression: &ExpressionMatrix,
    ) -> Result<(&'a Grn, &'a Grn, &'a str)> {
        let ty = self
            .type_of
            .get(cell)
            .ok_or_else(|| Error::data(format!("cell {cell} has no cell type label")))?;
        let g_type = self
            .celltype
            .get(ty)
            .ok_or_else(|| Error::data(format!("cell {cell}: no GRN for cell type {ty}")))?;
        if let Some(g_cell) = self.cell.get(cell) {
            return Ok((g_cell, g_type, ty));
        }
        let qi = expression
            .cell_index(cell)
            .ok_or_else(|| Error::data(format!("cell {cell} absent from the expression matrix")))?;
        let refs: Vec<&String> = self
            .cell
            .keys()
            .filter(|id| expression.cell_index(id).is_some())
            .collect();
        if refs.is_empty() {
            return Err(Error::data(format!(
                "cell {cell} has no cell-scale GRN and no reference cells exist"
            )));
        }
        let g = expression.n_genes();
        let query = Tensor::matrix(1, g, expression.row(qi).to_vec())?;
        let mut ref_data = Vec::with_capacity(refs.len() * g);
        for id in &refs {
            ref_data.extend_from_slice(expression.row(expression.cell_index(id).unwrap()));
        }
        let reference = Tensor::matrix(refs.len(), g, ref_data)?;
        let nearest = crate::activity::reference_map(&query, &reference, 1)?[0][0];
        Ok((&self.cell[refs[nearest]], g_type, ty))
    }
}

/// Activity pipeline outputs: AUCell scores, per-regulon mixture fits and
/// thresholds, and the finished lookup with one derived GRN per cell.
pub struct ActivityOutputs {
    pub activity: ActivityMatrix,
    pub gmms: BTreeMap<String, Option<GaussianMixtureModel>>,
    pub thresholds: BTreeMap<String, ThresholdDecision>,
    pub lookup: GrnLookup,
}

/// AUCell over every (cell, regulon), GMM thresholding per regulon, then
/// one cell-scale GRN per cell. Regulon = one TF with the union of its
/// targets across the cell-type GRNs. Degenerate activity columns get an
/// infinite threshold (regulon never active).
pub fn derive_lookup(
    dataset: &SyntheticDataset,
    top_fraction: f64,
    seed: u64,
) -> Result<ActivityOutputs> {
    let vocab = &dataset.vocab;
    let mut regulon_targets: BTreeMap<String, HashSet<usize>> = BTreeMap::new();
    for grn in dataset.celltype_grns.values() {
        for e in grn.edges() {
            regulon_targets
                .entry(vocab.id(e.source).to_string())
                .or_default()
                .insert(e.target);
        }
    }
    if regulon_targets.is_empty() {
        return Err(Error::data("no regulons: every cell-type GRN is empty"));
    }
    let regulon_ids: Vec<String> = regulon_targets.keys().cloned().collect();
    let eregulon_tfs: BTreeMap<String, usize> = regulon_ids
        .iter()
        .map(|id| {
            vocab
                .index_of(id)
                .map(|i| (id.clone(), i))
                .ok_or_else(|| Error::data(format!("regulon TF {id} not in vocabulary")))
        })
        .collect::<Result<_>>()?;

    let n_cells = dataset.expression.n_cells();
    let mut scores = vec![0.0; n_cells * regulon_ids.len()];
    for c in 0..n_cells {
        let row = dataset.expression.row(c);
        for (r, id) in regulon_ids.iter().enumerate() {
            scores[c * regulon_ids.len() + r] =
                aucell_score(row, &regulon_targets[id], top_fraction)?;
        }
    }
    let activity = ActivityMatrix::new(
        dataset.expression.cell_ids.clone(),
        regulon_ids.clone(),
        scores,
    )?;

    let mut gmms = BTreeMap::new();
    let mut thresholds = BTreeMap::new();
    let cfg = GmmFitConfig::default();
    for (r, id) in regulon_ids.iter().enumerate() {
        let column = activity.regulon_column(r);
        let fit_seed = stream(seed, "gmm", r as u64, 0).gen::<u64>();
        match fit_gmm2(&column, fit_seed, &cfg) {
            Ok(gmm) => {
                let class = classify_distribution(&gmm);
                thresholds.insert(id.clone(), select_threshold(&gmm, class)?);
                gmms.insert(id.clone(), Some(gmm));
            }
            Err(Error::Degenerate(_)) => {
                thresholds.insert(
                    id.clone(),
                    ThresholdDecision {
                        class: DistributionClass::Skewed,
                        method: ThresholdMethod::MuPlus2Sigma,
                        threshold: f64::INFINITY,
                    },
                );
                gmms.insert(id.clone(), None);
            }
            Err(e) => return Err(e),
        }
    }

    let mut lookup = GrnLookup {
        celltype: dataset.celltype_grns.clone(),
        cell: BTreeMap::new(),
        type_of: BTreeMap::new(),
    };
    for (c, cid) in dataset.expression.cell_ids.iter().enumerate() {
        let ty = &dataset.cell_types[c];
        lookup.type_of.insert(cid.clone(), ty.clone());
        let type_grn = dataset
            .celltype_grns
            .get(ty)
            .ok_or_else(|| Error::data(format!("cell {cid}: no GRN for cell type {ty}")))?;
        let cell_grn = derive_cell_grn(type_grn, &eregulon_tfs, &activity, &thresholds, cid)?;
        lookup.cell.insert(cid.clone(), cell_grn);
    }

    Ok(ActivityOutputs {
        activity,
        gmms,
        thresholds,
        lookup,
    })
}

fn lookup_var(params: &ParamSet, vars: &[Var], name: &str) -> Var {
    vars[params
        .index_of(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))]
}

/// Stage-1 + stage-2 for one GRN scale: perturb, then encode with fresh
/// neighbor samples.
#[allow(clippy::too_many_arguments)]
fn sage_scale(
    tape: &mut Tape,
    cfg: &TrainConfig,
    embed: Var,
    sage_vars: &[Var],
    grn: &Grn,
    co: &CoExpressionGraph,
    alpha: f64,
    rng_perturb: &mut ChaCha8Rng,
    rng_sample: &mut ChaCha8Rng,
) -> Result<Var> {
    let perturbed = perturb_grn(grn, co, alpha, rng_perturb)?.grn;
    sage_forward(tape, &perturbed, embed, &cfg.sage, sage_vars, rng_sample)
}

/// Union of positively expressed genes over the batch cells of one type;
/// the donor pool for the cached type-scale perturbation.
fn type_union_expression(
    batch: &[usize],
    expression: &ExpressionMatrix,
    lookup: &GrnLookup,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let g = expression.n_genes();
    let mut unions: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &c in batch {
        let cid = &expression.cell_ids[c];
        let ty = lookup
            .type_of
            .get(cid)
            .ok_or_else(|| Error::data(format!("cell {cid} has no cell type label")))?;
        let acc = unions.entry(ty.clone()).or_insert_with(|| vec![0.0; g]);
        for (a, &v) in acc.iter_mut().zip(expression.row(c)) {
            if v > *a {
                *a = v;
            }
        }
    }
    Ok(unions)
}

fn finish_step(
    state: &mut TrainState,
    tape: &mut Tape,
    vars: &[Var],
    loss: Var,
    trainable: Option<&[&str]>,
) -> Result<f64> {
    let value = tape.value(loss).data[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {value} at step {}",
            state.step
        )));
    }
    tape.backward(loss)?;
    let mut grads = state.params.zero_gradients();
    for (i, &v) in vars.iter().enumerate() {
        grads.slots[i].copy_from_slice(tape.grad(v)?);
    }
    if let Some(kept) = trainable {
        let keep: Vec<usize> = kept
            .iter()
            .filter_map(|n| state.params.index_of(n))
            .collect();
        for (i, slot) in grads.slots.iter_mut().enumerate() {
            if !keep.contains(&i) {
                slot.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
    state.optimizer.step(&mut state.params, &mut grads)?;
    state.step += 1;
    Ok(value)
}

/// One full Algorithm-1 step over a batch of expression rows. Stage 1
/// builds the co-expression graph from the unmasked profile and perturbs
/// both GRN scales; stage 2 encodes them and sums; stage 3 masks, encodes
/// expression, fuses via cross-attention, decodes, and scores the masked
/// positions. Returns the batch-mean loss after one optimizer update.
/// Type-scale encodings are cached per cell type within the batch.
pub fn pretrain_step(
    batch: &[usize],
    expression: &ExpressionMatrix,
    lookup: &GrnLookup,
    state: &mut TrainState,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("pretrain_step on an empty batch"));
    }
    let cfg = state.config.clone();
    let seed = cfg.seed;
    let step = state.step as u64;
    let g = expression.n_genes();

    let mut tape = Tape::new();
    let vars: Vec<Var> = state
        .params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), true))
        .collect();
    let embed = lookup_var(&state.params, &vars, "embed.gene");
    let sage_vars: Vec<Var> = cfg
        .sage
        .param_names()
        .iter()
        .map(|n| lookup_var(&state.params, &vars, n))
        .collect();
    let fusion_params = bind_attention_params("fusion", cfg.fusion_heads, &state.params, &vars);

    let unions = type_union_expression(batch, expression, lookup)?;
    let mut type_enc: BTreeMap<String, Var> = BTreeMap::new();

    let mut cell_losses = Vec::with_capacity(batch.len());
    for &c in batch {
        let cid = expression.cell_ids[c].clone();
        let row = expression.row(c);
        let tokens = tokenize_cell(row, cfg.backbone.max_genes);
        if tokens.is_empty() {
            return Err(Error::data(format!("cell {cid} has no expressed genes")));
        }
        let (masked, spec) = apply_mask(
            &tokens,
            cfg.backbone.mask_ratio,
            &mut stream(seed, "mask", step, c as u64),
        )?;
        let (g_cell, g_type, ty) = lookup.resolve_or_map(&cid, expression)?;

        let co_cell = build_co_expression_graph(cid.clone(), row, g)?;
        let h_cell = sage_scale(
            &mut tape,
            &cfg,
            embed,
            &sage_vars,
            g_cell,
            &co_cell,
            cfg.alpha,
            &mut stream(seed, "perturb::cell", step, c as u64),
            &mut stream(seed, "sage::cell", step, c as u64),
        )?;
        let h_type = match type_enc.get(ty) {
            Some(&v) => v,
            None => {
                let ti = lookup.type_index(ty)?;
                let co_type = build_co_expression_graph(ty, &unions[ty], g)?;
                let v = sage_scale(
                    &mut tape,
                    &cfg,
                    embed,
                    &sage_vars,
                    g_type,
                    &co_type,
                    cfg.alpha,
                    &mut stream(seed, "perturb::type", step, ti),
                    &mut stream(seed, "sage::type", step, ti),
                )?;
                type_enc.insert(ty.to_string(), v);
                v
            }
        };
        let h_struct = combine_scales(&mut tape, h_cell, h_type)?;

        let h_expr = encoder_forward(&mut tape, &masked, embed, &cfg.backbone, &state.params, &vars)?;
        let gene_order: Vec<usize> = masked.iter().map(|t| t.gene).collect();
        let h_struct_tokens = tape.gather_rows(h_struct, &gene_order)?;
        let fused = cross_attention(&mut tape, h_expr, h_struct_tokens, &fusion_params, false)?;
        let h_combined = combine(&mut tape, h_expr, fused.h_fusion, cfg.beta)?;
        let pred = decoder_forward(&mut tape, h_combined, &state.params, &vars)?;
        cell_losses.push(masked_mse_loss(&mut tape, pred, &spec)?);
    }

    let mut total = cell_losses[0];
    for &l in &cell_losses[1..] {
        total = tape.add(total, l)?;
    }
    let loss = tape.scale(total, 1.0 / cell_losses.len() as f64);
    finish_step(state, &mut tape, &vars, loss, None)
}

/// The structure-free reference pipeline: identical masking and expression
/// path, no GRN encoding or fusion. The alpha=0, beta=0 configuration of
/// `pretrain_step` must match this loss-for-loss.
pub fn backbone_only_step(
    batch: &[usize],
    expression: &ExpressionMatrix,
    state: &mut TrainState,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("backbone_only_step on an empty batch"));
    }
    let cfg = state.config.clone();
    let seed = cfg.seed;
    let step = state.step as u64;

    let mut tape = Tape::new();
    let vars: Vec<Var> = state
        .params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), true))
        .collect();
    let embed = lookup_var(&state.params, &vars, "embed.gene");

    let mut cell_losses = Vec::with_capacity(batch.len());
    for &c in batch {
        let cid = &expression.cell_ids[c];
        let tokens = tokenize_cell(expression.row(c), cfg.backbone.max_genes);
        if tokens.is_empty() {
            return Err(Error::data(format!("cell {cid} has no expressed genes")));
        }
        let (masked, spec) = apply_mask(
            &tokens,
            cfg.backbone.mask_ratio,
            &mut stream(seed, "mask", step, c as u64),
        )?;
        let h_expr = encoder_forward(&mut tape, &masked, embed, &cfg.backbone, &state.params, &vars)?;
        let pred = decoder_forward(&mut tape, h_expr, &state.params, &vars)?;
        cell_losses.push(masked_mse_loss(&mut tape, pred, &spec)?);
    }
    let mut total = cell_losses[0];
    for &l in &cell_losses[1..] {
        total = tape.add(total, l)?;
    }
    let loss = tape.scale(total, 1.0 / cell_losses.len() as f64);
    finish_step(state, &mut tape, &vars, loss, None)
}

fn sample_batch(n_cells: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let take = batch_size.min(n_cells);
    let mut order: Vec<usize> = (0..n_cells).collect();
    for i in 0..take {
        let j = rng.gen_range(i..n_cells);
        order.swap(i, j);
    }
    order.truncate(take);
    order
}

/// Runs steps `state.step..total_steps` with shuffled batches keyed by the
/// absolute step number, so a resumed run draws the same batches.
pub fn pretrain(
    expression: &ExpressionMatrix,
    lookup: &GrnLookup,
    state: &mut TrainState,
    total_steps: usize,
) -> Result<Vec<(usize, f64)>> {
    if expression.n_cells() == 0 {
        return Err(Error::contract("pretrain on an empty dataset"));
    }
    let mut log = Vec::new();
    while state.step < total_steps {
        let step = state.step as u64;
        let batch = sample_batch(
            expression.n_cells(),
            state.config.batch_size,
            &mut stream(state.config.seed, "batch", step, 0),
        );
        let loss = pretrain_step(&batch, expression, lookup, state)?;
        log.push((state.step - 1, loss));
    }
    Ok(log)
}

/// Structure-free counterpart of [`pretrain`] with identical batch and
/// mask draws.
pub fn backbone_only_pretrain(
    expression: &ExpressionMatrix,
    state: &mut TrainState,
    total_steps: usize,
) -> Result<Vec<(usize, f64)>> {
    if expression.n_cells() == 0 {
        return Err(Error::contract("pretrain on an empty dataset"));
    }
    let mut log = Vec::new();
    while state.step < total_steps {
        let step = state.step as u64;
        let batch = sample_batch(
            expression.n_cells(),
            state.config.batch_size,
            &mut stream(state.config.seed, "batch", step, 0),
        );
        let loss = backbone_only_step(&batch, expression, state)?;
        log.push((state.step - 1, loss));
    }
    Ok(log)
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    state: TrainState,
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        state: state.clone(),
    };
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::data(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    Ok(file.state)
}

pub fn save_loss_log(log: &[(usize, f64)], path: &Path) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (step, loss) in log {
        text.push_str(&format!("{step},{}\n", format_value(*loss)));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Shared forward pass for the perturbation task: tokenize the control
/// profile, add the flag embedding to targeted tokens, then run the full
/// fused pipeline. Returns the token sequence and per-token predictions.
#[allow(clippy::too_many_arguments)]
fn perturbation_forward(
    tape: &mut Tape,
    cfg: &TrainConfig,
    params: &ParamSet,
    vars: &[Var],
    fusion_params: &AttentionParams,
    example: &PerturbationExample,
    lookup: &GrnLookup,
    expression: &ExpressionMatrix,
    alpha: f64,
    rngs: &mut [ChaCha8Rng; 4],
    return_attention: bool,
) -> Result<(Vec<Token>, Var, Option<Vec<Tensor>>)> {
    let g = expression.n_genes();
    for &gene in &example.flagged {
        if gene >= g {
            return Err(Error::data(format!(
                "flagged gene index {gene} outside the {g}-gene vocabulary"
            )));
        }
    }
    let tokens = tokenize_cell(&example.control, cfg.backbone.max_genes);
    if tokens.is_empty() {
        return Err(Error::data(format!(
            "cell {} has no expressed genes",
            example.cell
        )));
    }
    let embed = lookup_var(params, vars, "embed.gene");
    let sage_vars: Vec<Var> = cfg
        .sage
        .param_names()
        .iter()
        .map(|n| lookup_var(params, vars, n))
        .collect();

    let mut emb = embed_tokens(tape, &tokens, embed, params, vars)?;
    let flagged: HashSet<usize> = example.flagged.iter().copied().collect();
    // Flagged genes carry the flag embedding on both pathways: their
    // expression token and their graph-encoder input feature, so the GRN
    // propagates the perturbation to graph neighbors.
    let mut struct_input = embed;
    if !flagged.is_empty() {
        let flag = lookup_var(params, vars, "embed.perturb_flag");
        let indicator: Vec<f64> = tokens
            .iter()
            .map(|t| if flagged.contains(&t.gene) { 1.0 } else { 0.0 })
            .collect();
        let ind = tape.constant(Tensor::matrix(tokens.len(), 1, indicator)?);
        let contrib = tape.matmul(ind, flag)?;
        emb = tape.add(emb, contrib)?;
        let gene_ind: Vec<f64> = (0..g)
            .map(|i| if flagged.contains(&i) { 1.0 } else { 0.0 })
            .collect();
        let gind = tape.constant(Tensor::matrix(g, 1, gene_ind)?);
        let gcontrib = tape.matmul(gind, flag)?;
        struct_input = tape.add(embed, gcontrib)?;
    }
    let h_expr = encoder_blocks(tape, emb, &cfg.backbone, params, vars)?;

    let (g_cell, g_type, _) = lookup.resolve_or_map(&example.cell, expression)?;
    let co = build_co_expression_graph(example.cell.clone(), &example.control, g)?;
    let [rng_pc, rng_pt, rng_sc, rng_st] = rngs;
    let h_cell = sage_scale(tape, cfg, struct_input, &sage_vars, g_cell, &co, alpha, rng_pc, rng_sc)?;
    let h_type = sage_scale(tape, cfg, struct_input, &sage_vars, g_type, &co, alpha, rng_pt, rng_st)?;
    let h_struct = combine_scales(tape, h_cell, h_type)?;
    let gene_order: Vec<usize> = tokens.iter().map(|t| t.gene).collect();
    let h_struct_tokens = tape.gather_rows(h_struct, &gene_order)?;
    let fused = cross_attention(tape, h_expr, h_struct_tokens, fusion_params, return_attention)?;
    let h_combined = combine(tape, h_expr, fused.h_fusion, cfg.beta)?;
    let pred = decoder_forward(tape, h_combined, params, vars)?;
    Ok((tokens, pred, fused.attention))
}

/// Weighted MSE over token positions against the post-perturbation
/// profile. Positions whose value changed share half the total weight with
/// the unchanged rest, so a handful of shifted genes is not drowned out by
/// the reconstruction term. Same minimizer as the uniform MSE.
fn balanced_profile_loss(
    tape: &mut Tape,
    predictions: Var,
    tokens: &[Token],
    example: &PerturbationExample,
) -> Result<Var> {
    let n = tokens.len();
    let target: Vec<f64> = tokens.iter().map(|t| example.post[t.gene]).collect();
    let changed: Vec<bool> = tokens
        .iter()
        .map(|t| (example.post[t.gene] - example.control[t.gene]).abs() > 0.0)
        .collect();
    let n_ch = changed.iter().filter(|&&c| c).count();
    let weights: Vec<f64> = if n_ch == 0 || n_ch == n {
        vec![1.0 / n as f64; n]
    } else {
        changed
            .iter()
            .map(|&c| if c { 0.5 / n_ch as f64 } else { 0.5 / (n - n_ch) as f64 })
            .collect()
    };
    let target = tape.constant(Tensor::matrix(n, 1, target)?);
    let w = tape.constant(Tensor::matrix(n, 1, weights)?);
    let diff = tape.sub(predictions, target)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul(sq, w)?;
    Ok(tape.sum(weighted))
}

/// Trains on (control, flags, post) triples with a class-balanced MSE over
/// the token positions. Honors `freeze_pretrained` by restricting updates
/// to the flag embedding and decoder head.
pub fn finetune_perturbation(
    state: &mut TrainState,
    pairs: &[PerturbationExample],
    lookup: &GrnLookup,
    expression: &ExpressionMatrix,
    steps: usize,
) -> Result<Vec<(usize, f64)>> {
    if pairs.is_empty() {
        return Err(Error::contract("finetune_perturbation with no pairs"));
    }
    // Fresh moments: stale second-moment estimates from pretraining would
    // shrink the small flag-driven gradients for hundreds of steps.
    state.optimizer = OptimizerState::new(state.config.optimizer.clone(), &state.params);
    let cfg = state.config.clone();
    let seed = cfg.seed;
    let mut log = Vec::new();
    for ft_step in 0..steps {
        let fs = ft_step as u64;
        let batch = sample_batch(
            pairs.len(),
            cfg.batch_size,
            &mut stream(seed, "ft::batch", fs, 0),
        );
        let mut tape = Tape::new();
        let vars: Vec<Var> = state
            .params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), true))
            .collect();
        let fusion_params = bind_attention_params("fusion", cfg.fusion_heads, &state.params, &vars);
        let mut losses = Vec::with_capacity(batch.len());
        for &p in &batch {
            let example = &pairs[p];
            let mut rngs = [
                stream(seed, "ft::perturb::cell", fs, p as u64),
                stream(seed, "ft::perturb::type", fs, p as u64),
                stream(seed, "ft::sage::cell", fs, p as u64),
                stream(seed, "ft::sage::type", fs, p as u64),
            ];
            let (tokens, pred, _) = perturbation_forward(
                &mut tape,
                &cfg,
                &state.params,
                &vars,
                &fusion_params,
                example,
                lookup,
                expression,
                cfg.alpha,
                &mut rngs,
                false,
            )?;
            losses.push(balanced_profile_loss(&mut tape, pred, &tokens, example)?);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let loss = tape.scale(total, 1.0 / losses.len() as f64);
        let trainable: Option<&[&str]> = if cfg.freeze_pretrained {
            Some(&["embed.perturb_flag", "decoder.w", "decoder.b"])
        } else {
            None
        };
        let value = finish_step(state, &mut tape, &vars, loss, trainable)?;
        log.push((ft_step, value));
    }
    Ok(log)
}

/// Deterministic prediction of the full post-perturbation profile: no edge
/// perturbation, neighbor samples keyed by the cell's row index. Genes
/// outside the token window keep their control values.
pub fn predict_perturbation(
    state: &TrainState,
    example: &PerturbationExample,
    lookup: &GrnLookup,
    expression: &ExpressionMatrix,
) -> Result<Vec<f64>> {
    let cfg = &state.config;
    let seed = cfg.seed;
    let key = expression
        .cell_index(&example.cell)
        .ok_or_else(|| Error::data(format!("cell {} absent from the expression matrix", example.cell)))?
        as u64;
    let mut tape = Tape::new();
    let vars: Vec<Var> = state
        .params
        .iter()
        .map(|(_, t)| tape.constant(t.clone()))
        .collect();
    let fusion_params = bind_attention_params("fusion", cfg.fusion_heads, &state.params, &vars);
    let mut rngs = [
        stream(seed, "eval::perturb::cell", 0, key),
        stream(seed, "eval::perturb::type", 0, key),
        stream(seed, "eval::sage::cell", 0, key),
        stream(seed, "eval::sage::type", 0, key),
    ];
    let (tokens, pred, _) = perturbation_forward(
        &mut tape,
        cfg,
        &state.params,
        &vars,
        &fusion_params,
        example,
        lookup,
        expression,
        0.0,
        &mut rngs,
        false,
    )?;
    let mut out = example.control.clone();
    let values = &tape.value(pred).data;
    for (i, t) in tokens.iter().enumerate() {
        out[t.gene] = values[i];
    }
    Ok(out)
}

/// Fusion-layer attention for one unperturbed cell: token gene indices and
/// one row-stochastic N×N matrix per head.
pub fn fusion_attention_for_cell(
    state: &TrainState,
    expression: &ExpressionMatrix,
    lookup: &GrnLookup,
    cell_row: usize,
) -> Result<(Vec<usize>, Vec<Tensor>)> {
    let cfg = &state.config;
    let example = PerturbationExample {
        cell: expression.cell_ids[cell_row].clone(),
        control: expression.row(cell_row).to_vec(),
        flagged: Vec::new(),
        post: expression.row(cell_row).to_vec(),
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = state
        .params
        .iter()
        .map(|(_, t)| tape.constant(t.clone()))
        .collect();
    let fusion_params = bind_attention_params("fusion", cfg.fusion_heads, &state.params, &vars);
    let key = cell_row as u64;
    let mut rngs = [
        stream(cfg.seed, "eval::perturb::cell", 0, key),
        stream(cfg.seed, "eval::perturb::type", 0, key),
        stream(cfg.seed, "eval::sage::cell", 0, key),
        stream(cfg.seed, "eval::sage::type", 0, key),
    ];
    let (tokens, _, attention) = perturbation_forward(
        &mut tape,
        cfg,
        &state.params,
        &vars,
        &fusion_params,
        &example,
        lookup,
        expression,
        0.0,
        &mut rngs,
        true,
    )?;
    let genes = tokens.iter().map(|t| t.gene).collect();
    Ok((genes, attention.expect("attention requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_perturbation_pairs, gen_synthetic, load_dataset, SyntheticConfig, MANIFEST_FILE};
    use tempfile::tempdir;

    fn small_train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 3,
            seed,
            backbone: BackboneConfig {
                hidden: 16,
                layers: 1,
                heads: 2,
                feed_forward: 32,
                mask_ratio: 0.2,
                max_genes: 64,
                ..BackboneConfig::default()
            },
            sage: SageConfig {
                layers: 2,
                sample_size: 5,
                hidden: 16,
            },
            fusion_heads: 2,
            ..TrainConfig::default()
        }
    }

    fn small_dataset(seed: u64) -> (tempfile::TempDir, SyntheticDataset) {
        let dir = tempdir().unwrap();
        let cfg = SyntheticConfig {
            cells: 40,
            genes: 30,
            tfs: 4,
            cell_types: 2,
            mean_targets_per_tf: 3,
            bimodal_fraction: 0.5,
            noise: 0.1,
            seed,
        };
        gen_synthetic(&cfg, dir.path()).unwrap();
        let ds = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
        (dir, ds)
    }

    #[test]
    fn config_rejects_width_mismatch() {
        let mut cfg = small_train_config(1);
        cfg.sage.hidden = 8;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn derive_lookup_gives_every_cell_a_grn() {
        let (_d, ds) = small_dataset(2);
        let out = derive_lookup(&ds, 0.2, 5).unwrap();
        assert_eq!(out.lookup.cell.len(), ds.expression.n_cells());
        assert_eq!(out.lookup.celltype.len(), 2);
        for grn in out.lookup.cell.values() {
            // Cell GRNs are subsets of the owning type GRN.
            for e in grn.edges() {
                assert!(out
                    .lookup
                    .celltype
                    .values()
                    .any(|t| t.contains_pair(e.source, e.target)));
            }
        }
    }

    #[test]
    fn unmapped_cell_falls_back_to_nearest_reference() {
        let (_d, ds) = small_dataset(3);
        let out = derive_lookup(&ds, 0.2, 5).unwrap();
        let mut lookup = out.lookup;
        let victim = ds.expression.cell_ids[7].clone();
        let removed = lookup.cell.remove(&victim).unwrap();
        let (mapped, _, _) = lookup.resolve_or_map(&victim, &ds.expression).unwrap();
        // The mapped GRN belongs to some other cell, not the removed one.
        assert_ne!(mapped.owner, removed.owner);
    }

    #[test]
    fn single_cell_losses_stay_positive_and_finite() {
        let (_d, ds) = small_dataset(4);
        let lookup = derive_lookup(&ds, 0.2, 5).unwrap().lookup;
        let mut state =
            TrainState::new(small_train_config(4), ds.expression.n_genes()).unwrap();
        for _ in 0..50 {
            let loss = pretrain_step(&[0], &ds.expression, &lookup, &mut state).unwrap();
            assert!(loss.is_finite() && loss > 0.0);
        }
        assert_eq!(state.step, 50);
    }

    #[test]
    fn loss_sequence_is_deterministic() {
        let (_d, ds) = small_dataset(5);
        let lookup = derive_lookup(&ds, 0.2, 5).unwrap().lookup;
        let run = || {
            let mut state =
                TrainState::new(small_train_config(5), ds.expression.n_genes()).unwrap();
            pretrain(&ds.expression, &lookup, &mut state, 5).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn double_ablation_matches_backbone_only_exactly() {
        let (_d, ds) = small_dataset(6);
        let lookup = derive_lookup(&ds, 0.2, 5).unwrap().lookup;
        let mut cfg = small_train_config(6);
        cfg.alpha = 0.0;
        cfg.beta = 0.0;
        let mut full = TrainState::new(cfg.clone(), ds.expression.n_genes()).unwrap();
        let mut bare = TrainState::new(cfg, ds.expression.n_genes()).unwrap();
        let full_log = pretrain(&ds.expression, &lookup, &mut full, 5).unwrap();
        let bare_log = backbone_only_pretrain(&ds.expression, &mut bare, 5).unwrap();
        for ((_, a), (_, b)) in full_log.iter().zip(&bare_log) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_step_checkpoint_round_trips_to_initialization() {
        let (_d, ds) = small_dataset(7);
        let state = TrainState::new(small_train_config(7), ds.expression.n_genes()).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(state, loaded);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (_d, ds) = small_dataset(8);
        let lookup = derive_lookup(&ds, 0.2, 5).unwrap().lookup;
        let cfg = small_train_config(8);
        let mut straight = TrainState::new(cfg.clone(), ds.expression.n_genes()).unwrap();
        let straight_log = pretrain(&ds.expression, &lookup, &mut straight, 6).unwrap();

        let mut first = TrainState::new(cfg, ds.expression.n_genes()).unwrap();
        pretrain(&ds.expression, &lookup, &mut first, 3).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&first, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        let tail = pretrain(&ds.expression, &lookup, &mut resumed, 6).unwrap();
        for ((_, a), (_, b)) in straight_log[3..].iter().zip(&tail) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(straight.params, resumed.params);
    }

    #[test]
    fn zeroed_flag_embedding_makes_flags_invisible() {
        let (_d, ds) = small_dataset(9);
        let lookup = derive_lookup(&ds, 0.2, 5).unwrap().lookup;
        let mut state = TrainState::new(small_train_config(9), ds.expression.n_genes()).unwrap();
        let d = state.config.backbone.hidden;
        *state.params.get_mut("embed.perturb_flag") = Tensor::matrix(1, d, vec![0.0; d]).unwrap();
        let pairs = gen_perturbation_pairs(&ds, 2, 3).unwrap();
        let flagged = predict_perturbation(&state, &pairs[0], &lookup, &ds.expression).unwrap();
        let mut unflagged_example = pairs[0].clone();
        unflagged_example.flagged.clear();
        let unflagged =
            predict_perturbation(&state, &unflagged_example, &lookup, &ds.expression).unwrap();
        assert_eq!(flagged, unflagged);
    }

    #[test]
    fn finetune_reduces_training_loss() {
        let (_d, ds) = small_dataset(10);
        let lookup = derive_lookup(&ds, 0.2, 5).unwrap().lookup;
        let mut state = TrainState::new(small_train_config(10), ds.expression.n_genes()).unwrap();
        let pairs = gen_perturbation_pairs(&ds, 6, 4).unwrap();
        let log = finetune_perturbation(&mut state, &pairs, &lookup, &ds.expression, 30).unwrap();
        assert!(log.iter().all(|(_, l)| l.is_finite()));
        assert!(log.last().unwrap().1 < log.first().unwrap().1);
    }

    #[test]
    fn frozen_finetune_only_moves_flag_and_decoder() {
        let (_d, ds) = small_dataset(11);
        let lookup = derive_lookup(&ds, 0.2, 5).unwrap().lookup;
        let mut cfg = small_train_config(11);
        cfg.freeze_pretrained = true;
        let mut state = TrainState::new(cfg, ds.expression.n_genes()).unwrap();
        let before = state.params.clone();
        let pairs = gen_perturbation_pairs(&ds, 4, 4).unwrap();
        finetune_perturbation(&mut state, &pairs, &lookup, &ds.expression, 3).unwrap();
        for (name, tensor) in state.params.iter() {
            let unchanged = tensor == before.get(name);
            let trainable = matches!(name, "embed.perturb_flag" | "decoder.w" | "decoder.b");
            assert_eq!(!unchanged, trainable, "parameter {name}");
        }
    }

    #[test]
    fn unknown_flagged_gene_is_an_error() {
        let (_d, ds) = small_dataset(12);
        let lookup = derive_lookup(&ds, 0.2, 5).unwrap().lookup;
        let state = TrainState::new(small_train_config(12), ds.expression.n_genes()).unwrap();
        let mut pair = gen_perturbation_pairs(&ds, 1, 4).unwrap().pop().unwrap();
        pair.flagged = vec![ds.expression.n_genes() + 5];
        let err = predict_perturbation(&state, &pair, &lookup, &ds.expression).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn attention_matrices_are_row_stochastic_per_head() {
        let (_d, ds) = small_dataset(13);
        let lookup = derive_lookup(&ds, 0.2, 5).unwrap().lookup;
        let state = TrainState::new(small_train_config(13), ds.expression.n_genes()).unwrap();
        let (genes, heads) = fusion_attention_for_cell(&state, &ds.expression, &lookup, 0).unwrap();
        assert_eq!(heads.len(), state.config.fusion_heads);
        for a in &heads {
            let (n, m) = a.dims2();
            assert_eq!(n, genes.len());
            assert_eq!(m, genes.len());
            for i in 0..n {
                let s: f64 = a.data[i * m..(i + 1) * m].iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}
