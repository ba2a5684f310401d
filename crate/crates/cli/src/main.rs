//! Pipeline driver. Each subcommand is a pure function of (config, seed,
//! input files); re-running overwrites its outputs deterministically.
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error.

use clap::{Parser, Subcommand};
use grnformer_core::analysis::{
    corpus_attention_report, degree_attention_join, save_attention_report,
    save_degree_attention_table, save_metrics, tf_enrichment_ratio, AttentionReport, MetricRecord,
};
use grnformer_core::activity::{
    save_activity_report, save_threshold_report, ThresholdReportEntry,
};
use grnformer_core::analysis::{pcc_delta, roc_auc};
use grnformer_core::grn::{
    degree_stats, grn_from_eregulons, link_eregulon, save_edge_lists, Grn, GrnScale,
};
use grnformer_core::io::format_value;
use grnformer_core::rng::stream;
use grnformer_core::synth::{
    gen_perturbation_pairs, gen_synthetic, load_dataset, PerturbationExample, SyntheticConfig,
    SyntheticDataset, MANIFEST_FILE,
};
use grnformer_core::trainer::{
    backbone_only_pretrain, derive_lookup, finetune_perturbation, fusion_attention_for_cell,
    load_checkpoint, predict_perturbation, pretrain, save_checkpoint, save_loss_log, GrnLookup,
    TrainConfig, TrainState,
};
use grnformer_core::{Error, Result};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "grnformer",
    version,
    about = "Multi-scale GRN construction and structure-aware masked expression modeling",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON job configuration (strict: unknown keys are rejected).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration and GRNFORMER_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory in the configuration.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker count; 1 guarantees bit-exact reproducibility.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted regulatory structure.
    Synth,
    /// Link eRegulons and assemble a GRN from the dataset's multiome.
    BuildGrn,
    /// Score regulon activity, fit thresholds, derive cell-scale GRNs.
    Activity,
    /// Run structure-aware masked-expression pretraining.
    Pretrain,
    /// Attention importance, TF enrichment, degree joins.
    Analyze,
    /// Fine-tune on the perturbation task and report metrics.
    Eval,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.workers == 0 {
        return Err(Error::config("--workers must be at least 1"));
    }
    let config_path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::config("--config <path> is required"))?;
    let seed = resolve_seed(cli.seed)?;
    match cli.command {
        Command::Synth => cmd_synth(config_path, seed, cli.out_dir.as_deref()),
        Command::BuildGrn => cmd_build_grn(config_path, cli.out_dir.as_deref()),
        Command::Activity => cmd_activity(config_path, seed, cli.out_dir.as_deref()),
        Command::Pretrain => cmd_pretrain(config_path, seed, cli.out_dir.as_deref()),
        Command::Analyze => cmd_analyze(config_path, seed, cli.out_dir.as_deref()),
        Command::Eval => cmd_eval(config_path, seed, cli.out_dir.as_deref()),
    }
}

/// Flag wins over the GRNFORMER_SEED environment variable; either wins
/// over the seed recorded in the job configuration.
fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("GRNFORMER_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::config(format!("GRNFORMER_SEED is not an integer: {v}"))),
        Err(_) => Ok(None),
    }
}

fn load_job<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))
}

fn resolve_out_dir(flag: Option<&Path>, configured: &str) -> Result<PathBuf> {
    let dir = flag
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(configured));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn default_out_dir() -> String {
    ".".into()
}

fn load_dataset_at(manifest: &str) -> Result<SyntheticDataset> {
    let path = PathBuf::from(manifest);
    let path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path
    };
    load_dataset(&path)
}

// ── synth ───────────────────────────────────────────────────────────

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SynthJob {
    synthetic: SyntheticConfig,
    out_dir: String,
}

impl Default for SynthJob {
    fn default() -> Self {
        SynthJob {
            synthetic: SyntheticConfig::default(),
            out_dir: default_out_dir(),
        }
    }
}

fn cmd_synth(config: &Path, seed: Option<u64>, out_flag: Option<&Path>) -> Result<()> {
    let mut job: SynthJob = load_job(config)?;
    if let Some(s) = seed {
        job.synthetic.seed = s;
    }
    let out = resolve_out_dir(out_flag, &job.out_dir)?;
    let manifest = gen_synthetic(&job.synthetic, &out)?;
    println!(
        "wrote {} files for {} cells × {} genes into {}",
        manifest.files.len(),
        job.synthetic.cells,
        job.synthetic.genes,
        out.display()
    );
    Ok(())
}

// ── build-grn ───────────────────────────────────────────────────────

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct BuildGrnJob {
    manifest: String,
    proximity_kb: f64,
    corr_floor: f64,
    out_dir: String,
}

impl Default for BuildGrnJob {
    fn default() -> Self {
        BuildGrnJob {
            manifest: "manifest.json".into(),
            proximity_kb: 150.0,
            corr_floor: 0.03,
            out_dir: default_out_dir(),
        }
    }
}

fn cmd_build_grn(config: &Path, out_flag: Option<&Path>) -> Result<()> {
    let job: BuildGrnJob = load_job(config)?;
    let out = resolve_out_dir(out_flag, &job.out_dir)?;
    let ds = load_dataset_at(&job.manifest)?;
    let candidates: Vec<usize> = (0..ds.vocab.len()).collect();
    let mut eregulons = Vec::new();
    for tf in ds.vocab.tf_indices().collect::<Vec<_>>() {
        let tf_id = ds.vocab.id(tf).to_string();
        let regions = ds
            .enhancers
            .get(&tf_id)
            .ok_or_else(|| Error::data(format!("no enhancer regions for TF {tf_id}")))?;
        eregulons.push(link_eregulon(
            tf,
            regions,
            &candidates,
            &ds.vocab,
            &ds.expression,
            job.proximity_kb,
            job.corr_floor,
        )?);
    }
    let grn = grn_from_eregulons(&eregulons, GrnScale::CellType, "dataset");
    save_edge_lists(&[&grn], &ds.vocab, &out.join("built_grn.tsv"))?;
    let stats = degree_stats(&grn, &ds.vocab);
    fs::write(
        out.join("degree_stats.json"),
        serde_json::to_string_pretty(&stats)? + "\n",
    )?;
    println!(
        "linked {} eRegulons into {} edges ({})",
        eregulons.len(),
        grn.n_edges(),
        out.join("built_grn.tsv").display()
    );
    Ok(())
}

// ── activity ────────────────────────────────────────────────────────

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ActivityJob {
    manifest: String,
    top_fraction: f64,
    seed: u64,
    out_dir: String,
}

impl Default for ActivityJob {
    fn default() -> Self {
        ActivityJob {
            manifest: "manifest.json".into(),
            top_fraction: 0.1,
            seed: 7,
            out_dir: default_out_dir(),
        }
    }
}

fn run_activity(job: &ActivityJob, out: &Path) -> Result<GrnLookup> {
    let ds = load_dataset_at(&job.manifest)?;
    let outputs = derive_lookup(&ds, job.top_fraction, job.seed)?;
    save_activity_report(&outputs.activity, &outputs.thresholds, &out.join("activity.tsv"))?;
    let entries: Vec<ThresholdReportEntry> = outputs
        .thresholds
        .iter()
        .map(|(regulon, decision)| {
            let (pi, mu, sigma) = match &outputs.gmms[regulon] {
                Some(g) => (
                    g.weights,
                    g.means,
                    [g.variances[0].sqrt(), g.variances[1].sqrt()],
                ),
                None => ([f64::NAN; 2], [f64::NAN; 2], [f64::NAN; 2]),
            };
            ThresholdReportEntry {
                regulon: regulon.clone(),
                pi,
                mu,
                sigma,
                class: decision.class,
                threshold: decision.threshold,
            }
        })
        .collect();
    save_threshold_report(&entries, &out.join("thresholds.json"))?;
    let cell_grns: Vec<&Grn> = outputs.lookup.cell.values().collect();
    save_edge_lists(&cell_grns, &ds.vocab, &out.join("cell_grns.tsv"))?;
    Ok(outputs.lookup)
}

fn cmd_activity(config: &Path, seed: Option<u64>, out_flag: Option<&Path>) -> Result<()> {
    let mut job: ActivityJob = load_job(config)?;
    if let Some(s) = seed {
        job.seed = s;
    }
    let out = resolve_out_dir(out_flag, &job.out_dir)?;
    let lookup = run_activity(&job, &out)?;
    println!(
        "scored {} regulons over {} cells into {}",
        lookup.celltype.len(),
        lookup.cell.len(),
        out.display()
    );
    Ok(())
}

// ── pretrain ────────────────────────────────────────────────────────

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PretrainJob {
    manifest: String,
    train: TrainConfig,
    top_fraction: f64,
    activity_seed: u64,
    /// Reference pipeline without the structure path; same masks/batches.
    backbone_only: bool,
    out_dir: String,
}

impl Default for PretrainJob {
    fn default() -> Self {
        PretrainJob {
            manifest: "manifest.json".into(),
            train: TrainConfig::default(),
            top_fraction: 0.1,
            activity_seed: 7,
            backbone_only: false,
            out_dir: default_out_dir(),
        }
    }
}

fn cmd_pretrain(config: &Path, seed: Option<u64>, out_flag: Option<&Path>) -> Result<()> {
    let mut job: PretrainJob = load_job(config)?;
    if let Some(s) = seed {
        job.train.seed = s;
    }
    let out = resolve_out_dir(out_flag, &job.out_dir)?;
    let ds = load_dataset_at(&job.manifest)?;
    let mut state = TrainState::new(job.train.clone(), ds.expression.n_genes())?;
    let steps = job.train.steps;
    let log = if job.backbone_only {
        backbone_only_pretrain(&ds.expression, &mut state, steps)?
    } else {
        let lookup = derive_lookup(&ds, job.top_fraction, job.activity_seed)?.lookup;
        pretrain(&ds.expression, &lookup, &mut state, steps)?
    };
    save_loss_log(&log, &out.join("loss.csv"))?;
    save_checkpoint(&state, &out.join("checkpoint.json"))?;
    let last = log.last().map(|&(_, l)| l).unwrap_or(f64::NAN);
    println!("{steps} steps, final loss {last:.6}, outputs in {}", out.display());
    Ok(())
}

// ── analyze ─────────────────────────────────────────────────────────

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AnalyzeJob {
    manifest: String,
    checkpoint: String,
    top_fraction: f64,
    activity_seed: u64,
    eval_cells: usize,
    sample_seed: u64,
    /// Dump dense attention matrices for this many sampled cells.
    dump_attention: usize,
    out_dir: String,
}

impl Default for AnalyzeJob {
    fn default() -> Self {
        AnalyzeJob {
            manifest: "manifest.json".into(),
            checkpoint: "checkpoint.json".into(),
            top_fraction: 0.1,
            activity_seed: 7,
            eval_cells: 64,
            sample_seed: 11,
            dump_attention: 0,
            out_dir: default_out_dir(),
        }
    }
}

fn sample_cells(n_cells: usize, count: usize, seed: u64) -> Vec<usize> {
    let take = count.min(n_cells);
    let mut rng = stream(seed, "analyze::cells", 0, 0);
    let mut order: Vec<usize> = (0..n_cells).collect();
    for i in 0..take {
        let j = rng.gen_range(i..n_cells);
        order.swap(i, j);
    }
    order.truncate(take);
    order
}

fn dump_attention_files(
    state: &TrainState,
    ds: &SyntheticDataset,
    lookup: &GrnLookup,
    rows: &[usize],
    out: &Path,
) -> Result<()> {
    for &row in rows {
        let cell = ds.expression.cell_ids[row].clone();
        let (genes, heads) = fusion_attention_for_cell(state, &ds.expression, lookup, row)?;
        let mut text = String::new();
        for head in &heads {
            let (n, _) = head.dims2();
            for i in 0..n {
                let line: Vec<String> = head.data[i * n..(i + 1) * n]
                    .iter()
                    .map(|&v| format_value(v))
                    .collect();
                text.push_str(&line.join("\t"));
                text.push('\n');
            }
        }
        fs::write(out.join(format!("attention_{cell}.tsv")), text)?;
        let sidecar = serde_json::json!({
            "cell": cell,
            "heads": heads.len(),
            "genes": genes.iter().map(|&g| ds.vocab.id(g)).collect::<Vec<_>>(),
        });
        fs::write(
            out.join(format!("attention_{cell}.json")),
            serde_json::to_string_pretty(&sidecar)? + "\n",
        )?;
    }
    Ok(())
}

fn cmd_analyze(config: &Path, seed: Option<u64>, out_flag: Option<&Path>) -> Result<()> {
    let mut job: AnalyzeJob = load_job(config)?;
    if let Some(s) = seed {
        job.sample_seed = s;
    }
    let out = resolve_out_dir(out_flag, &job.out_dir)?;
    let ds = load_dataset_at(&job.manifest)?;
    let state = load_checkpoint(Path::new(&job.checkpoint))?;
    let lookup = derive_lookup(&ds, job.top_fraction, job.activity_seed)?.lookup;
    let rows = sample_cells(ds.expression.n_cells(), job.eval_cells, job.sample_seed);
    let (phi, heads) =
        corpus_attention_report(&state, &ds.expression, &lookup, &rows, ds.vocab.len())?;
    let tf_set: HashSet<usize> = ds.vocab.tf_indices().collect();
    let rho = tf_enrichment_ratio(&phi, &tf_set)?;
    let report = AttentionReport {
        phi: phi.clone(),
        rho,
        heads,
        n_genes: ds.vocab.len(),
        scope: format!("{} evaluation cells", rows.len()),
    };
    save_attention_report(&report, &out.join("attention_report.json"))?;

    // Degrees against the union of the cell-type GRNs, max weight per edge.
    let mut union = Grn::new(GrnScale::CellType, "union");
    for grn in ds.celltype_grns.values() {
        for e in grn.edges() {
            if !union.contains_pair(e.source, e.target) {
                union.add_edge(*e)?;
            }
        }
    }
    let table = degree_attention_join(&union, &phi, &ds.vocab)?;
    save_degree_attention_table(&table, &out.join("degree_attention.tsv"))?;
    save_metrics(
        &[MetricRecord {
            metric: "tf_enrichment_ratio".into(),
            group: "dataset".into(),
            value: rho,
            n: rows.len(),
        }],
        &out.join("metrics.csv"),
    )?;
    if job.dump_attention > 0 {
        let dump_rows: Vec<usize> = rows.iter().copied().take(job.dump_attention).collect();
        dump_attention_files(&state, &ds, &lookup, &dump_rows, &out)?;
    }
    println!("rho = {rho:.4} over {} cells, outputs in {}", rows.len(), out.display());
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalJob {
    manifest: String,
    checkpoint: String,
    top_fraction: f64,
    activity_seed: u64,
    n_pairs: usize,
    pairs_seed: u64,
    finetune_steps: usize,
    /// Overrides the pretraining learning rate for the fine-tune phase.
    finetune_learning_rate: Option<f64>,
    /// Overrides the pretraining batch size for the fine-tune phase.
    finetune_batch_size: Option<usize>,
    /// Every k-th distinct cell (sorted) is held out from fine-tuning.
    holdout_every: usize,
    out_dir: String,
}

impl Default for EvalJob {
    fn default() -> Self {
        EvalJob {
            manifest: "manifest.json".into(),
            checkpoint: "checkpoint.json".into(),
            top_fraction: 0.1,
            activity_seed: 7,
            n_pairs: 48,
            pairs_seed: 5,
            finetune_steps: 200,
            finetune_learning_rate: None,
            finetune_batch_size: None,
            holdout_every: 4,
            out_dir: default_out_dir(),
        }
    }
}

/// Cells are held out as whole units so no held-out profile is seen in
/// fine-tuning; the planted TF→target map itself is shared.
fn split_pairs(
    pairs: Vec<PerturbationExample>,
    holdout_every: usize,
) -> (Vec<PerturbationExample>, Vec<PerturbationExample>) {
    let cells: BTreeSet<String> = pairs.iter().map(|p| p.cell.clone()).collect();
    let held: HashSet<String> = cells
        .iter()
        .enumerate()
        .filter(|(i, _)| i % holdout_every == 0)
        .map(|(_, c)| c.clone())
        .collect();
    pairs.into_iter().partition(|p| !held.contains(&p.cell))
}

fn cmd_eval(config: &Path, seed: Option<u64>, out_flag: Option<&Path>) -> Result<()> {
    let mut job: EvalJob = load_job(config)?;
    if let Some(s) = seed {
        job.pairs_seed = s;
    }
    if job.holdout_every < 2 {
        return Err(Error::config("holdout_every must be at least 2"));
    }
    let out = resolve_out_dir(out_flag, &job.out_dir)?;
    let ds = load_dataset_at(&job.manifest)?;
    let mut state = load_checkpoint(Path::new(&job.checkpoint))?;
    if let Some(lr) = job.finetune_learning_rate {
        state.config.optimizer.learning_rate = lr;
        state.optimizer.config.learning_rate = lr;
    }
    if let Some(bs) = job.finetune_batch_size {
        if bs == 0 {
            return Err(Error::config("finetune_batch_size must be positive"));
        }
        state.config.batch_size = bs;
    }
    let lookup = derive_lookup(&ds, job.top_fraction, job.activity_seed)?.lookup;
    let pairs = gen_perturbation_pairs(&ds, job.n_pairs, job.pairs_seed)?;
    let (train_pairs, held_out) = split_pairs(pairs, job.holdout_every);
    if train_pairs.is_empty() || held_out.is_empty() {
        return Err(Error::data(format!(
            "split produced {} training and {} held-out pairs; need both non-empty",
            train_pairs.len(),
            held_out.len()
        )));
    }
    let log = finetune_perturbation(
        &mut state,
        &train_pairs,
        &lookup,
        &ds.expression,
        job.finetune_steps,
    )?;
    save_loss_log(&log, &out.join("finetune_loss.csv"))?;
    save_checkpoint(&state, &out.join("finetuned_checkpoint.json"))?;

    let mut records = Vec::new();
    let mut pcc_sum = 0.0;
    let mut auc_sum = 0.0;
    for p in &held_out {
        let predicted = predict_perturbation(&state, p, &lookup, &ds.expression)?;
        let pcc = pcc_delta(&predicted, &p.post, &p.control)?;
        let deltas: Vec<f64> = predicted
            .iter()
            .zip(&p.control)
            .map(|(a, c)| a - c)
            .collect();
        let labels: Vec<bool> = p
            .post
            .iter()
            .zip(&p.control)
            .map(|(t, c)| t - c > 0.5)
            .collect();
        let auc = roc_auc(&deltas, &labels)?;
        pcc_sum += pcc;
        auc_sum += auc;
        let group = format!("{}:{}", p.cell, ds.vocab.id(p.flagged[0]));
        records.push(MetricRecord {
            metric: "pcc_delta".into(),
            group: group.clone(),
            value: pcc,
            n: p.control.len(),
        });
        records.push(MetricRecord {
            metric: "roc_auc".into(),
            group,
            value: auc,
            n: p.control.len(),
        });
    }
    let n = held_out.len();
    records.push(MetricRecord {
        metric: "pcc_delta".into(),
        group: "held_out_mean".into(),
        value: pcc_sum / n as f64,
        n,
    });
    records.push(MetricRecord {
        metric: "roc_auc".into(),
        group: "held_out_mean".into(),
        value: auc_sum / n as f64,
        n,
    });
    save_metrics(&records, &out.join("metrics.csv"))?;
    println!(
        "held-out mean pcc_delta {:.4}, roc_auc {:.4} over {n} pairs",
        pcc_sum / n as f64,
        auc_sum / n as f64
    );
    Ok(())
}
