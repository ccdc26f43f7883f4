//! The work behind each CLI verb: dataset generation, staged training,
//! evaluation, activation export, and the gradient-check table.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use comet_core::evalsuite::{
    code_agreement, multimodal_fraction, retrieval_recall, zero_shot_transfer,
};
use comet_core::gradcheck;
use comet_core::mat::Mat;
use comet_core::model::Model;
use comet_core::quantizer::{activation_stats, ActivationStats};
use comet_core::rng;
use comet_core::synthgen::{generate_stage_dataset, PairSample, StageDataset};
use comet_core::trainer::{run_stage, VecSink};

use crate::checkpoint_io;
use crate::config::RunConfig;
use crate::dataset_io;
use crate::error::{CliError, Result};
use crate::metrics;
use crate::report::{self, EvalReport, MetricEntry};

/// Effective-activation threshold τ_act: a code counts as used by a
/// modality once it claims more than this fraction of that modality's
/// evaluation timesteps.
pub const TAU_ACT: f64 = 1e-3;

/// Recall cutoffs reported for retrieval; cutoffs beyond the gallery size
/// are skipped instead of failing the whole report.
const RECALL_KS: [usize; 2] = [1, 5];

/// Metric names `--metrics` accepts.
pub const METRIC_NAMES: [&str; 4] = ["agreement", "transfer", "retrieval", "activation"];

/// Seed for one stage's dataset, derived so stages never share streams.
fn stage_data_seed(cfg: &RunConfig, stage: usize) -> u64 {
    rng::derive(cfg.seed, &[rng::str_tag("data"), stage as u64])
}

// ---------------------------------------------------------------------------
// gen-data

/// Renders and writes every configured stage's dataset file under `out`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let renderers = cfg.renderers()?;
    let hash = cfg.data_hash();
    let mut paths = Vec::with_capacity(cfg.stages.len());
    for s in &cfg.stages {
        let spec = cfg.stage_spec(s);
        let ds = generate_stage_dataset(&spec, &renderers, stage_data_seed(cfg, s.stage))?;
        let path = dataset_io::dataset_path(out, s.stage);
        dataset_io::save(&ds, &hash, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

// ---------------------------------------------------------------------------
// train

/// Parses `--stages`: a single stage ("2"), an inclusive range ("1-3"), or
/// a comma list ("2,3"). The result must be contiguous and ascending so a
/// run always resumes from the checkpoint right before its first stage.
pub fn parse_stages(arg: &str, n_stages: usize) -> Result<Vec<usize>> {
    let usage = |why: String| CliError::Usage(format!("--stages {arg:?}: {why}"));
    let one = |tok: &str| -> Result<usize> {
        tok.trim()
            .parse::<usize>()
            .map_err(|_| usage(format!("{:?} is not a stage number", tok.trim())))
    };
    let list: Vec<usize> = if let Some((a, b)) = arg.split_once('-') {
        let (a, b) = (one(a)?, one(b)?);
        if a > b {
            return Err(usage(format!("range {a}-{b} runs backwards")));
        }
        (a..=b).collect()
    } else {
        arg.split(',')
            .filter(|t| !t.trim().is_empty())
            .map(one)
            .collect::<Result<_>>()?
    };
    if list.is_empty() {
        return Err(usage("no stages listed".into()));
    }
    if list[0] < 1 || *list.last().unwrap() > n_stages {
        return Err(usage(format!("config defines stages 1..={n_stages}")));
    }
    if list.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(usage("stages must be contiguous and ascending".into()));
    }
    Ok(list)
}

/// Where the trainer gets its stage data. The file-backed source is the
/// real one; tests substitute a recording wrapper to prove each stage's
/// training touches no dataset but its own.
pub trait DatasetSource {
    /// Confirms every requested stage can be served — called once, before
    /// any training starts.
    fn ensure_available(&mut self, stages: &[usize]) -> Result<()>;
    fn load_stage(&mut self, stage: usize) -> Result<StageDataset>;
}

/// Reads `stage{N}.data` files from one directory, rejecting files whose
/// embedded data hash disagrees with the active config.
pub struct FileSource<'a> {
    dir: &'a Path,
    expected_hash: String,
}

impl<'a> FileSource<'a> {
    pub fn new(dir: &'a Path, cfg: &RunConfig) -> Self {
        FileSource {
            dir,
            expected_hash: cfg.data_hash(),
        }
    }
}

impl DatasetSource for FileSource<'_> {
    fn ensure_available(&mut self, stages: &[usize]) -> Result<()> {
        for &s in stages {
            let path = dataset_io::dataset_path(self.dir, s);
            if !path.is_file() {
                return Err(CliError::io(
                    &path,
                    io::Error::new(io::ErrorKind::NotFound, "dataset missing; run gen-data first"),
                ));
            }
        }
        Ok(())
    }

    fn load_stage(&mut self, stage: usize) -> Result<StageDataset> {
        let path = dataset_io::dataset_path(self.dir, stage);
        let (ds, hash) = dataset_io::load(&path)?;
        if hash != self.expected_hash {
            return Err(CliError::format(
                &path,
                format!(
                    "generated under data config {hash}, current config is {}",
                    self.expected_hash
                ),
            ));
        }
        if ds.stage != stage {
            return Err(CliError::format(&path, format!("holds stage {} data", ds.stage)));
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub stages: Vec<usize>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: PathBuf,
    pub rows: usize,
}

/// Trains the requested stages in order, writing one checkpoint per stage
/// and a single metrics CSV for the whole invocation. Starting past stage
/// 1 resumes from the preceding stage's checkpoint.
pub fn cmd_train(cfg: &RunConfig, out: &Path, stages: Option<&str>) -> Result<TrainSummary> {
    let mut source = FileSource::new(out, cfg);
    train_with_source(cfg, out, stages, &mut source)
}

pub fn train_with_source(
    cfg: &RunConfig,
    out: &Path,
    stages: Option<&str>,
    source: &mut dyn DatasetSource,
) -> Result<TrainSummary> {
    let requested = match stages {
        Some(arg) => parse_stages(arg, cfg.stages.len())?,
        None => (1..=cfg.stages.len()).collect(),
    };
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    source.ensure_available(&requested)?;

    let hash = cfg.hash();
    let first = requested[0];
    let mut model = if first == 1 {
        Model::new(cfg.model_config(), &cfg.codebook_config(), cfg.seed)?
    } else {
        let prev = checkpoint_io::checkpoint_path(out, first - 1);
        let ckpt = checkpoint_io::load(&prev)?;
        if ckpt.config_hash != hash {
            return Err(CliError::Config(format!(
                "checkpoint {} was trained under config {}, current config is {hash}",
                prev.display(),
                ckpt.config_hash
            )));
        }
        ckpt.model
    };

    let hyper = cfg.hyper();
    let mut sink = VecSink::default();
    let mut checkpoints = Vec::with_capacity(requested.len());
    for &s in &requested {
        let section = &cfg.stages[s - 1];
        let data = source.load_stage(s)?;
        let plan = cfg.stage_plan(section);
        run_stage(&mut model, &plan, &data, &hyper, &mut sink)?;
        let path = checkpoint_io::checkpoint_path(out, s);
        checkpoint_io::save(&model, s, &hash, &path)?;
        checkpoints.push(path);
    }
    let metrics_path = metrics::metrics_path(out);
    metrics::write(&metrics_path, &sink.rows)?;
    Ok(TrainSummary {
        stages: requested,
        checkpoints,
        metrics_path,
        rows: sink.rows.len(),
    })
}

// ---------------------------------------------------------------------------
// eval / stats

/// Validates a comma list of metric names. An absent flag means all of
/// them; an explicitly empty list stays empty (→ empty report).
pub fn parse_metrics(arg: Option<&str>) -> Result<Vec<String>> {
    let Some(list) = arg else {
        return Ok(METRIC_NAMES.iter().map(|s| s.to_string()).collect());
    };
    let mut out = Vec::new();
    for tok in list.split(',') {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        if !METRIC_NAMES.contains(&tok) {
            return Err(CliError::Usage(format!(
                "unknown metric {tok:?}; valid names: {}",
                METRIC_NAMES.join(", ")
            )));
        }
        if !out.iter().any(|x| x == tok) {
            out.push(tok.to_string());
        }
    }
    Ok(out)
}

/// Loads a checkpoint and insists it belongs to the active config.
fn load_matching_checkpoint(
    cfg: &RunConfig,
    out: &Path,
    flag: Option<&Path>,
) -> Result<(checkpoint_io::LoadedCheckpoint, PathBuf)> {
    let path = flag
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint_io::checkpoint_path(out, cfg.stages.len()));
    let ckpt = checkpoint_io::load(&path)?;
    if ckpt.config_hash != cfg.hash() {
        return Err(CliError::Config(format!(
            "checkpoint {} was trained under config {}, current config is {}",
            path.display(),
            ckpt.config_hash,
            cfg.hash()
        )));
    }
    Ok((ckpt, path))
}

/// Evaluation datasets: every stage the checkpoint has trained through.
fn eval_datasets(cfg: &RunConfig, out: &Path, through: usize) -> Result<Vec<StageDataset>> {
    let mut source = FileSource::new(out, cfg);
    (1..=through.min(cfg.stages.len()))
        .map(|s| source.load_stage(s))
        .collect()
}

fn pair_label(ds: &StageDataset) -> String {
    format!("{}|{}", ds.mediator, ds.partner)
}

fn embed_rows(rows: Vec<Vec<f64>>) -> Result<Mat> {
    if rows.is_empty() {
        return Err(CliError::Config("no evaluation rows".into()));
    }
    let cols = rows[0].len();
    Ok(Mat::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Quantized code embeddings, one row per timestep of every pair, plus
/// the matching script labels.
fn timestep_embeddings(
    model: &Model,
    modality: &str,
    pairs: &[PairSample],
    pick: impl Fn(&PairSample) -> &Mat,
) -> Result<(Mat, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for p in pairs {
        let q = model.quantize_features(modality, pick(p))?;
        for r in 0..q.e_seq.rows() {
            rows.push(q.e_seq.row(r).to_vec());
            labels.push(p.script[r]);
        }
    }
    Ok((embed_rows(rows)?, labels))
}

/// One embedding row per pair: the unweighted mean of its quantized code
/// vectors.
fn sequence_embeddings(
    model: &Model,
    modality: &str,
    pairs: &[PairSample],
    pick: impl Fn(&PairSample) -> &Mat,
) -> Result<Mat> {
    let mut rows = Vec::new();
    for p in pairs {
        let q = model.quantize_features(modality, pick(p))?;
        let n = q.e_seq.rows().max(1) as f64;
        let mut mean = vec![0.0; q.e_seq.cols()];
        for r in 0..q.e_seq.rows() {
            for (m, v) in mean.iter_mut().zip(q.e_seq.row(r)) {
                *m += v / n;
            }
        }
        rows.push(mean);
    }
    embed_rows(rows)
}

/// Concatenated quantized indices of both modalities of every stage's
/// eval split, keyed by modality in first-appearance order. The mediator
/// accumulates across all stages.
fn quantized_runs(model: &Model, sets: &[StageDataset]) -> Result<Vec<(String, Vec<usize>)>> {
    let mut runs: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |m: &str, idx: Vec<usize>| {
        match runs.iter_mut().find(|(name, _)| name == m) {
            Some((_, all)) => all.extend(idx),
            None => runs.push((m.to_string(), idx)),
        }
    };
    for ds in sets {
        for p in &ds.eval {
            push(&ds.mediator, model.quantize_features(&ds.mediator, &p.x_a)?.indices);
            push(&ds.partner, model.quantize_features(&ds.partner, &p.x_b)?.indices);
        }
    }
    Ok(runs)
}

/// Activation statistics over every stage's eval split.
pub fn activation_over(model: &Model, sets: &[StageDataset]) -> Result<ActivationStats> {
    let runs = quantized_runs(model, sets)?;
    let refs: Vec<(&str, &[usize])> = runs
        .iter()
        .map(|(m, idx)| (m.as_str(), idx.as_slice()))
        .collect();
    Ok(activation_stats(model.codebook.len(), &refs, TAU_ACT)?)
}

/// Cross-modal agreement of one stage's eval pairs.
pub fn stage_agreement(model: &Model, ds: &StageDataset) -> Result<f64> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for p in &ds.eval {
        a.extend(model.quantize_features(&ds.mediator, &p.x_a)?.indices);
        b.extend(model.quantize_features(&ds.partner, &p.x_b)?.indices);
    }
    Ok(code_agreement(&a, &b)?)
}

/// Zero-shot transfer for one stage: probe trained on the mediator's
/// train split, scored on the partner's eval split.
pub fn stage_transfer(model: &Model, ds: &StageDataset, n_classes: usize) -> Result<f64> {
    let (tr_e, tr_l) = timestep_embeddings(model, &ds.mediator, &ds.train, |p| &p.x_a)?;
    let (ev_e, ev_l) = timestep_embeddings(model, &ds.partner, &ds.eval, |p| &p.x_b)?;
    Ok(zero_shot_transfer(&tr_e, &tr_l, &ev_e, &ev_l, n_classes)?)
}

pub struct EvalOutputs {
    pub report: EvalReport,
    pub report_path: PathBuf,
    pub activation_path: Option<PathBuf>,
}

/// Computes the requested metrics against a trained checkpoint and writes
/// the JSON report (plus activation.csv when activation is requested).
pub fn cmd_eval(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    metric_arg: Option<&str>,
) -> Result<EvalOutputs> {
    let names = parse_metrics(metric_arg)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let report_path = report::report_path(out);
    if names.is_empty() {
        let report = EvalReport {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            checkpoint: String::new(),
            metrics: Vec::new(),
        };
        report::write_report(&report_path, &report)?;
        return Ok(EvalOutputs {
            report,
            report_path,
            activation_path: None,
        });
    }

    let (ckpt, ckpt_path) = load_matching_checkpoint(cfg, out, checkpoint)?;
    let sets = eval_datasets(cfg, out, ckpt.stage)?;
    let model = &ckpt.model;
    let n_classes = cfg.c_total();

    let mut entries = Vec::new();
    let mut activation_path = None;
    for name in &names {
        match name.as_str() {
            "agreement" => {
                for ds in &sets {
                    let v = stage_agreement(model, ds)?;
                    entries.push(MetricEntry::new(
                        "agreement",
                        Some(ds.stage),
                        Some(pair_label(ds)),
                        v,
                    ));
                }
            }
            "transfer" => {
                for ds in &sets {
                    let v = stage_transfer(model, ds, n_classes)?;
                    entries.push(MetricEntry::new(
                        "transfer",
                        Some(ds.stage),
                        Some(pair_label(ds)),
                        v,
                    ));
                }
            }
            "retrieval" => {
                for ds in &sets {
                    let q = sequence_embeddings(model, &ds.mediator, &ds.eval, |p| &p.x_a)?;
                    let g = sequence_embeddings(model, &ds.partner, &ds.eval, |p| &p.x_b)?;
                    for k in RECALL_KS {
                        if k > g.rows() {
                            continue;
                        }
                        let v = retrieval_recall(&q, &g, k)?;
                        entries.push(MetricEntry::new(
                            &format!("retrieval.recall@{k}"),
                            Some(ds.stage),
                            Some(pair_label(ds)),
                            v,
                        ));
                    }
                }
            }
            "activation" => {
                let stats = activation_over(model, &sets)?;
                entries.push(MetricEntry::new(
                    "activation.multimodal_fraction",
                    None,
                    None,
                    multimodal_fraction(&stats),
                ));
                let path = report::activation_path(out);
                report::write_activation(&path, &stats)?;
                activation_path = Some(path);
            }
            other => unreachable!("parse_metrics admitted {other}"),
        }
    }

    let report = EvalReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        checkpoint: ckpt_path.display().to_string(),
        metrics: entries,
    };
    report::write_report(&report_path, &report)?;
    Ok(EvalOutputs {
        report,
        report_path,
        activation_path,
    })
}

/// Writes just the activation CSV for a trained checkpoint.
pub fn cmd_stats(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
) -> Result<(PathBuf, ActivationStats)> {
    let (ckpt, _) = load_matching_checkpoint(cfg, out, checkpoint)?;
    let sets = eval_datasets(cfg, out, ckpt.stage)?;
    let stats = activation_over(&ckpt.model, &sets)?;
    let path = report::activation_path(out);
    report::write_activation(&path, &stats)?;
    Ok((path, stats))
}

// ---------------------------------------------------------------------------
// grad-check

pub struct GradCheckReport {
    pub lines: Vec<String>,
    pub failures: usize,
}

/// Runs every registered analytic-vs-finite-difference comparison and
/// formats one line per check. Any failure surfaces as an error so the
/// process exits nonzero.
pub fn cmd_grad_check(seed: u64, filter: Option<&str>) -> Result<GradCheckReport> {
    let outcomes = gradcheck::run_all(seed, filter);
    if outcomes.is_empty() {
        return Err(CliError::Usage(format!(
            "--filter {:?} matches no registered check",
            filter.unwrap_or("")
        )));
    }
    let mut lines = Vec::with_capacity(outcomes.len());
    let mut failures = 0;
    for o in &outcomes {
        if !o.pass {
            failures += 1;
        }
        lines.push(format!(
            "{:<24} worst {:>10.3e} over {} instances  {}",
            o.name,
            o.worst,
            o.instances,
            if o.pass { "PASS" } else { "FAIL" }
        ));
    }
    Ok(GradCheckReport { lines, failures })
}
