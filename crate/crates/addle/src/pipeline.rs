//! Experiment pipeline: data generation, training, fine-tuning, greedy
//! selection, evaluation, latent analysis, and the artifact manifest.
//!
//! Every stage is a pure function of (config, artifacts on disk), so any
//! stage can be re-run in isolation and reproduces exactly what the full
//! pipeline would have produced. Nothing here consults the clock or any
//! RNG outside the derived seed streams.
//!
//! Artifacts, relative to the output directory:
//!
//! ```text
//! meta.toml                         dataset dimensions + generator settings
//! train.csv val_stop.csv
//! val_gold.csv test.csv             the four splits
//! trainlog_<mode>.tsv               epoch, objective, validation rank index
//! checkpoint_<mode>.ckpt            (jlsl: checkpoint_jlsl_r<r>.ckpt)
//! checkpoint_addle_finetuned.ckpt   after per-rater fine-tuning
//! finetune_report.json
//! selection_<mode>.json             greedy rater sets
//! report_<variant>.json             evaluation reports
//! roc_<variant>_c<k>.tsv            ROC point lists per cutoff
//! params.json                       parameter-count audit per mode
//! analysis/*.tsv, analysis.json     latent-space analysis
//! manifest.json                     every artifact with its sha256
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{code_norms, component_sweep, default_sweep_grid, interpolate, pca,
    performance_curve};
use crate::checkpoint::{assemble, from_fitted, Checkpoint, Provenance};
use crate::config::ExperimentConfig;
use crate::data::{format_float, Dataset, DatasetMeta};
use crate::eval::{evaluate_model, greedy_select, EvaluationReport, Predictor, VirtualRaterSet};
use crate::model::{analytic_parameter_count, FittedModel, Mode, ModelKind};
use crate::rng::{stream, Stage};
use crate::sim::build_dataset;
use crate::train::{finetune_raters, train_joint, ModelLog, RaterFinetune, TrainOutcome};
use crate::{Error, Result};

const SPLIT_NAMES: [&str; 4] = ["train", "val_stop", "val_gold", "test"];

/// Artifact paths inside one output directory.
pub struct Paths<'a> {
    out: &'a Path,
}

impl<'a> Paths<'a> {
    pub fn new(out: &'a Path) -> Self {
        Paths { out }
    }

    pub fn meta(&self) -> PathBuf {
        self.out.join("meta.toml")
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.out.join(format!("{}.csv", name))
    }

    pub fn trainlog(&self, mode: Mode) -> PathBuf {
        self.out.join(format!("trainlog_{}.tsv", mode.as_str()))
    }

    pub fn checkpoint(&self, mode: Mode) -> PathBuf {
        self.out.join(format!("checkpoint_{}.ckpt", mode.as_str()))
    }

    pub fn jlsl_member(&self, rater: usize) -> PathBuf {
        self.out.join(format!("checkpoint_jlsl_r{}.ckpt", rater))
    }

    pub fn finetuned(&self) -> PathBuf {
        self.out.join("checkpoint_addle_finetuned.ckpt")
    }

    pub fn finetune_report(&self) -> PathBuf {
        self.out.join("finetune_report.json")
    }

    pub fn selection(&self, mode: Mode) -> PathBuf {
        self.out.join(format!("selection_{}.json", mode.as_str()))
    }

    pub fn report(&self, variant: &str) -> PathBuf {
        self.out.join(format!("report_{}.json", variant))
    }

    pub fn roc(&self, variant: &str, cutoff: usize) -> PathBuf {
        self.out.join(format!("roc_{}_c{}.tsv", variant, cutoff))
    }

    pub fn params_audit(&self) -> PathBuf {
        self.out.join("params.json")
    }

    pub fn analysis_dir(&self) -> PathBuf {
        self.out.join("analysis")
    }

    pub fn manifest(&self) -> PathBuf {
        self.out.join("manifest.json")
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Checkpoint(format!("json encode: {}", e)))?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {}", path.display(), e)))
}

fn write_tsv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    if !header.is_empty() {
        text.push_str(&header.join("\t"));
        text.push('\n');
    }
    for row in rows {
        text.push_str(&row.join("\t"));
        text.push('\n');
    }
    write_text(path, &text)
}

fn read_split(out: &Path, name: &str) -> Result<Dataset> {
    let paths = Paths::new(out);
    let meta = DatasetMeta::read(&paths.meta())?;
    Dataset::read_csv(&paths.split(name), meta.num_classes, meta.num_raters)
}

// ── stages ───────────────────────────────────────────────────────────

/// Generates the dataset and writes the metadata plus the four splits.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let paths = Paths::new(out);
    let ds = build_dataset(&cfg.simulator, cfg.master_seed)?;
    let splits = ds.split_by_group(
        &cfg.splits.fractions(),
        &mut stream(cfg.master_seed, Stage::Split, 0),
    )?;
    DatasetMeta {
        num_features: cfg.simulator.num_features,
        num_classes: cfg.simulator.num_classes,
        num_raters: cfg.simulator.num_raters,
        master_seed: cfg.master_seed,
        simulator: cfg.simulator.clone(),
    }
    .write(&paths.meta())?;
    for (name, split) in SPLIT_NAMES.iter().zip(&splits) {
        if split.is_empty() {
            return Err(Error::Dataset(format!(
                "split '{}' came out empty; adjust fractions or sample count",
                name
            )));
        }
        split.write_csv(&paths.split(name))?;
    }
    Ok(())
}

fn trainlog_rows(logs: &[ModelLog]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for log in logs {
        for rec in &log.records {
            rows.push(vec![
                log.name.clone(),
                rec.epoch.to_string(),
                format_float(rec.train_objective),
                rec.val_metric.map(format_float).unwrap_or_default(),
            ]);
        }
    }
    rows
}

/// Trains one mode and writes its checkpoint(s) and training log.
pub fn train_stage(cfg: &ExperimentConfig, out: &Path, mode: Mode) -> Result<()> {
    let paths = Paths::new(out);
    let train = read_split(out, "train")?;
    let val_stop = read_split(out, "val_stop")?;
    let outcome: TrainOutcome = train_joint(
        &train,
        Some(&val_stop),
        &cfg.backbone_config(),
        &cfg.train_config(mode),
        cfg.latent.sigma2,
    )?;
    let last_epoch = outcome
        .logs
        .iter()
        .flat_map(|l| l.records.last())
        .map(|r| r.epoch)
        .max()
        .unwrap_or(0);
    let provenance = Provenance {
        config_hash: cfg.content_hash(),
        master_seed: cfg.master_seed,
        epochs_trained: last_epoch,
        best_epoch: outcome.logs.first().and_then(|l| l.best_epoch),
    };
    for (member, ckpt) in from_fitted(&outcome.model, &provenance) {
        let path = match member {
            Some(r) => paths.jlsl_member(r),
            None => paths.checkpoint(mode),
        };
        ckpt.save(&path)?;
    }
    write_tsv(
        &paths.trainlog(mode),
        &["model", "epoch", "objective", "val_jt"],
        &trainlog_rows(&outcome.logs),
    )
}

fn load_model(cfg: &ExperimentConfig, out: &Path, mode: Mode) -> Result<FittedModel> {
    let paths = Paths::new(out);
    match mode {
        Mode::Jlsl => {
            let ckpts = (0..cfg.simulator.num_raters)
                .map(|r| Checkpoint::load(&paths.jlsl_member(r)))
                .collect::<Result<Vec<_>>>()?;
            assemble(ckpts)
        }
        Mode::Addle => {
            let finetuned = paths.finetuned();
            let path = if finetuned.exists() {
                finetuned
            } else {
                paths.checkpoint(mode)
            };
            assemble(vec![Checkpoint::load(&path)?])
        }
        _ => assemble(vec![Checkpoint::load(&paths.checkpoint(mode))?]),
    }
}

/// Fine-tunes each rater's code with the shared weights frozen; returns
/// the per-rater records (callers may surface skipped raters).
pub fn finetune_stage(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RaterFinetune>> {
    let paths = Paths::new(out);
    let base = Checkpoint::load(&paths.checkpoint(Mode::Addle))?;
    let model = assemble(vec![base.clone()])?;
    let (params, codebook) = match &model.kind {
        ModelKind::Addle { params, codebook } => (params, codebook),
        _ => return Err(Error::Checkpoint("finetune: not a latent-code checkpoint".into())),
    };
    let train = read_split(out, "train")?;
    let outcome = finetune_raters(params, &model.cfg, codebook, &train, &cfg.finetune_config())?;
    Checkpoint {
        cfg: model.cfg.clone(),
        kind: crate::checkpoint::CheckpointKind::Addle {
            codebook: outcome.codebook,
        },
        params: params.clone(),
        provenance: base.provenance.clone(),
    }
    .save(&paths.finetuned())?;
    write_json(&paths.finetune_report(), &outcome.records)?;
    Ok(outcome.records)
}

/// Runs greedy rater selection for one mode on the gold validation split.
pub fn greedy_stage(cfg: &ExperimentConfig, out: &Path, mode: Mode) -> Result<VirtualRaterSet> {
    if mode == Mode::Baseline {
        return Err(Error::InvalidArgument(
            "greedy selection needs a multi-rater mode".into(),
        ));
    }
    let paths = Paths::new(out);
    let model = load_model(cfg, out, mode)?;
    let val_gold = read_split(out, "val_gold")?;
    let set = greedy_select(&model, &val_gold, cfg.eval.greedy_metric, cfg.eval.fpr_max)?;
    write_json(&paths.selection(mode), &set)?;
    Ok(set)
}

fn write_report(paths: &Paths, variant: &str, report: &EvaluationReport) -> Result<()> {
    write_json(&paths.report(variant), report)?;
    for cutoff in &report.cutoffs {
        let rows: Vec<Vec<String>> = cutoff
            .roc
            .iter()
            .map(|&(f, t)| vec![format_float(f), format_float(t)])
            .collect();
        write_tsv(&paths.roc(variant, cutoff.cutoff), &[], &rows)?;
    }
    Ok(())
}

/// Parameter-count audit line for one mode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamAudit {
    pub mode: String,
    pub actual: usize,
    pub analytic: usize,
}

/// Evaluates every enabled mode on the test split: the mean rater, and
/// the greedy rater where a selection exists.
pub fn eval_stage(cfg: &ExperimentConfig, out: &Path, modes: &[Mode]) -> Result<Vec<EvaluationReport>> {
    let paths = Paths::new(out);
    let test = read_split(out, "test")?;
    let fpr_max = cfg.eval.fpr_max;
    let mut reports = Vec::new();
    let mut audits = Vec::new();
    for &mode in modes {
        let model = load_model(cfg, out, mode)?;
        audits.push(ParamAudit {
            mode: mode.as_str().to_string(),
            actual: model.parameter_count(),
            analytic: analytic_parameter_count(
                &cfg.backbone_config(),
                mode,
                cfg.simulator.num_raters,
            ),
        });
        match mode {
            Mode::Baseline => {
                let report = evaluate_model(&model, Predictor::Mean, &test, fpr_max, "baseline")?;
                write_report(&paths, "baseline", &report)?;
                reports.push(report);
            }
            _ => {
                let mean_name = format!("{}-mean", mode.as_str());
                let report =
                    evaluate_model(&model, Predictor::Mean, &test, fpr_max, &mean_name)?;
                write_report(&paths, &mean_name, &report)?;
                reports.push(report);

                let selection: VirtualRaterSet = read_json(&paths.selection(mode))?;
                let greedy_name = format!("{}-greedy", mode.as_str());
                let report = evaluate_model(
                    &model,
                    Predictor::Greedy(&selection),
                    &test,
                    fpr_max,
                    &greedy_name,
                )?;
                write_report(&paths, &greedy_name, &report)?;
                reports.push(report);
            }
        }
    }
    write_json(&paths.params_audit(), &audits)?;
    Ok(reports)
}

/// Summary emitted next to the latent-analysis tables.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub worst_rater: usize,
    pub best_rater: usize,
    pub worst_jt: f64,
    pub best_jt: f64,
    pub per_rater_jt: Vec<f64>,
    pub explained_variance_ratios: Vec<f64>,
    pub cumulative_ratios: Vec<f64>,
    pub norm_min: f64,
    pub norm_max: f64,
}

/// Latent-space analysis of the fine-tuned latent model on the test set.
pub fn analyze_stage(cfg: &ExperimentConfig, out: &Path) -> Result<AnalysisSummary> {
    let paths = Paths::new(out);
    let dir = paths.analysis_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let model = load_model(cfg, out, Mode::Addle)?;
    let codebook = model
        .codebook()
        .ok_or_else(|| Error::Checkpoint("analysis: not a latent-code checkpoint".into()))?
        .clone();
    let test = read_split(out, "test")?;

    // per-rater performance; worst and best anchor the interpolation
    let rater_codes: Vec<Vec<f64>> = (0..codebook.num_raters())
        .map(|r| codebook.code(r).to_vec())
        .collect();
    let per_rater = performance_curve(&model, &rater_codes, &test)?;
    let per_rater_jt: Vec<f64> = per_rater.iter().map(|&(_, jt)| jt).collect();
    let worst = per_rater
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|&(i, _)| i)
        .unwrap();
    let best = per_rater
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|&(i, _)| i)
        .unwrap();

    let points = cfg.eval.sweep_points;
    let alphas: Vec<f64> = (0..points)
        .map(|i| i as f64 / (points - 1) as f64)
        .collect();
    let interp_codes: Vec<Vec<f64>> = alphas
        .iter()
        .map(|&a| interpolate(codebook.code(worst), codebook.code(best), a))
        .collect::<Result<_>>()?;
    let interp_curve = performance_curve(&model, &interp_codes, &test)?;
    write_tsv(
        &dir.join("interpolation.tsv"),
        &["alpha", "jt"],
        &alphas
            .iter()
            .zip(&interp_curve)
            .map(|(&a, &(_, jt))| vec![format_float(a), format_float(jt)])
            .collect::<Vec<_>>(),
    )?;

    let basis = pca(&codebook.codes)?;
    write_tsv(
        &dir.join("spectrum.tsv"),
        &["component", "eigenvalue", "ratio"],
        &basis
            .eigenvalues
            .iter()
            .zip(&basis.ratios)
            .enumerate()
            .map(|(c, (&l, &r))| vec![c.to_string(), format_float(l), format_float(r)])
            .collect::<Vec<_>>(),
    )?;
    write_tsv(
        &dir.join("scatter.tsv"),
        &["rater", "pc0", "pc1"],
        &(0..codebook.num_raters())
            .map(|r| {
                let z = codebook.code(r);
                let p0 = basis.project(z, 0);
                let p1 = if basis.components.len() > 1 {
                    basis.project(z, 1)
                } else {
                    0.0
                };
                vec![
                    codebook.rater_ids[r].clone(),
                    format_float(p0),
                    format_float(p1),
                ]
            })
            .collect::<Vec<_>>(),
    )?;

    let grid = default_sweep_grid(&basis, 0, &codebook.codes, points)?;
    let sweep = component_sweep(&model, &basis, 0, &grid, &test)?;
    write_tsv(
        &dir.join("sweep_pc1.tsv"),
        &["lambda", "jt"],
        &sweep
            .iter()
            .map(|&(l, jt)| vec![format_float(l), format_float(jt)])
            .collect::<Vec<_>>(),
    )?;

    let norms = code_norms(&codebook);
    write_tsv(
        &dir.join("norms.tsv"),
        &["rater", "norm"],
        &norms
            .iter()
            .map(|(id, n)| vec![id.clone(), format_float(*n)])
            .collect::<Vec<_>>(),
    )?;

    let mut cumulative = Vec::with_capacity(basis.ratios.len());
    let mut acc = 0.0;
    for &r in &basis.ratios {
        acc += r;
        cumulative.push(acc);
    }
    let summary = AnalysisSummary {
        worst_rater: worst,
        best_rater: best,
        worst_jt: per_rater_jt[worst],
        best_jt: per_rater_jt[best],
        per_rater_jt,
        explained_variance_ratios: basis.ratios.clone(),
        cumulative_ratios: cumulative,
        norm_min: norms.iter().map(|&(_, n)| n).fold(f64::MAX, f64::min),
        norm_max: norms.iter().map(|&(_, n)| n).fold(f64::MIN, f64::max),
    };
    write_json(&dir.join("analysis.json"), &summary)?;
    Ok(summary)
}

/// Artifact manifest: path, size, sha256 of every file under `out`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, ManifestEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub bytes: u64,
    pub sha256: String,
}

fn collect_files(root: &Path, dir: &Path, into: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, into)?;
        } else {
            into.push(path);
        }
    }
    Ok(())
}

/// Hashes every artifact in `out` (except the manifest itself).
pub fn write_manifest(out: &Path) -> Result<Manifest> {
    let manifest_path = Paths::new(out).manifest();
    let mut files = Vec::new();
    collect_files(out, out, &mut files)?;
    let mut artifacts = BTreeMap::new();
    for path in files {
        if path == manifest_path {
            continue;
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let digest = Sha256::digest(&bytes);
        let rel = path
            .strip_prefix(out)
            .expect("file under out dir")
            .to_string_lossy()
            .replace('\\', "/");
        artifacts.insert(
            rel,
            ManifestEntry {
                bytes: bytes.len() as u64,
                sha256: digest.iter().map(|b| format!("{:02x}", b)).collect(),
            },
        );
    }
    let manifest = Manifest { artifacts };
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

/// The full pipeline. On failure a `FAILED.txt` marker is left in the
/// output directory naming the stage.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let run = || -> Result<()> {
        stage(out, "gen-data", || gen_data(cfg, out))?;
        for &mode in &cfg.train.modes {
            stage(out, &format!("train {}", mode.as_str()), || {
                train_stage(cfg, out, mode)
            })?;
        }
        if cfg.finetune.enabled && cfg.train.modes.contains(&Mode::Addle) {
            stage(out, "finetune-raters", || finetune_stage(cfg, out).map(|_| ()))?;
        }
        for &mode in &cfg.train.modes {
            if mode != Mode::Baseline {
                stage(out, &format!("greedy-select {}", mode.as_str()), || {
                    greedy_stage(cfg, out, mode).map(|_| ())
                })?;
            }
        }
        stage(out, "eval", || eval_stage(cfg, out, &cfg.train.modes).map(|_| ()))?;
        if cfg.train.modes.contains(&Mode::Addle) {
            stage(out, "analyze-latent", || analyze_stage(cfg, out).map(|_| ()))?;
        }
        Ok(())
    };
    run()?;
    write_manifest(out)
}

fn stage<T>(out: &Path, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| {
        let marker = out.join("FAILED.txt");
        let _ = std::fs::write(&marker, format!("stage: {}\nerror: {}\n", name, e));
        e
    })
}
