//! Joint MAP training of backbone and codes, plus per-rater fine-tuning.
//!
//! The objective is the label-likelihood sum over all samples (each scored
//! with its rater's code) plus the Gaussian prior on the codes. Minibatch
//! SGD optimises a per-batch estimate `data/B + prior/N`; the exact sum is
//! recomputed at every epoch end for the log. Early stopping watches the
//! rank index of held-out predictions against the raters' own labels —
//! gold labels are never touched during training.
//!
//! One run is strictly single-threaded and seed-deterministic: parameter
//! init, code init, and shuffling each draw from their own derived stream,
//! and every reduction runs in a fixed order.
//!
//! Prior subtlety: the optimised prior covers only raters that appear in
//! the training set, so the codes of unseen raters stay exactly at their
//! Gaussian initialization (the reported objective still includes them).

use serde::{Deserialize, Serialize};

use crate::backbone::{forward_graph, init_params, stage_params, BackboneConfig, ModelParams};
use crate::data::Dataset;
use crate::eval::jt_index;
use crate::latent::{init_codes, prior_penalty, prior_penalty_graph, LatentCodebook};
use crate::model::{FittedModel, Mode, ModelKind};
use crate::ordinal::{encode_batch, fh_loss, score};
use crate::rng::{stream, Stage};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Optimiser choice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Momentum,
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub seed: u64,
    pub mode: Mode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "train.momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_objective: f64,
    pub val_metric: Option<f64>,
}

/// Log of one trained model (per-rater models log separately).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelLog {
    pub name: String,
    pub best_epoch: Option<usize>,
    pub records: Vec<EpochRecord>,
}

/// Result of `train_joint`.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: FittedModel,
    pub logs: Vec<ModelLog>,
}

/// How samples are wired through the network during one fit.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Plain,
    Latent { sigma2: f64 },
    Heads,
}

/// Architecture actually instantiated for a mode, derived from the
/// latent-mode base config.
pub fn mode_config(base: &BackboneConfig, mode: Mode, num_raters: usize) -> BackboneConfig {
    let mut cfg = base.clone();
    match mode {
        Mode::Addle => {
            cfg.heads = 1;
        }
        Mode::Baseline | Mode::Jlsl => {
            cfg.latent_dim = 0;
            cfg.injections.clear();
            cfg.heads = 1;
        }
        Mode::MultiHead => {
            cfg.latent_dim = 0;
            cfg.injections.clear();
            cfg.heads = num_raters;
        }
    }
    cfg
}

/// The exact joint objective: Σᵢ loss(f(xᵢ, z_{rᵢ}), yᵢ) + Σ_r ||z_r||²/σ².
pub fn objective(
    params: &ModelParams,
    cfg: &BackboneConfig,
    codebook: &LatentCodebook,
    ds: &Dataset,
) -> Result<f64> {
    for s in &ds.samples {
        if s.rater >= codebook.num_raters() {
            return Err(Error::Dataset(format!(
                "sample {}: rater {} unknown to the codebook ({} raters)",
                s.sample_id,
                s.rater,
                codebook.num_raters()
            )));
        }
    }
    let data = data_loss_sum(params, cfg, Shape::Latent { sigma2: codebook.sigma2 }, Some(codebook), ds)?;
    Ok(data + prior_penalty(codebook))
}

/// Data term only: the per-sample loss summed in dataset order.
fn data_loss_sum(
    params: &ModelParams,
    cfg: &BackboneConfig,
    shape: Shape,
    codebook: Option<&LatentCodebook>,
    ds: &Dataset,
) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let logits = forward_subset(params, cfg, shape, codebook, ds, &idx)?;
    let mut acc = 0.0;
    for (row, &i) in idx.iter().enumerate() {
        acc += fh_loss(logits.row(row), ds.samples[i].label, ds.num_classes)?;
    }
    Ok(acc)
}

/// Forward pass of a sample subset under the given shape.
fn forward_subset(
    params: &ModelParams,
    cfg: &BackboneConfig,
    shape: Shape,
    codebook: Option<&LatentCodebook>,
    ds: &Dataset,
    idx: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let gp = stage_params(&mut tape, params);
    let x = tape.input(ds.features_tensor(idx));
    let raters = ds.raters(idx);
    let out = match shape {
        Shape::Plain => forward_graph(&mut tape, &gp, cfg, x, None, None)?,
        Shape::Heads => forward_graph(&mut tape, &gp, cfg, x, None, Some(&raters))?,
        Shape::Latent { .. } => {
            let cb = codebook.expect("latent shape needs a codebook");
            let z_all = tape.input(cb.codes.clone());
            let z_rows = tape.gather_rows(z_all, &raters)?;
            forward_graph(&mut tape, &gp, cfg, x, Some(z_rows), None)?
        }
    };
    Ok(tape.value(out).clone())
}

/// Held-out rank index of per-sample predictions against the raters' own
/// labels; `None` when the metric is undefined on this set.
fn validation_metric(
    params: &ModelParams,
    cfg: &BackboneConfig,
    shape: Shape,
    codebook: Option<&LatentCodebook>,
    val: &Dataset,
) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let idx: Vec<usize> = (0..val.len()).collect();
    let logits = forward_subset(params, cfg, shape, codebook, val, &idx)?;
    let scores: Vec<f64> = (0..val.len()).map(|i| score(logits.row(i))).collect();
    let labels = val.labels(&idx);
    Ok(jt_index(&scores, &labels).ok())
}

struct FitResult {
    params: ModelParams,
    codebook: Option<LatentCodebook>,
    log: ModelLog,
}

/// Minibatch gradient descent of one model, seed-deterministic.
fn fit_single(
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &BackboneConfig,
    tcfg: &TrainConfig,
    shape: Shape,
    replica: u64,
    name: &str,
) -> Result<FitResult> {
    cfg.validate()?;
    tcfg.validate()?;
    let mut params = init_params(cfg, &mut stream(tcfg.seed, Stage::ParamInit, replica))?;
    let mut codebook = match shape {
        Shape::Latent { sigma2 } => Some(init_codes(
            train.num_raters,
            cfg.latent_dim,
            sigma2,
            &mut stream(tcfg.seed, Stage::CodeInit, replica),
        )?),
        _ => None,
    };

    // raters that actually occur here; the prior is optimised over these
    let mut present: Vec<usize> = train.samples.iter().map(|s| s.rater).collect();
    present.sort_unstable();
    present.dedup();

    let mut velocity: Vec<Tensor> = params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape().to_vec()))
        .collect();
    let mut code_velocity = codebook
        .as_ref()
        .map(|cb| Tensor::zeros(cb.codes.shape().to_vec()));

    let full_objective = |params: &ModelParams, codebook: &Option<LatentCodebook>| -> Result<f64> {
        let data = data_loss_sum(params, cfg, shape, codebook.as_ref(), train)?;
        Ok(match codebook {
            Some(cb) => data + prior_penalty(cb),
            None => data,
        })
    };

    let mut records = Vec::with_capacity(tcfg.epochs + 1);
    records.push(EpochRecord {
        epoch: 0,
        train_objective: full_objective(&params, &codebook)?,
        val_metric: match val {
            Some(v) => validation_metric(&params, cfg, shape, codebook.as_ref(), v)?,
            None => None,
        },
    });

    let mut shuffle_rng = stream(tcfg.seed, Stage::Shuffle, replica);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let n_total = train.len().max(1) as f64;
    let mut best: Option<(f64, ModelParams, Option<LatentCodebook>, usize)> = None;
    let mut stale = 0usize;

    for epoch in 1..=tcfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(tcfg.batch_size) {
            let mut tape = Tape::new();
            let gp = stage_params(&mut tape, &params);
            let mut param_ids = Vec::new();
            if let Some((k, b)) = gp.conv {
                param_ids.push(k);
                param_ids.push(b);
            }
            for &(w, b) in &gp.layers {
                param_ids.push(w);
                param_ids.push(b);
            }
            for &a in &gp.inject_mats {
                param_ids.push(a);
            }

            let x = tape.input(train.features_tensor(chunk));
            let raters = train.raters(chunk);
            let targets = encode_batch(&train.labels(chunk), train.num_classes)?;
            let (logits, code_id) = match shape {
                Shape::Plain => (forward_graph(&mut tape, &gp, cfg, x, None, None)?, None),
                Shape::Heads => (
                    forward_graph(&mut tape, &gp, cfg, x, None, Some(&raters))?,
                    None,
                ),
                Shape::Latent { sigma2 } => {
                    let cb = codebook.as_ref().expect("latent shape needs a codebook");
                    let z_all = tape.input(cb.codes.clone());
                    let z_rows = tape.gather_rows(z_all, &raters)?;
                    let logits = forward_graph(&mut tape, &gp, cfg, x, Some(z_rows), None)?;
                    let _ = sigma2;
                    (logits, Some(z_all))
                }
            };
            let data = tape.bce_logits_sum(logits, targets)?;
            let mut loss = tape.scale(data, 1.0 / chunk.len() as f64);
            if let (Some(z_all), Shape::Latent { sigma2 }) = (code_id, shape) {
                if cfg.latent_dim > 0 && !present.is_empty() {
                    let z_present = tape.gather_rows(z_all, &present)?;
                    let prior = prior_penalty_graph(&mut tape, z_present, sigma2);
                    let scaled = tape.scale(prior, 1.0 / n_total);
                    loss = tape.add(loss, scaled)?;
                }
            }
            tape.backward(loss)?;

            let lr = tcfg.learning_rate;
            for ((tensor, vel), &id) in params
                .tensors_mut()
                .into_iter()
                .zip(velocity.iter_mut())
                .zip(&param_ids)
            {
                step(tensor, vel, tape.grad(id).data(), lr, tcfg);
            }
            if let (Some(cb), Some(vel), Some(id)) =
                (codebook.as_mut(), code_velocity.as_mut(), code_id)
            {
                step(&mut cb.codes, vel, tape.grad(id).data(), lr, tcfg);
            }
        }

        let train_objective = full_objective(&params, &codebook)?;
        if !train_objective.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("objective became {}", train_objective),
            });
        }
        let val_metric = match val {
            Some(v) => validation_metric(&params, cfg, shape, codebook.as_ref(), v)?,
            None => None,
        };
        records.push(EpochRecord {
            epoch,
            train_objective,
            val_metric,
        });

        if let Some(v) = val_metric {
            let improved = best.as_ref().map_or(true, |(b, ..)| v > *b);
            if improved {
                best = Some((v, params.clone(), codebook.clone(), epoch));
                stale = 0;
            } else {
                stale += 1;
                if stale >= tcfg.patience {
                    break;
                }
            }
        }
    }

    let mut best_epoch = None;
    if let Some((_, p, c, e)) = best {
        params = p;
        codebook = c;
        best_epoch = Some(e);
    }
    Ok(FitResult {
        params,
        codebook,
        log: ModelLog {
            name: name.to_string(),
            best_epoch,
            records,
        },
    })
}

fn step(tensor: &mut Tensor, velocity: &mut Tensor, grad: &[f64], lr: f64, tcfg: &TrainConfig) {
    match tcfg.optimizer {
        OptimizerKind::Sgd => {
            for (p, g) in tensor.data_mut().iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        OptimizerKind::Momentum => {
            for ((p, v), g) in tensor
                .data_mut()
                .iter_mut()
                .zip(velocity.data_mut())
                .zip(grad)
            {
                *v = tcfg.momentum * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

fn subset_of(ds: &Dataset, indices: &[usize]) -> Dataset {
    Dataset {
        samples: indices.iter().map(|&i| ds.samples[i].clone()).collect(),
        num_features: ds.num_features,
        num_classes: ds.num_classes,
        num_raters: ds.num_raters,
    }
}

/// Trains a model of the configured mode on `train`, early-stopping on
/// `val` when given. `base_cfg` is the latent-mode architecture; other
/// modes derive theirs from it.
pub fn train_joint(
    train: &Dataset,
    val: Option<&Dataset>,
    base_cfg: &BackboneConfig,
    tcfg: &TrainConfig,
    sigma2: f64,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Dataset("train_joint: empty training set".into()));
    }
    train.validate()?;
    if let Some(v) = val {
        v.validate()?;
    }
    let num_raters = train.num_raters;
    let cfg = mode_config(base_cfg, tcfg.mode, num_raters);
    match tcfg.mode {
        Mode::Addle => {
            let fit = fit_single(
                train,
                val,
                &cfg,
                tcfg,
                Shape::Latent { sigma2 },
                0,
                "addle",
            )?;
            Ok(TrainOutcome {
                model: FittedModel {
                    cfg,
                    kind: ModelKind::Addle {
                        params: fit.params,
                        codebook: fit.codebook.expect("latent fit returns a codebook"),
                    },
                },
                logs: vec![fit.log],
            })
        }
        Mode::Baseline => {
            let fit = fit_single(train, val, &cfg, tcfg, Shape::Plain, 0, "baseline")?;
            Ok(TrainOutcome {
                model: FittedModel {
                    cfg,
                    kind: ModelKind::Baseline { params: fit.params },
                },
                logs: vec![fit.log],
            })
        }
        Mode::MultiHead => {
            let fit = fit_single(train, val, &cfg, tcfg, Shape::Heads, 0, "multi-head")?;
            Ok(TrainOutcome {
                model: FittedModel {
                    cfg,
                    kind: ModelKind::MultiHead {
                        params: fit.params,
                        num_raters,
                    },
                },
                logs: vec![fit.log],
            })
        }
        Mode::Jlsl => {
            let mut models = Vec::with_capacity(num_raters);
            let mut logs = Vec::with_capacity(num_raters);
            for r in 0..num_raters {
                let train_r = subset_of(train, &train.rater_indices(r));
                let val_r = val.map(|v| subset_of(v, &v.rater_indices(r)));
                let fit = fit_single(
                    &train_r,
                    val_r.as_ref(),
                    &cfg,
                    tcfg,
                    Shape::Plain,
                    r as u64,
                    &format!("jlsl_r{}", r),
                )?;
                models.push(fit.params);
                logs.push(fit.log);
            }
            Ok(TrainOutcome {
                model: FittedModel {
                    cfg,
                    kind: ModelKind::Jlsl { models },
                },
                logs,
            })
        }
    }
}

// ── per-rater fine-tuning ────────────────────────────────────────────

/// Fine-tuning settings: full-batch descent with backtracking halving.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub initial_step: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 60,
            initial_step: 0.1,
        }
    }
}

/// Per-rater fine-tuning outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaterFinetune {
    pub rater: usize,
    pub num_samples: usize,
    pub objective_before: f64,
    pub objective_after: f64,
    /// Rater had no samples; code left unchanged.
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub codebook: LatentCodebook,
    pub records: Vec<RaterFinetune>,
}

/// Fine-tunes each rater's code on that rater's samples alone, shared
/// weights frozen. Backtracking line search guarantees the per-rater
/// objective never increases. Raters without samples are skipped.
pub fn finetune_raters(
    params: &ModelParams,
    cfg: &BackboneConfig,
    codebook: &LatentCodebook,
    ds: &Dataset,
    ft: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if ft.steps == 0 || !(ft.initial_step > 0.0) {
        return Err(Error::Config(
            "finetune needs steps ≥ 1 and a positive initial_step".into(),
        ));
    }
    let mut codebook = codebook.clone();
    let sigma2 = codebook.sigma2;
    let latent_dim = codebook.latent_dim();
    let mut records = Vec::with_capacity(codebook.num_raters());

    for r in 0..codebook.num_raters() {
        let idx = ds.rater_indices(r);
        let x = ds.features_tensor(&idx);
        let targets = encode_batch(&ds.labels(&idx), ds.num_classes)?;

        // J(z) over this rater's samples plus the code prior
        let objective_of = |z: &[f64]| -> Result<f64> {
            let mut tape = Tape::new();
            let gp = stage_params(&mut tape, params);
            let zsrc = tape.input(Tensor::new(vec![1, latent_dim], z.to_vec())?);
            let xi = tape.input(x.clone());
            let z_rows = tape.gather_rows(zsrc, &vec![0; idx.len()])?;
            let logits = forward_graph(&mut tape, &gp, cfg, xi, Some(z_rows), None)?;
            let data = tape.bce_logits_sum(logits, targets.clone())?;
            let prior = prior_penalty_graph(&mut tape, zsrc, sigma2);
            let total = tape.add(data, prior)?;
            Ok(tape.value(total).item())
        };
        let grad_of = |z: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut tape = Tape::new();
            let gp = stage_params(&mut tape, params);
            let zsrc = tape.input(Tensor::new(vec![1, latent_dim], z.to_vec())?);
            let xi = tape.input(x.clone());
            let z_rows = tape.gather_rows(zsrc, &vec![0; idx.len()])?;
            let logits = forward_graph(&mut tape, &gp, cfg, xi, Some(z_rows), None)?;
            let data = tape.bce_logits_sum(logits, targets.clone())?;
            let prior = prior_penalty_graph(&mut tape, zsrc, sigma2);
            let total = tape.add(data, prior)?;
            tape.backward(total)?;
            Ok((tape.value(total).item(), tape.grad(zsrc).data().to_vec()))
        };

        let mut z = codebook.code(r).to_vec();
        let before = objective_of(&z)?;
        if idx.is_empty() {
            records.push(RaterFinetune {
                rater: r,
                num_samples: 0,
                objective_before: before,
                objective_after: before,
                skipped: true,
            });
            continue;
        }

        let mut step_size = ft.initial_step;
        let mut current = before;
        'outer: for _ in 0..ft.steps {
            let (j0, grad) = grad_of(&z)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "finetune: non-finite gradient for rater {}",
                    r
                )));
            }
            if grad.iter().map(|g| g.abs()).fold(0.0, f64::max) < 1e-12 {
                break;
            }
            loop {
                let candidate: Vec<f64> =
                    z.iter().zip(&grad).map(|(zi, g)| zi - step_size * g).collect();
                let j1 = objective_of(&candidate)?;
                if j1 < j0 {
                    z = candidate;
                    current = j1;
                    step_size = (step_size * 2.0).min(ft.initial_step);
                    break;
                }
                step_size /= 2.0;
                if step_size < 1e-14 {
                    break 'outer;
                }
            }
        }
        codebook
            .codes
            .data_mut()[r * latent_dim..(r + 1) * latent_dim]
            .copy_from_slice(&z);
        records.push(RaterFinetune {
            rater: r,
            num_samples: idx.len(),
            objective_before: before,
            objective_after: current,
            skipped: false,
        });
    }
    Ok(FinetuneOutcome { codebook, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{InjectionMode, InjectionPoint};
    use crate::sim::{build_dataset, Assignment, SimConfig};

    fn tiny_cfg(input_dim: usize, latent_dim: usize) -> BackboneConfig {
        BackboneConfig {
            input_dim,
            hidden: vec![12, 12],
            num_classes: 4,
            latent_dim,
            injections: if latent_dim > 0 {
                vec![InjectionPoint {
                    layer: 1,
                    mode: InjectionMode::Dense,
                }]
            } else {
                Vec::new()
            },
            conv: None,
            heads: 1,
        }
    }

    fn quick_tcfg(mode: Mode, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 32,
            epochs,
            patience: 200,
            optimizer: OptimizerKind::Momentum,
            momentum: 0.9,
            seed,
            mode,
        }
    }

    fn sim_cfg(n: usize, raters: usize) -> SimConfig {
        SimConfig {
            num_samples: n,
            num_features: 8,
            num_classes: 4,
            num_raters: raters,
            group_size: 1,
            feature_jitter: 0.1,
            assignment: Assignment::Uniform,
            power_law_exponent: 1.0,
            threshold_sigma: 0.4,
            feature_sigma: 0.2,
            noise_sigma: 0.2,
            oracle_rater: Some(0),
            nonlinear_mix: 0.0,
        }
    }

    fn noise_free_sim(n: usize) -> SimConfig {
        SimConfig {
            num_raters: 1,
            threshold_sigma: 0.0,
            feature_sigma: 0.0,
            noise_sigma: 0.0,
            oracle_rater: None,
            ..sim_cfg(n, 1)
        }
    }

    #[test]
    fn objective_of_empty_dataset_with_zero_codes_is_zero() {
        let cfg = tiny_cfg(4, 3);
        let params = init_params(&cfg, &mut stream(0, Stage::ParamInit, 0)).unwrap();
        let cb = LatentCodebook {
            codes: Tensor::zeros(vec![2, 3]),
            sigma2: 1.0,
            rater_ids: vec!["r0".into(), "r1".into()],
        };
        let empty = Dataset {
            samples: Vec::new(),
            num_features: 4,
            num_classes: 4,
            num_raters: 2,
        };
        assert_eq!(objective(&params, &cfg, &cb, &empty).unwrap(), 0.0);
    }

    #[test]
    fn objective_with_zero_codes_equals_plain_loss_sum() {
        let cfg = tiny_cfg(8, 3);
        let params = init_params(&cfg, &mut stream(1, Stage::ParamInit, 0)).unwrap();
        let ds = build_dataset(&sim_cfg(40, 2), 5).unwrap();
        let cb = LatentCodebook {
            codes: Tensor::zeros(vec![2, 3]),
            sigma2: 1.0,
            rater_ids: vec!["r0".into(), "r1".into()],
        };
        let got = objective(&params, &cfg, &cb, &ds).unwrap();
        let mut expect = 0.0;
        for s in &ds.samples {
            let logits =
                crate::backbone::forward(&params, &cfg, &s.features, None, None).unwrap();
            expect += fh_loss(&logits, s.label, 4).unwrap();
        }
        assert_eq!(got, expect);
    }

    #[test]
    fn objective_matches_hand_computed_toy() {
        // Single affine layer 2→1 with a 1-d code injected at the head:
        // logit = w·x + b + A·z, all arithmetic done by hand below.
        let cfg = BackboneConfig {
            input_dim: 2,
            hidden: vec![],
            num_classes: 2,
            latent_dim: 1,
            injections: vec![InjectionPoint {
                layer: 0,
                mode: InjectionMode::Dense,
            }],
            conv: None,
            heads: 1,
        };
        let params = ModelParams {
            conv: None,
            layers: vec![(
                Tensor::from_rows(&[vec![1.0], vec![0.5]]).unwrap(),
                Tensor::from_vec(vec![0.25]),
            )],
            inject_mats: vec![Tensor::from_rows(&[vec![2.0]]).unwrap()],
        };
        let cb = LatentCodebook {
            codes: Tensor::from_rows(&[vec![0.5], vec![-1.0]]).unwrap(),
            sigma2: 2.0,
            rater_ids: vec!["r0".into(), "r1".into()],
        };
        let mk = |id: u64, x: Vec<f64>, label: usize, rater: usize| crate::data::Sample {
            sample_id: id,
            group_id: id,
            rater,
            label,
            true_label: None,
            features: x,
        };
        let ds = Dataset {
            samples: vec![
                mk(0, vec![1.0, 2.0], 1, 0),
                mk(1, vec![0.0, 1.0], 0, 1),
                mk(2, vec![2.0, 0.0], 1, 1),
            ],
            num_features: 2,
            num_classes: 2,
            num_raters: 2,
        };
        // logits: 2.25 + 1 = 3.25 ; 0.75 − 2 = −1.25 ; 2.25 − 2 = 0.25
        // BCE(x, 1) = softplus(−x); BCE(x, 0) = softplus(x)
        // prior: (0.5² + (−1)²) / 2 = 0.625
        let softplus = |x: f64| x.exp().ln_1p();
        let expected = softplus(-3.25) + softplus(-1.25) + softplus(-0.25) + 0.625;
        let got = objective(&params, &cfg, &cb, &ds).unwrap();
        assert!(
            (got - expected).abs() < 1e-12,
            "got {} expected {}",
            got,
            expected
        );
    }

    #[test]
    fn objective_rejects_unknown_rater() {
        let cfg = tiny_cfg(8, 3);
        let params = init_params(&cfg, &mut stream(2, Stage::ParamInit, 0)).unwrap();
        let mut ds = build_dataset(&sim_cfg(10, 2), 6).unwrap();
        ds.samples[0].rater = 5;
        ds.num_raters = 6;
        let cb = init_codes(2, 3, 1.0, &mut stream(2, Stage::CodeInit, 0)).unwrap();
        assert!(objective(&params, &cfg, &cb, &ds).is_err());
    }

    #[test]
    fn training_descends_and_converges_on_separable_toy() {
        let ds = build_dataset(&noise_free_sim(600), 7).unwrap();
        let cfg = tiny_cfg(8, 4);
        let tcfg = quick_tcfg(Mode::Addle, 200, 7);
        let out = train_joint(&ds, None, &cfg, &tcfg, 1.0).unwrap();
        let log = &out.logs[0];
        let first = log.records.first().unwrap().train_objective;
        let last = log.records.last().unwrap().train_objective;
        assert!(last <= first, "{} > {}", last, first);
        // mean per-sample loss under 0.1 on the noise-free linear task
        assert!(
            last / ds.len() as f64 - 0.0 < 0.1,
            "mean loss {}",
            last / ds.len() as f64
        );
    }

    #[test]
    fn training_is_seed_deterministic() {
        let ds = build_dataset(&sim_cfg(120, 3), 8).unwrap();
        let cfg = tiny_cfg(8, 3);
        let tcfg = quick_tcfg(Mode::Addle, 6, 9);
        let a = train_joint(&ds, None, &cfg, &tcfg, 1.0).unwrap();
        let b = train_joint(&ds, None, &cfg, &tcfg, 1.0).unwrap();
        assert_eq!(a.logs, b.logs);
        match (&a.model.kind, &b.model.kind) {
            (
                ModelKind::Addle { params: pa, codebook: ca },
                ModelKind::Addle { params: pb, codebook: cb },
            ) => {
                assert_eq!(pa, pb);
                assert_eq!(ca, cb);
            }
            _ => panic!("wrong kinds"),
        }
    }

    #[test]
    fn baseline_mode_is_a_plain_classifier() {
        let ds = build_dataset(&sim_cfg(80, 2), 10).unwrap();
        let cfg = tiny_cfg(8, 3);
        let tcfg = quick_tcfg(Mode::Baseline, 3, 10);
        let out = train_joint(&ds, None, &cfg, &tcfg, 1.0).unwrap();
        assert!(matches!(out.model.kind, ModelKind::Baseline { .. }));
        assert_eq!(out.model.cfg.latent_dim, 0);
        assert!(out.model.cfg.injections.is_empty());
        assert_eq!(out.model.num_raters(), 1);
    }

    #[test]
    fn disabled_codes_reproduce_baseline_bitwise() {
        // latent_dim = 0 with latent mode must match baseline exactly:
        // same streams, same graph, same updates.
        let ds = build_dataset(&sim_cfg(100, 3), 11).unwrap();
        let cfg = tiny_cfg(8, 0);
        let addle = train_joint(&ds, None, &cfg, &quick_tcfg(Mode::Addle, 4, 12), 1.0).unwrap();
        let base = train_joint(&ds, None, &cfg, &quick_tcfg(Mode::Baseline, 4, 12), 1.0).unwrap();
        let pa = match &addle.model.kind {
            ModelKind::Addle { params, .. } => params,
            _ => panic!(),
        };
        let pb = match &base.model.kind {
            ModelKind::Baseline { params } => params,
            _ => panic!(),
        };
        assert_eq!(pa.layers, pb.layers);
        assert_eq!(pa.conv, pb.conv);
        let oa: Vec<f64> = addle.logs[0].records.iter().map(|r| r.train_objective).collect();
        let ob: Vec<f64> = base.logs[0].records.iter().map(|r| r.train_objective).collect();
        assert_eq!(oa, ob);
    }

    #[test]
    fn jlsl_with_one_rater_equals_baseline_bitwise() {
        let ds = build_dataset(&noise_free_sim(90), 13).unwrap();
        let cfg = tiny_cfg(8, 3);
        let jlsl = train_joint(&ds, None, &cfg, &quick_tcfg(Mode::Jlsl, 4, 14), 1.0).unwrap();
        let base = train_joint(&ds, None, &cfg, &quick_tcfg(Mode::Baseline, 4, 14), 1.0).unwrap();
        let pj = match &jlsl.model.kind {
            ModelKind::Jlsl { models } => &models[0],
            _ => panic!(),
        };
        let pb = match &base.model.kind {
            ModelKind::Baseline { params } => params,
            _ => panic!(),
        };
        assert_eq!(pj, pb);
    }

    #[test]
    fn opposite_threshold_biases_separate_the_codes() {
        use crate::sim::{gen_samples, population_thresholds, rate, RaterProfile};
        for seed in 0..5u64 {
            let scfg = noise_free_sim(300);
            let samples = gen_samples(&scfg, &mut stream(seed, Stage::Samples, 0)).unwrap();
            let thresholds = population_thresholds(4);
            let optimist = RaterProfile {
                rater: 0,
                threshold_shift: vec![-0.6; 3],
                feature_weights: vec![0.0; 8],
                noise_scale: 0.0,
            };
            let pessimist = RaterProfile {
                rater: 1,
                threshold_shift: vec![0.6; 3],
                feature_weights: vec![0.0; 8],
                noise_scale: 0.0,
            };
            let mut rng = stream(seed, Stage::Rating, 0);
            let records: Vec<crate::data::Sample> = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let r = i % 2;
                    let profile = if r == 0 { &optimist } else { &pessimist };
                    crate::data::Sample {
                        sample_id: i as u64,
                        group_id: i as u64,
                        rater: r,
                        label: rate(s, profile, &thresholds, &mut rng),
                        true_label: Some(s.true_label),
                        features: s.features.clone(),
                    }
                })
                .collect();
            let ds = Dataset {
                samples: records,
                num_features: 8,
                num_classes: 4,
                num_raters: 2,
            };
            let cfg = tiny_cfg(8, 4);
            let out =
                train_joint(&ds, None, &cfg, &quick_tcfg(Mode::Addle, 60, seed), 1.0).unwrap();
            let cb = out.model.codebook().unwrap();
            let dist: f64 = cb
                .code(0)
                .iter()
                .zip(cb.code(1))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(dist > 0.1, "seed {}: ||z0−z1|| = {}", seed, dist);
        }
    }

    #[test]
    fn divergence_is_reported_with_the_epoch() {
        let ds = build_dataset(&sim_cfg(60, 2), 15).unwrap();
        let cfg = tiny_cfg(8, 2);
        let mut tcfg = quick_tcfg(Mode::Addle, 10, 16);
        tcfg.learning_rate = 1e140;
        match train_joint(&ds, None, &cfg, &tcfg, 1.0) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn early_stopping_restores_the_best_epoch() {
        let full = build_dataset(&sim_cfg(300, 3), 17).unwrap();
        let parts = full
            .split_by_group(&[0.8, 0.2], &mut stream(17, Stage::Split, 0))
            .unwrap();
        let mut tcfg = quick_tcfg(Mode::Addle, 40, 18);
        tcfg.patience = 5;
        let cfg = tiny_cfg(8, 3);
        let out = train_joint(&parts[0], Some(&parts[1]), &cfg, &tcfg, 1.0).unwrap();
        let log = &out.logs[0];
        let best = log.best_epoch.expect("validation ran");
        let best_metric = log.records[best].val_metric.unwrap();
        for r in &log.records {
            if let Some(v) = r.val_metric {
                assert!(v <= best_metric);
            }
        }
    }

    // ── fine-tuning ──────────────────────────────────────────────────

    fn trained_addle(seed: u64) -> (FittedModel, Dataset) {
        let ds = build_dataset(&sim_cfg(240, 3), seed).unwrap();
        let cfg = tiny_cfg(8, 3);
        let out = train_joint(&ds, None, &cfg, &quick_tcfg(Mode::Addle, 12, seed), 1.0).unwrap();
        (out.model, ds)
    }

    #[test]
    fn finetune_never_increases_any_rater_objective() {
        for seed in [21u64, 22] {
            let (model, ds) = trained_addle(seed);
            let (params, cb) = match &model.kind {
                ModelKind::Addle { params, codebook } => (params, codebook),
                _ => panic!(),
            };
            let before = params.clone();
            let out =
                finetune_raters(params, &model.cfg, cb, &ds, &FinetuneConfig::default()).unwrap();
            for rec in &out.records {
                assert!(
                    rec.objective_after <= rec.objective_before,
                    "rater {}: {} > {}",
                    rec.rater,
                    rec.objective_after,
                    rec.objective_before
                );
                assert!(!rec.skipped);
            }
            // θ and A bitwise untouched
            assert_eq!(&before, params);
        }
    }

    #[test]
    fn finetune_at_a_minimum_barely_moves() {
        let (model, ds) = trained_addle(23);
        let (params, cb) = match &model.kind {
            ModelKind::Addle { params, codebook } => (params, codebook),
            _ => panic!(),
        };
        let ft = FinetuneConfig {
            steps: 400,
            initial_step: 0.1,
        };
        let first = finetune_raters(params, &model.cfg, cb, &ds, &ft).unwrap();
        let second = finetune_raters(params, &model.cfg, &first.codebook, &ds, &ft).unwrap();
        for r in 0..cb.num_raters() {
            let delta: f64 = first
                .codebook
                .code(r)
                .iter()
                .zip(second.codebook.code(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(delta < 1e-6, "rater {} moved {}", r, delta);
        }
    }

    #[test]
    fn finetune_skips_unseen_raters_and_keeps_their_codes() {
        let (model, mut ds) = trained_addle(24);
        ds.samples.retain(|s| s.rater != 1);
        let (params, cb) = match &model.kind {
            ModelKind::Addle { params, codebook } => (params, codebook),
            _ => panic!(),
        };
        let out = finetune_raters(params, &model.cfg, cb, &ds, &FinetuneConfig::default()).unwrap();
        let rec = &out.records[1];
        assert!(rec.skipped);
        assert_eq!(rec.num_samples, 0);
        assert_eq!(out.codebook.code(1), cb.code(1));
        assert_ne!(out.codebook.code(0), cb.code(0));
    }

    #[test]
    fn finetune_helps_an_underrepresented_rater() {
        // power-law assignment starves the tail rater; joint training
        // under-fits its code and fine-tuning recovers more than 1%
        let scfg = SimConfig {
            assignment: Assignment::PowerLaw,
            power_law_exponent: 2.5,
            ..sim_cfg(1200, 6)
        };
        let ds = build_dataset(&scfg, 25).unwrap();
        let tail = (0..6)
            .min_by_key(|&r| {
                let n = ds.rater_indices(r).len();
                if n == 0 {
                    usize::MAX
                } else {
                    n
                }
            })
            .unwrap();
        assert!(ds.rater_indices(tail).len() < 60, "tail rater is rare");
        let cfg = tiny_cfg(8, 4);
        let out = train_joint(&ds, None, &cfg, &quick_tcfg(Mode::Addle, 25, 26), 1.0).unwrap();
        let (params, cb) = match &out.model.kind {
            ModelKind::Addle { params, codebook } => (params, codebook),
            _ => panic!(),
        };
        let ft = finetune_raters(params, &out.model.cfg, cb, &ds, &FinetuneConfig::default())
            .unwrap();
        let rec = &ft.records[tail];
        let gain = (rec.objective_before - rec.objective_after) / rec.objective_before;
        assert!(gain > 0.01, "tail rater gain {}", gain);
    }
}
