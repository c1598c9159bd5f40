//! Fitted models: one scoring interface over the four experiment modes.
//!
//! Every mode exposes R virtual raters (the plain baseline exposes one)
//! that map a feature vector to a severity score. How a virtual rater is
//! realised differs per mode: a latent code, a head block, or a whole
//! parameter set.

use serde::{Deserialize, Serialize};

use crate::backbone::{forward_batch, BackboneConfig, ModelParams};
use crate::latent::{repeat_code, LatentCodebook};
use crate::ordinal::score;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Experiment mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Shared backbone with per-rater latent codes.
    Addle,
    /// Plain classifier, no rater modelling.
    Baseline,
    /// Shared backbone, one classification head per rater.
    MultiHead,
    /// One full model per rater.
    Jlsl,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Addle => "addle",
            Mode::Baseline => "baseline",
            Mode::MultiHead => "multi-head",
            Mode::Jlsl => "jlsl",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "addle" => Ok(Mode::Addle),
            "baseline" => Ok(Mode::Baseline),
            "multi-head" => Ok(Mode::MultiHead),
            "jlsl" => Ok(Mode::Jlsl),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode '{}' (expected addle, baseline, multi-head, jlsl)",
                other
            ))),
        }
    }
}

/// Mode-specific payload of a trained model.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelKind {
    Baseline {
        params: ModelParams,
    },
    Addle {
        params: ModelParams,
        codebook: LatentCodebook,
    },
    MultiHead {
        params: ModelParams,
        num_raters: usize,
    },
    /// One parameter set per rater, index-aligned.
    Jlsl {
        models: Vec<ModelParams>,
    },
}

/// A trained model of any mode, ready for virtual-rater scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedModel {
    pub cfg: BackboneConfig,
    pub kind: ModelKind,
}

impl FittedModel {
    pub fn mode(&self) -> Mode {
        match self.kind {
            ModelKind::Baseline { .. } => Mode::Baseline,
            ModelKind::Addle { .. } => Mode::Addle,
            ModelKind::MultiHead { .. } => Mode::MultiHead,
            ModelKind::Jlsl { .. } => Mode::Jlsl,
        }
    }

    /// Number of virtual raters this model can simulate.
    pub fn num_raters(&self) -> usize {
        match &self.kind {
            ModelKind::Baseline { .. } => 1,
            ModelKind::Addle { codebook, .. } => codebook.num_raters(),
            ModelKind::MultiHead { num_raters, .. } => *num_raters,
            ModelKind::Jlsl { models } => models.len(),
        }
    }

    pub fn codebook(&self) -> Option<&LatentCodebook> {
        match &self.kind {
            ModelKind::Addle { codebook, .. } => Some(codebook),
            _ => None,
        }
    }

    /// Severity scores of virtual rater `r` for every row of `x` (B×D).
    pub fn rater_scores(&self, x: &Tensor, r: usize) -> Result<Vec<f64>> {
        if r >= self.num_raters() {
            return Err(Error::InvalidArgument(format!(
                "rater index {} out of {} raters",
                r,
                self.num_raters()
            )));
        }
        let batch = x.dim(0);
        let logits = match &self.kind {
            ModelKind::Baseline { params } => forward_batch(params, &self.cfg, x, None, None)?,
            ModelKind::Addle { params, codebook } => {
                let z = repeat_code(codebook.code(r), batch);
                forward_batch(params, &self.cfg, x, Some(&z), None)?
            }
            ModelKind::MultiHead { params, .. } => {
                let sel = vec![r; batch];
                forward_batch(params, &self.cfg, x, None, Some(&sel))?
            }
            ModelKind::Jlsl { models } => forward_batch(&models[r], &self.cfg, x, None, None)?,
        };
        Ok((0..batch).map(|i| score(logits.row(i))).collect())
    }

    /// Scores with an explicit latent code; only meaningful for the
    /// latent-code mode.
    pub fn scores_with_code(&self, x: &Tensor, z: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            ModelKind::Addle { params, codebook } => {
                if z.len() != codebook.latent_dim() {
                    return Err(Error::shape(
                        "scores_with_code",
                        format!("code length {} vs latent dim {}", z.len(), codebook.latent_dim()),
                    ));
                }
                let batch = x.dim(0);
                let zr = repeat_code(z, batch);
                let logits = forward_batch(params, &self.cfg, x, Some(&zr), None)?;
                Ok((0..batch).map(|i| score(logits.row(i))).collect())
            }
            _ => Err(Error::InvalidArgument(
                "scores_with_code requires a latent-code model".into(),
            )),
        }
    }

    /// Mean over all virtual raters, summed in rater-index order.
    pub fn mean_scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        let r = self.num_raters();
        let mut acc = self.rater_scores(x, 0)?;
        for rater in 1..r {
            for (a, s) in acc.iter_mut().zip(self.rater_scores(x, rater)?) {
                *a += s;
            }
        }
        for a in &mut acc {
            *a /= r as f64;
        }
        Ok(acc)
    }

    /// Total scalar parameter count (all raters' models for the
    /// one-model-per-rater mode).
    pub fn parameter_count(&self) -> usize {
        match &self.kind {
            ModelKind::Baseline { params }
            | ModelKind::MultiHead { params, .. } => params.parameter_count(),
            ModelKind::Addle { params, codebook } => {
                params.parameter_count() + codebook.codes.len()
            }
            ModelKind::Jlsl { models } => models.iter().map(ModelParams::parameter_count).sum(),
        }
    }
}

/// Closed-form parameter count for a mode built on `base_cfg` (the
/// single-head, injection-free architecture) with `num_raters` raters.
pub fn analytic_parameter_count(base_cfg: &BackboneConfig, mode: Mode, num_raters: usize) -> usize {
    let conv: usize = base_cfg
        .conv
        .map(|c| c.channels * c.kernel + c.channels)
        .unwrap_or(0);
    let dense: usize = base_cfg
        .dense_dims()
        .iter()
        .map(|&(i, o)| i * o + o)
        .sum();
    let baseline = conv + dense;
    match mode {
        Mode::Baseline => baseline,
        Mode::Addle => {
            let inject: usize = base_cfg
                .injections
                .iter()
                .map(|p| {
                    base_cfg
                        .stack_output_channels(p.layer)
                        .expect("validated config")
                        * base_cfg.latent_dim
                })
                .sum();
            baseline + num_raters * base_cfg.latent_dim + inject
        }
        Mode::MultiHead => {
            let head_in = base_cfg
                .dense_dims()
                .last()
                .map(|&(i, _)| i)
                .unwrap_or(0);
            let head = (head_in + 1) * (base_cfg.num_classes - 1);
            baseline + (num_raters - 1) * head
        }
        Mode::Jlsl => num_raters * baseline,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_params;
    use crate::latent::{init_codes, InjectionMode, InjectionPoint};
    use crate::rng::{stream, Stage};

    fn base_cfg() -> BackboneConfig {
        BackboneConfig {
            input_dim: 16,
            hidden: vec![32, 32],
            num_classes: 4,
            latent_dim: 10,
            injections: vec![InjectionPoint {
                layer: 1,
                mode: InjectionMode::Dense,
            }],
            conv: None,
            heads: 1,
        }
    }

    #[test]
    fn analytic_counts_match_instantiated_models() {
        let cfg = base_cfg();
        let num_raters = 8;

        // baseline: drop injection machinery
        let mut b_cfg = cfg.clone();
        b_cfg.latent_dim = 0;
        b_cfg.injections.clear();
        let b_params = init_params(&b_cfg, &mut stream(0, Stage::ParamInit, 0)).unwrap();
        let baseline = FittedModel {
            cfg: b_cfg.clone(),
            kind: ModelKind::Baseline { params: b_params.clone() },
        };
        assert_eq!(
            baseline.parameter_count(),
            analytic_parameter_count(&cfg, Mode::Baseline, num_raters)
        );
        // 16·32+32 + 32·32+32 + 32·3+3 = 1699
        assert_eq!(baseline.parameter_count(), 1699);

        let a_params = init_params(&cfg, &mut stream(0, Stage::ParamInit, 0)).unwrap();
        let codebook =
            init_codes(num_raters, cfg.latent_dim, 1.0, &mut stream(0, Stage::CodeInit, 0))
                .unwrap();
        let addle = FittedModel {
            cfg: cfg.clone(),
            kind: ModelKind::Addle { params: a_params, codebook },
        };
        assert_eq!(
            addle.parameter_count(),
            analytic_parameter_count(&cfg, Mode::Addle, num_raters)
        );
        // baseline + R·M + C·M = 1699 + 80 + 320
        assert_eq!(addle.parameter_count(), 2099);

        let mut mh_cfg = cfg.clone();
        mh_cfg.latent_dim = 0;
        mh_cfg.injections.clear();
        mh_cfg.heads = num_raters;
        let mh_params = init_params(&mh_cfg, &mut stream(0, Stage::ParamInit, 0)).unwrap();
        let mh = FittedModel {
            cfg: mh_cfg,
            kind: ModelKind::MultiHead { params: mh_params, num_raters },
        };
        assert_eq!(
            mh.parameter_count(),
            analytic_parameter_count(&cfg, Mode::MultiHead, num_raters)
        );

        let models: Vec<ModelParams> = (0..num_raters)
            .map(|r| init_params(&b_cfg, &mut stream(0, Stage::ParamInit, r as u64)).unwrap())
            .collect();
        let jlsl = FittedModel {
            cfg: b_cfg,
            kind: ModelKind::Jlsl { models },
        };
        assert_eq!(
            jlsl.parameter_count(),
            analytic_parameter_count(&cfg, Mode::Jlsl, num_raters)
        );
        assert_eq!(jlsl.parameter_count(), 8 * 1699);
    }

    #[test]
    fn rater_scores_are_deterministic_and_bounded() {
        let cfg = base_cfg();
        let params = init_params(&cfg, &mut stream(1, Stage::ParamInit, 0)).unwrap();
        let codebook = init_codes(3, cfg.latent_dim, 1.0, &mut stream(1, Stage::CodeInit, 0)).unwrap();
        let model = FittedModel {
            cfg,
            kind: ModelKind::Addle { params, codebook },
        };
        let x = Tensor::from_rows(&[vec![0.1; 16], vec![-0.5; 16]]).unwrap();
        let s1 = model.rater_scores(&x, 2).unwrap();
        let s2 = model.rater_scores(&x, 2).unwrap();
        assert_eq!(s1, s2);
        assert!(s1.iter().all(|s| (0.0..=3.0).contains(s)));
        assert!(model.rater_scores(&x, 3).is_err());
    }

    #[test]
    fn mean_scores_match_explicit_loop() {
        let cfg = base_cfg();
        let params = init_params(&cfg, &mut stream(2, Stage::ParamInit, 0)).unwrap();
        let codebook = init_codes(4, cfg.latent_dim, 1.0, &mut stream(2, Stage::CodeInit, 0)).unwrap();
        let model = FittedModel {
            cfg,
            kind: ModelKind::Addle { params, codebook },
        };
        let x = Tensor::from_rows(&[vec![0.2; 16], vec![1.0; 16], vec![-1.0; 16]]).unwrap();
        let mean = model.mean_scores(&x).unwrap();
        for i in 0..3 {
            let mut acc = 0.0;
            for r in 0..4 {
                acc += model.rater_scores(&x, r).unwrap()[i];
            }
            assert!((mean[i] - acc / 4.0).abs() < 1e-12);
        }
    }
}
