//! Synthetic subjective-rater simulator.
//!
//! Ground truth is a latent severity `s = u·x` (optionally with a squared
//! term for stress tests) cut into K classes at standard-normal quantiles,
//! so classes come out roughly balanced. Raters perceive a corrupted
//! severity `s' = s + w_r·x + ε` and cut it at individually shifted
//! thresholds: `δ_r` gives label-dependent bias, `w_r` image-dependent
//! bias, and `ε ~ N(0, s_r²)` plain inconsistency. Both structured noise
//! channels exist so that models which condition on the sample can be
//! distinguished from ones that only model label confusion.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::data::{Dataset, Sample};
use crate::rng::{stream, Stage};
use crate::{Error, Result};

/// How samples are assigned to raters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assignment {
    #[default]
    Uniform,
    /// P(rater r) ∝ 1/(r+1)^exponent — a few prolific raters, many rare ones.
    PowerLaw,
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub num_samples: usize,
    pub num_features: usize,
    pub num_classes: usize,
    pub num_raters: usize,
    /// Samples per study; members share the study's severity and label.
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    /// Feature jitter between members of one study (only when group_size > 1).
    #[serde(default = "default_feature_jitter")]
    pub feature_jitter: f64,
    #[serde(default)]
    pub assignment: Assignment,
    #[serde(default = "default_power_law_exponent")]
    pub power_law_exponent: f64,
    /// σ_δ: spread of per-rater threshold shifts.
    pub threshold_sigma: f64,
    /// σ_w: scale of the image-dependent perturbation.
    pub feature_sigma: f64,
    /// σ_ε: spread of the per-rater noise scale.
    pub noise_sigma: f64,
    /// Plant this rater with an all-zero (truth-telling) profile.
    #[serde(default)]
    pub oracle_rater: Option<usize>,
    /// Mixes a squared-feature term into the severity for stress tests.
    #[serde(default)]
    pub nonlinear_mix: f64,
}

fn default_group_size() -> usize {
    1
}

fn default_feature_jitter() -> f64 {
    0.1
}

fn default_power_law_exponent() -> f64 {
    1.0
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 || self.num_features == 0 {
            return Err(Error::Config("simulator needs num_samples, num_features ≥ 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("simulator needs num_classes ≥ 2".into()));
        }
        if self.num_raters == 0 {
            return Err(Error::Config("simulator needs num_raters ≥ 1".into()));
        }
        if self.group_size == 0 {
            return Err(Error::Config("simulator group_size must be ≥ 1".into()));
        }
        if self.threshold_sigma < 0.0 || self.feature_sigma < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("simulator sigmas must be non-negative".into()));
        }
        if let Some(r) = self.oracle_rater {
            if r >= self.num_raters {
                return Err(Error::Config(format!(
                    "oracle_rater {} out of {} raters",
                    r, self.num_raters
                )));
            }
        }
        Ok(())
    }
}

/// A generated sample with its hidden severity and true label.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSample {
    pub features: Vec<f64>,
    pub severity: f64,
    pub true_label: usize,
    pub group_id: u64,
}

/// A rater's behavioural parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RaterProfile {
    pub rater: usize,
    /// Per-cutoff threshold shifts δ (label-dependent bias).
    pub threshold_shift: Vec<f64>,
    /// Feature weights w (image-dependent bias).
    pub feature_weights: Vec<f64>,
    /// Noise scale s_r ≥ 0.
    pub noise_scale: f64,
}

impl RaterProfile {
    pub fn oracle(rater: usize, num_classes: usize, num_features: usize) -> Self {
        RaterProfile {
            rater,
            threshold_shift: vec![0.0; num_classes - 1],
            feature_weights: vec![0.0; num_features],
            noise_scale: 0.0,
        }
    }

    /// Perceived thresholds must stay strictly increasing.
    pub fn is_valid(&self, thresholds: &[f64]) -> bool {
        thresholds
            .iter()
            .zip(&self.threshold_shift)
            .map(|(t, d)| t + d)
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| w[0] < w[1])
    }
}

/// Population thresholds: standard-normal quantiles at k/K, so the K
/// classes of `s ~ N(0,1)` are balanced in expectation.
pub fn population_thresholds(num_classes: usize) -> Vec<f64> {
    let normal = statrs::distribution::Normal::new(0.0, 1.0).expect("unit normal");
    (1..num_classes)
        .map(|k| normal.inverse_cdf(k as f64 / num_classes as f64))
        .collect()
}

/// Number of thresholds (after shifting) strictly below `s`.
pub(crate) fn count_thresholds_below(s: f64, thresholds: &[f64], shift: &[f64]) -> usize {
    thresholds
        .iter()
        .zip(shift)
        .filter(|(t, d)| **t + **d < s)
        .count()
}

fn unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates ground-truth samples. Studies of `group_size` members share
/// one severity and true label; member features get a small jitter.
pub fn gen_samples(cfg: &SimConfig, rng: &mut impl Rng) -> Result<Vec<GroundTruthSample>> {
    cfg.validate()?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let thresholds = population_thresholds(cfg.num_classes);
    let direction = unit_vector(cfg.num_features, rng);
    let quad_direction = if cfg.nonlinear_mix != 0.0 {
        Some(unit_vector(cfg.num_features, rng))
    } else {
        None
    };

    let mut samples = Vec::with_capacity(cfg.num_samples);
    let mut group: u64 = 0;
    while samples.len() < cfg.num_samples {
        let base: Vec<f64> = (0..cfg.num_features).map(|_| normal.sample(rng)).collect();
        let mut severity: f64 = direction.iter().zip(&base).map(|(u, x)| u * x).sum();
        if let Some(q) = &quad_direction {
            let proj: f64 = q.iter().zip(&base).map(|(u, x)| u * x).sum();
            // (proj² − 1)/√2 has zero mean and unit variance under N(0,1)
            severity += cfg.nonlinear_mix * (proj * proj - 1.0) / std::f64::consts::SQRT_2;
        }
        let true_label = count_thresholds_below(severity, &thresholds, &vec![0.0; cfg.num_classes - 1]);
        let members = cfg.group_size.min(cfg.num_samples - samples.len());
        for _ in 0..members {
            let features = if cfg.group_size == 1 {
                base.clone()
            } else {
                base.iter()
                    .map(|x| x + cfg.feature_jitter * normal.sample(rng))
                    .collect()
            };
            samples.push(GroundTruthSample {
                features,
                severity,
                true_label,
                group_id: group,
            });
        }
        group += 1;
    }
    Ok(samples)
}

/// Draws a rater population; the optional oracle gets an all-zero profile.
pub fn gen_population(cfg: &SimConfig, rng: &mut impl Rng) -> Result<Vec<RaterProfile>> {
    cfg.validate()?;
    let thresholds = population_thresholds(cfg.num_classes);
    let shift_dist = Normal::new(0.0, cfg.threshold_sigma.max(f64::MIN_POSITIVE))
        .expect("threshold shift normal");
    let weight_dist = Normal::new(
        0.0,
        (cfg.feature_sigma / (cfg.num_features as f64).sqrt()).max(f64::MIN_POSITIVE),
    )
    .expect("feature weight normal");
    let noise_dist =
        Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("noise scale normal");

    let mut population = Vec::with_capacity(cfg.num_raters);
    for r in 0..cfg.num_raters {
        if cfg.oracle_rater == Some(r) {
            population.push(RaterProfile::oracle(r, cfg.num_classes, cfg.num_features));
            continue;
        }
        let mut profile = RaterProfile {
            rater: r,
            threshold_shift: Vec::new(),
            feature_weights: (0..cfg.num_features)
                .map(|_| if cfg.feature_sigma == 0.0 { 0.0 } else { weight_dist.sample(rng) })
                .collect(),
            noise_scale: if cfg.noise_sigma == 0.0 {
                0.0
            } else {
                noise_dist.sample(rng).abs()
            },
        };
        let mut tries = 0;
        loop {
            profile.threshold_shift = (0..cfg.num_classes - 1)
                .map(|_| if cfg.threshold_sigma == 0.0 { 0.0 } else { shift_dist.sample(rng) })
                .collect();
            if profile.is_valid(&thresholds) {
                break;
            }
            tries += 1;
            if tries > 1000 {
                return Err(Error::InvalidArgument(
                    "gen_population: could not draw increasing perceived thresholds; \
                     threshold_sigma is too large for the class grid"
                        .into(),
                ));
            }
        }
        population.push(profile);
    }
    Ok(population)
}

/// One rater's subjective label for one sample.
pub fn rate(
    sample: &GroundTruthSample,
    profile: &RaterProfile,
    thresholds: &[f64],
    rng: &mut impl Rng,
) -> usize {
    let bias: f64 = profile
        .feature_weights
        .iter()
        .zip(&sample.features)
        .map(|(w, x)| w * x)
        .sum();
    let noise = if profile.noise_scale == 0.0 {
        0.0
    } else {
        Normal::new(0.0, profile.noise_scale)
            .expect("noise normal")
            .sample(rng)
    };
    let perceived = sample.severity + bias + noise;
    count_thresholds_below(perceived, thresholds, &profile.threshold_shift)
}

/// Assigns one rater per sample.
pub fn assign_raters(n: usize, cfg: &SimConfig, rng: &mut impl Rng) -> Vec<usize> {
    match cfg.assignment {
        Assignment::Uniform => (0..n).map(|_| rng.random_range(0..cfg.num_raters)).collect(),
        Assignment::PowerLaw => {
            let weights: Vec<f64> = (0..cfg.num_raters)
                .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.power_law_exponent))
                .collect();
            let total: f64 = weights.iter().sum();
            (0..n)
                .map(|_| {
                    let mut u = rng.random::<f64>() * total;
                    for (r, w) in weights.iter().enumerate() {
                        if u < *w {
                            return r;
                        }
                        u -= w;
                    }
                    cfg.num_raters - 1
                })
                .collect()
        }
    }
}

/// Full generator run: samples, population, assignment, labels — each
/// from its own seed stream derived from the master seed.
pub fn build_dataset(cfg: &SimConfig, master_seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let samples = gen_samples(cfg, &mut stream(master_seed, Stage::Samples, 0))?;
    let population = gen_population(cfg, &mut stream(master_seed, Stage::Population, 0))?;
    let assignment = assign_raters(samples.len(), cfg, &mut stream(master_seed, Stage::Assignment, 0));
    let thresholds = population_thresholds(cfg.num_classes);
    let mut rating_rng = stream(master_seed, Stage::Rating, 0);

    let records = samples
        .iter()
        .zip(&assignment)
        .enumerate()
        .map(|(i, (s, &r))| Sample {
            sample_id: i as u64,
            group_id: s.group_id,
            rater: r,
            label: rate(s, &population[r], &thresholds, &mut rating_rng),
            true_label: Some(s.true_label),
            features: s.features.clone(),
        })
        .collect();
    let ds = Dataset {
        samples: records,
        num_features: cfg.num_features,
        num_classes: cfg.num_classes,
        num_raters: cfg.num_raters,
    };
    ds.validate()?;
    Ok(ds)
}
