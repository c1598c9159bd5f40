//! Per-rater latent codes: storage, Gaussian prior, and injection.
//!
//! Each rater owns one row of the codebook. A code enters the network as
//! `A·z` added to a layer's pre-activation output — replicated across the
//! spatial positions for convolutional features, added to every batch row
//! for dense ones. The `A` matrices belong to the shared parameters and
//! are trained jointly; codes start from the same zero-mean Gaussian that
//! defines their prior.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// The R×M matrix of rater codes plus the prior variance.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodebook {
    /// R×M, row r = code of rater r.
    pub codes: Tensor,
    /// Prior variance σ² of the isotropic zero-mean Gaussian.
    pub sigma2: f64,
    /// Opaque rater identifiers, index-aligned with rows.
    pub rater_ids: Vec<String>,
}

impl LatentCodebook {
    pub fn num_raters(&self) -> usize {
        self.codes.dim(0)
    }

    pub fn latent_dim(&self) -> usize {
        self.codes.dim(1)
    }

    pub fn code(&self, r: usize) -> &[f64] {
        self.codes.row(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.codes.rank() != 2 || self.num_raters() == 0 {
            return Err(Error::InvalidArgument(
                "codebook must be a non-empty R×M matrix".into(),
            ));
        }
        if self.sigma2 <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "codebook sigma2 must be positive, got {}",
                self.sigma2
            )));
        }
        if self.rater_ids.len() != self.num_raters() {
            return Err(Error::InvalidArgument(
                "rater id count does not match code rows".into(),
            ));
        }
        let mut ids = self.rater_ids.clone();
        ids.sort();
        ids.dedup();
        if ids.len() != self.rater_ids.len() {
            return Err(Error::InvalidArgument("duplicate rater ids".into()));
        }
        if !self.codes.is_finite() {
            return Err(Error::NonFinite("codebook contains non-finite codes".into()));
        }
        Ok(())
    }
}

/// Where a code enters the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionMode {
    /// Added to a dense layer's B×C output, one vector per batch row.
    Dense,
    /// Added to a conv layer's B×C×L output, replicated over positions.
    Spatial,
}

/// One injection point: the stack index of the layer whose output is
/// augmented, and how. The mixing matrix `A` (C×M) lives with the model
/// parameters and is trained as part of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionPoint {
    pub layer: usize,
    pub mode: InjectionMode,
}

/// Draws an R×M codebook i.i.d. from N(0, σ²), the same Gaussian as the
/// prior. Reproducible per seed.
pub fn init_codes(
    num_raters: usize,
    latent_dim: usize,
    sigma2: f64,
    rng: &mut impl rand::Rng,
) -> Result<LatentCodebook> {
    if num_raters == 0 {
        return Err(Error::InvalidArgument("init_codes: need at least one rater".into()));
    }
    if sigma2 <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "init_codes: sigma2 must be positive, got {}",
            sigma2
        )));
    }
    let normal = Normal::new(0.0, sigma2.sqrt())
        .map_err(|e| Error::InvalidArgument(format!("init_codes: {}", e)))?;
    let data: Vec<f64> = (0..num_raters * latent_dim)
        .map(|_| normal.sample(rng))
        .collect();
    Ok(LatentCodebook {
        codes: Tensor::new(vec![num_raters, latent_dim], data)?,
        sigma2,
        rater_ids: (0..num_raters).map(|r| format!("r{}", r)).collect(),
    })
}

/// The prior term Σ_r ||z_r||² / σ².
pub fn prior_penalty(cb: &LatentCodebook) -> f64 {
    let mut acc = 0.0;
    for &v in cb.codes.data() {
        acc += v * v;
    }
    acc / cb.sigma2
}

/// Tape node for the prior of the given code rows: sum of squares / σ².
pub fn prior_penalty_graph(tape: &mut Tape, codes: VarId, sigma2: f64) -> VarId {
    let ss = tape.sum_squares(codes);
    tape.scale(ss, 1.0 / sigma2)
}

/// Repeats a single code as a B×M tensor, one row per batch element.
pub fn repeat_code(z: &[f64], batch: usize) -> Tensor {
    let mut data = Vec::with_capacity(batch * z.len());
    for _ in 0..batch {
        data.extend_from_slice(z);
    }
    Tensor::new(vec![batch, z.len()], data).expect("rectangular by construction")
}

/// Dense layer with injection: `affine(a) + A·z` added to every batch row.
///
/// `z_rows` carries one code per batch row (B×M); `a_mat` is the C×M
/// mixing matrix. With a zero code the result equals the plain affine
/// output bit for bit.
pub fn inject_dense(
    tape: &mut Tape,
    a: VarId,
    w: VarId,
    b: VarId,
    a_mat: VarId,
    z_rows: VarId,
) -> Result<VarId> {
    let lin = tape.affine(a, w, b)?;
    let inj = tape.code_inject(z_rows, a_mat)?;
    tape.add(lin, inj)
}

/// Conv layer with injection: `conv(a) + rep(A·z)`, the injection vector
/// replicated across all spatial positions.
pub fn inject_spatial(
    tape: &mut Tape,
    a: VarId,
    kernels: VarId,
    bias: VarId,
    a_mat: VarId,
    z_rows: VarId,
) -> Result<VarId> {
    let conv = tape.conv1d(a, kernels, bias)?;
    let inj = tape.code_inject(z_rows, a_mat)?;
    tape.add_channel(conv, inj)
}
