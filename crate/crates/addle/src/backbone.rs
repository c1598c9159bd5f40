//! The shared network: a stack of dense layers with an optional conv1d
//! front end, rectifier activations, declared injection points, and a
//! K−1-logit ordinal head.
//!
//! The same code serves four roles. With codes it is the latent model;
//! with `z = None` it is the plain classifier of identical architecture;
//! with `heads = R` the final layer carries one logit block per rater;
//! and a set of R instances forms the one-model-per-rater baseline.
//!
//! Layers are addressed by *stack index*: the conv front end (when
//! present) is index 0 and the dense layers follow; the last dense layer
//! is the head. An injection point names the stack index whose
//! pre-activation output receives `A·z`.

use serde::{Deserialize, Serialize};

use crate::latent::{inject_dense, inject_spatial, InjectionMode, InjectionPoint};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Optional convolutional front end: the D input features are treated as
/// a 1-channel signal of length D.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvFrontEnd {
    pub channels: usize,
    pub kernel: usize,
}

/// Architecture of the shared network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    /// Latent code dimensionality M; 0 disables injection entirely.
    pub latent_dim: usize,
    #[serde(default)]
    pub injections: Vec<InjectionPoint>,
    #[serde(default)]
    pub conv: Option<ConvFrontEnd>,
    /// Logit blocks in the head layer; 1 except in multi-head mode.
    #[serde(default = "default_heads")]
    pub heads: usize,
}

fn default_heads() -> usize {
    1
}

impl BackboneConfig {
    /// Number of layers in the stack (conv front end plus dense layers).
    pub fn stack_len(&self) -> usize {
        self.conv.iter().len() + self.hidden.len() + 1
    }

    fn conv_output_len(&self) -> Option<usize> {
        self.conv.map(|c| self.input_dim - c.kernel + 1)
    }

    /// Input width of the dense part.
    pub fn dense_input_dim(&self) -> usize {
        match self.conv {
            Some(c) => c.channels * self.conv_output_len().unwrap(),
            None => self.input_dim,
        }
    }

    /// (in, out) widths of each dense layer, the head last.
    pub fn dense_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.dense_input_dim();
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, (self.num_classes - 1) * self.heads));
        dims
    }

    /// Output channel count of the layer at `stack` index.
    pub fn stack_output_channels(&self, stack: usize) -> Result<usize> {
        let base = usize::from(self.conv.is_some());
        if self.conv.is_some() && stack == 0 {
            return Ok(self.conv.unwrap().channels);
        }
        let dense_idx = stack - base;
        self.dense_dims()
            .get(dense_idx)
            .map(|&(_, out)| out)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "injection layer {} out of range ({} layers)",
                    stack,
                    self.stack_len()
                ))
            })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "backbone.num_classes must be ≥ 2, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("backbone.input_dim must be ≥ 1".into()));
        }
        if self.heads == 0 {
            return Err(Error::Config("backbone.heads must be ≥ 1".into()));
        }
        if let Some(c) = self.conv {
            if c.channels == 0 || c.kernel == 0 {
                return Err(Error::Config("backbone.conv channels/kernel must be ≥ 1".into()));
            }
            if c.kernel > self.input_dim {
                return Err(Error::Config(format!(
                    "backbone.conv kernel {} exceeds input_dim {}",
                    c.kernel, self.input_dim
                )));
            }
        }
        let mut seen = vec![false; self.stack_len()];
        for p in &self.injections {
            if p.layer >= self.stack_len() {
                return Err(Error::Config(format!(
                    "injection layer {} out of range ({} layers)",
                    p.layer,
                    self.stack_len()
                )));
            }
            if seen[p.layer] {
                return Err(Error::Config(format!(
                    "more than one injection point at layer {}",
                    p.layer
                )));
            }
            seen[p.layer] = true;
            let is_conv_layer = self.conv.is_some() && p.layer == 0;
            match p.mode {
                InjectionMode::Spatial if !is_conv_layer => {
                    return Err(Error::Config(format!(
                        "spatial injection at layer {} requires the conv front end",
                        p.layer
                    )));
                }
                InjectionMode::Dense if is_conv_layer => {
                    return Err(Error::Config(
                        "dense injection cannot target the conv layer".into(),
                    ));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// All trainable tensors of one backbone instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Conv kernels and bias, when the front end is configured.
    pub conv: Option<(Tensor, Tensor)>,
    /// (W, b) per dense layer, head last. W is in×out.
    pub layers: Vec<(Tensor, Tensor)>,
    /// Mixing matrices (C×M), aligned with `BackboneConfig::injections`.
    pub inject_mats: Vec<Tensor>,
}

impl ModelParams {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if let Some((k, b)) = &self.conv {
            out.push(k);
            out.push(b);
        }
        for (w, b) in &self.layers {
            out.push(w);
            out.push(b);
        }
        for a in &self.inject_mats {
            out.push(a);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some((k, b)) = &mut self.conv {
            out.push(k);
            out.push(b);
        }
        for (w, b) in &mut self.layers {
            out.push(w);
            out.push(b);
        }
        for a in &mut self.inject_mats {
            out.push(a);
        }
        out
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Initializes parameters for `cfg`: He-scaled normal weights, zero
/// biases, zero mixing matrices. Zero `A` keeps the injection path inert
/// at initialization, so training starts from the exact latent-free model.
pub fn init_params(cfg: &BackboneConfig, rng: &mut impl rand::Rng) -> Result<ModelParams> {
    use rand_distr::{Distribution, Normal};
    cfg.validate()?;
    let he = |fan_in: usize, n: usize, rng: &mut dyn rand::RngCore| -> Result<Vec<f64>> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidArgument(format!("init_params: {}", e)))?;
        Ok((0..n).map(|_| normal.sample(rng)).collect())
    };

    let conv = match cfg.conv {
        Some(c) => {
            let kernels = Tensor::new(
                vec![c.channels, 1, c.kernel],
                he(c.kernel, c.channels * c.kernel, rng)?,
            )?;
            Some((kernels, Tensor::zeros(vec![c.channels])))
        }
        None => None,
    };
    let mut layers = Vec::new();
    for (fan_in, fan_out) in cfg.dense_dims() {
        let w = Tensor::new(vec![fan_in, fan_out], he(fan_in, fan_in * fan_out, rng)?)?;
        layers.push((w, Tensor::zeros(vec![fan_out])));
    }
    let inject_mats = cfg
        .injections
        .iter()
        .map(|p| Ok(Tensor::zeros(vec![cfg.stack_output_channels(p.layer)?, cfg.latent_dim])))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams {
        conv,
        layers,
        inject_mats,
    })
}

/// Tape handles of one parameter set.
pub struct GraphParams {
    pub conv: Option<(VarId, VarId)>,
    pub layers: Vec<(VarId, VarId)>,
    pub inject_mats: Vec<VarId>,
}

/// Registers all parameter tensors on a tape.
pub fn stage_params(tape: &mut Tape, params: &ModelParams) -> GraphParams {
    GraphParams {
        conv: params
            .conv
            .as_ref()
            .map(|(k, b)| (tape.input(k.clone()), tape.input(b.clone()))),
        layers: params
            .layers
            .iter()
            .map(|(w, b)| (tape.input(w.clone()), tape.input(b.clone())))
            .collect(),
        inject_mats: params
            .inject_mats
            .iter()
            .map(|a| tape.input(a.clone()))
            .collect(),
    }
}

fn injection_slot(cfg: &BackboneConfig, stack: usize) -> Option<usize> {
    cfg.injections.iter().position(|p| p.layer == stack)
}

/// Builds the forward graph for a batch.
///
/// `x` is B×D. `z_rows` carries one latent code per batch row (B×M); with
/// `None` (or `latent_dim == 0`) no injection ops are recorded at all, so
/// the graph is exactly the latent-free network. `head_sel` picks the
/// logit block per row and is required when `cfg.heads > 1`.
pub fn forward_graph(
    tape: &mut Tape,
    gp: &GraphParams,
    cfg: &BackboneConfig,
    x: VarId,
    z_rows: Option<VarId>,
    head_sel: Option<&[usize]>,
) -> Result<VarId> {
    let xshape = tape.value(x).shape().to_vec();
    if xshape.len() != 2 || xshape[1] != cfg.input_dim {
        return Err(Error::shape(
            "forward",
            format!("input {:?} vs input_dim {}", xshape, cfg.input_dim),
        ));
    }
    let batch = xshape[0];
    let inject = match z_rows {
        Some(z) if cfg.latent_dim > 0 => {
            let zshape = tape.value(z).shape();
            if zshape != [batch, cfg.latent_dim] {
                return Err(Error::shape(
                    "forward",
                    format!(
                        "codes {:?} vs batch {} × latent_dim {}",
                        zshape, batch, cfg.latent_dim
                    ),
                ));
            }
            Some(z)
        }
        _ => None,
    };

    let base = usize::from(cfg.conv.is_some());
    let mut h = x;
    if let Some(c) = cfg.conv {
        let (k, b) = gp.conv.ok_or_else(|| {
            Error::InvalidArgument("forward: config has conv front end, params do not".into())
        })?;
        let signal = tape.reshape(h, vec![batch, 1, cfg.input_dim])?;
        let out = match (injection_slot(cfg, 0), inject) {
            (Some(slot), Some(z)) => {
                inject_spatial(tape, signal, k, b, gp.inject_mats[slot], z)?
            }
            _ => tape.conv1d(signal, k, b)?,
        };
        let act = tape.relu(out);
        let lout = cfg.conv_output_len().unwrap();
        h = tape.reshape(act, vec![batch, c.channels * lout])?;
    }

    if gp.layers.len() != cfg.hidden.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "forward: {} dense layers in params, config wants {}",
            gp.layers.len(),
            cfg.hidden.len() + 1
        )));
    }
    for (j, &(w, b)) in gp.layers.iter().enumerate() {
        let lin = match (injection_slot(cfg, base + j), inject) {
            (Some(slot), Some(z)) => inject_dense(tape, h, w, b, gp.inject_mats[slot], z)?,
            _ => tape.affine(h, w, b)?,
        };
        h = if j + 1 < gp.layers.len() {
            tape.relu(lin)
        } else {
            lin
        };
    }

    if cfg.heads > 1 {
        let sel = head_sel.ok_or_else(|| {
            Error::InvalidArgument("forward: multi-head model needs head selection".into())
        })?;
        if sel.len() != batch {
            return Err(Error::shape(
                "forward",
                format!("{} head selections for batch {}", sel.len(), batch),
            ));
        }
        h = tape.select_head(h, sel, cfg.num_classes - 1)?;
    }
    Ok(h)
}

/// Forward pass over a batch, returning the B×(K−1) logits.
pub fn forward_batch(
    params: &ModelParams,
    cfg: &BackboneConfig,
    x: &Tensor,
    z_rows: Option<&Tensor>,
    head_sel: Option<&[usize]>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let gp = stage_params(&mut tape, params);
    let xi = tape.input(x.clone());
    let zi = z_rows.map(|z| tape.input(z.clone()));
    let out = forward_graph(&mut tape, &gp, cfg, xi, zi, head_sel)?;
    Ok(tape.value(out).clone())
}

/// Forward pass of a single sample, returning its K−1 logits.
pub fn forward(
    params: &ModelParams,
    cfg: &BackboneConfig,
    x: &[f64],
    z: Option<&[f64]>,
    head: Option<usize>,
) -> Result<Vec<f64>> {
    let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
    let zt = match z {
        Some(z) => Some(crate::latent::repeat_code(z, 1)),
        None => None,
    };
    let sel = head.map(|h| vec![h]);
    let out = forward_batch(params, cfg, &xt, zt.as_ref(), sel.as_deref())?;
    Ok(out.data().to_vec())
}
