//! Self-describing binary checkpoints with bit-exact round-trips.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "ADDLECP\0"
//! version u32      (currently 1)
//! kind    u8       0 plain, 1 latent, 2 multi-head, 3 per-rater member
//! meta    u32 len + JSON (architecture + provenance)
//! codes   kind 1 only: R u32, M u32, σ² f64, rater ids, R·M f64
//! tensors u32 count, then per tensor: name, rank u32, dims u64…, f64 data
//! ```
//!
//! Floats are stored as raw little-endian bits, so save → load → save
//! reproduces the file byte for byte. A one-model-per-rater ensemble is
//! a set of member files, one per rater.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ModelParams};
use crate::latent::LatentCodebook;
use crate::model::{FittedModel, ModelKind};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"ADDLECP\0";
const VERSION: u32 = 1;

/// Where a checkpoint came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
    pub epochs_trained: usize,
    pub best_epoch: Option<usize>,
}

/// Mode-specific payload.
#[derive(Clone, Debug, PartialEq)]
pub enum CheckpointKind {
    Baseline,
    Addle { codebook: LatentCodebook },
    MultiHead { num_raters: usize },
    JlslMember { rater: usize },
}

/// One saved model (one file).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub cfg: BackboneConfig,
    pub kind: CheckpointKind,
    pub params: ModelParams,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct MetaBlock {
    backbone: BackboneConfig,
    num_raters: Option<usize>,
    rater_index: Option<usize>,
    provenance: Provenance,
}

fn kind_tag(kind: &CheckpointKind) -> u8 {
    match kind {
        CheckpointKind::Baseline => 0,
        CheckpointKind::Addle { .. } => 1,
        CheckpointKind::MultiHead { .. } => 2,
        CheckpointKind::JlslMember { .. } => 3,
    }
}

/// Named tensors in a deterministic order matching the config structure.
fn tensor_table(params: &ModelParams) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    if let Some((k, b)) = &params.conv {
        out.push(("conv.k".to_string(), k));
        out.push(("conv.b".to_string(), b));
    }
    for (j, (w, b)) in params.layers.iter().enumerate() {
        out.push((format!("layer{}.w", j), w));
        out.push((format!("layer{}.b", j), b));
    }
    for (i, a) in params.inject_mats.iter().enumerate() {
        out.push((format!("inject{}.a", i), a));
    }
    out
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated ({} bytes needed at offset {}, {} available)",
                self.path,
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        let raw = self.bytes()?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: invalid utf-8 string", self.path)))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!(
                "{}: implausible tensor rank {}",
                self.path, rank
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        if n > 100_000_000 {
            return Err(Error::Checkpoint(format!(
                "{}: implausible tensor size {}",
                self.path, n
            )));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        Tensor::new(shape, data)
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.buf.push(kind_tag(&self.kind));

        let meta = MetaBlock {
            backbone: self.cfg.clone(),
            num_raters: match &self.kind {
                CheckpointKind::MultiHead { num_raters } => Some(*num_raters),
                _ => None,
            },
            rater_index: match &self.kind {
                CheckpointKind::JlslMember { rater } => Some(*rater),
                _ => None,
            },
            provenance: self.provenance.clone(),
        };
        w.bytes(&serde_json::to_vec(&meta).expect("meta serializes"));

        if let CheckpointKind::Addle { codebook } = &self.kind {
            w.u32(codebook.num_raters() as u32);
            w.u32(codebook.latent_dim() as u32);
            w.f64(codebook.sigma2);
            for id in &codebook.rater_ids {
                w.bytes(id.as_bytes());
            }
            for &v in codebook.codes.data() {
                w.f64(v);
            }
        }

        let table = tensor_table(&self.params);
        w.u32(table.len() as u32);
        for (name, t) in table {
            w.bytes(name.as_bytes());
            w.tensor(t);
        }
        w.buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn decode(buf: &[u8], origin: &str) -> Result<Checkpoint> {
        let mut r = Reader {
            buf,
            pos: 0,
            path: origin.to_string(),
        };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(format!("{}: not a checkpoint file", origin)));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {} (expected {})",
                origin, version, VERSION
            )));
        }
        let tag = r.take(1)?[0];
        let meta: MetaBlock = serde_json::from_slice(r.bytes()?)
            .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {}", origin, e)))?;
        let cfg = meta.backbone;
        cfg.validate()
            .map_err(|e| Error::Checkpoint(format!("{}: {}", origin, e)))?;

        let kind = match tag {
            0 => CheckpointKind::Baseline,
            1 => {
                let raters = r.u32()? as usize;
                let dim = r.u32()? as usize;
                let sigma2 = r.f64()?;
                let mut rater_ids = Vec::with_capacity(raters);
                for _ in 0..raters {
                    rater_ids.push(r.string()?);
                }
                let mut data = Vec::with_capacity(raters * dim);
                for _ in 0..raters * dim {
                    data.push(r.f64()?);
                }
                let codebook = LatentCodebook {
                    codes: Tensor::new(vec![raters, dim], data)?,
                    sigma2,
                    rater_ids,
                };
                codebook
                    .validate()
                    .map_err(|e| Error::Checkpoint(format!("{}: {}", origin, e)))?;
                CheckpointKind::Addle { codebook }
            }
            2 => CheckpointKind::MultiHead {
                num_raters: meta.num_raters.ok_or_else(|| {
                    Error::Checkpoint(format!("{}: multi-head checkpoint lacks rater count", origin))
                })?,
            },
            3 => CheckpointKind::JlslMember {
                rater: meta.rater_index.ok_or_else(|| {
                    Error::Checkpoint(format!("{}: member checkpoint lacks rater index", origin))
                })?,
            },
            other => {
                return Err(Error::Checkpoint(format!(
                    "{}: unknown model kind {}",
                    origin, other
                )))
            }
        };

        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            named.push((name, r.tensor()?));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{}: {} trailing bytes",
                origin,
                buf.len() - r.pos
            )));
        }

        let params = assemble_params(&cfg, named, origin)?;
        Ok(Checkpoint {
            cfg,
            kind,
            params,
            provenance: meta.provenance,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&buf, &path.display().to_string())
    }
}

fn assemble_params(
    cfg: &BackboneConfig,
    named: Vec<(String, Tensor)>,
    origin: &str,
) -> Result<ModelParams> {
    let mut map: std::collections::HashMap<String, Tensor> = named.into_iter().collect();
    let mut take = |name: String| -> Result<Tensor> {
        map.remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing tensor {}", origin, name)))
    };
    let conv = if cfg.conv.is_some() {
        Some((take("conv.k".into())?, take("conv.b".into())?))
    } else {
        None
    };
    let mut layers = Vec::with_capacity(cfg.hidden.len() + 1);
    for j in 0..cfg.hidden.len() + 1 {
        layers.push((take(format!("layer{}.w", j))?, take(format!("layer{}.b", j))?));
    }
    let mut inject_mats = Vec::with_capacity(cfg.injections.len());
    for i in 0..cfg.injections.len() {
        inject_mats.push(take(format!("inject{}.a", i))?);
    }
    if !map.is_empty() {
        let mut extra: Vec<String> = map.into_keys().collect();
        extra.sort();
        return Err(Error::Checkpoint(format!(
            "{}: unexpected tensors {:?}",
            origin, extra
        )));
    }
    let params = ModelParams {
        conv,
        layers,
        inject_mats,
    };
    // shape self-consistency against the declared architecture
    let expect = cfg.dense_dims();
    for (j, ((w, b), &(din, dout))) in params.layers.iter().zip(&expect).enumerate() {
        if w.shape() != [din, dout] || b.shape() != [dout] {
            return Err(Error::Checkpoint(format!(
                "{}: layer {} has shape {:?}/{:?}, config wants {}×{}",
                origin,
                j,
                w.shape(),
                b.shape(),
                din,
                dout
            )));
        }
    }
    for (i, (a, p)) in params.inject_mats.iter().zip(&cfg.injections).enumerate() {
        let channels = cfg.stack_output_channels(p.layer)?;
        if a.shape() != [channels, cfg.latent_dim] {
            return Err(Error::Checkpoint(format!(
                "{}: mixing matrix {} has shape {:?}, config wants {}×{}",
                origin,
                i,
                a.shape(),
                channels,
                cfg.latent_dim
            )));
        }
    }
    if !params.is_finite() {
        return Err(Error::Checkpoint(format!("{}: non-finite parameter", origin)));
    }
    Ok(params)
}

/// Splits a fitted model into its checkpoint files: one for single-model
/// modes, one per rater for the per-rater ensemble.
pub fn from_fitted(model: &FittedModel, provenance: &Provenance) -> Vec<(Option<usize>, Checkpoint)> {
    match &model.kind {
        ModelKind::Baseline { params } => vec![(
            None,
            Checkpoint {
                cfg: model.cfg.clone(),
                kind: CheckpointKind::Baseline,
                params: params.clone(),
                provenance: provenance.clone(),
            },
        )],
        ModelKind::Addle { params, codebook } => vec![(
            None,
            Checkpoint {
                cfg: model.cfg.clone(),
                kind: CheckpointKind::Addle {
                    codebook: codebook.clone(),
                },
                params: params.clone(),
                provenance: provenance.clone(),
            },
        )],
        ModelKind::MultiHead { params, num_raters } => vec![(
            None,
            Checkpoint {
                cfg: model.cfg.clone(),
                kind: CheckpointKind::MultiHead {
                    num_raters: *num_raters,
                },
                params: params.clone(),
                provenance: provenance.clone(),
            },
        )],
        ModelKind::Jlsl { models } => models
            .iter()
            .enumerate()
            .map(|(r, params)| {
                (
                    Some(r),
                    Checkpoint {
                        cfg: model.cfg.clone(),
                        kind: CheckpointKind::JlslMember { rater: r },
                        params: params.clone(),
                        provenance: provenance.clone(),
                    },
                )
            })
            .collect(),
    }
}

/// Rebuilds a fitted model from its checkpoint files. Member checkpoints
/// must cover raters 0..R exactly once (any order).
pub fn assemble(mut checkpoints: Vec<Checkpoint>) -> Result<FittedModel> {
    match checkpoints.len() {
        0 => Err(Error::Checkpoint("assemble: no checkpoints given".into())),
        1 if !matches!(checkpoints[0].kind, CheckpointKind::JlslMember { .. }) => {
            let c = checkpoints.pop().unwrap();
            let kind = match c.kind {
                CheckpointKind::Baseline => ModelKind::Baseline { params: c.params },
                CheckpointKind::Addle { codebook } => ModelKind::Addle {
                    params: c.params,
                    codebook,
                },
                CheckpointKind::MultiHead { num_raters } => ModelKind::MultiHead {
                    params: c.params,
                    num_raters,
                },
                CheckpointKind::JlslMember { .. } => unreachable!(),
            };
            Ok(FittedModel { cfg: c.cfg, kind })
        }
        n => {
            let cfg = checkpoints[0].cfg.clone();
            let mut members: Vec<Option<ModelParams>> = vec![None; n];
            for c in checkpoints {
                let rater = match c.kind {
                    CheckpointKind::JlslMember { rater } => rater,
                    _ => {
                        return Err(Error::Checkpoint(
                            "assemble: mixed checkpoint kinds".into(),
                        ))
                    }
                };
                if c.cfg != cfg {
                    return Err(Error::Checkpoint(
                        "assemble: member architectures disagree".into(),
                    ));
                }
                if rater >= n || members[rater].is_some() {
                    return Err(Error::Checkpoint(format!(
                        "assemble: bad or duplicate rater index {}",
                        rater
                    )));
                }
                members[rater] = Some(c.params);
            }
            let models = members
                .into_iter()
                .map(|m| m.ok_or_else(|| Error::Checkpoint("assemble: missing member".into())))
                .collect::<Result<Vec<_>>>()?;
            Ok(FittedModel {
                cfg,
                kind: ModelKind::Jlsl { models },
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_params;
    use crate::latent::{init_codes, InjectionMode, InjectionPoint};
    use crate::rng::{stream, Stage};

    fn sample_checkpoint() -> Checkpoint {
        let cfg = BackboneConfig {
            input_dim: 6,
            hidden: vec![5, 4],
            num_classes: 4,
            latent_dim: 3,
            injections: vec![InjectionPoint {
                layer: 1,
                mode: InjectionMode::Dense,
            }],
            conv: Some(crate::backbone::ConvFrontEnd {
                channels: 2,
                kernel: 3,
            }),
            heads: 1,
        };
        let mut cfg = cfg;
        cfg.injections[0].layer = 2; // dense layer after the conv front end
        let params = init_params(&cfg, &mut stream(41, Stage::ParamInit, 0)).unwrap();
        let codebook = init_codes(4, 3, 1.0, &mut stream(41, Stage::CodeInit, 0)).unwrap();
        Checkpoint {
            cfg,
            kind: CheckpointKind::Addle { codebook },
            params,
            provenance: Provenance {
                config_hash: "abc123".into(),
                master_seed: 41,
                epochs_trained: 7,
                best_epoch: Some(5),
            },
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, loaded);
        let again = dir.path().join("again.ckpt");
        loaded.save(&again).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&again).unwrap()
        );
    }

    #[test]
    fn truncation_is_rejected_cleanly() {
        let bytes = sample_checkpoint().encode();
        for cut in [0, 5, 8, 13, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::decode(&bytes[..cut], "test").unwrap_err();
            assert!(
                matches!(err, Error::Checkpoint(_)),
                "cut {}: {:?}",
                cut,
                err
            );
        }
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(Checkpoint::decode(&padded, "test").is_err());
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let mut bytes = sample_checkpoint().encode();
        bytes[0] = b'X';
        assert!(Checkpoint::decode(&bytes, "test").is_err());

        let mut bytes = sample_checkpoint().encode();
        bytes[8] = 9; // version
        let err = Checkpoint::decode(&bytes, "test").unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn ensemble_round_trips_through_member_files() {
        let cfg = BackboneConfig {
            input_dim: 4,
            hidden: vec![5],
            num_classes: 3,
            latent_dim: 0,
            injections: vec![],
            conv: None,
            heads: 1,
        };
        let models: Vec<ModelParams> = (0..3)
            .map(|r| init_params(&cfg, &mut stream(7, Stage::ParamInit, r)).unwrap())
            .collect();
        let fitted = FittedModel {
            cfg,
            kind: ModelKind::Jlsl {
                models: models.clone(),
            },
        };
        let prov = Provenance {
            config_hash: "h".into(),
            master_seed: 7,
            epochs_trained: 1,
            best_epoch: None,
        };
        let parts = from_fitted(&fitted, &prov);
        assert_eq!(parts.len(), 3);
        // scramble order, re-assemble
        let ckpts: Vec<Checkpoint> = parts.into_iter().rev().map(|(_, c)| c).collect();
        let back = assemble(ckpts).unwrap();
        assert_eq!(back, fitted);
    }
}
