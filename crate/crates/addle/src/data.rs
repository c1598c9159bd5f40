//! Dataset records and their on-disk formats.
//!
//! A dataset is a flat list of samples, each carrying exactly one rater's
//! subjective label. The CSV layout is
//! `sample_id,group_id,rater_id,label,true_label,f0,...,f{D-1}` with
//! floats printed to 17 significant digits so round-trips are lossless.
//! The `true_label` column is optional and is only ever consumed by
//! evaluation, never by training. A companion key-value metadata file
//! records the dimensions and generator settings.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// One labelled sample: features, the rater who labelled it, the label
/// it received, and (for evaluation only) the generator's true label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: u64,
    pub group_id: u64,
    pub rater: usize,
    pub label: usize,
    pub true_label: Option<usize>,
    pub features: Vec<f64>,
}

/// A dataset plus the dimensions needed to interpret it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_features: usize,
    pub num_classes: usize,
    pub num_raters: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Dataset("need at least 2 classes".into()));
        }
        for s in &self.samples {
            if s.rater >= self.num_raters {
                return Err(Error::Dataset(format!(
                    "sample {}: rater {} out of {} raters",
                    s.sample_id, s.rater, self.num_raters
                )));
            }
            if s.label >= self.num_classes {
                return Err(Error::Dataset(format!(
                    "sample {}: label {} out of {} classes",
                    s.sample_id, s.label, self.num_classes
                )));
            }
            if let Some(t) = s.true_label {
                if t >= self.num_classes {
                    return Err(Error::Dataset(format!(
                        "sample {}: true label {} out of {} classes",
                        s.sample_id, t, self.num_classes
                    )));
                }
            }
            if s.features.len() != self.num_features {
                return Err(Error::Dataset(format!(
                    "sample {}: {} features, expected {}",
                    s.sample_id,
                    s.features.len(),
                    self.num_features
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Dataset(format!(
                    "sample {}: non-finite feature",
                    s.sample_id
                )));
            }
        }
        Ok(())
    }

    /// Indices of all samples labelled by rater `r`, in dataset order.
    pub fn rater_indices(&self, r: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.rater == r)
            .map(|(i, _)| i)
            .collect()
    }

    /// Feature matrix of the selected samples (B×D).
    pub fn features_tensor(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.num_features);
        for &i in idx {
            data.extend_from_slice(&self.samples[i].features);
        }
        Tensor::new(vec![idx.len(), self.num_features], data).expect("rectangular by invariant")
    }

    /// Feature matrix of every sample.
    pub fn all_features(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.features_tensor(&idx)
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].label).collect()
    }

    pub fn raters(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].rater).collect()
    }

    /// Group ids in order of first appearance.
    pub fn group_order(&self) -> Vec<u64> {
        let mut seen = HashMap::new();
        let mut order = Vec::new();
        for s in &self.samples {
            if seen.insert(s.group_id, ()).is_none() {
                order.push(s.group_id);
            }
        }
        order
    }

    /// True (gold) label per group, in first-appearance order. Fails if
    /// any sample lacks one or groups are inconsistent.
    pub fn group_gold_labels(&self) -> Result<Vec<(u64, usize)>> {
        let mut gold: HashMap<u64, usize> = HashMap::new();
        let mut order = Vec::new();
        for s in &self.samples {
            let t = s.true_label.ok_or_else(|| {
                Error::Dataset(format!("sample {} has no true label", s.sample_id))
            })?;
            match gold.insert(s.group_id, t) {
                None => order.push(s.group_id),
                Some(prev) if prev != t => {
                    return Err(Error::Dataset(format!(
                        "group {} has inconsistent true labels",
                        s.group_id
                    )));
                }
                _ => {}
            }
        }
        Ok(order.into_iter().map(|g| (g, gold[&g])).collect())
    }

    /// Splits by group so no group straddles a split. Fractions must be
    /// positive and sum to 1; assignment shuffles groups with `rng`.
    pub fn split_by_group(
        &self,
        fractions: &[f64],
        rng: &mut impl rand::Rng,
    ) -> Result<Vec<Dataset>> {
        if fractions.iter().any(|&f| f <= 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be positive and sum to 1, got {:?}",
                fractions
            )));
        }
        let mut groups = self.group_order();
        groups.shuffle(rng);
        let g = groups.len();
        let mut counts: Vec<usize> = fractions.iter().map(|f| (f * g as f64).round() as usize).collect();
        let assigned: usize = counts.iter().sum();
        // push the rounding remainder into the largest split
        let largest = fractions
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        counts[largest] = (counts[largest] + g).saturating_sub(assigned);
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::InvalidArgument(format!(
                "split of {} groups leaves an empty part (counts {:?})",
                g, counts
            )));
        }

        let mut part_of: HashMap<u64, usize> = HashMap::new();
        let mut cursor = 0;
        for (part, &count) in counts.iter().enumerate() {
            for &gid in &groups[cursor..cursor + count] {
                part_of.insert(gid, part);
            }
            cursor += count;
        }
        let mut out: Vec<Dataset> = (0..fractions.len())
            .map(|_| Dataset {
                samples: Vec::new(),
                num_features: self.num_features,
                num_classes: self.num_classes,
                num_raters: self.num_raters,
            })
            .collect();
        for s in &self.samples {
            out[part_of[&s.group_id]].samples.push(s.clone());
        }
        Ok(out)
    }

    /// Writes the dataset CSV with 17-significant-digit floats.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec![
            "sample_id".to_string(),
            "group_id".to_string(),
            "rater_id".to_string(),
            "label".to_string(),
            "true_label".to_string(),
        ];
        header.extend((0..self.num_features).map(|i| format!("f{}", i)));
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for s in &self.samples {
            let mut rec = vec![
                s.sample_id.to_string(),
                s.group_id.to_string(),
                s.rater.to_string(),
                s.label.to_string(),
                s.true_label.map(|t| t.to_string()).unwrap_or_default(),
            ];
            rec.extend(s.features.iter().map(|v| format_float(*v)));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a dataset CSV; `num_classes`/`num_raters` come from the
    /// companion metadata.
    pub fn read_csv(path: &Path, num_classes: usize, num_raters: usize) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
        let fixed = ["sample_id", "group_id", "rater_id", "label", "true_label"];
        for (i, name) in fixed.iter().enumerate() {
            if headers.get(i) != Some(name) {
                return Err(Error::Dataset(format!(
                    "{}: expected column {} to be '{}', found '{}'",
                    path.display(),
                    i,
                    name,
                    headers.get(i).unwrap_or("<missing>")
                )));
            }
        }
        let num_features = headers.len() - fixed.len();
        let mut samples = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let field = |i: usize| -> Result<&str> {
                rec.get(i).ok_or_else(|| {
                    Error::Dataset(format!("{} row {}: missing field {}", path.display(), line, i))
                })
            };
            let parse = |i: usize| -> Result<u64> {
                field(i)?.parse().map_err(|_| {
                    Error::Dataset(format!(
                        "{} row {}: bad integer '{}'",
                        path.display(),
                        line,
                        rec.get(i).unwrap_or("")
                    ))
                })
            };
            let true_label = match field(4)? {
                "" => None,
                s => Some(s.parse::<usize>().map_err(|_| {
                    Error::Dataset(format!("{} row {}: bad true_label '{}'", path.display(), line, s))
                })?),
            };
            let mut features = Vec::with_capacity(num_features);
            for i in fixed.len()..headers.len() {
                features.push(field(i)?.parse::<f64>().map_err(|_| {
                    Error::Dataset(format!(
                        "{} row {}: bad float '{}'",
                        path.display(),
                        line,
                        rec.get(i).unwrap_or("")
                    ))
                })?);
            }
            samples.push(Sample {
                sample_id: parse(0)?,
                group_id: parse(1)?,
                rater: parse(2)? as usize,
                label: parse(3)? as usize,
                true_label,
                features,
            });
        }
        let ds = Dataset {
            samples,
            num_features,
            num_classes,
            num_raters,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// 17 significant digits: enough to reproduce any f64 exactly.
pub fn format_float(v: f64) -> String {
    format!("{:.16e}", v)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Dataset(format!("{}: {:?}", path.display(), other)),
    }
}

/// Companion metadata: everything needed to interpret the CSVs and to
/// reproduce the generator run that made them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub num_features: usize,
    pub num_classes: usize,
    pub num_raters: usize,
    pub master_seed: u64,
    pub simulator: crate::sim::SimConfig,
}

impl DatasetMeta {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self)
            .map_err(|e| Error::Dataset(format!("metadata encode: {}", e)))?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<DatasetMeta> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Dataset(format!("metadata parse: {}", e)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stage};

    fn toy_dataset() -> Dataset {
        let mut samples = Vec::new();
        for i in 0..10u64 {
            samples.push(Sample {
                sample_id: i,
                group_id: i / 2,
                rater: (i % 3) as usize,
                label: (i % 4) as usize,
                true_label: Some(((i / 2) % 4) as usize),
                features: vec![i as f64 * 0.1, -(i as f64), 1.0 / (i as f64 + 1.0)],
            });
        }
        Dataset {
            samples,
            num_features: 3,
            num_classes: 4,
            num_raters: 3,
        }
    }

    #[test]
    fn validate_catches_out_of_range() {
        let mut ds = toy_dataset();
        ds.samples[0].rater = 7;
        assert!(ds.validate().is_err());
        let mut ds = toy_dataset();
        ds.samples[0].label = 4;
        assert!(ds.validate().is_err());
    }

    #[test]
    fn rater_indices_partition_the_dataset() {
        let ds = toy_dataset();
        let mut total = 0;
        for r in 0..3 {
            let idx = ds.rater_indices(r);
            assert!(idx.iter().all(|&i| ds.samples[i].rater == r));
            total += idx.len();
        }
        assert_eq!(total, ds.len());
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let mut ds = toy_dataset();
        // awkward floats on purpose
        ds.samples[1].features[0] = std::f64::consts::PI;
        ds.samples[2].features[2] = 1.0 / 3.0;
        ds.samples[3].features[1] = -1.2345678912345678e-210;
        ds.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path, 4, 3).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn csv_preserves_missing_true_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let mut ds = toy_dataset();
        ds.samples[4].true_label = None;
        ds.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path, 4, 3).unwrap();
        assert_eq!(ds, back);
        assert!(back.group_gold_labels().is_err());
    }

    #[test]
    fn empty_dataset_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        let ds = Dataset {
            samples: Vec::new(),
            num_features: 2,
            num_classes: 4,
            num_raters: 1,
        };
        ds.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("sample_id,group_id,rater_id,label,true_label,f0,f1"));
        let back = Dataset::read_csv(&path, 4, 1).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn group_gold_labels_in_first_appearance_order() {
        let ds = toy_dataset();
        let gold = ds.group_gold_labels().unwrap();
        assert_eq!(gold.len(), 5);
        assert_eq!(gold[0], (0, 0));
        assert_eq!(gold[1], (1, 1));
    }

    #[test]
    fn split_keeps_groups_whole_and_is_exhaustive() {
        let ds = toy_dataset();
        let parts = ds
            .split_by_group(&[0.4, 0.2, 0.2, 0.2], &mut stream(5, Stage::Split, 0))
            .unwrap();
        assert_eq!(parts.iter().map(Dataset::len).sum::<usize>(), ds.len());
        for p in &parts {
            for s in &p.samples {
                // both members of each group land in the same part
                assert!(p.samples.iter().filter(|t| t.group_id == s.group_id).count() == 2);
            }
        }
        // deterministic per seed
        let parts2 = ds
            .split_by_group(&[0.4, 0.2, 0.2, 0.2], &mut stream(5, Stage::Split, 0))
            .unwrap();
        assert_eq!(parts[0], parts2[0]);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = toy_dataset();
        assert!(ds.split_by_group(&[0.5, 0.6], &mut stream(0, Stage::Split, 0)).is_err());
        assert!(ds.split_by_group(&[1.0, 0.0], &mut stream(0, Stage::Split, 0)).is_err());
    }
}
