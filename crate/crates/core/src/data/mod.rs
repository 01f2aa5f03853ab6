//! Labeled EEG feature samples, ingestion, synthetic drift, and split protocols.

mod io;
mod split;
mod synth;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use io::{export_features, import_features, Manifest, FEATURE_MAGIC, FEATURE_VERSION};
pub use split::{make_inter_split, make_intra_split, Role, SplitKind, SplitSpec, INTER_TRAIN_SUBJECTS};
pub use synth::{generate_synthetic_drift, DriftConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feature-matrix shape shared by every sample: electrodes × per-electrode features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub electrodes: usize,
    pub bands: usize,
}

/// One time step of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub subject_id: u32,
    pub session_id: u32,
    pub trial_id: u32,
    /// Position on the session timeline; strictly increasing within a session.
    pub time_index: u32,
    /// `[electrodes × bands]`.
    pub features: Tensor,
    pub label: usize,
}

impl LabeledSample {
    pub fn key(&self) -> (u32, u32, u32, u32) {
        (self.subject_id, self.session_id, self.trial_id, self.time_index)
    }

    pub fn coords(&self) -> String {
        format!(
            "subject {}, session {}, trial {}, t={}",
            self.subject_id, self.session_id, self.trial_id, self.time_index
        )
    }
}

/// An immutable, validated collection of samples sorted by
/// (subject, session, trial, time).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    samples: Vec<LabeledSample>,
    class_names: Vec<String>,
    schema: Schema,
}

/// A borrowed selection of samples from one dataset.
pub type Pool<'a> = Vec<&'a LabeledSample>;

impl DatasetIndex {
    pub fn new(
        mut samples: Vec<LabeledSample>,
        class_names: Vec<String>,
        schema: Schema,
    ) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Schema("dataset declares no classes".into()));
        }
        let shape = [schema.electrodes, schema.bands];
        for s in &samples {
            if s.features.shape() != shape {
                return Err(Error::Schema(format!(
                    "{}: features {:?}, schema {:?}",
                    s.coords(),
                    s.features.shape(),
                    shape
                )));
            }
            if s.label >= class_names.len() {
                return Err(Error::Data {
                    coords: s.coords(),
                    reason: format!("label {} >= {} classes", s.label, class_names.len()),
                });
            }
            if let Some(i) = s.features.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Data {
                    coords: s.coords(),
                    reason: format!("feature {i} is not finite"),
                });
            }
        }
        samples.sort_by_key(LabeledSample::key);
        for w in samples.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if (a.subject_id, a.session_id) == (b.subject_id, b.session_id)
                && a.time_index >= b.time_index
            {
                return Err(Error::Data {
                    coords: b.coords(),
                    reason: format!("time index not increasing (previous {})", a.coords()),
                });
            }
        }
        Ok(Self {
            samples,
            class_names,
            schema,
        })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn schema(&self) -> Schema {
        self.schema
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn subjects(&self) -> Vec<u32> {
        self.samples
            .iter()
            .map(|s| s.subject_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn sessions_of(&self, subject: u32) -> Vec<u32> {
        self.samples
            .iter()
            .filter(|s| s.subject_id == subject)
            .map(|s| s.session_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn all_sessions(&self) -> Vec<u32> {
        self.samples
            .iter()
            .map(|s| s.session_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn select(&self, mut pred: impl FnMut(&LabeledSample) -> bool) -> Pool<'_> {
        self.samples.iter().filter(|s| pred(s)).collect()
    }

    /// All samples of one subject's session, in time order.
    pub fn session_pool(&self, subject: u32, session: u32) -> Pool<'_> {
        self.select(|s| s.subject_id == subject && s.session_id == session)
    }
}

/// Stacks the feature matrices of `samples` into `[B×n×d]`.
pub fn stack_features(samples: &[&LabeledSample]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::dim("cannot stack an empty sample list"))?;
    let shape = first.features.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.features.len());
    for s in samples {
        if s.features.shape() != shape.as_slice() {
            return Err(Error::dim(format!(
                "{}: features {:?} vs {:?}",
                s.coords(),
                s.features.shape(),
                shape
            )));
        }
        data.extend_from_slice(s.features.data());
    }
    Tensor::new(&[samples.len(), shape[0], shape[1]], data)
}

/// Distinct labels present in a pool, ascending.
pub fn labels_in(pool: &[&LabeledSample]) -> Vec<usize> {
    pool.iter()
        .map(|s| s.label)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(subject: u32, session: u32, trial: u32, t: u32, label: usize) -> LabeledSample {
        LabeledSample {
            subject_id: subject,
            session_id: session,
            trial_id: trial,
            time_index: t,
            features: Tensor::full(&[2, 2], t as f64),
            label,
        }
    }

    fn schema() -> Schema {
        Schema {
            electrodes: 2,
            bands: 2,
        }
    }

    #[test]
    fn sorts_chronologically() {
        let ds = DatasetIndex::new(
            vec![sample(1, 1, 2, 3, 0), sample(1, 1, 1, 0, 0), sample(1, 1, 1, 1, 0)],
            vec!["a".into()],
            schema(),
        )
        .unwrap();
        let times: Vec<u32> = ds.samples().iter().map(|s| s.time_index).collect();
        assert_eq!(times, vec![0, 1, 3]);
    }

    #[test]
    fn rejects_time_going_backwards_across_trials() {
        let r = DatasetIndex::new(
            vec![sample(1, 1, 1, 5, 0), sample(1, 1, 2, 2, 0)],
            vec!["a".into()],
            schema(),
        );
        assert!(matches!(r, Err(Error::Data { .. })));
    }

    #[test]
    fn rejects_nan_and_bad_labels() {
        let mut bad = sample(1, 1, 1, 0, 0);
        bad.features.data_mut()[1] = f64::NAN;
        assert!(DatasetIndex::new(vec![bad], vec!["a".into()], schema()).is_err());
        let r = DatasetIndex::new(vec![sample(1, 1, 1, 0, 3)], vec!["a".into()], schema());
        assert!(matches!(r, Err(Error::Data { .. })));
    }

    #[test]
    fn rejects_wrong_feature_shape() {
        let mut s = sample(1, 1, 1, 0, 0);
        s.features = Tensor::zeros(&[3, 2]);
        let r = DatasetIndex::new(vec![s], vec!["a".into()], schema());
        assert!(matches!(r, Err(Error::Schema(_))));
    }
}
