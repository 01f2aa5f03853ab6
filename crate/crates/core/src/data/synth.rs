//! Synthetic drifting EEG features.
//!
//! Sample mean for subject `s`, class `k` at time `t`:
//!
//! ```text
//! baseline + μ_k + offset_s + intra_drift_rate · t · direction_s
//! ```
//!
//! where `t` is measured in sessions (`t = session - 1 + position / session_length`),
//! so session 3 sits two units of drift away from the start of session 1. Class
//! means are orthogonal with pairwise distance `class_separation` whenever
//! `num_classes <= electrodes * bands`. Gaussian noise with `noise_std` is added per
//! feature. Random draws never depend on the drift/offset/noise magnitudes, so two
//! configs differing only in those share every underlying draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetIndex, LabeledSample, Schema};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    pub num_subjects: usize,
    pub num_sessions: usize,
    pub trials_per_session: usize,
    pub samples_per_trial: usize,
    pub num_classes: usize,
    pub n_electrodes: usize,
    pub d_bands: usize,
    pub class_separation: f64,
    /// Mean shift per session-length of time.
    pub intra_drift_rate: f64,
    pub inter_subject_offset_scale: f64,
    pub noise_std: f64,
    /// Constant added to every feature, like the positive level of log-power features.
    pub feature_baseline: f64,
    pub rng_seed: u64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            num_subjects: 1,
            num_sessions: 3,
            trials_per_session: 15,
            samples_per_trial: 40,
            num_classes: 3,
            n_electrodes: 6,
            d_bands: 4,
            class_separation: 5.0,
            intra_drift_rate: 0.0,
            inter_subject_offset_scale: 0.0,
            noise_std: 1.0,
            feature_baseline: 5.0,
            rng_seed: 0,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_subjects", self.num_subjects),
            ("num_sessions", self.num_sessions),
            ("trials_per_session", self.trials_per_session),
            ("samples_per_trial", self.samples_per_trial),
            ("num_classes", self.num_classes),
            ("n_electrodes", self.n_electrodes),
            ("d_bands", self.d_bands),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("drift config: {name} must be >= 1")));
        }
        let reals = [
            ("class_separation", self.class_separation),
            ("intra_drift_rate", self.intra_drift_rate),
            ("inter_subject_offset_scale", self.inter_subject_offset_scale),
            ("noise_std", self.noise_std),
        ];
        if !self.feature_baseline.is_finite() {
            return Err(Error::config("drift config: feature_baseline must be finite"));
        }
        if let Some((name, v)) = reals.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config(format!(
                "drift config: {name} must be finite and >= 0, got {v}"
            )));
        }
        Ok(())
    }

    fn dim(&self) -> usize {
        self.n_electrodes * self.d_bands
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Orthonormal directions via Gram-Schmidt when they fit, random unit vectors otherwise.
fn class_directions(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> Vec<Vec<f64>> {
    let raw: Vec<Vec<f64>> = (0..k).map(|_| gaussian(rng, dim)).collect();
    if k > dim {
        return raw.into_iter().map(unit).collect();
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for mut v in raw {
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(b).for_each(|(x, bx)| *x -= dot * bx);
        }
        basis.push(unit(v));
    }
    basis
}

/// Generates a labeled dataset with subject offsets and linear-in-time drift.
///
/// Trial `j` (1-based) carries label `(j - 1) % num_classes`. Features are rounded
/// to `f32` precision so the dataset survives export/import unchanged.
pub fn generate_synthetic_drift(cfg: &DriftConfig) -> Result<DatasetIndex> {
    cfg.validate()?;
    let dim = cfg.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    // Orthonormal vectors scaled by sep/√2 are exactly `sep` apart.
    let class_scale = cfg.class_separation / std::f64::consts::SQRT_2;
    let class_means: Vec<Vec<f64>> = class_directions(&mut rng, cfg.num_classes, dim)
        .into_iter()
        .map(|d| d.into_iter().map(|x| x * class_scale).collect())
        .collect();
    let subjects: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.num_subjects)
        .map(|_| {
            let offset = unit(gaussian(&mut rng, dim));
            let drift = unit(gaussian(&mut rng, dim));
            (offset, drift)
        })
        .collect();

    let session_len = (cfg.trials_per_session * cfg.samples_per_trial) as f64;
    let mut samples = Vec::with_capacity(
        cfg.num_subjects * cfg.num_sessions * cfg.trials_per_session * cfg.samples_per_trial,
    );
    for (si, (offset, drift)) in subjects.iter().enumerate() {
        for session in 0..cfg.num_sessions {
            let mut clock = 0u32;
            for trial in 0..cfg.trials_per_session {
                let label = trial % cfg.num_classes;
                for _ in 0..cfg.samples_per_trial {
                    let t = session as f64 + f64::from(clock) / session_len;
                    let noise = gaussian(&mut rng, dim);
                    let data: Vec<f64> = (0..dim)
                        .map(|i| {
                            let v = cfg.feature_baseline
                                + class_means[label][i]
                                + cfg.inter_subject_offset_scale * offset[i]
                                + cfg.intra_drift_rate * t * drift[i]
                                + cfg.noise_std * noise[i];
                            f64::from(v as f32)
                        })
                        .collect();
                    samples.push(LabeledSample {
                        subject_id: si as u32 + 1,
                        session_id: session as u32 + 1,
                        trial_id: trial as u32 + 1,
                        time_index: clock,
                        features: Tensor::new(&[cfg.n_electrodes, cfg.d_bands], data)?,
                        label,
                    });
                    clock += 1;
                }
            }
        }
    }
    let class_names = (0..cfg.num_classes).map(|k| format!("class{k}")).collect();
    DatasetIndex::new(
        samples,
        class_names,
        Schema {
            electrodes: cfg.n_electrodes,
            bands: cfg.d_bands,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_labels() {
        let cfg = DriftConfig {
            num_subjects: 2,
            trials_per_session: 4,
            samples_per_trial: 5,
            ..Default::default()
        };
        let ds = generate_synthetic_drift(&cfg).unwrap();
        assert_eq!(ds.len(), 2 * 3 * 4 * 5);
        assert_eq!(ds.subjects(), vec![1, 2]);
        let trial4: Vec<usize> = ds.select(|s| s.trial_id == 4).iter().map(|s| s.label).collect();
        assert!(trial4.iter().all(|&l| l == 0));
    }

    #[test]
    fn deterministic() {
        let cfg = DriftConfig {
            intra_drift_rate: 1.0,
            rng_seed: 11,
            ..Default::default()
        };
        assert_eq!(
            generate_synthetic_drift(&cfg).unwrap(),
            generate_synthetic_drift(&cfg).unwrap()
        );
    }

    #[test]
    fn class_means_are_separated_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dirs = class_directions(&mut rng, 3, 8);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = dirs[i].iter().zip(&dirs[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let zero = DriftConfig {
            num_classes: 0,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic_drift(&zero), Err(Error::Config(_))));
        let neg = DriftConfig {
            noise_std: -1.0,
            ..Default::default()
        };
        assert!(neg.validate().is_err());
    }
}
