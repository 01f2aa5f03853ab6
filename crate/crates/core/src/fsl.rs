//! Episodic sampling, episode losses and classification, meta-training and the
//! supervised baseline.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{argmax_rows, head_loss, head_scores, BackboneConfig, EpisodeLabels, HeadKind, Model, Trainable};
use crate::data::{stack_features, LabeledSample};
use crate::error::{Error, Result};
use crate::optim::sgd_step;
use crate::tensor::{Fnv1a, ParamGroup, Tensor};

const VALIDATION_SALT: u64 = 0x5eed_0f_7a11d;
const SUPERVISED_SALT: u64 = 0xba5e_11e5;

/// RNG for episode `index` of the stream rooted at `seed`.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// An N-way K-shot episode, stored as indices into the pool it was drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    /// Global class ids, ascending; local label `i` means `classes[i]`.
    pub classes: Vec<usize>,
    pub shot: usize,
    pub queries: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub labels: EpisodeLabels,
    /// Hash of the sampled sample keys, for pairing checks.
    pub digest: u64,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.classes.len()
    }

    pub fn support_samples<'a>(&self, pool: &[&'a LabeledSample]) -> Vec<&'a LabeledSample> {
        self.support.iter().map(|&i| pool[i]).collect()
    }

    pub fn query_samples<'a>(&self, pool: &[&'a LabeledSample]) -> Vec<&'a LabeledSample> {
        self.query.iter().map(|&i| pool[i]).collect()
    }
}

/// Draws `way` classes (uniformly, then sorted) and `shot + queries` distinct
/// samples per class; the first `shot` of each class form the support set.
pub fn sample_episode(
    pool: &[&LabeledSample],
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if way == 0 || shot == 0 || queries == 0 {
        return Err(Error::Sampling(format!(
            "way, shot and queries must be >= 1 (got {way}, {shot}, {queries})"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in pool.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    if by_class.len() < way {
        return Err(Error::Sampling(format!(
            "pool has {} classes, episode needs {way}",
            by_class.len()
        )));
    }
    let mut classes: Vec<usize> = by_class.keys().copied().collect();
    classes.shuffle(rng);
    classes.truncate(way);
    classes.sort_unstable();

    let need = shot + queries;
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries);
    let mut support_labels = Vec::with_capacity(way * shot);
    let mut query_labels = Vec::with_capacity(way * queries);
    for (local, class) in classes.iter().enumerate() {
        let members = &by_class[class];
        if members.len() < need {
            return Err(Error::Sampling(format!(
                "class {class} has {} samples, episode needs {need}",
                members.len()
            )));
        }
        let picks = rand::seq::index::sample(rng, members.len(), need);
        for (j, p) in picks.iter().enumerate() {
            if j < shot {
                support.push(members[p]);
                support_labels.push(local);
            } else {
                query.push(members[p]);
                query_labels.push(local);
            }
        }
    }
    let mut h = Fnv1a::new();
    for &i in support.iter().chain(&query) {
        let (a, b, c, d) = pool[i].key();
        for v in [a, b, c, d] {
            h.write(&v.to_le_bytes());
        }
    }
    Ok(Episode {
        labels: EpisodeLabels {
            way,
            support: support_labels,
            query: query_labels,
        },
        classes,
        shot,
        queries,
        support,
        query,
        digest: h.finish(),
    })
}

/// Copies the listed rows of a `[R×e]` tensor.
pub fn gather_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let [_, e] = *t.shape() else {
        return Err(Error::dim(format!("gather_rows: expected a matrix, got {:?}", t.shape())));
    };
    let mut data = Vec::with_capacity(rows.len() * e);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(&[rows.len(), e], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    /// Local class ids.
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

/// Classifies an episode from precomputed encoder outputs of its pool, using
/// adapter parameters `phi` and the model's head.
pub fn classify_embedded(model: &Model, phi: &ParamGroup, pool_emb: &Tensor, ep: &Episode) -> Result<EpisodeResult> {
    let support = Model::apply_adapter(phi, &gather_rows(pool_emb, &ep.support)?)?;
    let query = Model::apply_adapter(phi, &gather_rows(pool_emb, &ep.query)?)?;
    let g = Graph::new();
    let w = g.bind_group(&model.w, false);
    let scores = head_scores(
        &model.config,
        &w,
        g.leaf(&support),
        &ep.labels.support,
        g.leaf(&query),
        ep.way(),
    )?
    .value();
    let predictions = argmax_rows(&scores)?;
    let correct = predictions
        .iter()
        .zip(&ep.labels.query)
        .filter(|(p, y)| p == y)
        .count();
    Ok(EpisodeResult {
        accuracy: correct as f64 / predictions.len() as f64,
        predictions,
    })
}

/// Eval-mode classification of the episode's queries.
pub fn classify_query(ep: &Episode, pool: &[&LabeledSample], model: &Model) -> Result<EpisodeResult> {
    let rows: Vec<usize> = ep.support.iter().chain(&ep.query).copied().collect();
    let samples: Vec<&LabeledSample> = rows.iter().map(|&i| pool[i]).collect();
    let emb = model.embed(&samples)?;
    let ns = ep.support.len();
    let local = Episode {
        support: (0..ns).collect(),
        query: (ns..rows.len()).collect(),
        ..ep.clone()
    };
    classify_embedded(model, &model.phi, &emb, &local)
}

/// Eval-mode episode loss value.
pub fn episode_loss(ep: &Episode, pool: &[&LabeledSample], model: &Model) -> Result<f64> {
    let g = Graph::new();
    let bound = model.bind(&g, Trainable::NONE);
    let mut m = model.clone();
    let loss = episode_loss_graph(&g, &mut m, &bound, ep, pool, false)?;
    Ok(loss.item())
}

fn episode_loss_graph<'g>(
    g: &'g Graph,
    model: &mut Model,
    bound: &crate::backbone::BoundParams<'g>,
    ep: &Episode,
    pool: &[&LabeledSample],
    train: bool,
) -> Result<crate::autograd::Var<'g>> {
    if !model.config.head_kind.is_episodic() {
        return Err(Error::config("episode loss needs a few-shot head"));
    }
    let mut samples = ep.support_samples(pool);
    samples.extend(ep.query_samples(pool));
    let x = g.constant(stack_features(&samples)?);
    let emb = model.forward(bound, x, train)?;
    let ns = ep.support.len();
    let support = emb.slice_rows(0, ns)?;
    let query = emb.slice_rows(ns, samples.len())?;
    head_loss(&model.config, &bound.w, support, query, &ep.labels)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub accuracies: Vec<f64>,
    pub digests: Vec<u64>,
    pub mean: f64,
    pub std: f64,
}

impl EvalSummary {
    pub fn from_parts(accuracies: Vec<f64>, digests: Vec<u64>) -> Self {
        let (mean, std) = mean_std(&accuracies);
        Self {
            accuracies,
            digests,
            mean,
            std,
        }
    }

    pub fn episodes(&self) -> usize {
        self.accuracies.len()
    }
}

/// Episode shape for an evaluation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
}

/// Plain few-shot evaluation over `episodes` episodes drawn with [`episode_rng`].
pub fn evaluate_fsl(
    model: &Model,
    pool: &[&LabeledSample],
    shape: EpisodeShape,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    let emb = model.embed(pool)?;
    let results: Vec<(f64, u64)> = (0..episodes as u64)
        .into_par_iter()
        .map(|i| {
            let ep = sample_episode(pool, shape.way, shape.shot, shape.queries, &mut episode_rng(seed, i))?;
            let r = classify_embedded(model, &model.phi, &emb, &ep)?;
            Ok((r.accuracy, ep.digest))
        })
        .collect::<Result<_>>()?;
    let (acc, dig) = results.into_iter().unzip();
    Ok(EvalSummary::from_parts(acc, dig))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub head_kind: HeadKind,
    pub episodes_per_epoch: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub validation_episodes: usize,
    pub rng_seed: u64,
    /// Supervised baseline minibatch size.
    pub batch_size: usize,
    pub supervised_epochs: usize,
    /// Supervised baseline learning rate.
    pub supervised_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            head_kind: HeadKind::Proto,
            episodes_per_epoch: 50,
            max_epochs: 30,
            learning_rate: 0.03,
            way: 3,
            shot: 1,
            queries: 10,
            validation_episodes: 50,
            rng_seed: 0,
            batch_size: 32,
            supervised_epochs: 100,
            supervised_learning_rate: 0.003,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("way", self.way),
            ("shot", self.shot),
            ("queries", self.queries),
            ("validation_episodes", self.validation_episodes),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("train config: {name} must be >= 1")));
        }
        for (name, lr) in [
            ("learning_rate", self.learning_rate),
            ("supervised_learning_rate", self.supervised_learning_rate),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::config(format!("train config: {name} must be > 0, got {lr}")));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> EpisodeShape {
        EpisodeShape {
            way: self.way,
            shot: self.shot,
            queries: self.queries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Epoch of the returned snapshot; 0 is the initialization.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub log: Vec<EpochLog>,
}

fn check_loss(value: f64, epoch: usize, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("training loss {value} at epoch {epoch}, step {step}")))
    }
}

/// Episodic training with one SGD step on every parameter group per episode.
/// Validation accuracy is measured on the same episodes after every epoch, and
/// the best snapshot (ties keep the earlier one) is returned.
pub fn meta_train(
    train_pool: &[&LabeledSample],
    val_pool: &[&LabeledSample],
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let backbone = BackboneConfig {
        head_kind: cfg.head_kind,
        ..backbone.clone()
    };
    if !backbone.head_kind.is_episodic() {
        return Err(Error::config("meta_train needs a few-shot head"));
    }
    let mut model = Model::new(backbone, cfg.rng_seed)?;
    let val_seed = cfg.rng_seed ^ VALIDATION_SALT;
    let validate = |m: &Model| -> Result<f64> {
        Ok(evaluate_fsl(m, val_pool, cfg.shape(), cfg.validation_episodes, val_seed)?.mean)
    };
    let mut best = (model.clone(), 0usize, validate(&model)?);
    let mut log = Vec::with_capacity(cfg.max_epochs);
    let mut counter = 0u64;
    for epoch in 1..=cfg.max_epochs {
        let mut total = 0.0;
        for step in 0..cfg.episodes_per_epoch {
            let ep = sample_episode(train_pool, cfg.way, cfg.shot, cfg.queries, &mut episode_rng(cfg.rng_seed, counter))?;
            counter += 1;
            let g = Graph::new();
            let bound = model.bind(&g, Trainable::ALL);
            let loss = episode_loss_graph(&g, &mut model, &bound, &ep, train_pool, true)?;
            let value = loss.item();
            check_loss(value, epoch, step)?;
            total += value;
            let grads = g.backward(loss)?;
            grads.write_into(&bound.theta, &mut model.theta)?;
            grads.write_into(&bound.phi, &mut model.phi)?;
            grads.write_into(&bound.w, &mut model.w)?;
            sgd_step(&mut model.theta, cfg.learning_rate)?;
            sgd_step(&mut model.phi, cfg.learning_rate)?;
            sgd_step(&mut model.w, cfg.learning_rate)?;
        }
        let val_accuracy = validate(&model)?;
        let mean_loss = total / cfg.episodes_per_epoch as f64;
        log::debug!("epoch {epoch}: loss {mean_loss:.4}, val acc {val_accuracy:.4}");
        log.push(EpochLog {
            epoch,
            mean_loss,
            val_accuracy,
        });
        if val_accuracy > best.2 {
            best = (model.clone(), epoch, val_accuracy);
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        best_epoch: best.1,
        best_val_accuracy: best.2,
        log,
    })
}

/// Fraction of samples whose argmax class (linear head) equals the label.
pub fn supervised_accuracy(model: &Model, pool: &[&LabeledSample]) -> Result<f64> {
    if model.config.head_kind != HeadKind::Linear {
        return Err(Error::config("supervised_accuracy needs the linear head"));
    }
    if pool.is_empty() {
        return Err(Error::Argument("supervised_accuracy: empty pool".into()));
    }
    let emb = Model::apply_adapter(&model.phi, &model.embed(pool)?)?;
    let g = Graph::new();
    let w = g.bind_group(&model.w, false);
    let e = g.leaf(&emb);
    let scores = head_scores(&model.config, &w, e, &[], e, model.config.num_classes)?.value();
    let preds = argmax_rows(&scores)?;
    let correct = preds.iter().zip(pool).filter(|(p, s)| **p == s.label).count();
    Ok(correct as f64 / pool.len() as f64)
}

/// Minibatch cross-entropy training of the backbone with a linear classifier over
/// all `backbone.num_classes` classes. Uses `supervised_epochs`, `batch_size` and
/// `supervised_learning_rate`; the best-validation snapshot is returned.
pub fn train_supervised_baseline(
    train_pool: &[&LabeledSample],
    val_pool: &[&LabeledSample],
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_pool.is_empty() {
        return Err(Error::Argument("supervised baseline: empty training pool".into()));
    }
    let backbone = BackboneConfig {
        head_kind: HeadKind::Linear,
        ..backbone.clone()
    };
    if let Some(s) = train_pool.iter().chain(val_pool).find(|s| s.label >= backbone.num_classes) {
        return Err(Error::config(format!(
            "label {} at {} exceeds num_classes {}",
            s.label,
            s.coords(),
            backbone.num_classes
        )));
    }
    let mut model = Model::new(backbone, cfg.rng_seed)?;
    let mut best = (model.clone(), 0usize, supervised_accuracy(&model, val_pool)?);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ SUPERVISED_SALT);
    let mut order: Vec<usize> = (0..train_pool.len()).collect();
    let mut log = Vec::with_capacity(cfg.supervised_epochs);
    for epoch in 1..=cfg.supervised_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            // A one-sample batch gives degenerate batch statistics.
            if idx.len() < 2 && order.len() >= 2 {
                continue;
            }
            let batch: Vec<&LabeledSample> = idx.iter().map(|&i| train_pool[i]).collect();
            let g = Graph::new();
            let bound = model.bind(&g, Trainable::ALL);
            let x = g.constant(stack_features(&batch)?);
            let emb = model.forward(&bound, x, true)?;
            let labels = EpisodeLabels {
                way: model.config.num_classes,
                support: vec![],
                query: batch.iter().map(|s| s.label).collect(),
            };
            let loss = head_loss(&model.config, &bound.w, emb, emb, &labels)?;
            let value = loss.item();
            check_loss(value, epoch, step)?;
            total += value;
            batches += 1;
            let grads = g.backward(loss)?;
            grads.write_into(&bound.theta, &mut model.theta)?;
            grads.write_into(&bound.phi, &mut model.phi)?;
            grads.write_into(&bound.w, &mut model.w)?;
            sgd_step(&mut model.theta, cfg.supervised_learning_rate)?;
            sgd_step(&mut model.phi, cfg.supervised_learning_rate)?;
            sgd_step(&mut model.w, cfg.supervised_learning_rate)?;
        }
        let val_accuracy = supervised_accuracy(&model, val_pool)?;
        log.push(EpochLog {
            epoch,
            mean_loss: total / batches.max(1) as f64,
            val_accuracy,
        });
        if val_accuracy > best.2 {
            best = (model.clone(), epoch, val_accuracy);
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        best_epoch: best.1,
        best_val_accuracy: best.2,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_drift, DatasetIndex, DriftConfig};

    fn dataset() -> DatasetIndex {
        generate_synthetic_drift(&DriftConfig {
            trials_per_session: 6,
            samples_per_trial: 10,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn episode_counts() {
        let ds = dataset();
        let pool = ds.session_pool(1, 1);
        let ep = sample_episode(&pool, 3, 1, 10, &mut episode_rng(0, 0)).unwrap();
        assert_eq!((ep.support.len(), ep.query.len()), (3, 30));
        assert_eq!(ep.classes, vec![0, 1, 2]);
        for (&i, &l) in ep.support.iter().zip(&ep.labels.support) {
            assert_eq!(pool[i].label, ep.classes[l]);
        }
    }

    #[test]
    fn short_class_is_named() {
        let ds = dataset();
        let pool = ds.session_pool(1, 1);
        // 20 samples per class
        let err = sample_episode(&pool, 3, 5, 16, &mut episode_rng(0, 0)).unwrap_err();
        assert!(matches!(&err, Error::Sampling(m) if m.contains("class 0")), "{err}");
        assert!(sample_episode(&pool, 3, 5, 15, &mut episode_rng(0, 0)).is_ok());
    }

    #[test]
    fn episode_streams_are_reproducible() {
        let ds = dataset();
        let pool = ds.session_pool(1, 2);
        let a = sample_episode(&pool, 2, 2, 3, &mut episode_rng(7, 4)).unwrap();
        let b = sample_episode(&pool, 2, 2, 3, &mut episode_rng(7, 4)).unwrap();
        let c = sample_episode(&pool, 2, 2, 3, &mut episode_rng(7, 5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.digest, c.digest);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let ds = dataset();
        let cfg = TrainConfig {
            max_epochs: 0,
            validation_episodes: 3,
            ..Default::default()
        };
        let backbone = BackboneConfig::compact(6, 4, 3);
        let out = meta_train(&ds.session_pool(1, 1), &ds.session_pool(1, 2), &backbone, &cfg).unwrap();
        assert_eq!(out.model, Model::new(backbone, cfg.rng_seed).unwrap());
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn mean_std_sample_convention() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }

    #[test]
    fn classify_query_matches_embedded_path() {
        let ds = dataset();
        let pool = ds.session_pool(1, 3);
        let model = Model::new(BackboneConfig::compact(6, 4, 3), 3).unwrap();
        let ep = sample_episode(&pool, 3, 2, 4, &mut episode_rng(1, 0)).unwrap();
        let direct = classify_query(&ep, &pool, &model).unwrap();
        let emb = model.embed(&pool).unwrap();
        let cached = classify_embedded(&model, &model.phi, &emb, &ep).unwrap();
        assert_eq!(direct, cached);
        assert!(episode_loss(&ep, &pool, &model).unwrap() >= 0.0);
    }
}
