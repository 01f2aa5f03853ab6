//! Test-time adapter alignment.
//!
//! Before each test episode the adapter `φ` is pulled toward the evolving source
//! data: an inner loop takes one MMD step per snapshot (support half vs. target),
//! then an outer step applies the gradient of the mean query-half MMD, evaluated
//! at the inner-loop endpoint, to the starting `φ`. The encoder and head never
//! change, so encoder outputs are computed once per evaluation and only the
//! adapter is differentiated.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{adapt, Model};
use crate::data::{LabeledSample, SplitKind};
use crate::error::{Error, Result};
use crate::fsl::{classify_embedded, episode_rng, gather_rows, sample_episode, EpisodeShape, EvalSummary};
use crate::mmd::{median_heuristic, mmd2, mmd2_value, KernelSpec};
use crate::optim::sgd_step;
use crate::tensor::{ParamGroup, Tensor};

const ADAPT_SALT: u64 = 0xada9_7e57;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelChoice {
    /// `{σ/2, σ, 2σ}` around the median pairwise distance, chosen per run.
    MedianAuto,
    Fixed(KernelSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// Time buckets in the intra-subject protocol.
    pub n_snapshots: usize,
    /// Samples in each half of a snapshot.
    pub snapshot_size: usize,
    pub eta_in: f64,
    pub eta_out: f64,
    pub max_iter: usize,
    /// Extra unlabeled target samples appended to the episode support set.
    pub target_extra: usize,
    /// Upper bound on subject snapshots in the inter-subject protocol; `None` uses
    /// every training subject.
    pub subject_cap: Option<usize>,
    pub kernel: KernelChoice,
    /// Draw fresh snapshots on every iteration instead of once per run.
    pub resample_each_iter: bool,
    /// Carry the adapted `φ` from one episode into the next.
    pub persist: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            n_snapshots: 5,
            snapshot_size: 32,
            eta_in: 1e-2,
            eta_out: 1e-2,
            max_iter: 1,
            target_extra: 0,
            subject_cap: None,
            kernel: KernelChoice::MedianAuto,
            resample_each_iter: true,
            persist: false,
        }
    }
}

impl AdaptConfig {
    /// Learning rates may be zero, which turns adaptation into a no-op.
    pub fn validate(&self) -> Result<()> {
        if self.n_snapshots == 0 || self.snapshot_size == 0 {
            return Err(Error::config("adapt config: n_snapshots and snapshot_size must be >= 1"));
        }
        if self.subject_cap == Some(0) {
            return Err(Error::config("adapt config: subject_cap must be >= 1"));
        }
        for (name, v) in [("eta_in", self.eta_in), ("eta_out", self.eta_out)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("adapt config: {name} must be finite and >= 0, got {v}")));
            }
        }
        if let KernelChoice::Fixed(spec) = &self.kernel {
            KernelSpec::new(spec.bandwidths().to_vec(), spec.weights().to_vec())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotTag {
    /// Bucket index and the position range `[start, end)` on the pool's timeline.
    Time { bucket: usize, start: usize, end: usize },
    Subject(u32),
}

/// Support and query halves, as indices into the source pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub spt: Vec<usize>,
    pub qry: Vec<usize>,
    pub tag: SnapshotTag,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotSet {
    pub snapshots: Vec<Snapshot>,
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }
}

fn split_draw(members: &[usize], size: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let picks = rand::seq::index::sample(rng, members.len(), 2 * size);
    let chosen: Vec<usize> = picks.iter().map(|p| members[p]).collect();
    let (spt, qry) = chosen.split_at(size);
    (spt.to_vec(), qry.to_vec())
}

/// Cuts the pool's timeline (ordered by session, then time index) into
/// `n_snapshots` contiguous, equal buckets and draws both halves from each.
pub fn sample_snapshots_intra(pool: &[&LabeledSample], cfg: &AdaptConfig, rng: &mut ChaCha8Rng) -> Result<SnapshotSet> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by_key(|&i| (pool[i].session_id, pool[i].time_index, pool[i].subject_id));
    let n = cfg.n_snapshots;
    let len = order.len();
    let mut snapshots = Vec::with_capacity(n);
    for bucket in 0..n {
        let (start, end) = (bucket * len / n, (bucket + 1) * len / n);
        if end - start < 2 * cfg.snapshot_size {
            return Err(Error::Sampling(format!(
                "time bucket {bucket} holds {} samples, snapshot needs {}",
                end - start,
                2 * cfg.snapshot_size
            )));
        }
        let (spt, qry) = split_draw(&order[start..end], cfg.snapshot_size, rng);
        snapshots.push(Snapshot {
            spt,
            qry,
            tag: SnapshotTag::Time { bucket, start, end },
        });
    }
    Ok(SnapshotSet { snapshots })
}

/// One snapshot per training subject (or `subject_cap` subjects drawn without
/// replacement), in ascending subject id.
pub fn sample_snapshots_inter(pool: &[&LabeledSample], cfg: &AdaptConfig, rng: &mut ChaCha8Rng) -> Result<SnapshotSet> {
    cfg.validate()?;
    let mut by_subject: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in pool.iter().enumerate() {
        by_subject.entry(s.subject_id).or_default().push(i);
    }
    if by_subject.is_empty() {
        return Err(Error::Sampling("inter-subject snapshots need at least one training subject".into()));
    }
    let mut subjects: Vec<u32> = by_subject.keys().copied().collect();
    if let Some(cap) = cfg.subject_cap {
        if cap < subjects.len() {
            subjects.shuffle(rng);
            subjects.truncate(cap);
            subjects.sort_unstable();
        }
    }
    let mut snapshots = Vec::with_capacity(subjects.len());
    for subject in subjects {
        let members = &by_subject[&subject];
        if members.len() < 2 * cfg.snapshot_size {
            return Err(Error::Sampling(format!(
                "subject {subject} has {} samples, snapshot needs {}",
                members.len(),
                2 * cfg.snapshot_size
            )));
        }
        let (spt, qry) = split_draw(members, cfg.snapshot_size, rng);
        snapshots.push(Snapshot {
            spt,
            qry,
            tag: SnapshotTag::Subject(subject),
        });
    }
    Ok(SnapshotSet { snapshots })
}

pub fn sample_snapshots(
    kind: SplitKind,
    pool: &[&LabeledSample],
    cfg: &AdaptConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SnapshotSet> {
    match kind {
        SplitKind::Intra => sample_snapshots_intra(pool, cfg, rng),
        SplitKind::Inter => sample_snapshots_inter(pool, cfg, rng),
    }
}

/// MMD between adapted source rows and adapted target, with its gradient in `phi`.
fn mmd_and_grad(phi: &ParamGroup, source: &Tensor, target: &Tensor, kernel: &KernelSpec) -> Result<(f64, Vec<Vec<f64>>)> {
    let g = Graph::new();
    let p = g.bind_group(phi, true);
    let fs = adapt(&p, g.leaf(source))?;
    let ft = adapt(&p, g.leaf(target))?;
    let loss = mmd2(fs, ft, kernel)?;
    let value = loss.item();
    let grads = g.backward(loss)?.collect(&p)?;
    Ok((value, grads))
}

fn check_grads(grads: &[Vec<f64>], what: &str) -> Result<()> {
    if grads.iter().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what}: adapter gradient is not finite")))
    }
}

fn descend(phi: &mut ParamGroup, grads: &[Vec<f64>], eta: f64) -> Result<()> {
    phi.zero_grad();
    phi.accumulate_grads(grads)?;
    sgd_step(phi, eta)
}

/// `n` sequential steps on a copy of `phi`, step `i` aligning snapshot `i`'s
/// support half with the target. `source_emb` holds encoder outputs of the pool
/// the snapshots index into; `target_emb` holds the target's encoder outputs.
pub fn inner_adapt(
    phi: &ParamGroup,
    snapshots: &SnapshotSet,
    source_emb: &Tensor,
    target_emb: &Tensor,
    kernel: &KernelSpec,
    eta_in: f64,
) -> Result<ParamGroup> {
    if target_emb.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Argument("inner_adapt: empty target set".into()));
    }
    let mut phi_i = phi.clone();
    for (i, snap) in snapshots.snapshots.iter().enumerate() {
        let spt = gather_rows(source_emb, &snap.spt)?;
        let (_, grads) = mmd_and_grad(&phi_i, &spt, target_emb, kernel)?;
        check_grads(&grads, &format!("inner step {i}"))?;
        descend(&mut phi_i, &grads, eta_in)?;
    }
    Ok(phi_i)
}

/// Mean query-half MMD at `phi` and its gradient.
fn alignment_with_grad(
    phi: &ParamGroup,
    snapshots: &SnapshotSet,
    source_emb: &Tensor,
    target_emb: &Tensor,
    kernel: &KernelSpec,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if snapshots.is_empty() {
        return Err(Error::Argument("alignment loss needs at least one snapshot".into()));
    }
    let n = snapshots.len() as f64;
    let mut total = 0.0;
    let mut acc: Vec<Vec<f64>> = phi.tensors().map(|t| vec![0.0; t.len()]).collect();
    for snap in &snapshots.snapshots {
        let qry = gather_rows(source_emb, &snap.qry)?;
        let (v, grads) = mmd_and_grad(phi, &qry, target_emb, kernel)?;
        total += v;
        for (a, g) in acc.iter_mut().zip(&grads) {
            a.iter_mut().zip(g).for_each(|(a, g)| *a += g / n);
        }
    }
    Ok((total / n, acc))
}

/// `(1/n) Σ_i mmd2(h_φ(qry_i), h_φ(target))`.
pub fn alignment_loss(
    phi: &ParamGroup,
    snapshots: &SnapshotSet,
    source_emb: &Tensor,
    target_emb: &Tensor,
    kernel: &KernelSpec,
) -> Result<f64> {
    let target = Model::apply_adapter(phi, target_emb)?;
    let mut total = 0.0;
    for snap in &snapshots.snapshots {
        let qry = Model::apply_adapter(phi, &gather_rows(source_emb, &snap.qry)?)?;
        total += mmd2_value(&qry, &target, kernel)?;
    }
    Ok(total / snapshots.len().max(1) as f64)
}

/// First-order outer step: the alignment gradient at `phi_n` is applied to `phi`.
/// Returns the alignment loss at `phi_n`.
pub fn outer_update(
    phi: &mut ParamGroup,
    phi_n: &ParamGroup,
    snapshots: &SnapshotSet,
    source_emb: &Tensor,
    target_emb: &Tensor,
    kernel: &KernelSpec,
    eta_out: f64,
) -> Result<f64> {
    let (loss, grads) = alignment_with_grad(phi_n, snapshots, source_emb, target_emb, kernel)?;
    check_grads(&grads, "outer step")?;
    descend(phi, &grads, eta_out)?;
    Ok(loss)
}

/// Where snapshots come from: the training pool, its encoder outputs, and the
/// protocol that decides how they are cut.
#[derive(Debug, Clone, Copy)]
pub struct SourceData<'a> {
    pub pool: &'a [&'a LabeledSample],
    pub embeddings: &'a Tensor,
    pub kind: SplitKind,
}

#[derive(Debug, Clone)]
pub struct AdaptTrace {
    pub phi: ParamGroup,
    /// Alignment loss at each inner-loop endpoint.
    pub losses: Vec<f64>,
    pub kernel: Option<KernelSpec>,
}

fn resolve_kernel(
    choice: &KernelChoice,
    phi: &ParamGroup,
    snapshots: &SnapshotSet,
    source_emb: &Tensor,
    target_emb: &Tensor,
) -> Result<KernelSpec> {
    match choice {
        KernelChoice::Fixed(spec) => Ok(spec.clone()),
        KernelChoice::MedianAuto => {
            let rows: Vec<usize> = snapshots
                .snapshots
                .iter()
                .flat_map(|s| s.spt.iter().chain(&s.qry).copied())
                .collect();
            let src = Model::apply_adapter(phi, &gather_rows(source_emb, &rows)?)?;
            let tgt = Model::apply_adapter(phi, target_emb)?;
            KernelSpec::around(median_heuristic(&src, &tgt)?)
        }
    }
}

/// `max_iter` rounds of inner adaptation followed by an outer update, starting
/// from `phi`. Only the returned adapter differs from the input.
pub fn evofa_run(
    phi: &ParamGroup,
    source: SourceData<'_>,
    target_emb: &Tensor,
    cfg: &AdaptConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptTrace> {
    cfg.validate()?;
    let mut current = phi.clone();
    let mut losses = Vec::with_capacity(cfg.max_iter);
    if cfg.max_iter == 0 {
        return Ok(AdaptTrace {
            phi: current,
            losses,
            kernel: None,
        });
    }
    let mut snapshots = sample_snapshots(source.kind, source.pool, cfg, rng)?;
    let kernel = resolve_kernel(&cfg.kernel, &current, &snapshots, source.embeddings, target_emb)?;
    for it in 0..cfg.max_iter {
        if it > 0 && cfg.resample_each_iter {
            snapshots = sample_snapshots(source.kind, source.pool, cfg, rng)?;
        }
        let phi_n = inner_adapt(&current, &snapshots, source.embeddings, target_emb, &kernel, cfg.eta_in)?;
        let loss = outer_update(&mut current, &phi_n, &snapshots, source.embeddings, target_emb, &kernel, cfg.eta_out)?;
        losses.push(loss);
    }
    Ok(AdaptTrace {
        phi: current,
        losses,
        kernel: Some(kernel),
    })
}

/// Evaluation settings shared by plain and adapted runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub shape: EpisodeShape,
    pub episodes: usize,
    pub seed: u64,
}

/// Encoder outputs of the episode's support rows plus `extra` other pool rows.
fn target_rows(pool_len: usize, support: &[usize], query: &[usize], extra: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut rows = support.to_vec();
    if extra > 0 {
        let mut rest: Vec<usize> = (0..pool_len)
            .filter(|i| !support.contains(i) && !query.contains(i))
            .collect();
        rest.shuffle(rng);
        rest.truncate(extra);
        rest.sort_unstable();
        rows.extend(rest);
    }
    rows
}

fn run_episode(
    model: &Model,
    phi: &ParamGroup,
    test_pool: &[&LabeledSample],
    test_emb: &Tensor,
    source: Option<(SourceData<'_>, &AdaptConfig)>,
    eval: &EvalConfig,
    index: u64,
) -> Result<(f64, u64, ParamGroup)> {
    let ep = sample_episode(
        test_pool,
        eval.shape.way,
        eval.shape.shot,
        eval.shape.queries,
        &mut episode_rng(eval.seed, index),
    )?;
    let adapted = match source {
        None => phi.clone(),
        Some((src, cfg)) => {
            let mut rng = episode_rng(eval.seed ^ ADAPT_SALT, index);
            let rows = target_rows(test_pool.len(), &ep.support, &ep.query, cfg.target_extra, &mut rng);
            let target = gather_rows(test_emb, &rows)?;
            evofa_run(phi, src, &target, cfg, &mut rng)
                .map_err(|e| e.context(format!("adaptation before test episode {index}")))?
                .phi
        }
    };
    let r = classify_embedded(model, &adapted, test_emb, &ep)?;
    Ok((r.accuracy, ep.digest, adapted))
}

/// Few-shot evaluation on `test_pool`, adapting `φ` before every episode when
/// `adapt` is given. Episodes come from the same stream as
/// [`crate::fsl::evaluate_fsl`], so adapted and plain runs are paired. The
/// model itself is never modified.
pub fn evofa_test(
    model: &Model,
    test_pool: &[&LabeledSample],
    train_pool: &[&LabeledSample],
    split_kind: SplitKind,
    eval: &EvalConfig,
    adapt: Option<&AdaptConfig>,
) -> Result<EvalSummary> {
    if let Some(cfg) = adapt {
        cfg.validate()?;
    }
    let test_emb = model.embed(test_pool)?;
    let train_emb = match adapt {
        Some(_) => Some(model.embed(train_pool)?),
        None => None,
    };
    let source = adapt.zip(train_emb.as_ref()).map(|(cfg, emb)| {
        (
            SourceData {
                pool: train_pool,
                embeddings: emb,
                kind: split_kind,
            },
            cfg,
        )
    });
    let persist = adapt.is_some_and(|c| c.persist);
    let results: Vec<(f64, u64)> = if persist {
        let mut phi = model.phi.clone();
        let mut out = Vec::with_capacity(eval.episodes);
        for i in 0..eval.episodes as u64 {
            let (acc, digest, adapted) = run_episode(model, &phi, test_pool, &test_emb, source, eval, i)?;
            phi = adapted;
            out.push((acc, digest));
        }
        out
    } else {
        (0..eval.episodes as u64)
            .into_par_iter()
            .map(|i| {
                let (acc, digest, _) = run_episode(model, &model.phi, test_pool, &test_emb, source, eval, i)?;
                Ok((acc, digest))
            })
            .collect::<Result<_>>()?
    };
    let (acc, dig) = results.into_iter().unzip();
    Ok(EvalSummary::from_parts(acc, dig))
}
