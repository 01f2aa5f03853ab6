//! Few-shot scoring heads on embedded support/query sets.
//!
//! Every head maps `support [S×e]`, `query [Q×e]` to scores `[Q×N]` where a larger
//! score means a more likely class. Matching scores are log-probabilities, proto
//! scores are negated squared distances, relation scores lie in `(0, 1)`.

use super::{BackboneConfig, HeadKind};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Episode-local labels in `0..way`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeLabels {
    pub way: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl EpisodeLabels {
    fn check(&self) -> Result<()> {
        if let Some(&l) = self.support.iter().chain(&self.query).find(|&&l| l >= self.way) {
            return Err(Error::Argument(format!("label {l} outside 0..{}", self.way)));
        }
        Ok(())
    }
}

fn rows(v: Var<'_>, what: &str) -> Result<(usize, usize)> {
    match *v.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::dim(format!("{what}: expected a matrix, got {s:?}"))),
    }
}

fn one_hot(labels: &[usize], width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), width]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * width + l] = 1.0;
    }
    t
}

/// `[N×S]` with `1/count` (or 1 when `sum`) at each support member of class `n`.
fn class_pooling(labels: &[usize], way: usize, sum: bool) -> Result<Tensor> {
    let mut counts = vec![0usize; way];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some(n) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Argument(format!("class {n} has no support samples")));
    }
    let s = labels.len();
    let mut t = Tensor::zeros(&[way, s]);
    for (j, &l) in labels.iter().enumerate() {
        t.data_mut()[l * s + j] = if sum { 1.0 } else { 1.0 / counts[l] as f64 };
    }
    Ok(t)
}

/// Scores `[Q×N]`. The linear head ignores the support set.
pub fn head_scores<'g>(
    config: &BackboneConfig,
    w: &[Var<'g>],
    support: Var<'g>,
    support_labels: &[usize],
    query: Var<'g>,
    way: usize,
) -> Result<Var<'g>> {
    let g = query.graph();
    let (nq, e) = rows(query, "query")?;
    if config.head_kind == HeadKind::Linear {
        let [weight, bias] = w else {
            return Err(Error::contract("linear head needs cls.weight and cls.bias"));
        };
        return query.matmul(*weight)?.add_bias(*bias);
    }
    let (ns, es) = rows(support, "support")?;
    if es != e {
        return Err(Error::dim(format!("support width {es} vs query width {e}")));
    }
    if ns != support_labels.len() {
        return Err(Error::dim(format!("{ns} support rows but {} labels", support_labels.len())));
    }
    if way == 0 || support_labels.iter().any(|&l| l >= way) {
        return Err(Error::Argument(format!("support labels must lie in 0..{way}")));
    }
    match config.head_kind {
        HeadKind::Proto => {
            let protos = g.constant(class_pooling(support_labels, way, false)?).matmul(support)?;
            Ok(query.sq_euclidean_pairwise(protos)?.neg())
        }
        HeadKind::Matching => {
            class_pooling(support_labels, way, true)?;
            let cos = query
                .l2_normalize_rows()?
                .matmul(support.l2_normalize_rows()?.transpose()?)?;
            cos.scale(config.matching_temperature)
                .log_softmax()?
                .segment_logsumexp(support_labels, way)
        }
        HeadKind::Relation => {
            let [w1, b1, w2, b2] = w else {
                return Err(Error::contract("relation head needs four tensors"));
            };
            let summed = g.constant(class_pooling(support_labels, way, true)?).matmul(support)?;
            let pick_q: Vec<usize> = (0..nq * way).map(|r| r / way).collect();
            let pick_c: Vec<usize> = (0..nq * way).map(|r| r % way).collect();
            let left = g.constant(one_hot(&pick_q, nq)).matmul(query)?;
            let right = g.constant(one_hot(&pick_c, way)).matmul(summed)?;
            left.concat_cols(right)?
                .matmul(*w1)?
                .add_bias(*b1)?
                .relu()
                .matmul(*w2)?
                .add_bias(*b2)?
                .sigmoid()
                .reshape(&[nq, way])
        }
        HeadKind::Linear => unreachable!("handled above"),
    }
}

/// Mean episode loss over the queries: cross-entropy for proto, matching and
/// linear heads, summed squared error against one-hot targets for relation.
pub fn head_loss<'g>(
    config: &BackboneConfig,
    w: &[Var<'g>],
    support: Var<'g>,
    query: Var<'g>,
    labels: &EpisodeLabels,
) -> Result<Var<'g>> {
    labels.check()?;
    let scores = head_scores(config, w, support, &labels.support, query, labels.way)?;
    let (nq, width) = rows(scores, "scores")?;
    if nq != labels.query.len() || nq == 0 {
        return Err(Error::dim(format!("{nq} query rows but {} query labels", labels.query.len())));
    }
    let g = query.graph();
    let target = g.constant(one_hot(&labels.query, width));
    let inv_q = 1.0 / nq as f64;
    match config.head_kind {
        HeadKind::Relation => Ok(scores.sub(target)?.square().sum().scale(inv_q)),
        HeadKind::Matching => Ok(scores.mul(target)?.sum().scale(-inv_q)),
        HeadKind::Proto | HeadKind::Linear => {
            Ok(scores.log_softmax()?.mul(target)?.sum().scale(-inv_q))
        }
    }
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(scores: &Tensor) -> Result<Vec<usize>> {
    let [q, n] = *scores.shape() else {
        return Err(Error::dim(format!("argmax_rows: expected a matrix, got {:?}", scores.shape())));
    };
    if n == 0 {
        return Err(Error::dim("argmax_rows: zero columns"));
    }
    Ok((0..q)
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::backbone::Model;

    fn cfg(kind: HeadKind) -> BackboneConfig {
        BackboneConfig {
            head_kind: kind,
            ..BackboneConfig::compact(2, 2, 2)
        }
    }

    fn mat(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::new(&[r, c], v.to_vec()).unwrap()
    }

    #[test]
    fn proto_hand_case() {
        let g = Graph::new();
        let s = g.leaf(&mat(4, 2, &[0.0, 0.0, 2.0, 0.0, 10.0, 10.0, 10.0, 12.0]));
        let q = g.leaf(&mat(1, 2, &[1.0, 1.0]));
        let scores = head_scores(&cfg(HeadKind::Proto), &[], s, &[0, 0, 1, 1], q, 2).unwrap().value();
        // prototypes (1,0) and (10,11)
        assert_eq!(scores.data(), &[-1.0, -(81.0 + 100.0)]);
        assert_eq!(argmax_rows(&scores).unwrap(), vec![0]);
    }

    #[test]
    fn matching_scores_are_log_probabilities() {
        let g = Graph::new();
        let s = g.leaf(&mat(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let q = g.leaf(&mat(2, 2, &[2.0, 0.1, 0.3, 0.3]));
        let scores = head_scores(&cfg(HeadKind::Matching), &[], s, &[0, 1, 1], q, 2).unwrap().value();
        for i in 0..2 {
            let total: f64 = scores.row(i).iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relation_scores_in_unit_interval() {
        let model = Model::new(cfg(HeadKind::Relation), 1).unwrap();
        let g = Graph::new();
        let w = g.bind_group(&model.w, true);
        let s = g.leaf(&Tensor::full(&[4, 16], 0.5));
        let q = g.leaf(&Tensor::full(&[3, 16], 0.2));
        let labels = EpisodeLabels {
            way: 2,
            support: vec![0, 1, 0, 1],
            query: vec![0, 1, 1],
        };
        let scores = head_scores(&model.config, &w, s, &labels.support, q, 2).unwrap().value();
        assert_eq!(scores.shape(), &[3, 2]);
        assert!(scores.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let loss = head_loss(&model.config, &w, s, q, &labels).unwrap();
        assert!(loss.item() > 0.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w[0]).is_some());
    }

    #[test]
    fn missing_class_is_rejected() {
        let g = Graph::new();
        let s = g.leaf(&mat(2, 2, &[0.0, 0.0, 1.0, 1.0]));
        let q = g.leaf(&mat(1, 2, &[0.0, 0.0]));
        assert!(head_scores(&cfg(HeadKind::Proto), &[], s, &[0, 0], q, 2).is_err());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let t = mat(2, 3, &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert_eq!(argmax_rows(&t).unwrap(), vec![0, 1]);
    }

    #[test]
    fn proto_loss_matches_manual_cross_entropy() {
        let g = Graph::new();
        let s = g.leaf(&mat(2, 1, &[0.0, 1.0]));
        let q = g.leaf(&mat(1, 1, &[0.0]));
        let labels = EpisodeLabels {
            way: 2,
            support: vec![0, 1],
            query: vec![0],
        };
        let loss = head_loss(&cfg(HeadKind::Proto), &[], s, q, &labels).unwrap().item();
        let want = -(0.0 - (1.0f64 + (-1.0f64).exp()).ln());
        assert!((loss - want).abs() < 1e-12);
    }
}
