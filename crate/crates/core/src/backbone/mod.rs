//! Encoder (G2G + four Conv-BN-ReLU blocks + global average pool), the two-layer
//! adapter, and the few-shot heads.
//!
//! Parameters live in three groups: `theta` (encoder), `phi` (adapter) and `w`
//! (head). Only `phi` moves during test-time adaptation.

mod heads;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

pub use heads::{argmax_rows, head_loss, head_scores, EpisodeLabels};

use crate::autograd::{BatchNormMode, Graph, RunningStats, Var};
use crate::data::{stack_features, LabeledSample, Schema};
use crate::error::{Error, Result};
use crate::tensor::{Fnv1a, GroupTag, ParamGroup, Tensor};

/// Samples per forward pass when embedding large pools in eval mode.
const EMBED_CHUNK: usize = 64;
const CONV_KERNEL: usize = 3;
const CONV_PAD: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Matching,
    Relation,
    Proto,
    /// Plain softmax classifier over all classes, used by the supervised baseline.
    Linear,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Matching => "matching",
            HeadKind::Relation => "relation",
            HeadKind::Proto => "proto",
            HeadKind::Linear => "linear",
        }
    }

    pub fn is_episodic(self) -> bool {
        !matches!(self, HeadKind::Linear)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub n_electrodes: usize,
    pub d_bands: usize,
    /// G2G output channels; must divide `d_bands`.
    pub g2g_channels: usize,
    pub conv_channels: [usize; 4],
    /// Equals `conv_channels[3]` (global pooling keeps the channel count).
    pub embedding_dim: usize,
    /// At least `embedding_dim`, so the adapter can start as the identity.
    pub adapter_hidden: usize,
    pub head_kind: HeadKind,
    pub num_classes: usize,
    /// Cosine-attention sharpness of the matching head.
    pub matching_temperature: f64,
    /// Hidden width of the relation module.
    pub relation_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_electrodes: 62,
            d_bands: 5,
            g2g_channels: 1,
            conv_channels: [16, 32, 32, 64],
            embedding_dim: 64,
            adapter_hidden: 64,
            head_kind: HeadKind::Proto,
            num_classes: 3,
            matching_temperature: 10.0,
            relation_hidden: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_electrodes", self.n_electrodes),
            ("d_bands", self.d_bands),
            ("g2g_channels", self.g2g_channels),
            ("embedding_dim", self.embedding_dim),
            ("adapter_hidden", self.adapter_hidden),
            ("num_classes", self.num_classes),
            ("relation_hidden", self.relation_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("backbone: {name} must be >= 1")));
        }
        if self.conv_channels.contains(&0) {
            return Err(Error::config("backbone: conv channels must be >= 1"));
        }
        if self.d_bands % self.g2g_channels != 0 {
            return Err(Error::config(format!(
                "backbone: d_bands {} not divisible by g2g_channels {}",
                self.d_bands, self.g2g_channels
            )));
        }
        if self.embedding_dim != self.conv_channels[3] {
            return Err(Error::config(format!(
                "backbone: embedding_dim {} must equal the last conv width {}",
                self.embedding_dim, self.conv_channels[3]
            )));
        }
        if self.adapter_hidden < self.embedding_dim {
            return Err(Error::config(format!(
                "backbone: adapter_hidden {} smaller than embedding_dim {}",
                self.adapter_hidden, self.embedding_dim
            )));
        }
        if !(self.matching_temperature.is_finite() && self.matching_temperature > 0.0) {
            return Err(Error::config("backbone: matching_temperature must be positive"));
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        Schema {
            electrodes: self.n_electrodes,
            bands: self.d_bands,
        }
    }

    fn group_width(&self) -> usize {
        self.d_bands / self.g2g_channels
    }

    /// Small widths that keep CPU experiments quick.
    pub fn compact(n_electrodes: usize, d_bands: usize, num_classes: usize) -> Self {
        Self {
            n_electrodes,
            d_bands,
            g2g_channels: d_bands,
            conv_channels: [8, 8, 16, 16],
            embedding_dim: 16,
            adapter_hidden: 16,
            num_classes,
            ..Self::default()
        }
    }
}

/// Which groups receive gradients in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub theta: bool,
    pub phi: bool,
    pub w: bool,
}

impl Trainable {
    pub const ALL: Self = Self {
        theta: true,
        phi: true,
        w: true,
    };
    pub const NONE: Self = Self {
        theta: false,
        phi: false,
        w: false,
    };
    pub const PHI: Self = Self {
        theta: false,
        phi: true,
        w: false,
    };
}

/// Model parameters copied onto one graph.
#[derive(Debug, Clone)]
pub struct BoundParams<'g> {
    pub theta: Vec<Var<'g>>,
    pub phi: Vec<Var<'g>>,
    pub w: Vec<Var<'g>>,
}

/// Batch-norm statistics access for one encoder pass.
#[derive(Debug)]
pub enum BnState<'a> {
    Train(&'a mut [RunningStats]),
    Eval(&'a [RunningStats]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: BackboneConfig,
    pub theta: ParamGroup,
    pub phi: ParamGroup,
    pub w: ParamGroup,
    /// Running statistics of the four batch-norm layers.
    pub bn_stats: Vec<RunningStats>,
}

impl Model {
    /// Deterministically initialized model: He-normal convolutions, near-identity
    /// G2G projections, identity adapter, and a head matching `config.head_kind`.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = ParamGroup::new(GroupTag::Theta);

        let gw = config.group_width();
        let c = config.g2g_channels;
        let jitter = Normal::new(0.0, 0.05).expect("valid normal");
        let mut proj = Vec::with_capacity(c * gw * gw);
        for _ in 0..c {
            for i in 0..gw {
                for j in 0..gw {
                    let base = if i == j { 1.0 } else { 0.0 };
                    proj.push(base + jitter.sample(&mut rng));
                }
            }
        }
        theta.push("g2g.proj", Tensor::new(&[c, gw, gw], proj)?)?;

        let mut in_ch = c;
        for (i, &out_ch) in config.conv_channels.iter().enumerate() {
            let fan_in = in_ch * CONV_KERNEL * CONV_KERNEL;
            let he = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid normal");
            let k: Vec<f64> = (0..out_ch * fan_in).map(|_| he.sample(&mut rng)).collect();
            theta.push(
                format!("conv{i}.weight"),
                Tensor::new(&[out_ch, in_ch, CONV_KERNEL, CONV_KERNEL], k)?,
            )?;
            theta.push(format!("bn{i}.gamma"), Tensor::full(&[out_ch], 1.0))?;
            theta.push(format!("bn{i}.beta"), Tensor::zeros(&[out_ch]))?;
            in_ch = out_ch;
        }

        let phi = identity_adapter(config.embedding_dim, config.adapter_hidden, &mut rng)?;
        let w = init_head(&config, &mut rng)?;
        let bn_stats = config
            .conv_channels
            .iter()
            .map(|&ch| RunningStats::new(ch))
            .collect();
        Ok(Self {
            config,
            theta,
            phi,
            w,
            bn_stats,
        })
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: Trainable) -> BoundParams<'g> {
        BoundParams {
            theta: g.bind_group(&self.theta, trainable.theta),
            phi: g.bind_group(&self.phi, trainable.phi),
            w: g.bind_group(&self.w, trainable.w),
        }
    }

    /// Encoder + adapter forward on a `[B×n×d]` input, updating batch-norm stats
    /// when `train` is set.
    pub fn forward<'g>(&mut self, bound: &BoundParams<'g>, x: Var<'g>, train: bool) -> Result<Var<'g>> {
        let state = if train {
            BnState::Train(&mut self.bn_stats)
        } else {
            BnState::Eval(&self.bn_stats)
        };
        let e = encode(&self.config, &bound.theta, x, state)?;
        adapt(&bound.phi, e)
    }

    /// Eval-mode encoder output (before the adapter) for each sample, `[B×e]`.
    pub fn embed(&self, samples: &[&LabeledSample]) -> Result<Tensor> {
        let e = self.config.embedding_dim;
        let mut data = Vec::with_capacity(samples.len() * e);
        for chunk in samples.chunks(EMBED_CHUNK) {
            let g = Graph::new();
            let theta = g.bind_group(&self.theta, false);
            let x = g.constant(stack_features(chunk)?);
            let out = encode(&self.config, &theta, x, BnState::Eval(&self.bn_stats))?;
            data.extend_from_slice(out.value().data());
        }
        Tensor::new(&[samples.len(), e], data)
    }

    /// Applies adapter parameters `phi` to precomputed encoder outputs.
    pub fn apply_adapter(phi: &ParamGroup, embeddings: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = g.bind_group(phi, false);
        Ok(adapt(&p, g.leaf(embeddings))?.value())
    }

    /// Hash of everything except the adapter: theta, w and batch-norm statistics.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_u64(self.theta.checksum());
        h.write_u64(self.w.checksum());
        for rs in &self.bn_stats {
            for v in rs.mean.iter().chain(&rs.var) {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_u64(self.frozen_checksum());
        h.write_u64(self.phi.checksum());
        h.finish()
    }
}

/// `x: [B×n×d]` (or `[n×d]`) to `[B×e]`.
pub fn encode<'g>(
    config: &BackboneConfig,
    theta: &[Var<'g>],
    x: Var<'g>,
    bn: BnState<'_>,
) -> Result<Var<'g>> {
    let shape = x.shape();
    let (n, d) = match *shape {
        [n, d] | [_, n, d] => (n, d),
        _ => return Err(Error::dim(format!("encode: input must be [B×n×d], got {shape:?}"))),
    };
    if (n, d) != (config.n_electrodes, config.d_bands) {
        return Err(Error::dim(format!(
            "encode: input {n}×{d} does not match schema {}×{}",
            config.n_electrodes, config.d_bands
        )));
    }
    let x = if shape.len() == 2 { x.reshape(&[1, n, d])? } else { x };
    if theta.len() != 1 + 3 * config.conv_channels.len() {
        return Err(Error::contract("encode: theta has the wrong number of tensors"));
    }
    let mut h = x.g2g(theta[0])?;
    match bn {
        BnState::Train(stats) => {
            for (i, rs) in stats.iter_mut().enumerate() {
                let [k, gamma, beta] = [theta[1 + 3 * i], theta[2 + 3 * i], theta[3 + 3 * i]];
                h = h
                    .conv2d(k, 1, CONV_PAD)?
                    .batch_norm(gamma, beta, BatchNormMode::Train(rs))?
                    .relu();
            }
        }
        BnState::Eval(stats) => {
            for (i, rs) in stats.iter().enumerate() {
                let [k, gamma, beta] = [theta[1 + 3 * i], theta[2 + 3 * i], theta[3 + 3 * i]];
                h = h
                    .conv2d(k, 1, CONV_PAD)?
                    .batch_norm(gamma, beta, BatchNormMode::Eval(rs))?
                    .relu();
            }
        }
    }
    h.global_avg_pool()
}

/// Two fully connected layers with a ReLU between: `[B×e] -> [B×e]`.
pub fn adapt<'g>(phi: &[Var<'g>], e: Var<'g>) -> Result<Var<'g>> {
    let [w1, b1, w2, b2] = phi else {
        return Err(Error::contract("adapt: phi must hold fc1.weight, fc1.bias, fc2.weight, fc2.bias"));
    };
    e.matmul(*w1)?.add_bias(*b1)?.relu().matmul(*w2)?.add_bias(*b2)
}

/// Adapter whose output equals its input for every non-negative embedding.
///
/// The first layer is the identity padded with small non-negative entries, so
/// `relu(e·W1) = e·W1` whenever `e >= 0`; the second layer is the right
/// pseudo-inverse of the first.
fn identity_adapter(e: usize, h: usize, rng: &mut ChaCha8Rng) -> Result<ParamGroup> {
    let small = Uniform::new(0.0, 0.1).expect("valid range");
    let w1 = DMatrix::from_fn(e, h, |i, j| {
        let base = if i == j { 1.0 } else { 0.0 };
        base + small.sample(rng)
    });
    let gram = &w1 * w1.transpose();
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::config("adapter initialization produced a singular matrix"))?;
    let w2 = w1.transpose() * inv;

    let row_major = |m: &DMatrix<f64>| -> Vec<f64> {
        (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)])
            .collect()
    };
    let mut phi = ParamGroup::new(GroupTag::Phi);
    phi.push("fc1.weight", Tensor::new(&[e, h], row_major(&w1))?)?;
    phi.push("fc1.bias", Tensor::zeros(&[h]))?;
    phi.push("fc2.weight", Tensor::new(&[h, e], row_major(&w2))?)?;
    phi.push("fc2.bias", Tensor::zeros(&[e]))?;
    Ok(phi)
}

fn init_head(config: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<ParamGroup> {
    let mut w = ParamGroup::new(GroupTag::W);
    let he = |fan_in: usize| Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid normal");
    let e = config.embedding_dim;
    match config.head_kind {
        HeadKind::Proto | HeadKind::Matching => {}
        HeadKind::Relation => {
            let rh = config.relation_hidden;
            let dist = he(2 * e);
            w.push(
                "rel.fc1.weight",
                Tensor::new(&[2 * e, rh], (0..2 * e * rh).map(|_| dist.sample(rng)).collect())?,
            )?;
            w.push("rel.fc1.bias", Tensor::zeros(&[rh]))?;
            let dist = he(rh);
            w.push(
                "rel.fc2.weight",
                Tensor::new(&[rh, 1], (0..rh).map(|_| dist.sample(rng)).collect())?,
            )?;
            w.push("rel.fc2.bias", Tensor::zeros(&[1]))?;
        }
        HeadKind::Linear => {
            let k = config.num_classes;
            let dist = Normal::new(0.0, (1.0 / e as f64).sqrt()).expect("valid normal");
            w.push(
                "cls.weight",
                Tensor::new(&[e, k], (0..e * k).map(|_| dist.sample(rng)).collect())?,
            )?;
            w.push("cls.bias", Tensor::zeros(&[k]))?;
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: HeadKind) -> BackboneConfig {
        BackboneConfig {
            head_kind: kind,
            ..BackboneConfig::compact(4, 4, 3)
        }
    }

    fn input(b: usize, n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        Tensor::new(&[b, n, d], (0..b * n * d).map(|_| nd.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn encode_shape_is_embedding_dim() {
        let model = Model::new(tiny(HeadKind::Proto), 1).unwrap();
        let g = Graph::new();
        let p = model.bind(&g, Trainable::NONE);
        let out = encode(&model.config, &p.theta, g.leaf(&input(5, 4, 4, 0)), BnState::Eval(&model.bn_stats)).unwrap();
        assert_eq!(out.shape(), vec![5, 16]);
    }

    #[test]
    fn zero_input_gives_zero_embedding() {
        let model = Model::new(tiny(HeadKind::Proto), 1).unwrap();
        let g = Graph::new();
        let p = model.bind(&g, Trainable::NONE);
        let out = encode(
            &model.config,
            &p.theta,
            g.leaf(&Tensor::zeros(&[2, 4, 4])),
            BnState::Eval(&model.bn_stats),
        )
        .unwrap()
        .value();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn schema_mismatch_is_dimension_error() {
        let model = Model::new(tiny(HeadKind::Proto), 1).unwrap();
        let g = Graph::new();
        let p = model.bind(&g, Trainable::NONE);
        let r = encode(&model.config, &p.theta, g.leaf(&input(1, 5, 4, 0)), BnState::Eval(&model.bn_stats));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn adapter_starts_as_identity_on_nonnegative_inputs() {
        let model = Model::new(tiny(HeadKind::Proto), 3).unwrap();
        let mut e = input(6, 1, 16, 2).reshape(&[6, 16]).unwrap();
        e.data_mut().iter_mut().for_each(|v| *v = v.abs());
        let out = Model::apply_adapter(&model.phi, &e).unwrap();
        assert_eq!(out.shape(), e.shape());
        assert!(out.max_abs_diff(&e) < 1e-9);
    }

    #[test]
    fn wider_adapter_is_still_identity() {
        let cfg = BackboneConfig {
            adapter_hidden: 40,
            ..tiny(HeadKind::Proto)
        };
        let model = Model::new(cfg, 4).unwrap();
        let mut e = input(3, 1, 16, 9).reshape(&[3, 16]).unwrap();
        e.data_mut().iter_mut().for_each(|v| *v = v.abs() * 3.0);
        assert!(Model::apply_adapter(&model.phi, &e).unwrap().max_abs_diff(&e) < 1e-9);
    }

    #[test]
    fn eval_encode_is_pure() {
        let model = Model::new(tiny(HeadKind::Proto), 5).unwrap();
        let x = input(3, 4, 4, 7);
        let run = || {
            let g = Graph::new();
            let p = model.bind(&g, Trainable::NONE);
            encode(&model.config, &p.theta, g.leaf(&x), BnState::Eval(&model.bn_stats)).unwrap().value()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(HeadKind::Proto);
        c.g2g_channels = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(HeadKind::Proto);
        c.embedding_dim = 7;
        assert!(c.validate().is_err());
        let mut c = tiny(HeadKind::Proto);
        c.adapter_hidden = 8;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::new(tiny(HeadKind::Relation), 42).unwrap();
        let b = Model::new(tiny(HeadKind::Relation), 42).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.w.len(), 4);
        let c = Model::new(tiny(HeadKind::Relation), 43).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }
}
