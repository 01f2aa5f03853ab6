use evofa_core::adapt::{alignment_loss, sample_snapshots, AdaptConfig};
use evofa_core::autograd::{BatchNormMode, Graph, RunningStats};
use evofa_core::backbone::{
    adapt, argmax_rows, encode, head_loss, head_scores, BackboneConfig, BnState, EpisodeLabels, HeadKind, Model, Trainable,
};
use evofa_core::data::{
    generate_synthetic_drift, make_inter_split, make_intra_split, stack_features, DriftConfig, Role, SplitKind,
};
use evofa_core::fsl::{gather_rows, sample_episode};
use evofa_core::mmd::{median_heuristic, mmd2_value, KernelSpec};
use evofa_core::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], shift: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

fn g2g_out(x: &Tensor, proj: &Tensor) -> Tensor {
    let g = Graph::new();
    g.leaf(x).g2g(g.leaf(proj)).unwrap().value()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn g2g_channels_are_symmetric(seed in any::<u64>(), n in 2usize..7, c in 1usize..4, gs in 1usize..4) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(&mut r, &[2, n, c * gs], 0.0);
        let p = gaussian(&mut r, &[c, gs, gs], 0.0);
        let out = g2g_out(&x, &p);
        prop_assert_eq!(out.shape(), &[2, c, n, n][..]);
        let d = out.data();
        for b in 0..2 {
            for k in 0..c {
                let base = (b * c + k) * n * n;
                for i in 0..n {
                    for j in 0..n {
                        prop_assert!((d[base + i * n + j] - d[base + j * n + i]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn g2g_is_electrode_permutation_equivariant(seed in any::<u64>(), n in 2usize..7, c in 1usize..3, gs in 1usize..4) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let d = c * gs;
        let x = gaussian(&mut r, &[1, n, d], 0.0);
        let p = gaussian(&mut r, &[c, gs, gs], 0.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let mut px = vec![0.0; n * d];
        for (i, &pi) in perm.iter().enumerate() {
            px[i * d..(i + 1) * d].copy_from_slice(&x.data()[pi * d..(pi + 1) * d]);
        }
        let a = g2g_out(&x, &p);
        let b = g2g_out(&Tensor::new(&[1, n, d], px).unwrap(), &p);
        for k in 0..c {
            for i in 0..n {
                for j in 0..n {
                    let want = a.data()[k * n * n + perm[i] * n + perm[j]];
                    let got = b.data()[k * n * n + i * n + j];
                    prop_assert!((want - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mmd_is_nonnegative_and_zero_on_identical_sets(seed in any::<u64>(), m in 1usize..12, n in 1usize..12, e in 1usize..6) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(&mut r, &[m, e], 0.0);
        let shift = r.random_range(-2.0..2.0);
        let y = gaussian(&mut r, &[n, e], shift);
        let spec = KernelSpec::around(median_heuristic(&x, &y).unwrap()).unwrap();
        prop_assert!(mmd2_value(&x, &y, &spec).unwrap() >= 0.0);
        prop_assert!(mmd2_value(&x, &x, &spec).unwrap().abs() < 1e-12);
    }

    #[test]
    fn median_heuristic_is_scale_equivariant(seed in any::<u64>(), c in 0.1f64..10.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(&mut r, &[6, 3], 0.0);
        let y = gaussian(&mut r, &[5, 3], 1.0);
        let scale = |t: &Tensor| Tensor::new(t.shape(), t.data().iter().map(|v| c * v).collect()).unwrap();
        let base = median_heuristic(&x, &y).unwrap();
        let scaled = median_heuristic(&scale(&x), &scale(&y)).unwrap();
        prop_assert!((scaled - c * base).abs() < 1e-9 * (1.0 + c * base));
    }

    #[test]
    fn proto_classification_is_translation_invariant(seed in any::<u64>(), way in 2usize..5, shot in 1usize..4, shift in -50.0f64..50.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut config = BackboneConfig::compact(4, 4, way);
        config.head_kind = HeadKind::Proto;
        let e = config.embedding_dim;
        let s = gaussian(&mut r, &[way * shot, e], 0.0);
        let q = gaussian(&mut r, &[7, e], 0.0);
        let labels: Vec<usize> = (0..way * shot).map(|i| i % way).collect();
        let offset: Vec<f64> = (0..e).map(|_| shift * r.random::<f64>()).collect();
        let moved = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = (0..t.shape()[0]).map(|i| t.row(i).iter().zip(&offset).map(|(a, b)| a + b).collect()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let pred = |s: &Tensor, q: &Tensor| {
            let g = Graph::new();
            argmax_rows(&head_scores(&config, &[], g.leaf(s), &labels, g.leaf(q), way).unwrap().value()).unwrap()
        };
        prop_assert_eq!(pred(&s, &q), pred(&moved(&s), &moved(&q)));
    }

    #[test]
    fn proto_loss_ignores_support_order_and_losses_are_nonnegative(seed in any::<u64>(), way in 2usize..5, shot in 1usize..4) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for head in [HeadKind::Proto, HeadKind::Matching, HeadKind::Relation] {
            let mut config = BackboneConfig::compact(4, 4, way);
            config.head_kind = head;
            let model = Model::new(config.clone(), seed).unwrap();
            let e = config.embedding_dim;
            let s = gaussian(&mut r, &[way * shot, e], 0.0);
            let q = gaussian(&mut r, &[2 * way, e], 0.0);
            let support: Vec<usize> = (0..way * shot).map(|i| i % way).collect();
            let query: Vec<usize> = (0..2 * way).map(|i| i % way).collect();
            let loss = |s: &Tensor, support: &[usize]| {
                let g = Graph::new();
                let w = g.bind_group(&model.w, false);
                let labels = EpisodeLabels { way, support: support.to_vec(), query: query.clone() };
                head_loss(&config, &w, g.leaf(s), g.leaf(&q), &labels).unwrap().item()
            };
            let base = loss(&s, &support);
            prop_assert!(base >= 0.0 && base.is_finite());
            if head == HeadKind::Proto {
                let mut order: Vec<usize> = (0..way * shot).collect();
                order.shuffle(&mut r);
                let ps = gather_rows(&s, &order).unwrap();
                let pl: Vec<usize> = order.iter().map(|&i| support[i]).collect();
                prop_assert!((loss(&ps, &pl) - base).abs() < 1e-9);
            }
        }
    }
}

/// Random valid configs run through encoder, adapter and every head with consistent shapes.
#[test]
fn backbone_shapes_hold_across_random_configs() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for i in 0..24u64 {
        let c = r.random_range(1..=3);
        let mut config = BackboneConfig::compact(r.random_range(2..=8), c * r.random_range(1..=3), r.random_range(2..=5));
        config.g2g_channels = c;
        config.conv_channels = std::array::from_fn(|_| r.random_range(2..=8));
        config.embedding_dim = config.conv_channels[3];
        config.adapter_hidden = config.embedding_dim + r.random_range(0..=4);
        config.relation_hidden = r.random_range(2..=6);
        config.head_kind = [HeadKind::Proto, HeadKind::Matching, HeadKind::Relation, HeadKind::Linear][i as usize % 4];
        config.validate().unwrap();
        let model = Model::new(config.clone(), i).unwrap();
        let way = config.num_classes;
        let b = 3 * way;
        let g = Graph::new();
        let p = model.bind(&g, Trainable::NONE);
        let x = g.constant(gaussian(&mut r, &[b, config.n_electrodes, config.d_bands], 5.0));
        let mut stats: Vec<RunningStats> = config.conv_channels.iter().map(|&k| RunningStats::new(k)).collect();
        let e = encode(&config, &p.theta, x, BnState::Train(&mut stats)).unwrap();
        assert_eq!(e.shape(), vec![b, config.embedding_dim], "config {i}");
        let z = adapt(&p.phi, e).unwrap();
        assert_eq!(z.shape(), vec![b, config.embedding_dim], "config {i}");
        let support: Vec<usize> = (0..way).collect();
        let scores = head_scores(&config, &p.w, z.slice_rows(0, way).unwrap(), &support, z.slice_rows(way, b).unwrap(), way)
            .unwrap();
        assert_eq!(scores.shape(), vec![b - way, way], "config {i}");
        assert!(scores.value().data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let x = gaussian(&mut r, &[4, 2, 3, 3], 2.0);
    let mut rs = RunningStats::new(2);
    let g = Graph::new();
    let (gm, bt) = (g.constant(Tensor::new(&[2], vec![1.0, 1.0]).unwrap()), g.constant(Tensor::zeros(&[2])));
    let train = g.leaf(&x).batch_norm(gm, bt, BatchNormMode::Train(&mut rs)).unwrap().value();
    let eval = g.leaf(&x).batch_norm(gm, bt, BatchNormMode::Eval(&rs)).unwrap().value();
    assert_ne!(train, eval);
}

#[test]
fn sampled_episodes_respect_composition() {
    let ds = generate_synthetic_drift(&DriftConfig { num_classes: 4, ..Default::default() }).unwrap();
    let pool = ds.session_pool(1, 2);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let way = r.random_range(1..=4);
        let (shot, queries) = (r.random_range(1..=5), r.random_range(1..=10));
        let ep = sample_episode(&pool, way, shot, queries, &mut r).unwrap();
        assert_eq!(ep.support.len(), way * shot);
        assert_eq!(ep.query.len(), way * queries);
        assert!(ep.support.iter().all(|i| !ep.query.contains(i)));
        let mut all: Vec<usize> = ep.support.iter().chain(&ep.query).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), way * (shot + queries));
        for (k, &class) in ep.classes.iter().enumerate() {
            let count = |idx: &[usize]| idx.iter().filter(|&&i| pool[i].label == class).count();
            assert_eq!(count(&ep.support), shot, "class {k}");
            assert_eq!(count(&ep.query), queries, "class {k}");
        }
        assert!(all.iter().all(|&i| pool[i].subject_id == 1 && pool[i].session_id == 2));
    }
}

#[test]
fn splits_are_disjoint_and_time_is_ordered() {
    let ds = generate_synthetic_drift(&DriftConfig { num_subjects: 15, trials_per_session: 6, ..Default::default() })
        .unwrap();
    for s in ds.subjects() {
        for sess in ds.sessions_of(s) {
            let pool = ds.session_pool(s, sess);
            for w in pool.windows(2) {
                if w[0].trial_id == w[1].trial_id {
                    assert!(w[0].time_index < w[1].time_index);
                }
            }
        }
    }
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let splits = [make_intra_split(&ds, 4).unwrap(), make_inter_split(&ds, 2, 7, &mut r).unwrap()];
    for split in splits {
        split.check_disjoint().unwrap();
        let roles = [Role::Train, Role::Val, Role::Test];
        for sample in ds.samples() {
            assert!(roles.iter().filter(|&&role| split.matches(role, sample)).count() <= 1);
        }
    }
}

/// Without drift, sessions of one subject are exchangeable under a permutation MMD test.
#[test]
fn stationary_sessions_pass_a_permutation_test() {
    for seed in 0..5u64 {
        let ds = generate_synthetic_drift(&DriftConfig { trials_per_session: 6, samples_per_trial: 10, rng_seed: seed, ..Default::default() })
            .unwrap();
        let flat = |sess| {
            let x = stack_features(&ds.session_pool(1, sess)).unwrap();
            let n = x.shape()[0];
            Tensor::new(&[n, x.len() / n], x.data().to_vec()).unwrap()
        };
        let (a, b) = (flat(1), flat(3));
        let spec = KernelSpec::around(median_heuristic(&a, &b).unwrap()).unwrap();
        let observed = mmd2_value(&a, &b, &spec).unwrap();
        let both: Vec<Vec<f64>> = (0..a.shape()[0]).map(|i| a.row(i).to_vec()).chain((0..b.shape()[0]).map(|i| b.row(i).to_vec())).collect();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut null: Vec<f64> = (0..200)
            .map(|_| {
                let mut rows = both.clone();
                rows.shuffle(&mut r);
                let (x, y) = rows.split_at(a.shape()[0]);
                mmd2_value(&Tensor::from_rows(x).unwrap(), &Tensor::from_rows(y).unwrap(), &spec).unwrap()
            })
            .collect();
        null.sort_by(f64::total_cmp);
        assert!(observed < null[189], "seed {seed}: {observed} vs 95th pct {}", null[189]);
    }
}

#[test]
fn mmd_grows_with_mean_gap() {
    for seed in 0..10u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(&mut r, &[40, 3], 0.0);
        let base = gaussian(&mut r, &[40, 3], 0.0);
        let spec = KernelSpec::around(1.0).unwrap();
        let vals: Vec<f64> = [0.0, 1.0, 2.0]
            .iter()
            .map(|&delta| {
                let y = Tensor::new(&[40, 3], base.data().iter().map(|v| v + delta).collect()).unwrap();
                mmd2_value(&x, &y, &spec).unwrap()
            })
            .collect();
        assert!(vals[0] < vals[1] && vals[1] < vals[2], "seed {seed}: {vals:?}");
    }
}

#[test]
fn alignment_loss_is_nonnegative_and_finite() {
    let ds = generate_synthetic_drift(&DriftConfig { intra_drift_rate: 2.0, ..Default::default() }).unwrap();
    let split = make_intra_split(&ds, 1).unwrap();
    let train = split.select(&ds, Role::Train);
    let test = split.select(&ds, Role::Test);
    for seed in 0..10u64 {
        let model = Model::new(BackboneConfig::compact(6, 4, 3), seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AdaptConfig { snapshot_size: 8 * (1 + seed as usize % 3), ..Default::default() };
        let snaps = sample_snapshots(SplitKind::Intra, &train, &cfg, &mut r).unwrap();
        let src = model.embed(&train).unwrap();
        let target = model.embed(&test[..10]).unwrap();
        let spec = KernelSpec::around(r.random_range(0.1..5.0)).unwrap();
        let l = alignment_loss(&model.phi, &snaps, &src, &target, &spec).unwrap();
        assert!(l >= 0.0 && l.is_finite(), "seed {seed}: {l}");
    }
}
