use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use manifold_ssl::data::{gen_blobs, gen_rings, gen_two_moons, SplitSpec};
use manifold_ssl::encoder::{Encoder, EncoderConfig};
use manifold_ssl::eval::Metrics;
use manifold_ssl::gradcheck::{grad_check, GradCheckOptions};
use manifold_ssl::graph::{GraphConfig, ManifoldGraph};
use manifold_ssl::losses::{
    anchor_boundary, anchor_magnitude, anchor_triplet, consistency, cross_entropy, divergence, entropy_min,
    enumerate_triplets,
};
use manifold_ssl::params::{Bound, ParamStore};
use manifold_ssl::prototypes::{class_centers, PrototypeConfig, PrototypeGenerator};
use manifold_ssl::tape::{Axis, Reduce};
use manifold_ssl::trainer::{schedule_at, TrainConfig};
use manifold_ssl::{Result, Tape, Tensor, Var};

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

const OPS: usize = 39;

/// Applies op `k` to leaves `[a, b, m, n, row, col, pos, pcol]`.
fn apply(k: usize, t: &mut Tape, v: &[Var]) -> Result<Var> {
    let [a, b, m, n, row, col, pos, pcol] = [v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]];
    let (r, c) = t.shape(a);
    Ok(match k {
        0 => t.matmul(a, m)?,
        1 => t.matmul_t(a, n)?,
        2 => t.transpose(a),
        3 => t.leaky_relu(a, 0.1),
        4 => t.square(a),
        5 => t.hinge(a),
        6 => t.log(pos)?,
        7 => t.exp(a),
        8 => t.abs(a),
        9 => t.scale(a, -1.7),
        10 => t.add_scalar(a, 0.3),
        11 => t.clamp_min(a, 0.2),
        12 => t.add(a, b)?,
        13 => t.sub(a, b)?,
        14 => t.mul(a, b)?,
        15 => t.minimum(a, b)?,
        16 => t.add_row(a, row)?,
        17 => t.mul_col(a, col)?,
        18 => t.div_col(a, pcol)?,
        19..=27 => {
            let kinds = [Reduce::Sum, Reduce::Mean, Reduce::MeanNonzero];
            let axes = [Axis::All, Axis::Rows, Axis::Cols];
            t.reduce(a, kinds[(k - 19) / 3], axes[(k - 19) % 3])
        }
        28 => t.rows_l2_norm(a),
        29 => t.normalize_rows(a)?,
        30 => t.cosine_matrix(a, n)?,
        31 => t.softmax_rows(a, None)?,
        32 => {
            // keep the first column of every row
            let mask: Vec<bool> = (0..r * c).map(|i| i % c != 0 && i % 2 == 1).collect();
            t.softmax_rows(a, Some(&mask))?
        }
        33 => t.row_max(a, None)?,
        34 => {
            let mask: Vec<bool> = (0..r * c).map(|i| i % c == c - 1 && c > 1).collect();
            t.row_max(a, Some(&mask))?
        }
        35 => t.concat_cols(&[a, b])?,
        36 => t.concat_rows(&[a, b])?,
        37 => t.select_rows(a, &[r - 1, 0, r / 2])?,
        _ => t.gather(a, vec![(0, c - 1), (r - 1, 0), (r / 2, c / 2)])?,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>(), r in 1usize..5, c in 1usize..5, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = vec![
            uniform(r, c, -2.0, 2.0, &mut rng),
            uniform(r, c, -2.0, 2.0, &mut rng),
            uniform(c, k, -2.0, 2.0, &mut rng),
            uniform(k, c, -2.0, 2.0, &mut rng),
            uniform(1, c, -2.0, 2.0, &mut rng),
            uniform(r, 1, -2.0, 2.0, &mut rng),
            uniform(r, c, 0.5, 2.0, &mut rng),
            uniform(r, 1, 0.5, 2.0, &mut rng),
        ];
        for op in 0..OPS {
            let mut probe = Tape::new();
            let vars: Vec<Var> = leaves.iter().map(|l| probe.constant(l.clone())).collect();
            let out = apply(op, &mut probe, &vars).unwrap();
            let shape = probe.shape(out);
            let weights = uniform(shape.0, shape.1, -1.0, 1.0, &mut rng);
            let report = grad_check(
                |t, v| {
                    let out = apply(op, t, v)?;
                    let w = t.constant(weights.clone());
                    let prod = t.mul(out, w)?;
                    Ok(t.sum(prod))
                },
                &leaves,
                &GradCheckOptions::default(),
            )
            .unwrap();
            prop_assert!(report.passed, "op {} shape {}x{} error {}", op, r, c, report.max_rel_error);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), r in 1usize..6, c in 1usize..8, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(r, c, -scale, scale, &mut rng);
        let mask: Vec<bool> = (0..r * c).map(|i| i % c != 0 && rng.random_bool(0.4)).collect();
        let mut t = Tape::new();
        let xv = t.constant(x);
        let p = t.softmax_rows(xv, None).unwrap();
        let pm = t.softmax_rows(xv, Some(&mask)).unwrap();
        for i in 0..r {
            prop_assert!((t.value(p).row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!((t.value(pm).row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..c {
                if mask[i * c + j] {
                    prop_assert_eq!(t.value(pm).get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn encoder_is_finite_on_bounded_inputs(seed in any::<u64>(), d in 1usize..5, h in 1usize..20, depth in 0usize..3) {
        let cfg = EncoderConfig { input_dim: d, hidden_dims: vec![h; depth], feature_dim: 6, init_seed: seed, ..Default::default() };
        let mut store = ParamStore::new();
        let enc = Encoder::init(cfg, &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = uniform(7, d, -10.0, 10.0, &mut rng);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let xv = t.constant(x);
        let f = enc.encode(&mut t, &p, xv, None).unwrap();
        prop_assert_eq!(t.value(f).shape(), (7, 6));
        prop_assert!(t.value(f).all_finite());
    }

    #[test]
    fn schedule_is_continuous_at_boundaries(t in 10usize..100_000, a in 0.01f64..1.0, b in 0.01f64..1.0, c in 0.01f64..1.0, d in 0.01f64..1.0) {
        let s = a + b + c + d;
        let cfg = TrainConfig { total_iters: t, stage_fractions: [a / s, b / s, c / s, 1.0 - (a + b + c) / s], ..Default::default() };
        let ends = cfg.stage_ends();
        let at = |i: usize| schedule_at(&cfg, i).unwrap();
        prop_assert_eq!(at(0).0, cfg.lr_warm_start);
        prop_assert_eq!(at(t), (cfg.lr_final, cfg.momentum_high));
        // the largest step anywhere bounds the step across every boundary
        let lr_span = cfg.lr_max - cfg.lr_final;
        let mu_span = cfg.momentum_high - cfg.momentum_low;
        let shortest = [ends[0], ends[1] - ends[0], ends[2] - ends[1], t - ends[2]].into_iter().filter(|&n| n > 0).min().unwrap();
        for &e in &ends[..3] {
            for (x, y) in [(e.saturating_sub(1), e), (e, (e + 1).min(t))] {
                let (l0, m0) = at(x);
                let (l1, m1) = at(y);
                prop_assert!((l1 - l0).abs() <= lr_span / shortest as f64 + 1e-15);
                prop_assert!((m1 - m0).abs() <= mu_span / shortest as f64 + 1e-15);
            }
        }
    }

    #[test]
    fn loss_terms_are_non_negative(seed in any::<u64>(), n in 2usize..7, classes in 2usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let feats = uniform(n, d, -2.0, 2.0, &mut rng);
        let protos = uniform(2 * classes, d, -2.0, 2.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let proto_labels: Vec<usize> = (0..2 * classes).map(|i| i / 2).collect();
        let logits = uniform(n, classes, -3.0, 3.0, &mut rng);
        let mut t = Tape::new();
        let f = t.constant(feats);
        let pr = t.constant(protos);
        let z = t.constant(logits);
        let probs = t.softmax_rows(z, None).unwrap();
        let clean = t.value(probs).map(|v| v * 0.5 + 0.5 / classes as f64);
        let centers = class_centers(&mut t, pr, 2, classes).unwrap();
        let entities = t.concat_rows(&[f, pr]).unwrap();
        let entity_labels: Vec<usize> = labels.iter().chain(&proto_labels).copied().collect();
        let sample = enumerate_triplets(&entity_labels, classes, 20_000, &mut rng);
        let terms = [
            cross_entropy(&mut t, probs, &labels).unwrap(),
            entropy_min(&mut t, probs).unwrap(),
            consistency(&mut t, &clean, probs).unwrap(),
            anchor_magnitude(&mut t, centers, 1.3, 0.1).unwrap(),
            anchor_triplet(&mut t, centers, entities, &sample.triplets, 0.15).unwrap(),
            anchor_boundary(&mut t, centers, entities, &entity_labels).unwrap(),
            divergence(&mut t, pr, &proto_labels, 1.3, 0.75).unwrap(),
        ];
        for (i, v) in terms.iter().enumerate() {
            let x = t.value(*v).item();
            prop_assert!(x >= -1e-15, "term {} is {}", i, x);
        }
    }

    #[test]
    fn cosine_terms_are_scale_invariant(seed in any::<u64>(), s in 0.05f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (classes, k, d) = (3, 3, 4);
        let feats = uniform(6, d, -2.0, 2.0, &mut rng);
        let protos = uniform(k * classes, d, -2.0, 2.0, &mut rng);
        let labels: Vec<usize> = (0..6).map(|i| i % classes).chain((0..k * classes).map(|i| i / k)).collect();
        let sample = enumerate_triplets(&labels, classes, 20_000, &mut rng);
        let eval = |scale: f64| {
            let mut t = Tape::new();
            let f = t.constant(feats.map(|v| v * scale));
            let pr = t.constant(protos.map(|v| v * scale));
            let centers = class_centers(&mut t, pr, k, classes).unwrap();
            let e = t.concat_rows(&[f, pr]).unwrap();
            let trip = anchor_triplet(&mut t, centers, e, &sample.triplets, 0.15).unwrap();
            let bound = anchor_boundary(&mut t, centers, e, &labels).unwrap();
            let mag = anchor_magnitude(&mut t, centers, 1.1 * scale, 0.1).unwrap();
            // huge l_avg makes every magnitude term 0, leaving the angular part
            let ang = divergence(&mut t, pr, &labels[6..], 1e12 * scale, 0.75).unwrap();
            [trip, bound, mag, ang].map(|v| t.value(v).item())
        };
        let (base, scaled) = (eval(1.0), eval(s));
        for (x, y) in base.iter().zip(&scaled) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{:?} vs {:?}", base, scaled);
        }
    }

    #[test]
    fn divergence_ignores_order_and_grows_as_margin_drops(seed in any::<u64>(), m1 in 0.0f64..0.99, m2 in 0.0f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, classes) = (4, 2);
        let protos = uniform(k * classes, 3, -1.0, 1.0, &mut rng);
        let labels: Vec<usize> = (0..k * classes).map(|i| i / k).collect();
        let div = |p: &Tensor, labels: &[usize], m: f64| {
            let mut t = Tape::new();
            let pv = t.constant(p.clone());
            let v = divergence(&mut t, pv, labels, 0.8, m).unwrap();
            t.value(v).item()
        };
        let mut order: Vec<usize> = (0..k * classes).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let shuffled = protos.select_rows(&order);
        let shuffled_labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let base = div(&protos, &labels, 0.75);
        prop_assert!((base - div(&shuffled, &shuffled_labels, 0.75)).abs() <= 1e-12 * (1.0 + base));
        let (lo, hi) = if m1 < m2 { (m1, m2) } else { (m2, m1) };
        prop_assert!(div(&protos, &labels, lo) >= div(&protos, &labels, hi) - 1e-12);
    }

    #[test]
    fn permuting_prototypes_permutes_the_graph(seed in any::<u64>(), np in 2usize..7, heads in 1usize..3) {
        let cfg = GraphConfig { heads, edge_dim: 3, feature_dim: 4, classes: 2, init_seed: seed, ..Default::default() };
        let mut store = ParamStore::new();
        let g = ManifoldGraph::init(cfg, &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let protos = uniform(np, 4, -2.0, 2.0, &mut rng);
        let inst = uniform(1, 4, -2.0, 2.0, &mut rng);
        let order: Vec<usize> = (0..np).rev().collect();
        let run = |p: &Tensor| {
            let mut t = Tape::new();
            let b = store.bind(&mut t, false);
            let iv = t.constant(inst.clone());
            let pv = t.constant(p.clone());
            let out = g.forward_instance(&mut t, &b, iv, pv).unwrap();
            (t.value(out.refined_instance).clone(), t.value(out.refined_protos).clone())
        };
        let (i0, p0) = run(&protos);
        let (i1, p1) = run(&protos.select_rows(&order));
        for (a, b) in i0.data().iter().zip(i1.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in p0.select_rows(&order).data().iter().zip(p1.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn generators_are_pure_and_splits_only_touch_the_mask(seed in any::<u64>(), n in 30usize..80, n_labeled in 3usize..8) {
        for ds in [
            gen_two_moons(n, 0.1, seed).unwrap(),
            gen_blobs(n, 3, 2.0, 0.5, seed).unwrap(),
            gen_rings(n, 2, &[1.0, 2.0], 0.1, seed).unwrap(),
        ] {
            let again = match ds.name.as_str() {
                "two_moons" => gen_two_moons(n, 0.1, seed).unwrap(),
                "blobs" => gen_blobs(n, 3, 2.0, 0.5, seed).unwrap(),
                _ => gen_rings(n, 2, &[1.0, 2.0], 0.1, seed).unwrap(),
            };
            prop_assert_eq!(&ds.x, &again.x);
            prop_assert_eq!(ds.true_labels().unwrap(), again.true_labels().unwrap());
            let split = ds.split_labeled(&SplitSpec { n_labeled, stratified: true, seed }).unwrap();
            prop_assert_eq!(&split.x, &ds.x);
            prop_assert_eq!(split.true_labels().unwrap(), ds.true_labels().unwrap());
            prop_assert_eq!(split.labeled_indices().len(), n_labeled);
        }
    }

    #[test]
    fn metrics_are_consistent(seed in any::<u64>(), n in 1usize..200, classes in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let m = Metrics::from_predictions(&pred, &truth, classes).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.error_rate));
        for c in 0..classes {
            let count = truth.iter().filter(|&&t| t == c).count();
            prop_assert_eq!(m.confusion[c].iter().sum::<usize>(), count);
        }
        prop_assert_eq!(m.confusion.iter().flatten().sum::<usize>(), n);
    }
}

#[test]
fn encoder_gradients_wrt_params_and_input() {
    let cfg = EncoderConfig {
        input_dim: 3,
        hidden_dims: vec![5, 4],
        feature_dim: 3,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let enc = Encoder::init(cfg, &mut store).unwrap();
    let x = uniform(4, 3, -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(1));
    let mut leaves = store.values().to_vec();
    leaves.push(x);
    let np = store.len();
    let report = grad_check(
        |t, v| {
            let p = Bound::from_vars(v[..np].to_vec());
            let f = enc.encode(t, &p, v[np], None)?;
            let sq = t.square(f);
            Ok(t.sum(sq))
        },
        &leaves,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{}", report.max_rel_error);
}

fn generator(classes: usize) -> (PrototypeGenerator, ParamStore) {
    let cfg = PrototypeConfig {
        k: 3,
        classes,
        embed_dim_k: 4,
        embed_dim_c: 5,
        mlp_hidden: vec![6],
        output_dim: 4,
        embed_init_std: 0.5,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let g = PrototypeGenerator::init(cfg, &mut store).unwrap();
    (g, store)
}

#[test]
fn generator_gradients_through_centers() {
    let (g, store) = generator(2);
    let run = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let p = Bound::from_vars(v.to_vec());
        let protos = g.generate_all(t, &p)?;
        let centers = class_centers(t, protos, 3, 2)?;
        let n = t.rows_l2_norm(centers);
        let sq = t.square(protos);
        let a = t.sum(n);
        let b = t.mean(sq);
        t.add(a, b)
    };
    let report = grad_check(run, store.values(), &GradCheckOptions::default()).unwrap();
    assert!(report.passed, "{}", report.max_rel_error);

    let first = g.generate_values(&store, 0).unwrap();
    let second = g.generate_values(&store, 0).unwrap();
    assert_eq!(first.values, second.values);
}

#[test]
fn doubling_classes_adds_one_class_table() {
    for c in [2, 3, 5] {
        let (g1, s1) = generator(c);
        let (g2, s2) = generator(2 * c);
        assert_eq!(g2.num_params(&s2) - g1.num_params(&s1), c * 5);
    }
}
